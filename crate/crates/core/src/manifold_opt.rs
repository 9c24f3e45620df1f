//! Riemannian gradient descent on SO(3) for the rotation sub-problem
//!
//! ```text
//! f(R) = β·tr(RᵀARB) − κ·tr(RC)
//! ```
//!
//! with `A = γ₂γ₂ᵀ − γ₁γ₁ᵀ`, `B = Σ τ x̃x̃ᵀ` and `C = Σ τ x̃ỹᵀ`.

use nalgebra::Matrix3;

use crate::geometry::{project_to_so3, RotationMatrix};

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
/// Backtracking gives up below this step length.
const MIN_STEP: f64 = 1e-20;
/// Largest rotation angle (radians) of a single trial step.
const MAX_STEP_ANGLE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationObjective {
    pub kappa: f64,
    pub beta: f64,
    pub a: Matrix3<f64>,
    pub b: Matrix3<f64>,
    pub c: Matrix3<f64>,
}

impl RotationObjective {
    pub fn new(kappa: f64, beta: f64, a: Matrix3<f64>, b: Matrix3<f64>, c: Matrix3<f64>) -> Self {
        Self { kappa, beta, a, b, c }
    }

    /// The same objective multiplied by `w`.
    pub fn scaled(&self, w: f64) -> Self {
        Self {
            kappa: self.kappa * w,
            beta: self.beta * w,
            ..self.clone()
        }
    }

    pub fn value(&self, r: &RotationMatrix) -> f64 {
        let r = r.matrix();
        self.beta * (r.transpose() * self.a * r * self.b).trace() - self.kappa * (r * self.c).trace()
    }

    /// `∂f/∂R = 2β·A·R·B − κ·Cᵀ` (A and B symmetric).
    pub fn euclidean_gradient(&self, r: &RotationMatrix) -> Matrix3<f64> {
        2.0 * self.beta * self.a * r.matrix() * self.b - self.kappa * self.c.transpose()
    }

    /// Projection of the Euclidean gradient onto the tangent space at `R`,
    /// `R·skew(RᵀG)`.
    pub fn riemannian_gradient(&self, r: &RotationMatrix) -> Matrix3<f64> {
        Objective::riemannian_gradient(self, r)
    }
}

/// A smooth function of a rotation.
pub trait Objective {
    fn value(&self, r: &RotationMatrix) -> f64;
    fn euclidean_gradient(&self, r: &RotationMatrix) -> Matrix3<f64>;

    fn riemannian_gradient(&self, r: &RotationMatrix) -> Matrix3<f64> {
        let g = self.euclidean_gradient(r);
        r.matrix() * skew(&(r.matrix().transpose() * g))
    }
}

impl Objective for RotationObjective {
    fn value(&self, r: &RotationMatrix) -> f64 {
        RotationObjective::value(self, r)
    }

    fn euclidean_gradient(&self, r: &RotationMatrix) -> Matrix3<f64> {
        RotationObjective::euclidean_gradient(self, r)
    }
}

/// Sum of several objectives sharing one rotation.
impl Objective for [RotationObjective] {
    fn value(&self, r: &RotationMatrix) -> f64 {
        self.iter().map(|o| o.value(r)).sum()
    }

    fn euclidean_gradient(&self, r: &RotationMatrix) -> Matrix3<f64> {
        self.iter().fold(Matrix3::zeros(), |acc, o| acc + o.euclidean_gradient(r))
    }
}

pub fn objective_value(obj: &RotationObjective, r: &RotationMatrix) -> f64 {
    obj.value(r)
}

pub fn euclidean_gradient(obj: &RotationObjective, r: &RotationMatrix) -> Matrix3<f64> {
    obj.euclidean_gradient(r)
}

fn skew(m: &Matrix3<f64>) -> Matrix3<f64> {
    0.5 * (m - m.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MinimizeOptions {
    /// Stop when the Riemannian gradient's Frobenius norm drops to this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOutcome {
    pub rotation: RotationMatrix,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient descent with Armijo backtracking and a polar retraction. The
/// first trial step of each iteration is the Barzilai-Borwein length from the
/// previous move, so the descent behaves well whatever the scale of `f`.
/// Trial steps never rotate by more than `MAX_STEP_ANGLE`: when the minimum
/// is not isolated (one plane's normals say nothing about rotation about
/// that normal) a long step could otherwise land anywhere on the minimizing
/// set instead of near the start. Never returns a rotation worse than `r0`.
pub fn minimize<O: Objective + ?Sized>(obj: &O, r0: &RotationMatrix, opts: &MinimizeOptions) -> MinimizeOutcome {
    let mut r = *r0;
    let mut f = obj.value(&r);
    let mut grad = obj.riemannian_gradient(&r);
    let mut gnorm = grad.norm();
    // scale-free first guess: a move of about 0.1 rad
    let mut step = if gnorm > 0.0 { 0.1 / gnorm } else { 1.0 };
    let mut iterations = 0;

    while gnorm > opts.tol && iterations < opts.max_iters {
        iterations += 1;
        let g2 = gnorm * gnorm;
        // ‖RΩ‖_F = √2·θ for a rotation by θ
        let mut alpha = step.min(MAX_STEP_ANGLE * std::f64::consts::SQRT_2 / gnorm);
        let mut accepted = None;
        while alpha >= MIN_STEP {
            let candidate = project_to_so3(&(r.matrix() - alpha * grad));
            let fc = obj.value(&candidate);
            if fc <= f - ARMIJO_C * alpha * g2 {
                accepted = Some((candidate, fc));
                break;
            }
            alpha *= SHRINK;
        }
        let Some((next, f_next)) = accepted else {
            break;
        };
        let grad_next = obj.riemannian_gradient(&next);
        let s = next.matrix() - r.matrix();
        let y = grad_next - grad;
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { 2.0 * alpha };

        r = next;
        f = f_next;
        grad = grad_next;
        gnorm = grad.norm();
    }

    MinimizeOutcome {
        rotation: r,
        value: f,
        gradient_norm: gnorm,
        iterations,
        converged: gnorm <= opts.tol,
    }
}
