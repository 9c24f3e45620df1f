//! The Kent (FB₅) distribution on the unit sphere.
//!
//! Density: `c(κ,β)⁻¹ · exp{κ μᵀx + β[(γ₁ᵀx)² − (γ₂ᵀx)²]}` with the large-κ
//! normalizer `c(κ,β) = 2π·e^κ / √(κ² − 4β²)`, valid for `2β < κ`.
//!
//! Parameters are fitted from weighted first and second sample moments
//! (Kent, 1982) and can be sampled by rejection from a von Mises–Fisher envelope.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{rotate_unit, RotationMatrix, UnitVec3, Vec3};

/// Upper bound on fitted concentration.
pub const KAPPA_MAX: f64 = 1e4;
/// Fitted ovalness never exceeds this fraction of κ.
pub const MAX_BETA_RATIO: f64 = 0.499;
/// Minimum total weight accepted by [`moment_fit`].
pub const MIN_TOTAL_WEIGHT: f64 = 1e-9;

const FRAME_TOL: f64 = 1e-9;

/// Orthonormal frame `Γ = (μ, γ₁, γ₂)`: mean direction, major and minor axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthonormalFrame {
    mu: UnitVec3,
    gamma1: UnitVec3,
    gamma2: UnitVec3,
}

impl OrthonormalFrame {
    pub fn new(mu: UnitVec3, gamma1: UnitVec3, gamma2: UnitVec3) -> Result<Self> {
        let dots = [mu.dot(&gamma1), mu.dot(&gamma2), gamma1.dot(&gamma2)];
        if dots.iter().any(|d| d.abs() > FRAME_TOL) {
            return Err(Error::InvalidParams(format!(
                "frame axes are not orthogonal (dots {:.3e}, {:.3e}, {:.3e})",
                dots[0], dots[1], dots[2]
            )));
        }
        Ok(Self { mu, gamma1, gamma2 })
    }

    /// `μ = e₁, γ₁ = e₂, γ₂ = e₃`.
    pub fn identity() -> Self {
        Self {
            mu: Vec3::x_axis(),
            gamma1: Vec3::y_axis(),
            gamma2: Vec3::z_axis(),
        }
    }

    /// Frame from the columns `(μ, γ₁, γ₂)` of an orthogonal matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        Self::new(
            Unit::new_normalize(m.column(0).into_owned()),
            Unit::new_normalize(m.column(1).into_owned()),
            Unit::new_normalize(m.column(2).into_owned()),
        )
    }

    /// Some frame with the given mean direction: the minimal rotation of the
    /// identity frame taking `e₁` to `mu`.
    pub fn about(mu: &UnitVec3) -> Self {
        let h = pole_to(mu);
        Self {
            mu: *mu,
            gamma1: Unit::new_normalize(h.column(1).into_owned()),
            gamma2: Unit::new_normalize(h.column(2).into_owned()),
        }
    }

    pub fn mu(&self) -> &UnitVec3 {
        &self.mu
    }

    pub fn gamma1(&self) -> &UnitVec3 {
        &self.gamma1
    }

    pub fn gamma2(&self) -> &UnitVec3 {
        &self.gamma2
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[
            self.mu.into_inner(),
            self.gamma1.into_inner(),
            self.gamma2.into_inner(),
        ])
    }

    pub fn rotated(&self, r: &RotationMatrix) -> Self {
        Self {
            mu: rotate_unit(r, &self.mu),
            gamma1: rotate_unit(r, &self.gamma1),
            gamma2: rotate_unit(r, &self.gamma2),
        }
    }
}

/// Parameters of one Kent component. Construction enforces `κ > 0`,
/// `0 ≤ β`, `2β < κ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KentParams {
    kappa: f64,
    beta: f64,
    frame: OrthonormalFrame,
}

impl KentParams {
    pub fn new(kappa: f64, beta: f64, frame: OrthonormalFrame) -> Result<Self> {
        check_concentration(kappa, beta)?;
        Ok(Self { kappa, beta, frame })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn frame(&self) -> &OrthonormalFrame {
        &self.frame
    }

    pub fn log_normalizer(&self) -> f64 {
        // validated at construction
        log_normalizer_unchecked(self.kappa, self.beta)
    }

    /// `β[(γ₁ᵀx)² − (γ₂ᵀx)²]`, the ovalness part of the exponent.
    pub fn ovalness_term(&self, x: &Vec3) -> f64 {
        let a = self.frame.gamma1.dot(x);
        let b = self.frame.gamma2.dot(x);
        self.beta * (a * a - b * b)
    }

    pub fn log_pdf(&self, x: &UnitVec3) -> f64 {
        log_pdf(self, x)
    }
}

fn check_concentration(kappa: f64, beta: f64) -> Result<()> {
    if !(kappa.is_finite() && beta.is_finite()) {
        return Err(Error::InvalidParams("non-finite κ or β".into()));
    }
    if kappa <= 0.0 {
        return Err(Error::InvalidParams(format!("κ must be positive, got {kappa}")));
    }
    if beta < 0.0 {
        return Err(Error::InvalidParams(format!("β must be non-negative, got {beta}")));
    }
    if 2.0 * beta >= kappa {
        return Err(Error::InvalidParams(format!(
            "2β < κ violated (κ = {kappa}, β = {beta})"
        )));
    }
    Ok(())
}

fn log_normalizer_unchecked(kappa: f64, beta: f64) -> f64 {
    (2.0 * PI).ln() + kappa - 0.5 * (kappa * kappa - 4.0 * beta * beta).ln()
}

/// `log c(κ,β) = log 2π + κ − ½·log(κ² − 4β²)`.
pub fn log_normalizer(kappa: f64, beta: f64) -> Result<f64> {
    check_concentration(kappa, beta)?;
    Ok(log_normalizer_unchecked(kappa, beta))
}

pub fn log_pdf(params: &KentParams, x: &UnitVec3) -> f64 {
    params.kappa * params.frame.mu.dot(x) + params.ovalness_term(x) - params.log_normalizer()
}

/// If `x ~ FB₅(κ, β, Γ)` then `R·x ~ FB₅(κ, β, R·Γ)`.
pub fn rotate_params(r: &RotationMatrix, params: &KentParams) -> KentParams {
    KentParams {
        kappa: params.kappa,
        beta: params.beta,
        frame: params.frame.rotated(r),
    }
}

/// Draws `n` samples with a ChaCha8 generator seeded by `seed`.
pub fn sample(params: &KentParams, n: usize, seed: u64) -> Result<Vec<UnitVec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(params, n, &mut rng)
}

/// Rejection sampler with a vMF envelope of concentration `κ − 2β` about μ.
///
/// With `c = μᵀx`, `s² = 1 − c²` and φ the angle from γ₁, the target/envelope
/// ratio is `exp{2βc + βs²cos2φ}`, bounded by `e^{2β}`, so each proposal is
/// accepted with probability `exp{−2β(1−c) + βs²cos2φ} ≤ 1`.
pub fn sample_with<R: Rng + ?Sized>(
    params: &KentParams,
    n: usize,
    rng: &mut R,
) -> Result<Vec<UnitVec3>> {
    if n == 0 {
        return Err(Error::InvalidParams("sample count must be at least 1".into()));
    }
    let envelope = params.kappa - 2.0 * params.beta;
    let beta = params.beta;
    let frame = &params.frame;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = sample_vmf_cosine(envelope, rng);
        let s2 = (1.0 - c * c).max(0.0);
        let phi = 2.0 * PI * rng.random::<f64>();
        let log_accept = -2.0 * beta * (1.0 - c) + beta * s2 * (2.0 * phi).cos();
        if log_accept >= 0.0 || rng.random::<f64>().ln() < log_accept {
            let s = s2.sqrt();
            let x = frame.mu.into_inner() * c
                + frame.gamma1.into_inner() * (s * phi.cos())
                + frame.gamma2.into_inner() * (s * phi.sin());
            out.push(Unit::new_normalize(x));
        }
    }
    Ok(out)
}

/// Cosine to the mean direction under a vMF with concentration `kappa`
/// (uniform on the sphere when `kappa` is ~0).
fn sample_vmf_cosine<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if kappa < 1e-8 {
        return 2.0 * u - 1.0;
    }
    // inverse CDF of p(c) ∝ e^{κc} on [−1, 1], written to avoid overflow
    (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
}

/// Moment estimate of Kent parameters from weighted unit vectors.
///
/// With `x̄ = Σwᵢxᵢ/W` and `S = Σwᵢxᵢxᵢᵀ/W`: `μ̂ = x̄/‖x̄‖`, `H` is the minimal
/// rotation taking `e₁` to `μ̂`, `ψ` diagonalizes the tangent block of `HᵀSH`
/// with eigenvalues `w₁ ≥ w₂`, and
///
/// ```text
/// κ̂ = 1/(2 − 2R̄ − r₂) + 1/(2 − 2R̄ + r₂)
/// β̂ = ½·[1/(2 − 2R̄ − r₂) − 1/(2 − 2R̄ + r₂)]      r₂ = w₁ − w₂
/// ```
///
/// The two denominators equal `E[(1 − μ̂ᵀx)²] + 2w₂` and `E[(1 − μ̂ᵀx)²] + 2w₁`
/// for unit data; they are evaluated in that form so near-duplicate directions
/// do not cancel catastrophically. κ̂ is capped at [`KAPPA_MAX`], where β̂ is
/// set to zero, and β̂ is clamped to `MAX_BETA_RATIO·κ̂`.
pub fn moment_fit(samples: &[UnitVec3], weights: &[f64]) -> Result<KentParams> {
    if samples.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples but {} weights",
            samples.len(),
            weights.len()
        )));
    }
    if samples.len() < 3 {
        return Err(Error::DegenerateSamples(format!(
            "need at least 3 samples, got {}",
            samples.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= MIN_TOTAL_WEIGHT {
        return Err(Error::DegenerateSamples(format!("total weight {total:.3e} too small")));
    }

    let mean = samples
        .iter()
        .zip(weights)
        .fold(Vec3::zeros(), |acc, (x, w)| acc + x.into_inner() * *w)
        / total;
    let resultant = mean.norm();
    if resultant < 1e-12 {
        return Err(Error::DegenerateSamples("mean resultant length is zero".into()));
    }
    let mu = Unit::new_unchecked(mean / resultant);
    let h = pole_to(&mu);
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();

    // tangent-plane second moments and E[(1 − a)²]
    let (mut t11, mut t12, mut t22, mut tail) = (0.0, 0.0, 0.0, 0.0);
    for (x, &w) in samples.iter().zip(weights) {
        let a = mu.dot(x);
        let u = h2.dot(x);
        let v = h3.dot(x);
        let one_minus_a = if a > 0.0 { (u * u + v * v) / (1.0 + a) } else { 1.0 - a };
        t11 += w * u * u;
        t12 += w * u * v;
        t22 += w * v * v;
        tail += w * one_minus_a * one_minus_a;
    }
    let (t11, t12, t22, tail) = (t11 / total, t12 / total, t22 / total, tail / total);

    let psi = 0.5 * (2.0 * t12).atan2(t11 - t22);
    let half_sum = 0.5 * (t11 + t22);
    let half_gap = (0.25 * (t11 - t22) * (t11 - t22) + t12 * t12).sqrt();
    let w1 = half_sum + half_gap;
    let w2 = (half_sum - half_gap).max(0.0);

    let d_minus = tail + 2.0 * w2;
    let d_plus = tail + 2.0 * w1;
    if d_minus <= 0.0 || d_plus <= 0.0 {
        return Err(Error::DegenerateSamples(
            "samples coincide; concentration overflows".into(),
        ));
    }
    let mut kappa = 1.0 / d_minus + 1.0 / d_plus;
    let mut beta = 0.5 * (1.0 / d_minus - 1.0 / d_plus);
    if !kappa.is_finite() || kappa > KAPPA_MAX {
        // spread this small is rounding noise; its shape is meaningless
        kappa = KAPPA_MAX;
        beta = 0.0;
    }
    beta = beta.clamp(0.0, MAX_BETA_RATIO * kappa);

    let (s, c) = psi.sin_cos();
    let gamma1 = Unit::new_normalize(h2 * c + h3 * s);
    let gamma2 = Unit::new_normalize(h3 * c - h2 * s);
    let frame = OrthonormalFrame::new(mu, gamma1, gamma2)?;
    KentParams::new(kappa, beta, frame)
}

/// Minimal (Rodrigues) rotation taking `e₁` to `target`; a half-turn about
/// `e₃` when `target` is antipodal to `e₁`.
fn pole_to(target: &UnitVec3) -> Matrix3<f64> {
    let pole = Vec3::x();
    let cos = pole.dot(target);
    let h = if 1.0 + cos < 1e-12 {
        Matrix3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))
    } else {
        let k = pole.cross(target).cross_matrix();
        // R = I + [k]× + [k]×² / (1 + cos) for unit vectors
        Matrix3::identity() + k + k * k / (1.0 + cos)
    };
    // near the antipode h is only approximately right; restore orthonormality exactly
    let c0 = target.into_inner();
    let c1 = h.column(1).into_owned();
    let c1 = (c1 - c0 * c0.dot(&c1)).normalize();
    Matrix3::from_columns(&[c0, c1, c0.cross(&c1)])
}
