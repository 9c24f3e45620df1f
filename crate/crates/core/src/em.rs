//! Kent-mixture EM over surface normals and the full registration pipeline.
//!
//! Within a cluster every model normal `ỹ_m` is the mean direction of one
//! Kent component sharing `κ, β, γ₁, γ₂`; a uniform component with weight
//! `π₀` and density `1/N` absorbs outliers. Observed normals enter the
//! density through `R·x̃_n`, so `R` maps observed directions onto model ones.

use nalgebra::{DMatrix, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clustering::{assign_to_centroids, match_clusters, spherical_kmeans, ClusterMode};
use crate::error::{Error, Result};
use crate::geometry::{
    average_rotations, mean_point, rotation_error, PointCloud, RigidTransform, RotationMatrix,
    UnitVec3, Vec3,
};
use crate::kent::{moment_fit, KentParams, OrthonormalFrame, KAPPA_MAX};
use crate::manifold_opt::{minimize, MinimizeOptions, MinimizeOutcome, RotationObjective};
use crate::normals::{estimate_normals, remove_directional_outliers, NormalEstimationConfig};

/// Fewest normals per side for a cluster to be registered.
pub const MIN_CLUSTER_NORMALS: usize = 5;

/// Weights of the mixture: `π₀ + M·π_m = 1`, outlier density `p₀ = 1/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureConfig {
    pi_outlier: f64,
    component_weight: f64,
    outlier_density: f64,
}

impl MixtureConfig {
    pub fn new(pi_outlier: f64, components: usize, observations: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&pi_outlier) {
            return Err(Error::InvalidInput(format!(
                "outlier weight must lie in [0, 1), got {pi_outlier}"
            )));
        }
        if components == 0 || observations == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component and one observation".into()));
        }
        Ok(Self {
            pi_outlier,
            component_weight: (1.0 - pi_outlier) / components as f64,
            outlier_density: 1.0 / observations as f64,
        })
    }

    pub fn pi_outlier(&self) -> f64 {
        self.pi_outlier
    }

    pub fn component_weight(&self) -> f64 {
        self.component_weight
    }

    pub fn outlier_density(&self) -> f64 {
        self.outlier_density
    }

    /// `log π₀ + log p₀`, or −∞ without an outlier component.
    fn log_outlier(&self) -> f64 {
        if self.pi_outlier > 0.0 {
            self.pi_outlier.ln() + self.outlier_density.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Posteriors `τ_mn` (M×N) and `τ_0n`.
///
/// The matrix is held as `τ_mn·e^{−s}` with `s = max log τ_mn`, so the M-step
/// still sees relative weights when every inlier posterior underflows (a
/// badly misaligned start with large κ). Both M-step sub-problems are
/// invariant to a common scale of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    scaled: DMatrix<f64>,
    log_scale: f64,
    tau_outlier: Vec<f64>,
}

impl PosteriorMatrix {
    /// Wraps explicit inlier posteriors; `τ_0n` takes the rest of each column.
    pub fn from_tau(tau: DMatrix<f64>) -> Result<Self> {
        if tau.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidInput("posteriors must be finite and non-negative".into()));
        }
        let mut tau_outlier = Vec::with_capacity(tau.ncols());
        for col in tau.column_iter() {
            let s = col.sum();
            if s > 1.0 + 1e-9 {
                return Err(Error::InvalidInput(format!("posterior column sums to {s} > 1")));
            }
            tau_outlier.push((1.0 - s).max(0.0));
        }
        let max = tau.max();
        let (scaled, log_scale) = if max > 0.0 { (tau / max, max.ln()) } else { (tau, 0.0) };
        Ok(Self {
            scaled,
            log_scale,
            tau_outlier,
        })
    }

    /// Number of model normals (components).
    pub fn m(&self) -> usize {
        self.scaled.nrows()
    }

    /// Number of observed normals.
    pub fn n(&self) -> usize {
        self.scaled.ncols()
    }

    pub fn tau(&self, m: usize, n: usize) -> f64 {
        self.scaled[(m, n)] * self.log_scale.exp()
    }

    pub fn tau_matrix(&self) -> DMatrix<f64> {
        &self.scaled * self.log_scale.exp()
    }

    pub fn tau_outlier(&self) -> &[f64] {
        &self.tau_outlier
    }

    /// `𝒯_n = Σ_m τ_mn`.
    pub fn column_weights(&self) -> Vec<f64> {
        let scale = self.log_scale.exp();
        self.relative_column_weights().into_iter().map(|w| w * scale).collect()
    }

    /// `N_p = Σ_mn τ_mn`.
    pub fn inlier_mass(&self) -> f64 {
        self.scaled.sum() * self.log_scale.exp()
    }

    fn relative_column_weights(&self) -> Vec<f64> {
        self.scaled.column_iter().map(|c| c.sum()).collect()
    }
}

fn check_sizes(model: &[UnitVec3], observed: &[UnitVec3], post: Option<&PosteriorMatrix>) -> Result<()> {
    if model.is_empty() || observed.is_empty() {
        return Err(Error::InvalidInput("normal sets must be non-empty".into()));
    }
    if let Some(p) = post {
        if p.m() != model.len() || p.n() != observed.len() {
            return Err(Error::InvalidInput(format!(
                "posterior is {}×{} but there are {} model and {} observed normals",
                p.m(),
                p.n(),
                model.len(),
                observed.len()
            )));
        }
    }
    Ok(())
}

/// E-step: `τ_mn = π_m·FB₅(R·x̃_n | ỹ_m) / p(x̃_n)`, evaluated in log space
/// with a log-sum-exp per observed normal.
///
/// Parallel loops here and below collect per-normal terms in order and sum
/// them sequentially, so results do not depend on the thread count.
pub fn e_step(
    model: &[UnitVec3],
    observed: &[UnitVec3],
    kent: &KentParams,
    r: &RotationMatrix,
    mix: &MixtureConfig,
) -> Result<PosteriorMatrix> {
    check_sizes(model, observed, None)?;
    let m = model.len();
    let log_outlier = mix.log_outlier();
    let base = mix.component_weight().ln() - kent.log_normalizer();
    let kappa = kent.kappa();

    let mut buf = DMatrix::<f64>::zeros(m, observed.len());
    let mut tau_outlier = vec![0.0; observed.len()];
    let col_max: Vec<f64> = buf
        .as_mut_slice()
        .par_chunks_mut(m)
        .zip(tau_outlier.par_iter_mut())
        .zip(observed.par_iter())
        .map(|((col, t0), x)| {
            let rx = r * x.into_inner();
            let shared = base + kent.ovalness_term(&rx);
            let mut peak = log_outlier;
            for (l, y) in col.iter_mut().zip(model) {
                *l = shared + kappa * y.dot(&rx);
                peak = peak.max(*l);
            }
            let mut sum = (log_outlier - peak).exp();
            for l in col.iter() {
                sum += (l - peak).exp();
            }
            let lse = peak + sum.ln();
            let mut top = f64::NEG_INFINITY;
            for l in col.iter_mut() {
                *l -= lse;
                top = top.max(*l);
            }
            *t0 = (log_outlier - lse).exp();
            top
        })
        .collect();

    let log_scale = col_max.into_iter().fold(f64::NEG_INFINITY, f64::max);
    buf.as_mut_slice()
        .par_iter_mut()
        .for_each(|l| *l = (*l - log_scale).exp());
    Ok(PosteriorMatrix {
        scaled: buf,
        log_scale,
        tau_outlier,
    })
}

/// `Q = Σ_n Σ_m τ_mn (log π₀ + log p₀ + log π_m + log FB₅(R·x̃_n | ỹ_m))`.
/// Without an outlier component (`π₀ = 0`) the `log π₀` term is left out.
pub fn q_function(
    post: &PosteriorMatrix,
    model: &[UnitVec3],
    observed: &[UnitVec3],
    kent: &KentParams,
    r: &RotationMatrix,
    mix: &MixtureConfig,
) -> Result<f64> {
    check_sizes(model, observed, Some(post))?;
    let mut constant = mix.outlier_density().ln() + mix.component_weight().ln() - kent.log_normalizer();
    if mix.pi_outlier() > 0.0 {
        constant += mix.pi_outlier().ln();
    }
    let kappa = kent.kappa();
    let scaled_sum: f64 = post
        .scaled
        .as_slice()
        .par_chunks(model.len())
        .zip(observed.par_iter())
        .map(|(col, x)| {
            let rx = r * x.into_inner();
            let weight: f64 = col.iter().sum();
            if weight == 0.0 {
                return 0.0;
            }
            let pulled = model
                .iter()
                .zip(col.iter())
                .fold(Vec3::zeros(), |acc, (y, t)| acc + y.into_inner() * *t);
            weight * (constant + kent.ovalness_term(&rx)) + kappa * pulled.dot(&rx)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    Ok(scaled_sum * post.log_scale.exp())
}

/// Weighted `B = Σ τ x̃x̃ᵀ` and `C = Σ τ x̃ỹᵀ`, both divided by `N_p` (in the
/// scaled weights), plus the column weights.
fn pair_moments(
    post: &PosteriorMatrix,
    model: &[UnitVec3],
    observed: &[UnitVec3],
) -> (Matrix3<f64>, Matrix3<f64>, Vec<f64>) {
    let weights = post.relative_column_weights();
    let (b, c) = post
        .scaled
        .as_slice()
        .par_chunks(model.len())
        .zip(observed.par_iter())
        .zip(weights.par_iter())
        .map(|((col, x), &w)| {
            let x = x.into_inner();
            let pulled = model
                .iter()
                .zip(col.iter())
                .fold(Vec3::zeros(), |acc, (y, t)| acc + y.into_inner() * *t);
            (x * x.transpose() * w, x * pulled.transpose())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((Matrix3::zeros(), Matrix3::zeros()), |a, b| (a.0 + b.0, a.1 + b.1));
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        (b / total, c / total, weights)
    } else {
        (b, c, weights)
    }
}

/// Rotation half of the M-step: minimizes `β·tr(RᵀARB) − κ·tr(RC)` with
/// `A = γ₂γ₂ᵀ − γ₁γ₁ᵀ` from `kent_prev`, warm-started at `r_prev`.
pub fn m_step_rotation(
    post: &PosteriorMatrix,
    model: &[UnitVec3],
    observed: &[UnitVec3],
    kent_prev: &KentParams,
    r_prev: &RotationMatrix,
    opts: &MinimizeOptions,
) -> Result<MinimizeOutcome> {
    check_sizes(model, observed, Some(post))?;
    let obj = rotation_objective(post, model, observed, kent_prev);
    Ok(minimize(&obj, r_prev, opts))
}

/// The M-step objective with B and C divided by the total inlier weight.
fn rotation_objective(
    post: &PosteriorMatrix,
    model: &[UnitVec3],
    observed: &[UnitVec3],
    kent_prev: &KentParams,
) -> RotationObjective {
    let (b, c, _) = pair_moments(post, model, observed);
    let g1 = kent_prev.frame().gamma1().into_inner();
    let g2 = kent_prev.frame().gamma2().into_inner();
    let a = g2 * g2.transpose() - g1 * g1.transpose();
    RotationObjective::new(kent_prev.kappa(), kent_prev.beta(), a, b, c)
}

/// Kent update that keeps `prev` when the weighted normals coincide.
fn kent_update(
    post: &PosteriorMatrix,
    observed: &[UnitVec3],
    r: &RotationMatrix,
    prev: &KentParams,
    vmf_only: bool,
) -> Result<KentParams> {
    match m_step_kent(post, observed, r) {
        Ok(k) if vmf_only => Ok(without_beta(&k)),
        Ok(k) => Ok(k),
        Err(Error::DegenerateSamples(_)) => Ok(*prev),
        Err(e) => Err(e),
    }
}

/// Kent half of the M-step: moment estimate from `R·x̃_n` weighted by `𝒯_n`.
pub fn m_step_kent(post: &PosteriorMatrix, observed: &[UnitVec3], r: &RotationMatrix) -> Result<KentParams> {
    if post.n() != observed.len() {
        return Err(Error::InvalidInput("posterior and observed normals disagree in size".into()));
    }
    let rotated: Vec<UnitVec3> = observed.iter().map(|x| crate::geometry::rotate_unit(r, x)).collect();
    moment_fit(&rotated, &post.relative_column_weights())
}

/// Both M-step sub-steps in order.
pub fn m_step(
    post: &PosteriorMatrix,
    model: &[UnitVec3],
    observed: &[UnitVec3],
    kent_prev: &KentParams,
    r_prev: &RotationMatrix,
    opts: &MinimizeOptions,
) -> Result<(RotationMatrix, KentParams)> {
    let rotation = m_step_rotation(post, model, observed, kent_prev, r_prev, opts)?.rotation;
    let kent = m_step_kent(post, observed, &rotation)?;
    Ok((rotation, kent))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmOptions {
    /// Stop when `|ΔQ| ≤ rel_tol·|Q|`.
    pub rel_tol: f64,
    pub max_iters: usize,
    pub minimize: MinimizeOptions,
    /// Force `β = 0` after each Kent update (von Mises–Fisher components).
    pub vmf_only: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_iters: 100,
            minimize: MinimizeOptions::default(),
            vmf_only: false,
        }
    }
}

/// Parameters after one E-step and M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub rotation: RotationMatrix,
    pub kent: KentParams,
    pub posteriors: PosteriorMatrix,
    /// Q at the updated parameters under this iteration's posteriors.
    pub q_value: f64,
    pub iteration: usize,
}

/// Starting Kent parameters from the observed normals alone. Coincident
/// normals carry no spread information; they start at `κ = KAPPA_MAX`, `β = 0`.
pub fn initial_kent(observed: &[UnitVec3], vmf_only: bool) -> Result<KentParams> {
    let fitted = match moment_fit(observed, &vec![1.0; observed.len()]) {
        Ok(k) => k,
        Err(Error::DegenerateSamples(_)) => {
            let sum = observed.iter().fold(Vec3::zeros(), |a, x| a + x.into_inner());
            let mu = UnitVec3::try_new(sum, 1e-12)
                .ok_or_else(|| Error::DegenerateSamples("observed normals cancel out".into()))?;
            KentParams::new(KAPPA_MAX, 0.0, OrthonormalFrame::about(&mu))?
        }
        Err(e) => return Err(e),
    };
    Ok(if vmf_only { without_beta(&fitted) } else { fitted })
}

fn without_beta(k: &KentParams) -> KentParams {
    KentParams::new(k.kappa(), 0.0, *k.frame()).expect("β = 0 is always admissible")
}

/// One E-step and M-step from `(r, kent)`. When the weighted normals are
/// degenerate for a moment fit the previous Kent parameters are kept.
pub fn em_step(
    model: &[UnitVec3],
    observed: &[UnitVec3],
    mix: &MixtureConfig,
    r: &RotationMatrix,
    kent: &KentParams,
    iteration: usize,
    opts: &EmOptions,
) -> Result<EmState> {
    let posteriors = e_step(model, observed, kent, r, mix)?;
    let rotation = m_step_rotation(&posteriors, model, observed, kent, r, &opts.minimize)?.rotation;
    let next = kent_update(&posteriors, observed, &rotation, kent, opts.vmf_only)?;
    let q_value = q_function(&posteriors, model, observed, &next, &rotation, mix)?;
    Ok(EmState {
        rotation,
        kent: next,
        posteriors,
        q_value,
        iteration,
    })
}

/// Relative Q change test. While the inlier mass is below one normal the
/// posteriors have all but underflowed and Q is rounding noise near zero, so
/// nothing counts as settled.
fn q_settled(prev: f64, next: f64, inlier_mass: f64, rel_tol: f64) -> bool {
    if inlier_mass < 1.0 {
        return false;
    }
    (next - prev).abs() <= rel_tol * prev.abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFit {
    pub rotation: RotationMatrix,
    pub kent: KentParams,
    pub q_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// EM on one pair of normal sets, starting from `R = I` and Kent parameters
/// fitted to the observed normals.
pub fn register_cluster(
    model: &[UnitVec3],
    observed: &[UnitVec3],
    mix: &MixtureConfig,
    opts: &EmOptions,
) -> Result<ClusterFit> {
    for set in [model, observed] {
        if set.len() < MIN_CLUSTER_NORMALS {
            return Err(Error::TooFewPoints {
                needed: MIN_CLUSTER_NORMALS,
                got: set.len(),
            });
        }
    }
    let mut rotation = RotationMatrix::identity();
    let mut kent = initial_kent(observed, opts.vmf_only)?;
    let mut q_trace = Vec::new();
    let mut converged = false;
    for it in 1..=opts.max_iters {
        let state = em_step(model, observed, mix, &rotation, &kent, it, opts)?;
        let settled = q_trace
            .last()
            .is_some_and(|&prev| q_settled(prev, state.q_value, state.posteriors.inlier_mass(), opts.rel_tol));
        rotation = state.rotation;
        kent = state.kent;
        q_trace.push(state.q_value);
        if settled {
            converged = true;
            break;
        }
    }
    Ok(ClusterFit {
        rotation,
        kent,
        iterations: q_trace.len(),
        q_trace,
        converged,
    })
}

/// How per-cluster rotations are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// Average after every EM iteration and start every cluster's next
    /// iteration from the shared average.
    PerIteration,
    /// Run each cluster's EM to convergence on its own, then average once.
    Final,
    /// One rotation shared by all clusters: each M-step minimizes the sum of
    /// the cluster objectives, weighted by cluster size. A plane cluster
    /// cannot see rotation about its own normal; here the other clusters
    /// constrain that direction instead of it being averaged in.
    #[default]
    Joint,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegistrationConfig {
    pub k_neighbors: usize,
    pub viewpoint: [f64; 3],
    pub cosine_threshold: f64,
    pub clusters: usize,
    pub pi_outlier: f64,
    /// Per-side cap on normals entering one cluster's EM (uniform subsample).
    pub max_normals_per_cluster: usize,
    pub seed: u64,
    pub cluster_mode: ClusterMode,
    pub averaging: AveragingMode,
    pub kmeans_max_iters: usize,
    /// Clusters holding less than this fraction of a cloud's normals are not
    /// registered.
    pub min_cluster_share: f64,
    pub em: EmOptions,
    /// Drop this fraction of points farthest from each centroid before the
    /// positional means. `None` uses every point.
    pub trim_fraction: Option<f64>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 15,
            viewpoint: [0.0; 3],
            cosine_threshold: 0.0,
            clusters: 4,
            pi_outlier: 0.1,
            max_normals_per_cluster: 2000,
            seed: 0,
            cluster_mode: ClusterMode::Independent,
            averaging: AveragingMode::Joint,
            kmeans_max_iters: 100,
            min_cluster_share: 0.05,
            em: EmOptions::default(),
            trim_fraction: None,
        }
    }
}

impl RegistrationConfig {
    pub fn normal_config(&self) -> NormalEstimationConfig {
        NormalEstimationConfig {
            k_neighbors: self.k_neighbors,
            viewpoint: Vec3::from(self.viewpoint),
            cosine_threshold: self.cosine_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.normal_config().validate()?;
        if self.clusters == 0 {
            return Err(Error::InvalidInput("need at least one cluster".into()));
        }
        if !(0.0..1.0).contains(&self.pi_outlier) {
            return Err(Error::InvalidInput(format!("pi0 must lie in [0, 1), got {}", self.pi_outlier)));
        }
        if self.max_normals_per_cluster < MIN_CLUSTER_NORMALS {
            return Err(Error::InvalidInput(format!(
                "per-cluster cap must be at least {MIN_CLUSTER_NORMALS}"
            )));
        }
        if !(0.0..1.0).contains(&self.min_cluster_share) {
            return Err(Error::InvalidInput(format!(
                "minimum cluster share must lie in [0, 1), got {}",
                self.min_cluster_share
            )));
        }
        if let Some(f) = self.trim_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidInput(format!("trim fraction must lie in [0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterDiagnostics {
    pub model_cluster: usize,
    pub observed_cluster: usize,
    pub model_normals: usize,
    pub observed_normals: usize,
    pub kappa: f64,
    pub beta: f64,
    /// Angle between this cluster's rotation and the combined one (radians).
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Model-to-observed transform: `observed ≈ transform(model)`.
    pub transform: RigidTransform,
    /// Observed-to-model transform `(R, t)` with `t = μ_y − R·μ_x`.
    pub alignment: RigidTransform,
    pub per_cluster_rotations: Vec<RotationMatrix>,
    pub q_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub clusters: Vec<ClusterDiagnostics>,
    pub model_normals: usize,
    pub observed_normals: usize,
}

/// `t = μ_y − R·μ_x` from the positional means of the model (`y`) and
/// observed (`x`) points.
pub fn translation_from_means(model: &[Vec3], observed: &[Vec3], r: &RotationMatrix) -> Vec3 {
    mean_point(model) - r * mean_point(observed)
}

/// Mean of the points left after dropping the `fraction` farthest from the
/// plain centroid.
pub fn trimmed_mean(points: &[Vec3], fraction: f64) -> Vec3 {
    let centre = mean_point(points);
    let keep = ((1.0 - fraction) * points.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    let mut by_distance: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - centre).norm_squared(), i))
        .collect();
    by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let kept: Vec<Vec3> = by_distance[..keep.min(points.len())]
        .iter()
        .map(|&(_, i)| points[i])
        .collect();
    mean_point(&kept)
}

/// Normals of a cloud: carried ones if present, else PCA estimates; points
/// without a normal are skipped. Directional outliers are then filtered.
fn prepared_normals(cloud: &PointCloud, cfg: &NormalEstimationConfig) -> Result<Vec<UnitVec3>> {
    let normals: Vec<UnitVec3> = match cloud.normals() {
        Some(n) => n.to_vec(),
        None => estimate_normals(cloud, cfg)?.into_iter().flatten().collect(),
    };
    if normals.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    match remove_directional_outliers(&normals, cfg.cosine_threshold) {
        Ok((kept, _)) => Ok(kept.into_iter().map(|i| normals[i]).collect()),
        // a balanced set has no mean direction to filter against
        Err(Error::DegenerateMean(_)) => Ok(normals),
        Err(e) => Err(e),
    }
}

fn subsample(normals: Vec<UnitVec3>, cap: usize, seed: u64) -> Vec<UnitVec3> {
    if normals.len() <= cap {
        return normals;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, normals.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| normals[i]).collect()
}

struct ClusterPair {
    model_cluster: usize,
    observed_cluster: usize,
    model: Vec<UnitVec3>,
    observed: Vec<UnitVec3>,
    mix: MixtureConfig,
}

fn cluster_pairs(model: &[UnitVec3], observed: &[UnitVec3], cfg: &RegistrationConfig) -> Result<Vec<ClusterPair>> {
    let k = cfg.clusters;
    let floor = |n: usize| MIN_CLUSTER_NORMALS.max((cfg.min_cluster_share * n as f64).ceil() as usize);
    let min_members = floor(model.len().min(observed.len()));
    let mc = spherical_kmeans(model, k, cfg.seed, cfg.kmeans_max_iters)?;
    let (oc, pairs) = match cfg.cluster_mode {
        ClusterMode::Independent => {
            let oc = spherical_kmeans(observed, k, cfg.seed, cfg.kmeans_max_iters)?;
            let pairs = match_clusters(&mc, &oc, min_members);
            (oc, pairs)
        }
        ClusterMode::SharedCentroids => {
            let oc = assign_to_centroids(observed, &mc.centroids);
            (oc, (0..k).map(|j| (j, j)).collect())
        }
    };
    let mut out = Vec::new();
    for (slot, (i, j)) in pairs.into_iter().enumerate() {
        let pick = |set: &[UnitVec3], members: Vec<usize>| -> Vec<UnitVec3> {
            members.into_iter().map(|idx| set[idx]).collect()
        };
        let salt = cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(slot as u64 + 1));
        let (mi, oj) = (mc.members(i), oc.members(j));
        if mi.len() < min_members || oj.len() < min_members {
            continue;
        }
        let ym = subsample(pick(model, mi), cfg.max_normals_per_cluster, salt);
        let xo = subsample(pick(observed, oj), cfg.max_normals_per_cluster, salt ^ 1);
        if ym.len() < MIN_CLUSTER_NORMALS || xo.len() < MIN_CLUSTER_NORMALS {
            continue;
        }
        let mix = MixtureConfig::new(cfg.pi_outlier, ym.len(), xo.len())?;
        out.push(ClusterPair {
            model_cluster: i,
            observed_cluster: j,
            model: ym,
            observed: xo,
            mix,
        });
    }
    if out.is_empty() {
        return Err(Error::TooFewPoints {
            needed: MIN_CLUSTER_NORMALS,
            got: 0,
        });
    }
    Ok(out)
}

/// Chordal average, or the first rotation when the average is undefined.
fn combine(rotations: &[RotationMatrix]) -> RotationMatrix {
    average_rotations(rotations).unwrap_or(rotations[0])
}

/// Full registration: normals, directional outlier removal, spherical
/// k-means, per-cluster EM, rotation averaging, translation from means.
pub fn register(model: &PointCloud, observed: &PointCloud, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let ncfg = cfg.normal_config();
    let (model_normals, observed_normals) = rayon::join(
        || prepared_normals(model, &ncfg),
        || prepared_normals(observed, &ncfg),
    );
    let (model_normals, observed_normals) = (model_normals?, observed_normals?);
    let pairs = cluster_pairs(&model_normals, &observed_normals, cfg)?;

    let (rotation, fits, q_trace, converged, iterations) = match cfg.averaging {
        AveragingMode::PerIteration => per_iteration(&pairs, &cfg.em)?,
        AveragingMode::Joint => joint(&pairs, &cfg.em)?,
        AveragingMode::Final => {
            let fits: Vec<ClusterFit> = pairs
                .par_iter()
                .map(|p| register_cluster(&p.model, &p.observed, &p.mix, &cfg.em))
                .collect::<Result<_>>()?;
            let rotations: Vec<RotationMatrix> = fits.iter().map(|f| f.rotation).collect();
            let len = fits.iter().map(|f| f.q_trace.len()).max().unwrap_or(0);
            // sum of the cluster traces, each held at its last value once done
            let q_trace = (0..len)
                .map(|i| fits.iter().map(|f| f.q_trace[i.min(f.q_trace.len() - 1)]).sum())
                .collect();
            let converged = fits.iter().all(|f| f.converged);
            let kents = fits.iter().map(|f| (f.rotation, f.kent)).collect();
            (combine(&rotations), kents, q_trace, converged, len)
        }
    };

    let (mu_y, mu_x) = match cfg.trim_fraction {
        Some(f) => (trimmed_mean(model.points(), f), trimmed_mean(observed.points(), f)),
        None => (model.centroid(), observed.centroid()),
    };
    let alignment = RigidTransform::new(rotation, mu_y - rotation * mu_x);
    let clusters = pairs
        .iter()
        .zip(&fits)
        .map(|(p, (r, k))| ClusterDiagnostics {
            model_cluster: p.model_cluster,
            observed_cluster: p.observed_cluster,
            model_normals: p.model.len(),
            observed_normals: p.observed.len(),
            kappa: k.kappa(),
            beta: k.beta(),
            deviation: rotation_error(&rotation, r),
        })
        .collect();
    Ok(RegistrationResult {
        transform: alignment.inverse(),
        alignment,
        per_cluster_rotations: fits.iter().map(|(r, _)| *r).collect(),
        q_trace,
        converged,
        iterations,
        clusters,
        model_normals: model_normals.len(),
        observed_normals: observed_normals.len(),
    })
}

type PipelineOutcome = (RotationMatrix, Vec<(RotationMatrix, KentParams)>, Vec<f64>, bool, usize);

/// Every iteration runs one EM step per cluster from the shared rotation and
/// replaces it with the average of the per-cluster updates. The traced Q
/// sums the clusters' Q at the averaged rotation. Whatever a cluster does
/// about its own normal, which its data cannot see, goes into the average.
fn per_iteration(pairs: &[ClusterPair], opts: &EmOptions) -> Result<PipelineOutcome> {
    let mut kents: Vec<KentParams> = pairs
        .par_iter()
        .map(|p| initial_kent(&p.observed, opts.vmf_only))
        .collect::<Result<_>>()?;
    let mut rotation = RotationMatrix::identity();
    let mut per_cluster = vec![rotation; pairs.len()];
    let mut q_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for it in 1..=opts.max_iters {
        let states: Vec<EmState> = pairs
            .par_iter()
            .zip(kents.par_iter())
            .map(|(p, k)| em_step(&p.model, &p.observed, &p.mix, &rotation, k, it, opts))
            .collect::<Result<_>>()?;
        per_cluster = states.iter().map(|s| s.rotation).collect();
        kents = states.iter().map(|s| s.kent).collect();
        rotation = combine(&per_cluster);
        // Q of every cluster at the shared rotation actually carried forward
        let q: f64 = pairs
            .par_iter()
            .zip(states.par_iter())
            .map(|(p, s)| q_function(&s.posteriors, &p.model, &p.observed, &s.kent, &rotation, &p.mix))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .sum();
        let mass: f64 = states.iter().map(|s| s.posteriors.inlier_mass()).sum();
        let settled = q_trace.last().is_some_and(|&prev| q_settled(prev, q, mass, opts.rel_tol));
        q_trace.push(q);
        if settled {
            converged = true;
            break;
        }
    }
    let iterations = q_trace.len();
    Ok((
        rotation,
        per_cluster.into_iter().zip(kents).collect(),
        q_trace,
        converged,
        iterations,
    ))
}

/// EM with a single rotation for every cluster. The rotation M-step
/// minimizes the size-weighted sum of the cluster objectives; Kent parameters
/// stay per cluster. Per-cluster rotations are each cluster's own optimum
/// reached from the shared result, for diagnostics only.
fn joint(pairs: &[ClusterPair], opts: &EmOptions) -> Result<PipelineOutcome> {
    let mut kents: Vec<KentParams> = pairs
        .par_iter()
        .map(|p| initial_kent(&p.observed, opts.vmf_only))
        .collect::<Result<_>>()?;
    let mut rotation = RotationMatrix::identity();
    let mut objectives: Vec<RotationObjective> = Vec::new();
    let mut q_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let posteriors: Vec<PosteriorMatrix> = pairs
            .par_iter()
            .zip(kents.par_iter())
            .map(|(p, k)| e_step(&p.model, &p.observed, k, &rotation, &p.mix))
            .collect::<Result<_>>()?;
        objectives = pairs
            .iter()
            .zip(&posteriors)
            .zip(&kents)
            .map(|((p, post), k)| rotation_objective(post, &p.model, &p.observed, k))
            .collect();
        // each objective is normalized by its own posterior mass, so a cluster
        // whose posteriors have all but underflowed still pulls
        let weighted: Vec<RotationObjective> = objectives
            .iter()
            .zip(pairs)
            .map(|(o, p)| o.scaled(p.observed.len() as f64))
            .collect();
        rotation = minimize(weighted.as_slice(), &rotation, &opts.minimize).rotation;
        kents = pairs
            .par_iter()
            .zip(posteriors.par_iter())
            .zip(kents.par_iter())
            .map(|((p, post), k)| kent_update(post, &p.observed, &rotation, k, opts.vmf_only))
            .collect::<Result<_>>()?;
        let q: f64 = pairs
            .par_iter()
            .zip(posteriors.par_iter())
            .zip(kents.par_iter())
            .map(|((p, post), k)| q_function(post, &p.model, &p.observed, k, &rotation, &p.mix))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .sum();
        let mass: f64 = posteriors.iter().map(|p| p.inlier_mass()).sum();
        let settled = q_trace.last().is_some_and(|&prev| q_settled(prev, q, mass, opts.rel_tol));
        q_trace.push(q);
        if settled {
            converged = true;
            break;
        }
    }
    let per_cluster: Vec<RotationMatrix> = objectives
        .par_iter()
        .map(|o| minimize(o, &rotation, &opts.minimize).rotation)
        .collect();
    let iterations = q_trace.len();
    Ok((
        rotation,
        per_cluster.into_iter().zip(kents).collect(),
        q_trace,
        converged,
        iterations,
    ))
}
