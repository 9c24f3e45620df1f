//! Outlier-sweep benchmark: the Kent pipeline against point-to-point ICP on
//! identical synthetic pairs.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{register, RegistrationConfig};
use crate::error::{Error, Result};
use crate::geometry::{rotation_error, translation_error, RigidTransform};
use crate::icp::{icp_register, IcpConfig};
use crate::synthetic::{make_pair, random_transform, sub_seed, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kent,
    Icp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Kent => "kent",
            Method::Icp => "icp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    /// Scene template; its seed and outlier fraction are replaced per run.
    pub scene: SceneSpec,
    pub fractions: Vec<f64>,
    pub trials: usize,
    /// Ground-truth rotation angle is uniform in `[0, max_rotation]` (radians).
    pub max_rotation: f64,
    /// Ground-truth translation length is uniform in `[0, max_translation]`.
    pub max_translation: f64,
    pub seed: u64,
    pub registration: RegistrationConfig,
    pub icp: IcpConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let mut scene = SceneSpec::room_corner(1667, 0);
        scene.noise_sigma = 0.01;
        Self {
            scene,
            fractions: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            trials: 20,
            max_rotation: 15f64.to_radians(),
            max_translation: 0.5,
            seed: 0,
            registration: RegistrationConfig::default(),
            icp: IcpConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("benchmark needs at least one trial".into()));
        }
        if self.fractions.is_empty() {
            return Err(Error::InvalidInput("benchmark needs at least one outlier fraction".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(Error::InvalidInput(format!("outlier fraction must lie in [0, 1), got {f}")));
        }
        if !(self.max_rotation >= 0.0 && self.max_translation >= 0.0) {
            return Err(Error::InvalidInput("transform ranges must be non-negative".into()));
        }
        self.registration.validate()?;
        self.scene.validate()
    }

    /// Scene and ground truth of one trial. Every fraction reuses the trial's
    /// clean samples and transform, so runs are paired across fractions too.
    pub fn instance(&self, fraction: f64, trial: usize) -> (SceneSpec, RigidTransform) {
        let trial_seed = sub_seed(self.seed, trial as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let t = random_transform(&mut rng, self.max_rotation, self.max_translation);
        let spec = SceneSpec {
            outlier_fraction: fraction,
            seed: trial_seed,
            ..self.scene.clone()
        };
        (spec, t)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchmarkRow {
    pub outlier_fraction: f64,
    pub method: Method,
    pub trial: usize,
    /// Radians.
    pub rotation_error: f64,
    /// Meters.
    pub translation_error: f64,
    /// Empty for ICP.
    pub q_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub millis: f64,
}

fn run_instance(cfg: &BenchmarkConfig, fraction: f64, trial: usize) -> Result<[BenchmarkRow; 2]> {
    let (spec, t_true) = cfg.instance(fraction, trial);
    let (model, observed) = make_pair(&spec, &t_true)?;
    let registration = RegistrationConfig {
        seed: spec.seed,
        ..cfg.registration.clone()
    };

    let start = Instant::now();
    let kent = register(&model.cloud, &observed.cloud, &registration)?;
    let kent_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let icp = icp_register(&model.cloud, &observed.cloud, &cfg.icp)?;
    let icp_ms = start.elapsed().as_secs_f64() * 1e3;

    let row = |method, t: &RigidTransform, q_trace, converged, iterations, millis| BenchmarkRow {
        outlier_fraction: fraction,
        method,
        trial,
        rotation_error: rotation_error(&t_true.rotation, &t.rotation),
        translation_error: translation_error(&t_true.translation, &t.translation),
        q_trace,
        converged,
        iterations,
        millis,
    };
    Ok([
        row(Method::Kent, &kent.transform, kent.q_trace, kent.converged, kent.iterations, kent_ms),
        row(Method::Icp, &icp.transform, Vec::new(), icp.converged, icp.mse_trace.len(), icp_ms),
    ])
}

/// Runs every (fraction, trial) instance with both methods. Instances run
/// in parallel on the current rayon pool; rows come back sorted by fraction,
/// method and trial whatever the scheduling.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    cfg.validate()?;
    let jobs: Vec<(f64, usize)> = cfg
        .fractions
        .iter()
        .flat_map(|&f| (0..cfg.trials).map(move |t| (f, t)))
        .collect();
    let mut rows: Vec<BenchmarkRow> = jobs
        .par_iter()
        .map(|&(f, t)| run_instance(cfg, f, t))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        a.outlier_fraction
            .total_cmp(&b.outlier_fraction)
            .then(a.method.cmp(&b.method))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Summary {
    pub outlier_fraction: f64,
    pub method: Method,
    pub runs: usize,
    pub mean_rotation_error: f64,
    pub mean_translation_error: f64,
}

/// Per (fraction, method) means, in the rows' order.
pub fn summarize(rows: &[BenchmarkRow]) -> Vec<Summary> {
    let mut out: Vec<Summary> = Vec::new();
    for r in rows {
        match out
            .iter_mut()
            .find(|s| s.outlier_fraction == r.outlier_fraction && s.method == r.method)
        {
            Some(s) => {
                s.runs += 1;
                s.mean_rotation_error += r.rotation_error;
                s.mean_translation_error += r.translation_error;
            }
            None => out.push(Summary {
                outlier_fraction: r.outlier_fraction,
                method: r.method,
                runs: 1,
                mean_rotation_error: r.rotation_error,
                mean_translation_error: r.translation_error,
            }),
        }
    }
    for s in &mut out {
        s.mean_rotation_error /= s.runs as f64;
        s.mean_translation_error /= s.runs as f64;
    }
    out
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // C(n, k)/2ⁿ built up in log space
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (ln_choose + ln_half_n).exp();
        }
    }
    tail.min(1.0)
}

/// Paired comparison of two methods on one error column: how often the
/// first is strictly lower, strictly higher, and the sign-test p-value.
pub fn paired_sign_test(first: &[f64], second: &[f64]) -> (usize, usize, f64) {
    let wins = first.iter().zip(second).filter(|(a, b)| a < b).count();
    let losses = first.iter().zip(second).filter(|(a, b)| a > b).count();
    (wins, losses, sign_test_p(wins, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny() -> BenchmarkConfig {
        let mut scene = SceneSpec::room_corner(150, 0);
        scene.noise_sigma = 0.005;
        BenchmarkConfig {
            scene,
            fractions: vec![0.0, 0.1],
            trials: 3,
            max_rotation: 5f64.to_radians(),
            max_translation: 0.1,
            seed: 4,
            registration: RegistrationConfig {
                max_normals_per_cluster: 200,
                ..Default::default()
            },
            icp: IcpConfig::default(),
        }
    }

    #[test]
    fn row_count_and_order() {
        let rows = run_benchmark(&tiny()).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        let keys: Vec<(f64, Method, usize)> = rows.iter().map(|r| (r.outlier_fraction, r.method, r.trial)).collect();
        let mut sorted = keys.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        assert_eq!(keys, sorted);
        assert!(rows.iter().filter(|r| r.method == Method::Icp).all(|r| r.q_trace.is_empty()));
        assert!(rows.iter().filter(|r| r.method == Method::Kent).all(|r| !r.q_trace.is_empty()));
    }

    #[test]
    fn deterministic() {
        let a = run_benchmark(&tiny()).unwrap();
        let b = run_benchmark(&tiny()).unwrap();
        let strip = |rows: Vec<BenchmarkRow>| -> Vec<(f64, f64, Vec<f64>)> {
            rows.into_iter().map(|r| (r.rotation_error, r.translation_error, r.q_trace)).collect()
        };
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn trials_share_ground_truth_across_fractions() {
        let cfg = tiny();
        let (s0, t0) = cfg.instance(0.0, 2);
        let (s1, t1) = cfg.instance(0.1, 2);
        assert_eq!(t0, t1);
        assert_eq!(s0.seed, s1.seed);
        assert_ne!(cfg.instance(0.0, 1).1, t0);
        assert!(rotation_error(&RigidTransform::identity().rotation, &t0.rotation) <= cfg.max_rotation + 1e-12);
        assert!(t0.translation.norm() <= cfg.max_translation + 1e-12);
    }

    #[test]
    fn summary_means() {
        let row = |f, m, e| BenchmarkRow {
            outlier_fraction: f,
            method: m,
            trial: 0,
            rotation_error: e,
            translation_error: 2.0 * e,
            q_trace: vec![],
            converged: true,
            iterations: 1,
            millis: 0.0,
        };
        let rows = vec![row(0.0, Method::Kent, 1.0), row(0.0, Method::Kent, 3.0), row(0.0, Method::Icp, 5.0)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].runs, s[0].mean_rotation_error, s[0].mean_translation_error), (2, 2.0, 4.0));
        assert_eq!((s[1].method, s[1].mean_rotation_error), (Method::Icp, 5.0));
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        // hand-summed: P(X ≥ 15 | n = 20) = 21700/1048576
        assert_relative_eq!(sign_test_p(15, 5), 21700.0 / 1048576.0, epsilon = 1e-12);
        assert_relative_eq!(sign_test_p(0, 7), 1.0, epsilon = 1e-12);
        assert_relative_eq!(sign_test_p(7, 0), 1.0 / 128.0, epsilon = 1e-12);
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert_eq!(paired_sign_test(&[1.0, 2.0, 3.0], &[2.0, 2.0, 1.0]).0, 1);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = tiny();
        cfg.trials = 0;
        assert!(run_benchmark(&cfg).is_err());
        let mut cfg = tiny();
        cfg.fractions = vec![1.0];
        assert!(run_benchmark(&cfg).is_err());
    }
}
