use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kentreg::benchmark::{run_benchmark, summarize, BenchmarkConfig, BenchmarkRow};
use kentreg::em::{register, RegistrationConfig};
use kentreg::geometry::{rotation_error, translation_error, PointCloud, RigidTransform};
use kentreg::icp::IcpConfig;
use kentreg::synthetic::{make_pair, random_transform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SceneConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_cloud, read_transform, write_cloud, write_text, write_transform};
use crate::report::{ConfigEcho, PointCounts, RunReport, Timings};

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Keeps `round(fraction·n)` points (at least one) chosen uniformly without
/// replacement, in their original order. `fraction >= 1` keeps everything.
pub fn downsample(cloud: &PointCloud, fraction: f64, seed: u64) -> kentreg::Result<PointCloud> {
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(kentreg::Error::InvalidInput(format!(
            "downsample fraction must be positive, got {fraction}"
        )));
    }
    let n = cloud.len();
    if fraction >= 1.0 {
        return Ok(cloud.clone());
    }
    let keep = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    indices.sort_unstable();
    cloud.select(&indices)
}

#[derive(Debug, Clone)]
pub struct RegisterRequest {
    pub model: PathBuf,
    pub observed: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub downsample: f64,
    pub registration: RegistrationConfig,
}

/// Load, downsample both clouds with the same seed, register. The seed in
/// `registration` drives both steps.
pub fn cmd_register(req: &RegisterRequest) -> CliResult<RunReport> {
    let start = Instant::now();
    let model = read_cloud(&req.model)?;
    let observed = read_cloud(&req.observed)?;
    let gt = req.ground_truth.as_deref().map(read_transform).transpose()?;
    let load = ms(start);

    let t = Instant::now();
    let seed = req.registration.seed;
    let model_used = downsample(&model, req.downsample, seed)?;
    let observed_used = downsample(&observed, req.downsample, seed)?;
    let down = ms(t);

    let t = Instant::now();
    let result = register(&model_used, &observed_used, &req.registration)?;
    let reg = ms(t);

    let (e_r, e_t) = match &gt {
        Some(g) => (
            Some(rotation_error(&g.rotation, &result.transform.rotation)),
            Some(translation_error(&g.translation, &result.transform.translation)),
        ),
        None => (None, None),
    };
    Ok(RunReport {
        transform: (&result.transform).into(),
        e_r,
        e_t,
        q_trace: result.q_trace,
        converged: result.converged,
        iterations: result.iterations,
        clusters: result.clusters,
        points: PointCounts {
            model_loaded: model.len(),
            observed_loaded: observed.len(),
            model_used: model_used.len(),
            observed_used: observed_used.len(),
            model_normals: result.model_normals,
            observed_normals: result.observed_normals,
        },
        timings_ms: Timings {
            load,
            downsample: down,
            register: reg,
            total: ms(start),
        },
        config: ConfigEcho {
            model: req.model.display().to_string(),
            observed: req.observed.display().to_string(),
            ground_truth: req.ground_truth.as_ref().map(|p| p.display().to_string()),
            downsample: req.downsample,
            registration: req.registration.clone(),
        },
    })
}

fn scene_error(path: &Path, e: kentreg::Error) -> CliError {
    CliError::parse(path, e.to_string())
}

#[derive(Debug, Clone)]
pub struct BenchmarkRequest {
    pub scene_config: PathBuf,
    pub trials: Option<usize>,
    pub fractions: Option<Vec<f64>>,
    pub seed: Option<u64>,
    /// Worker threads; `None` uses rayon's default.
    pub jobs: Option<usize>,
    pub max_rotation_deg: Option<f64>,
    pub max_translation: Option<f64>,
    pub registration: RegistrationConfig,
}

pub fn benchmark_config(req: &BenchmarkRequest) -> CliResult<BenchmarkConfig> {
    let scene_cfg = SceneConfig::load(&req.scene_config)?;
    let scene = scene_cfg.scene_spec().map_err(|e| scene_error(&req.scene_config, e))?;
    Ok(BenchmarkConfig {
        scene,
        fractions: req.fractions.clone().unwrap_or(scene_cfg.benchmark.fractions),
        trials: req.trials.unwrap_or(scene_cfg.benchmark.trials),
        max_rotation: req
            .max_rotation_deg
            .unwrap_or(scene_cfg.transform.max_rotation_deg)
            .to_radians(),
        max_translation: req.max_translation.unwrap_or(scene_cfg.transform.max_translation),
        seed: req.seed.unwrap_or(scene_cfg.seed),
        registration: req.registration.clone(),
        icp: IcpConfig::default(),
    })
}

pub fn cmd_benchmark(req: &BenchmarkRequest) -> CliResult<Vec<BenchmarkRow>> {
    let cfg = benchmark_config(req)?;
    cfg.validate()?;
    let rows = match req.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            pool.install(|| run_benchmark(&cfg))?
        }
        None => run_benchmark(&cfg)?,
    };
    Ok(rows)
}

pub const CSV_HEADER: [&str; 5] = ["outlier_fraction", "method", "trial", "e_R", "e_t"];

/// Errors in radians and meters.
pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.outlier_fraction.to_string(),
            r.method.to_string(),
            r.trial.to_string(),
            r.rotation_error.to_string(),
            r.translation_error.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// Per fraction and method, means in degrees and meters.
pub fn benchmark_summary(rows: &[BenchmarkRow]) -> String {
    let mut out = String::new();
    for s in summarize(rows) {
        out.push_str(&format!(
            "fraction {:.2} {:<4} runs {:>3}  mean e_R {:.4} deg  mean e_t {:.5} m\n",
            s.outlier_fraction,
            s.method,
            s.runs,
            s.mean_rotation_error.to_degrees(),
            s.mean_translation_error
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub scene_config: PathBuf,
    pub out_model: PathBuf,
    pub out_observed: PathBuf,
    pub out_gt: PathBuf,
    pub seed: Option<u64>,
    pub max_rotation_deg: Option<f64>,
    pub max_translation: Option<f64>,
}

/// Ground truth and the synthetic pair written to disk. The transform maps
/// the model into the observed frame.
pub fn cmd_synth(req: &SynthRequest) -> CliResult<RigidTransform> {
    let mut cfg = SceneConfig::load(&req.scene_config)?;
    if let Some(s) = req.seed {
        cfg.seed = s;
    }
    let spec = cfg.scene_spec().map_err(|e| scene_error(&req.scene_config, e))?;
    let max_rotation = req.max_rotation_deg.unwrap_or(cfg.transform.max_rotation_deg);
    let max_translation = req.max_translation.unwrap_or(cfg.transform.max_translation);
    if !(max_rotation >= 0.0 && max_translation >= 0.0) {
        return Err(CliError::Usage("transform ranges must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_true = random_transform(&mut rng, max_rotation.to_radians(), max_translation);
    let (model, observed) = make_pair(&spec, &t_true)?;
    write_cloud(&req.out_model, &model.cloud)?;
    write_cloud(&req.out_observed, &observed.cloud)?;
    write_transform(&req.out_gt, &t_true)?;
    Ok(t_true)
}

/// Writes to `path`, or to stdout without one.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })
        }
    }
}
