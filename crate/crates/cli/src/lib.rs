//! Command-line front end for `kentreg`: register two point-cloud files,
//! run the outlier-sweep benchmark, or write a synthetic pair to disk.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kentreg::clustering::ClusterMode;
use kentreg::em::{AveragingMode, RegistrationConfig};

use crate::commands::{BenchmarkRequest, RegisterRequest, SynthRequest};
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "kentreg", version, about = "Rigid point-cloud registration on surface-normal distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register an observed cloud to a model cloud and print a JSON report.
    Register(RegisterArgs),
    /// Sweep outlier fractions, Kent pipeline against ICP; CSV to stdout.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic model/observed pair and its ground-truth transform.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Averaging {
    PerIteration,
    Final,
    Joint,
}

impl From<Averaging> for AveragingMode {
    fn from(a: Averaging) -> Self {
        match a {
            Averaging::PerIteration => AveragingMode::PerIteration,
            Averaging::Final => AveragingMode::Final,
            Averaging::Joint => AveragingMode::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Clustering {
    Independent,
    SharedCentroids,
}

impl From<Clustering> for ClusterMode {
    fn from(c: Clustering) -> Self {
        match c {
            Clustering::Independent => ClusterMode::Independent,
            Clustering::SharedCentroids => ClusterMode::SharedCentroids,
        }
    }
}

/// Pipeline settings shared by `register` and `benchmark`.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Neighbours per normal estimate.
    #[arg(long, default_value_t = 15)]
    pub k_neighbors: usize,
    /// Spherical k-means clusters per cloud.
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    /// Outlier weight of the mixture.
    #[arg(long, default_value_t = 0.1)]
    pub pi0: f64,
    #[arg(long, value_enum, default_value_t = Averaging::Joint)]
    pub averaging: Averaging,
    #[arg(long, value_enum, default_value_t = Clustering::Independent)]
    pub cluster_mode: Clustering,
    /// Per-side cap on normals entering one cluster's EM.
    #[arg(long, default_value_t = 2000)]
    pub max_normals: usize,
    /// Drop this fraction of far points before taking positional means.
    #[arg(long)]
    pub trim_fraction: Option<f64>,
}

impl PipelineArgs {
    pub fn registration(&self, seed: u64) -> RegistrationConfig {
        RegistrationConfig {
            k_neighbors: self.k_neighbors,
            clusters: self.clusters,
            pi_outlier: self.pi0,
            averaging: self.averaging.into(),
            cluster_mode: self.cluster_mode.into(),
            max_normals_per_cluster: self.max_normals,
            trim_fraction: self.trim_fraction,
            seed,
            ..RegistrationConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    /// Model cloud (.xyz, .ply or .csv).
    pub model: PathBuf,
    /// Observed cloud.
    pub observed: PathBuf,
    /// Fraction of points kept after uniform random downsampling.
    #[arg(long, default_value_t = 0.1)]
    pub downsample: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth transform file (12 reals, model to observed); adds e_R and e_t.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    /// TOML scene file.
    pub scene_config: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Comma-separated outlier fractions.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub max_rotation_deg: Option<f64>,
    #[arg(long)]
    pub max_translation: Option<f64>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print per-fraction means to stderr.
    #[arg(long)]
    pub summary: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// TOML scene file.
    pub scene_config: PathBuf,
    pub out_model: PathBuf,
    pub out_observed: PathBuf,
    pub out_gt: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_rotation_deg: Option<f64>,
    #[arg(long)]
    pub max_translation: Option<f64>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Register(a) => {
            let req = RegisterRequest {
                model: a.model,
                observed: a.observed,
                ground_truth: a.gt,
                downsample: a.downsample,
                registration: a.pipeline.registration(a.seed),
            };
            let report = commands::cmd_register(&req)?;
            let mut text = report.to_json();
            text.push('\n');
            commands::emit(a.out.as_deref(), &text)
        }
        Command::Benchmark(a) => {
            let req = BenchmarkRequest {
                scene_config: a.scene_config,
                trials: a.trials,
                fractions: a.fractions,
                seed: a.seed,
                jobs: a.jobs,
                max_rotation_deg: a.max_rotation_deg,
                max_translation: a.max_translation,
                registration: a.pipeline.registration(0),
            };
            if req.jobs == Some(0) {
                return Err(CliError::Usage("--jobs must be at least 1".into()));
            }
            let rows = commands::cmd_benchmark(&req)?;
            commands::emit(a.out.as_deref(), &commands::benchmark_csv(&rows))?;
            if a.summary {
                eprint!("{}", commands::benchmark_summary(&rows));
            }
            Ok(())
        }
        Command::Synth(a) => {
            let req = SynthRequest {
                scene_config: a.scene_config,
                out_model: a.out_model,
                out_observed: a.out_observed,
                out_gt: a.out_gt,
                seed: a.seed,
                max_rotation_deg: a.max_rotation_deg,
                max_translation: a.max_translation,
            };
            commands::cmd_synth(&req).map(|_| ())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn register_defaults() {
        let cli = Cli::try_parse_from(["kentreg", "register", "a.xyz", "b.xyz"]).unwrap();
        let Command::Register(a) = cli.command else { panic!() };
        assert_eq!(a.downsample, 0.1);
        let cfg = a.pipeline.registration(a.seed);
        assert_eq!((cfg.k_neighbors, cfg.clusters, cfg.pi_outlier), (15, 4, 0.1));
        assert_eq!(cfg, RegistrationConfig::default());
    }

    #[test]
    fn benchmark_flags() {
        let cli = Cli::try_parse_from([
            "kentreg", "benchmark", "s.toml", "--fractions", "0,0.2", "--trials", "3", "--jobs", "2",
            "--averaging", "joint",
        ])
        .unwrap();
        let Command::Benchmark(a) = cli.command else { panic!() };
        assert_eq!(a.fractions, Some(vec![0.0, 0.2]));
        assert_eq!((a.trials, a.jobs), (Some(3), Some(2)));
        assert_eq!(a.pipeline.registration(0).averaging, AveragingMode::Joint);
    }
}
