use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kentreg::em::register;
use kentreg::geometry::{rotation_error, translation_error};
use kentreg::synthetic::{make_pair, random_transform};
use kentreg_cli::commands::downsample;
use kentreg_cli::config::SceneConfig;
use kentreg_cli::io::{parse_transform, read_cloud};
use kentreg_cli::report::RunReport;
use kentreg_cli::PipelineArgs;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SCENE: &str = "seed = 21\nnoise_sigma = 0.005\npoints_per_plane = 900\n\
                     [transform]\nmax_rotation_deg = 10.0\nmax_translation = 0.3\n";

fn kentreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kentreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Synth {
    dir: TempDir,
    scene: PathBuf,
    model: PathBuf,
    observed: PathBuf,
    gt: PathBuf,
}

fn synth(model_ext: &str, observed_ext: &str) -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.toml");
    fs::write(&scene, SCENE).unwrap();
    let model = dir.path().join(format!("model.{model_ext}"));
    let observed = dir.path().join(format!("observed.{observed_ext}"));
    let gt = dir.path().join("gt.txt");
    let out = kentreg(&["synth", s(&scene), s(&model), s(&observed), s(&gt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Synth {
        dir,
        scene,
        model,
        observed,
        gt,
    }
}

#[test]
fn synth_writes_parsable_files() {
    let sy = synth("xyz", "ply");
    let gt_text = fs::read_to_string(&sy.gt).unwrap();
    assert_eq!(gt_text.split_whitespace().count(), 12);
    assert!(gt_text.split_whitespace().all(|t| t.parse::<f64>().is_ok()));
    parse_transform(&gt_text).unwrap();

    let spec = SceneConfig::parse(SCENE).unwrap().scene_spec().unwrap();
    assert_eq!(read_cloud(&sy.model).unwrap().len(), spec.point_count());
    assert_eq!(read_cloud(&sy.observed).unwrap().len(), spec.point_count());
}

#[test]
fn synth_then_register_matches_in_memory_run() {
    let sy = synth("csv", "xyz");
    let report_path = sy.dir.path().join("report.json");
    let out = kentreg(&[
        "register",
        s(&sy.model),
        s(&sy.observed),
        "--gt",
        s(&sy.gt),
        "--downsample",
        "0.5",
        "--seed",
        "3",
        "--out",
        s(&report_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let report = RunReport::from_json(&fs::read_to_string(&report_path).unwrap()).unwrap();

    // the same pipeline without touching disk
    let cfg = SceneConfig::parse(SCENE).unwrap();
    let spec = cfg.scene_spec().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_true = random_transform(
        &mut rng,
        cfg.transform.max_rotation_deg.to_radians(),
        cfg.transform.max_translation,
    );
    let (model, observed) = make_pair(&spec, &t_true).unwrap();
    let pipeline = PipelineArgs {
        k_neighbors: 15,
        clusters: 4,
        pi0: 0.1,
        averaging: kentreg_cli::Averaging::Joint,
        cluster_mode: kentreg_cli::Clustering::Independent,
        max_normals: 2000,
        trim_fraction: None,
    };
    let reg = pipeline.registration(3);
    let m = downsample(&model.cloud, 0.5, 3).unwrap();
    let o = downsample(&observed.cloud, 0.5, 3).unwrap();
    let direct = register(&m, &o, &reg).unwrap();

    let from_file = report.transform.to_transform().unwrap();
    let a = from_file.to_row_major();
    let b = direct.transform.to_row_major();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
    }
    assert_eq!(report.q_trace.len(), direct.q_trace.len());

    let e_r = report.e_r.expect("ground truth given");
    let e_t = report.e_t.expect("ground truth given");
    assert!((e_r - rotation_error(&t_true.rotation, &direct.transform.rotation)).abs() < 1e-9);
    assert!((e_t - translation_error(&t_true.translation, &direct.transform.translation)).abs() < 1e-9);
    assert!(e_r.to_degrees() < 1.0, "e_R {e_r}");
}

#[test]
fn identical_files_give_identity() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("clean.toml");
    fs::write(&scene, "seed = 4\nnoise_sigma = 0.0\npoints_per_plane = 3000\n").unwrap();
    let (model, unused, unused_gt) = (dir.path().join("m.xyz"), dir.path().join("o.xyz"), dir.path().join("g.txt"));
    assert!(kentreg(&["synth", s(&scene), s(&model), s(&unused), s(&unused_gt)]).status.success());
    let identity = dir.path().join("identity.txt");
    fs::write(&identity, "1 0 0\n0 1 0\n0 0 1\n0 0 0\n").unwrap();
    let copy = dir.path().join("copy.xyz");
    fs::copy(&model, &copy).unwrap();
    let out = kentreg(&["register", s(&model), s(&copy), "--gt", s(&identity)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert!(report.e_r.unwrap() < 1e-3, "{:?}", report.e_r);
    assert!(report.e_t.unwrap() < 1e-6, "{:?}", report.e_t);
}

#[test]
fn report_without_ground_truth_has_no_error_fields() {
    let sy = synth("xyz", "xyz");
    let out = kentreg(&["register", s(&sy.model), s(&sy.observed)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("\"e_R\"") && !text.contains("\"e_t\""));
    let report = RunReport::from_json(&text).unwrap();
    assert!(!report.q_trace.is_empty());
    assert_eq!(report.points.model_used, (0.1 * report.points.model_loaded as f64).round() as usize);
}

#[test]
fn missing_file_exits_2_without_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let missing = dir.path().join("nope.xyz");
    let out = kentreg(&["register", s(&missing), s(&missing), "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_path.exists());
    assert!(out.stdout.is_empty());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("nope.xyz"));
}

#[test]
fn parse_error_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xyz");
    fs::write(&bad, "1 2 3\n4 five 6\n").unwrap();
    let out = kentreg(&["register", s(&bad), s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 2"));

    let scene = dir.path().join("scene.toml");
    fs::write(&scene, "trials = [").unwrap();
    assert_eq!(kentreg(&["benchmark", s(&scene)]).status.code(), Some(3));
}

#[test]
fn too_few_points_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.xyz");
    fs::write(&tiny, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    let out = kentreg(&["register", s(&tiny), s(&tiny), "--downsample", "1"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    assert_eq!(kentreg(&["register"]).status.code(), Some(64));
    assert_eq!(kentreg(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(kentreg(&["--help"]).status.code(), Some(0));
    assert_eq!(kentreg(&["--version"]).status.code(), Some(0));
}

#[test]
fn benchmark_csv_has_one_row_per_run_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.toml");
    fs::write(&scene, "noise_sigma = 0.005\npoints_per_plane = 300\n").unwrap();
    let csv_path = dir.path().join("rows.csv");
    let args = [
        "benchmark",
        s(&scene),
        "--fractions",
        "0,0.2",
        "--trials",
        "3",
        "--seed",
        "8",
        "--jobs",
        "2",
        "--max-normals",
        "300",
    ];
    let mut with_out = args.to_vec();
    with_out.extend(["--out", s(&csv_path)]);
    let out = kentreg(&with_out);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv_path).unwrap();

    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["outlier_fraction", "method", "trial", "e_R", "e_t"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(text.lines().count(), 13);
    for r in &rows {
        assert!(["0", "0.2"].contains(&&r[0]));
        assert!(["kent", "icp"].contains(&&r[1]));
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
        assert!(r[4].parse::<f64>().unwrap() >= 0.0);
    }
    // clean scenes register well with both methods
    for r in rows.iter().filter(|r| &r[0] == "0") {
        assert!(r[3].parse::<f64>().unwrap().to_degrees() < 1.0, "{r:?}");
    }

    let mut single = args.to_vec();
    single[9] = "1";
    let again = kentreg(&single);
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn synth_respects_seed_flag() {
    let sy = synth("xyz", "xyz");
    let other = sy.dir.path().join("gt2.txt");
    let m = sy.dir.path().join("m2.xyz");
    let o = sy.dir.path().join("o2.xyz");
    let run = |seed: &str| {
        let out = kentreg(&["synth", s(&sy.scene), s(&m), s(&o), s(&other), "--seed", seed]);
        assert!(out.status.success());
        fs::read_to_string(&other).unwrap()
    };
    assert_eq!(run("21"), fs::read_to_string(&sy.gt).unwrap());
    assert_ne!(run("22"), fs::read_to_string(&sy.gt).unwrap());
}
