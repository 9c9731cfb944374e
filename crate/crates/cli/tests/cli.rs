use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mvgs::loss::psnr;
use mvgs::sceneio::{load_dataset, read_png, save_checkpoint, Checkpoint};

fn mvgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvgs(args);
    assert!(
        out.status.success(),
        "mvgs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset shared by the tests that need one.
fn dataset() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static DATA: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("scene");
        let gt = dir.path().join("gt.ply");
        ok(&[
            "synth",
            "--out",
            s(&data),
            "--seed",
            "4",
            "--kernels",
            "40",
            "--views",
            "8",
            "--size",
            "32",
            "--heldout",
            "2",
            "--ground-truth",
            s(&gt),
        ]);
        (dir, data, gt)
    })
}

const SHORT_RUN: [&str; 16] = [
    "--preset",
    "desk",
    "--iters",
    "60",
    "--coarse-iters",
    "15",
    "--pyramid",
    "2,1",
    "--views-per-iter-schedule",
    "4,2",
    "--eval-interval",
    "20",
    "--checkpoint-interval",
    "30",
    "--window",
    "8x8",
];

fn train_short(out: &Path, extra: &[&str]) -> String {
    let (_, data, _) = dataset();
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(&SHORT_RUN);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn malformed_flags_exit_with_two() {
    for args in [
        vec!["train", "--data", "d", "--out", "o", "--window", "64"],
        vec!["train", "--data", "d", "--out", "o", "--disable", "mvrl,speed"],
        vec!["train", "--data", "d", "--out", "o", "--lambda", "abc"],
        vec!["frobnicate"],
        vec!["train", "--out", "o"],
    ] {
        assert_eq!(mvgs(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unusable_configuration_exits_with_two() {
    let out = mvgs(&[
        "train",
        "--data",
        "d",
        "--out",
        "o",
        "--pyramid",
        "8,4",
        "--views-per-iter-schedule",
        "4,2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = mvgs(&[
        "train",
        "--data",
        "d",
        "--out",
        "o",
        "--iters",
        "100",
        "--coarse-iters",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = mvgs(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("o")),
        "--preset",
        "desk",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cameras.json"));
    let (_, data, gt) = dataset();
    let out = mvgs(&[
        "render",
        "--checkpoint",
        s(gt),
        "--data",
        s(data),
        "--view",
        "99",
        "--out",
        "x.png",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = mvgs(&["eval", "--checkpoint", s(&missing), "--data", s(data)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_populates_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let stdout = train_short(&out, &[]);
    assert!(stdout.contains("final held-out psnr"), "{stdout}");
    for f in [
        "config.json",
        "schedule.txt",
        "metrics.csv",
        "densify.log",
        "point_cloud.ply",
        "checkpoints/iter_30.ply",
        "renders/view_006.png",
        "renders/view_007.png",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["dataset"].as_str(), Some(s(&dataset().1)));
    assert_eq!(config["iterations"], 60);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 8));
    let last_psnr: f64 = lines[3].split(',').nth(5).unwrap().parse().unwrap();
    assert!(last_psnr.is_finite() && last_psnr > 0.0);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_short(&a, &["--deterministic", "--seed", "7"]);
    train_short(&b, &["--deterministic", "--seed", "7"]);
    for f in [
        "point_cloud.ply",
        "checkpoints/iter_30.ply",
        "densify.log",
        "config.json",
        "renders/view_006.png",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn render_agrees_with_the_training_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_short(&run, &[]);
    let (_, data, _) = dataset();
    let ds = load_dataset(data).unwrap();
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let csv_psnr: f64 = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(5)
        .unwrap()
        .parse()
        .unwrap();
    let mut total = 0.0;
    for &v in &ds.heldout {
        let png = dir.path().join(format!("v{v}.png"));
        let view = v.to_string();
        ok(&[
            "render",
            "--checkpoint",
            s(&run.join("point_cloud.ply")),
            "--data",
            s(data),
            "--view",
            &view,
            "--out",
            s(&png),
        ]);
        total += psnr(&read_png(&png).unwrap(), &ds.images[v]).unwrap();
    }
    let mean = total / ds.heldout.len() as f64;
    assert!((mean - csv_psnr).abs() <= 0.01, "render {mean} vs csv {csv_psnr}");
}

#[test]
fn render_is_repeatable_and_empty_clouds_show_background() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, gt) = dataset();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for p in [&a, &b] {
        ok(&[
            "render",
            "--checkpoint",
            s(gt),
            "--data",
            s(data),
            "--view",
            "3",
            "--out",
            s(p),
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let empty = dir.path().join("empty.ply");
    let ck = Checkpoint {
        cloud: mvgs::cloud::GaussianCloud::empty(0),
        iteration: 0,
        config_hash: String::new(),
    };
    save_checkpoint(&empty, &ck).unwrap();
    let bg = dir.path().join("bg.png");
    ok(&[
        "render",
        "--checkpoint",
        s(&empty),
        "--cameras",
        s(&data.join("cameras.json")),
        "--view",
        "0",
        "--out",
        s(&bg),
    ]);
    let img = read_png(&bg).unwrap();
    assert_eq!(img.dims(), (32, 32));
    assert!(img.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_of_ground_truth_hits_the_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, gt) = dataset();
    let csv = dir.path().join("eval.csv");
    let stdout = ok(&["eval", "--checkpoint", s(gt), "--data", s(data), "--csv", s(&csv)]);
    assert!(stdout.starts_with("psnr 99.0000 ssim 1.00000"), "{stdout}");
    ok(&["eval", "--checkpoint", s(gt), "--data", s(data), "--csv", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("checkpoint,iteration,n_gaussians,views,val_psnr,val_ssim\n"));
}

#[test]
fn eval_matches_psnr_recomputed_from_rendered_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, gt) = dataset();
    let ds = load_dataset(data).unwrap();
    // Perturb the ground truth so the score is not the sentinel.
    let mut ck = mvgs::sceneio::load_checkpoint(gt).unwrap();
    ck.cloud.positions.iter_mut().for_each(|p| p[1] += 0.03);
    let moved = dir.path().join("moved.ply");
    save_checkpoint(&moved, &ck).unwrap();
    let stdout = ok(&["eval", "--checkpoint", s(&moved), "--data", s(data)]);
    let reported: f64 = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    let mut total = 0.0;
    for &v in &ds.heldout {
        let png = dir.path().join(format!("{v}.png"));
        let view = v.to_string();
        ok(&[
            "render",
            "--checkpoint",
            s(&moved),
            "--data",
            s(data),
            "--view",
            &view,
            "--out",
            s(&png),
        ]);
        total += psnr(&read_png(&png).unwrap(), &ds.images[v]).unwrap();
    }
    assert!((reported - total / ds.heldout.len() as f64).abs() < 1e-4);
    assert!(reported < 99.0);
}

#[test]
fn random_init_evaluates_to_a_finite_score() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, _) = dataset();
    let ds = load_dataset(data).unwrap();
    let config = mvgs::config::TrainConfig::desk_scale();
    let ck = Checkpoint {
        cloud: mvgs::train::initial_cloud(&config, &ds.train_cameras()),
        iteration: 0,
        config_hash: String::new(),
    };
    let p = dir.path().join("init.ply");
    save_checkpoint(&p, &ck).unwrap();
    let stdout = ok(&["eval", "--checkpoint", s(&p), "--data", s(data)]);
    let v: f64 = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(v.is_finite() && v < 40.0, "{stdout}");
}

#[test]
fn all_toggles_off_is_single_view_flat_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("base");
    train_short(&out, &["--disable", "mvrl,crd,mvad,cig"]);
    let schedule = std::fs::read_to_string(out.join("schedule.txt")).unwrap();
    assert_eq!(schedule.trim(), "level 0 factor 1 views 1 iterations [0, 60)");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")));
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let (_, data, _) = dataset();
    let mut args = vec!["ablate", "--data", s(data), "--out", s(&out), "--seeds", "3"];
    args.extend_from_slice(&SHORT_RUN);
    ok(&args);
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let rows: Vec<mvgs::ablate::AblationRow> = reader.deserialize().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(names, ["baseline", "+mvrl", "+crd", "+mvad", "full"]);
    let budget = rows[4].view_renders;
    assert!(rows.iter().all(|r| r.view_renders == budget), "{rows:?}");

    // The baseline row is reproducible through `train` from its snapshot.
    let single = dir.path().join("single");
    let snapshot = out.join("baseline_seed3/config.json");
    ok(&[
        "train",
        "--data",
        s(data),
        "--out",
        s(&single),
        "--config",
        s(&snapshot),
    ]);
    assert_eq!(
        std::fs::read(single.join("point_cloud.ply")).unwrap(),
        std::fs::read(out.join("baseline_seed3/point_cloud.ply")).unwrap()
    );
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(snapshot).unwrap()).unwrap();
    assert_eq!(cfg["components"]["mvrl"], false);
    assert_eq!(cfg["iterations"].as_u64(), Some(rows[0].iterations as u64));
}
