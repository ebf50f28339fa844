use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use sha2::{Digest, Sha256};
use xdseg::data::{load_volume, save_volume, Manifest, Volume, VolumeKind};
use xdseg_cli::{
    cmd_analyze, cmd_eval, cmd_synth, cmd_train, load_unet, CliError, ExperimentConfig, Overrides, Predictor,
};

fn xdseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Small two-domain dataset and a tiny network so runs take seconds.
fn small_config() -> serde_json::Value {
    json!({
        "seed": 5,
        "out": "data",
        "manifest": "data/manifest.json",
        "slice_context": 1,
        "unet": {"levels": 2, "base_channels": 4},
        "discriminator": {"widths": [4, 8]},
        "train": {"iterations": 4, "batch_size": 2},
        "analyze": {"kernels": 3, "bins": 8, "max_slices_per_domain": 3},
        "synth": {
            "domains": [
                {"name": "ct", "class_means": [-60, 50], "class_stds": [12, 12], "noise_std": 20,
                 "blur_sigma": 0.6, "anisotropy": 1, "bias_field": 0},
                {"name": "mr", "class_means": [250, 510], "class_stds": [35, 35], "noise_std": 50,
                 "blur_sigma": 1.0, "anisotropy": 3, "bias_field": 0.3}
            ],
            "volumes_per_domain": 3,
            "test_per_domain": 1,
            "extents": [16, 16, 4]
        }
    })
}

fn config(dir: &Path, set: &[&str]) -> ExperimentConfig {
    let overrides = Overrides {
        set: set.iter().map(|s| s.to_string()).collect(),
        ..Overrides::default()
    };
    ExperimentConfig::from_value(small_config(), dir, &overrides).unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&small_config()).unwrap()).unwrap();
    path
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn synth(dir: &Path) -> ExperimentConfig {
    let c = config(dir, &[]);
    cmd_synth(&c).unwrap();
    c
}

fn run_config(dir: &Path, run: &str, set: &[&str]) -> ExperimentConfig {
    let mut c = config(dir, set);
    c.out = dir.join(run);
    c
}

#[test]
fn synth_writes_volumes_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let names = files(&dir.path().join("data"));
    assert_eq!(names.iter().filter(|n| n.ends_with("_label.xdv")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.ends_with(".xdv")).count(), 12);
    assert!(names.contains(&"manifest.json".to_string()));
    let m = Manifest::load(dir.path().join("data/manifest.json")).unwrap();
    assert_eq!(m.split(xdseg::data::Split::Test).count(), 2);

    let again = tempfile::tempdir().unwrap();
    synth(again.path());
    for n in &names {
        assert_eq!(
            digest(&dir.path().join("data").join(n)),
            digest(&again.path().join("data").join(n)),
            "{n}"
        );
    }
}

#[test]
fn synth_without_specs_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), &[]);
    c.synth = None;
    assert_eq!(cmd_synth(&c).unwrap_err().exit_code(), 2);
    let mut one = config(dir.path(), &[]);
    one.synth.as_mut().unwrap().domains.truncate(1);
    assert_eq!(cmd_synth(&one).unwrap_err().exit_code(), 2);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn reference_predictions_score_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let c = run_config(dir.path(), "oracle", &[]);
    let summary = cmd_eval(&c, &Predictor::Reference).unwrap();
    assert_eq!(summary.overall, 100.0);
    assert_eq!(summary.volumes.len(), 2);
    for (domain, g) in &summary.domains {
        let own: Vec<_> = summary.volumes.iter().filter(|v| &v.domain == domain).collect();
        let mean = own.iter().map(|v| v.overall).sum::<f64>() / own.len() as f64;
        assert_eq!(g.overall, mean);
    }
    let table = std::fs::read_to_string(dir.path().join("oracle/reports/eval.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "domain,VO,RVD,ASSD,RMSD,MSSD,overall");
    assert_eq!(table.lines().last().unwrap(), "average,100,100,100,100,100,100");

    let background = cmd_eval(&run_config(dir.path(), "bg", &[]), &Predictor::Background).unwrap();
    assert!(background.overall < 100.0);
}

#[test]
fn train_eval_analyze_round() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let c = run_config(dir.path(), "run", &["train.checkpoint_every=2"]);
    let runs = cmd_train(&c).unwrap();
    assert_eq!(runs, vec![c.out.clone()]);
    assert_eq!(files(&c.out), vec!["checkpoints", "config.json", "losses.csv", "reports"]);
    assert_eq!(
        files(&c.checkpoints_dir()),
        vec![
            "discriminator-000002.ckpt",
            "discriminator-000004.ckpt",
            "discriminator.ckpt",
            "unet-000002.ckpt",
            "unet-000004.ckpt",
            "unet.ckpt"
        ]
    );
    let losses = std::fs::read_to_string(c.out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().next().unwrap(), "iteration,l_cls,l_gen,l_disc,l_total,n_ct,n_mr");
    assert_eq!(losses.lines().count(), 5);
    let echoed = ExperimentConfig::load(Some(&c.out.join("config.json")), &Overrides::default()).unwrap();
    assert_eq!(echoed, c);

    let unet = load_unet(&c, &c.default_checkpoint()).unwrap();
    let summary = cmd_eval(&c, &Predictor::Model(Box::new(unet.clone()))).unwrap();
    assert!((0.0..=100.0).contains(&summary.overall));
    let pred = load_volume(c.reports_dir().join("predictions/ct-002.xdv")).unwrap();
    assert_eq!(pred.kind(), VolumeKind::Label);

    let analysis = cmd_analyze(&c, &unet).unwrap();
    assert!(analysis.sparsity.iter().all(|r| (0.0..=1.0).contains(&r.sparsity)));
    assert_eq!(analysis.sparsity.len(), 2 * unet.blocks().len());
    assert_eq!(analysis.histograms.len(), 3 * 2);
    for h in &analysis.histograms {
        // 3 slices per domain; level-k blocks see (16 / 2^k)² pixels.
        let side = 16 >> unet_level(&h.kernel.layer);
        assert_eq!(h.histogram.total(), (3 * side * side) as u64, "{}", h.kernel.layer);
    }
    let again = cmd_analyze(&c, &unet).unwrap();
    assert_eq!(again, analysis);
    assert!(c.reports_dir().join("histograms.csv").is_file());
}

/// Resolution level of a block of the two-level test U-Net, e.g. `enc1.0` → 1.
fn unet_level(name: &str) -> usize {
    let digits: String = name.chars().skip_while(|c| !c.is_ascii_digit()).take_while(char::is_ascii_digit).collect();
    if name.starts_with("bottleneck") {
        2
    } else {
        digits.parse().unwrap()
    }
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let c = run_config(dir.path(), "run", &["train.iterations=1"]);
    cmd_train(&c).unwrap();
    let wider = run_config(dir.path(), "run", &["slice_context=2"]);
    let err = Predictor::from_checkpoint(&wider, &c.default_checkpoint()).err().unwrap();
    assert!(matches!(err, CliError::Contract(_)), "{err}");
    let missing = Predictor::from_checkpoint(&c, &dir.path().join("nope.ckpt")).err().unwrap();
    assert_eq!(missing.exit_code(), 3);
}

#[test]
fn sweep_over_slice_context_creates_one_run_each() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let c = run_config(
        dir.path(),
        "sweep",
        &["sweep.slice_context=[0,1]", "train.iterations=1", "train.adv_weight=0", "norm.order=post"],
    );
    let runs = cmd_train(&c).unwrap();
    assert_eq!(
        runs,
        vec![dir.path().join("sweep/t0-post-bn-nocan"), dir.path().join("sweep/t1-post-bn-nocan")]
    );
    for r in &runs {
        assert!(r.join("checkpoints/unet.ckpt").is_file());
    }
}

#[test]
fn binary_commands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = xdseg(&["synth", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = xdseg(&["train", "--config", cfg, "--set", "norm.kind=group"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch") && err.contains("instance"), "{err}");

    let run = dir.path().join("run");
    let run = run.to_str().unwrap();
    let out = xdseg(&["train", "--config", cfg, "--out", run, "--set", "train.iterations=2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = xdseg(&["eval", "--config", cfg, "--out", run]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("domain,VO,RVD,ASSD,RMSD,MSSD,overall"));
    let out = xdseg(&["eval", "--config", cfg, "--out", run, "--baseline", "reference"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("average,100,100,100,100,100,100"));
    let out = xdseg(&["analyze", "--config", cfg, "--out", run]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = xdseg(&["eval", "--config", cfg, "--out", run, "--checkpoint", "/nonexistent.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    let out = xdseg(&["eval", "--config", cfg, "--out", run, "--set", "slice_context=0"]);
    assert_eq!(out.status.code(), Some(2));
}

fn cube(ext: [usize; 3], lo: [usize; 3], side: usize) -> Volume {
    let mut v = vec![0.0; ext[0] * ext[1] * ext[2]];
    for z in lo[2]..lo[2] + side {
        for y in lo[1]..lo[1] + side {
            for x in lo[0]..lo[0] + side {
                v[x + ext[0] * (y + ext[1] * z)] = 1.0;
            }
        }
    }
    Volume::new(ext, [1.0; 3], VolumeKind::Label, v).unwrap()
}

#[test]
fn metrics_command() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    save_volume(&cube([8, 8, 8], [1, 1, 1], 4), p("a.xdv")).unwrap();
    save_volume(&cube([8, 8, 8], [3, 1, 1], 4), p("b.xdv")).unwrap();
    save_volume(&cube([8, 8, 9], [1, 1, 1], 4), p("c.xdv")).unwrap();
    std::fs::write(p("junk.xdv"), b"not a volume").unwrap();

    let out = xdseg(&["metrics", "--seg", &p("a.xdv"), "--ref", &p("a.xdv")]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["vo"], 100.0);
    assert_eq!(report["assd_mm"], 0.0);
    assert_eq!(report["mssd_mm"], 0.0);

    let out = xdseg(&["metrics", "--seg", &p("b.xdv"), "--ref", &p("a.xdv")]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["vo"].as_f64().unwrap() - 100.0 / 3.0).abs() < 1e-9);

    let out = xdseg(&["metrics", "--seg", &p("c.xdv"), "--ref", &p("a.xdv")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let out = xdseg(&["metrics", "--seg", &p("junk.xdv"), "--ref", &p("a.xdv")]);
    assert_eq!(out.status.code(), Some(3));
    let out = xdseg(&["metrics", "--seg", &p("missing.xdv"), "--ref", &p("a.xdv")]);
    assert_eq!(out.status.code(), Some(3));
}
