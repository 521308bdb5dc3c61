use std::fs;
use std::path::{Path, PathBuf};

use dvcc_cli::{exit, main_with_args};
use serde_json::Value;

/// A corpus and models small enough for a whole pipeline in seconds.
const TINY: &[&str] = &[
    "corpus.num_train=12",
    "corpus.num_valid=4",
    "corpus.num_test=24",
    "corpus.min_duration_s=0.5",
    "corpus.max_duration_s=0.6",
    "teacher.width=16",
    "teacher.layers=2",
    "teacher.codebook_size=8",
    "teacher.code_dim=8",
    "teacher_train.epochs=1",
    "teacher_train.steps_per_epoch=2",
    "teacher_train.batch_size=2",
    "student.size=small",
    "distill.layers=0..2",
    "distill.epochs=2",
    "distill.steps_per_epoch=2",
    "distill.batch_size=3",
    "finetune.epochs=2",
    "finetune.steps_per_epoch=2",
    "finetune.batch_size=4",
];

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn dvcc(dir: &Path, cmd: &str, extra: &[&str]) -> Out {
    let mut args = vec!["dvcc".to_string(), cmd.to_string(), "--out".into(), dir.display().to_string()];
    for s in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = main_with_args(args, &mut o, &mut e);
    Out {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn ok(dir: &Path, cmd: &str, extra: &[&str]) -> String {
    let r = dvcc(dir, cmd, extra);
    assert_eq!(r.code, exit::OK, "{cmd} failed: {}", r.stderr);
    r.stdout
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// gen-data and a frozen teacher in `dir`.
fn prepared(dir: &Path) {
    ok(dir, "gen-data", &[]);
    ok(dir, "pretrain-teacher", &[]);
}

#[test]
fn unknown_command_and_key_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = dvcc(dir.path(), "train-everything", &[]);
    assert_eq!(r.code, exit::INVALID);
    let r = dvcc(dir.path(), "gen-data", &["distill.gamma_typo=1"]);
    assert_eq!(r.code, exit::INVALID);
    assert!(r.stderr.contains("distill.gamma_typo"), "{}", r.stderr);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn bad_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let r = dvcc(dir.path(), "gen-data", &["distill.variant=triple_view"]);
    assert_eq!(r.code, exit::INVALID);
    assert!(r.stderr.contains("distill.variant"), "{}", r.stderr);
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = dvcc(dir.path(), "pretrain-teacher", &[]);
    assert_eq!(r.code, exit::INVALID);
    assert!(r.stderr.contains("paths.data"), "{}", r.stderr);
    ok(dir.path(), "gen-data", &[]);
    let r = dvcc(dir.path(), "distill", &[]);
    assert_eq!(r.code, exit::INVALID);
    assert!(r.stderr.contains("paths.teacher"), "{}", r.stderr);
}

#[test]
fn config_file_then_overrides_then_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("x.conf");
    fs::write(&conf, "# comment\nseed = 5\ndistill.variant = batch_view\n").unwrap();
    let args = [
        "dvcc", "gradcheck", "--config", conf.to_str().unwrap(), "--set", "distill.variant=combined", "--seed", "9",
    ];
    let cli = <dvcc_cli::Cli as clap::Parser>::try_parse_from(args).unwrap();
    let cfg = dvcc_cli::load_config(&cli).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.get("distill.variant").unwrap(), "combined");
}

#[test]
fn gradcheck_passes_and_lists_every_loss() {
    let dir = tempfile::tempdir().unwrap();
    let r = dvcc(dir.path(), "gradcheck", &[]);
    assert_eq!(r.code, exit::OK, "{}{}", r.stdout, r.stderr);
    for name in ["framewise_l1cos", "utterance_l1cos", "feature_view", "batch_view", "dual_view", "tcode", "combined"] {
        assert!(r.stdout.contains(name), "{name} missing from\n{}", r.stdout);
    }
    assert!(dir.path().join("manifest-gradcheck.json").exists());
}

#[test]
fn full_pipeline_self_comparison_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        prepared(d);
        ok(d, "distill", &["distill.variant=dual_view"]);
        ok(d, "finetune", &[]);
    }
    for f in [
        "data/train.corpus",
        "data/test.corpus",
        "teacher.ckpt",
        "student.ckpt",
        "model.ckpt",
        "distill_loss.csv",
        "layer_weights.csv",
        "manifest-gen-data.json",
        "manifest-distill.json",
        "manifest-finetune-model.json",
    ] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f} differs");
    }

    let d = a.path();
    assert!(!d.join("student.ckpt.state").exists());
    let out = ok(d, "eval", &["paths.baseline=model.ckpt"]);
    assert!(out.contains("relative_far"));
    let report = json(&d.join("eval_report.json"));
    let conds = report["conditions"].as_array().unwrap();
    assert_eq!(conds.len(), 2);
    for c in conds {
        let rel = &c["relative_far"];
        assert!(rel == "undefined" || rel.as_f64() == Some(1.0), "{rel}");
        assert!(c["counts"]["fp"].is_u64());
        let det = fs::read_to_string(d.join(format!("det_{}.csv", c["condition"].as_str().unwrap()))).unwrap();
        assert!(det.starts_with("threshold,frr,far\n"));
    }

    let manifest = json(&d.join("manifest-distill.json"));
    assert_eq!(manifest["command"], "distill");
    assert_eq!(manifest["config"]["distill.variant"], "dual_view");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(!manifest["version"].as_str().unwrap().is_empty());
    let digests = manifest["artifacts"].as_object().unwrap();
    let expected = dvcc_core::fsio::sha256_file(&d.join("student.ckpt")).unwrap();
    assert_eq!(digests["student.ckpt"], expected.as_str());

    let weights = fs::read_to_string(d.join("layer_weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 1 + 3);
    ok(d, "export-weights", &[]);
    assert_eq!(fs::read_to_string(d.join("layer_weights_student.csv")).unwrap(), weights);
}

#[test]
fn distill_twice_gives_identical_manifest() {
    let d = tempfile::tempdir().unwrap();
    prepared(d.path());
    ok(d.path(), "distill", &["distill.variant=dual_view"]);
    let first = read(d.path().join("manifest-distill.json"));
    ok(d.path(), "distill", &["distill.variant=dual_view"]);
    assert_eq!(read(d.path().join("manifest-distill.json")), first);
}

#[test]
fn resumed_distill_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    prepared(full.path());
    ok(full.path(), "distill", &["distill.variant=combined"]);

    let part = tempfile::tempdir().unwrap();
    prepared(part.path());
    ok(part.path(), "distill", &["distill.variant=combined", "distill.epochs=1"]);
    // an interrupted run leaves exactly this behind at the epoch boundary
    fs::rename(part.path().join("student.ckpt"), part.path().join("student.ckpt.state")).unwrap();
    fs::rename(part.path().join("distill_loss.csv"), part.path().join("student.ckpt.state.csv")).unwrap();
    ok(part.path(), "distill", &["distill.variant=combined"]);

    for f in ["student.ckpt", "distill_loss.csv", "manifest-distill.json"] {
        assert_eq!(read(full.path().join(f)), read(part.path().join(f)), "{f} differs");
    }
    assert!(!part.path().join("student.ckpt.state").exists());
}

#[test]
fn baseline_finetune_needs_no_student() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), "gen-data", &[]);
    ok(d.path(), "finetune", &["finetune.init=random", "paths.model=baseline.ckpt"]);
    assert!(d.path().join("baseline.ckpt").exists());
    assert!(d.path().join("baseline_finetune_log.csv").exists());
    assert!(d.path().join("manifest-finetune-baseline.json").exists());
    let r = dvcc(d.path(), "finetune", &[]);
    assert_eq!(r.code, exit::INVALID);
    assert!(r.stderr.contains("paths.student"), "{}", r.stderr);
}

#[test]
fn diverging_training_is_a_runtime_failure() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), "gen-data", &[]);
    let r = dvcc(d.path(), "finetune", &["finetune.init=random", "finetune.lr=1e300"]);
    assert_eq!(r.code, exit::RUNTIME, "{}", r.stderr);
    assert!(!d.path().join("model.ckpt").exists());
}

#[test]
fn teacher_with_other_config_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    prepared(d.path());
    let r = dvcc(d.path(), "distill", &["teacher.layers=3"]);
    assert_eq!(r.code, exit::INVALID);
    assert!(r.stderr.contains("teacher"), "{}", r.stderr);
}

#[test]
fn help_exits_zero() {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    assert_eq!(main_with_args(["dvcc", "--help"], &mut o, &mut e), exit::OK);
    assert!(String::from_utf8(o).unwrap().contains("gen-data"));
}
