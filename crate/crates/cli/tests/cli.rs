use std::path::Path;
use std::process::Command;

use cascade_rec::data::synthetic::{sparse_log, SparseLogConfig};
use cascade_rec::data::Split;
use cascade_rec_cli::{cmd_attack, cmd_eval, cmd_sweep_epsilon, cmd_train, ErrorRecord, ExperimentConfig, Resolved};
use serde_json::Value;

fn tiny(dir: &Path, extra: &[&str]) -> Resolved {
    let mut o: Vec<String> = [
        "synthetic_users=120",
        "synthetic_items=80",
        "dim=8",
        "max_len=8",
        "blocks=1",
        "base_epochs=2",
        "adv_epochs=1",
        "batch_size=32",
        "eval_every=1",
        "epsilon=0.5",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("output_dir={}", dir.display()));
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(None, &o).unwrap()
}

fn log_lines(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn defaults_follow_the_training_protocol() {
    let c = ExperimentConfig::default();
    assert_eq!((c.dim, c.batch_size, c.base_epochs, c.adv_epochs), (100, 128, 500, 100));
    assert_eq!((c.lr, c.dropout, c.l2, c.epsilon, c.lambda1, c.lambda2), (0.001, 0.2, 1e-5, 10.0, 1.0, 1.0));
    let r = ExperimentConfig::load(None, &[]).unwrap();
    assert_eq!(r.config.max_len, 50);
    let ml = ExperimentConfig::load(None, &["dataset=ratings.dat".into(), "format=movielens".into()]).unwrap();
    assert_eq!(ml.config.max_len, 200);
}

#[test]
fn file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.conf");
    std::fs::write(&path, "# comment\ndim = 16\nmode = adv_global  # trailing\nepsilon = 3\n").unwrap();
    let r = ExperimentConfig::load(Some(&path), &["epsilon=7".into()]).unwrap();
    assert_eq!(r.config.dim, 16);
    assert_eq!(r.config.mode, "adv_global");
    assert_eq!(r.config.epsilon, 7.0);
}

#[test]
fn every_violation_is_reported_at_once() {
    let err = ExperimentConfig::load(
        None,
        &[
            "dim=0".into(),
            "epsilon=-1".into(),
            "model=bert".into(),
            "colour=blue".into(),
            "batch_size=many".into(),
            "dropout=1.5".into(),
        ],
    )
    .unwrap_err();
    let all = err.0.join("\n");
    for needle in ["dim", "epsilon", "model", "colour", "batch_size", "dropout"] {
        assert!(all.contains(needle), "missing {} in {}", needle, all);
    }
    assert_eq!(err.0.len(), 6, "{}", all);
}

#[test]
fn fingerprint_tracks_experiment_fields_only() {
    let a = ExperimentConfig::load(None, &["output_dir=a".into()]).unwrap().config;
    let b = ExperimentConfig::load(None, &["output_dir=b".into()]).unwrap().config;
    let c = ExperimentConfig::load(None, &["epsilon=9".into()]).unwrap().config;
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
    assert_eq!(a.fingerprint().len(), 64);
}

#[test]
fn base_mode_logs_only_phase_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = tiny(dir.path(), &["mode=base", "adv_epochs=0"]);
    let out = cmd_train(&r).unwrap();
    let lines = log_lines(dir.path());
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["phase"] == 1 && l["mode"] == "base"));
    for key in ["epoch", "L_B", "L_adv1", "L_adv2", "valid_NDCG@10", "valid_HT@10", "wall_seconds", "fingerprint"] {
        assert!(lines[0].get(key).is_some(), "{}", key);
    }
    assert_eq!(lines[1]["fingerprint"], Value::String(out.fingerprint.clone()));
    for f in ["config.json", "checkpoint.json", "base_checkpoint.json", "metrics.json"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.contains(&out.fingerprint), "{} lacks the fingerprint", f);
    }
}

#[test]
fn eval_of_a_fresh_checkpoint_matches_the_last_validation_record() {
    let dir = tempfile::tempdir().unwrap();
    let r = tiny(dir.path(), &["mode=adv_cas"]);
    cmd_train(&r).unwrap();
    let last = log_lines(dir.path()).pop().unwrap();
    let report = cmd_eval(&r, &dir.path().join("checkpoint.json"), Split::Validation).unwrap();
    assert_eq!(last["valid_NDCG@10"].as_f64().unwrap().to_bits(), report.ndcg.to_bits());
    assert_eq!(last["valid_HT@10"].as_f64().unwrap().to_bits(), report.hit.to_bits());
}

#[test]
fn adversarial_run_resumes_from_a_base_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(&dir.path().join("base"), &["mode=base"]);
    cmd_train(&base).unwrap();
    let ckpt = dir.path().join("base").join("base_checkpoint.json");
    let adv = tiny(&dir.path().join("adv"), &["mode=adv_cas", "adv_epochs=2", &format!("resume_from={}", ckpt.display())]);
    cmd_train(&adv).unwrap();
    let lines = log_lines(&dir.path().join("adv"));
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["phase"] == 2 && l["mode"] == "adv_cas"));
    assert_eq!(lines[0]["epoch"], 3);
}

#[test]
fn sweep_emits_one_row_per_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let r = tiny(dir.path(), &["mode=adv_cas"]);
    let rows = cmd_sweep_epsilon(&r, &[0.1, 1.0, 10.0, 30.0, 50.0]).unwrap();
    assert_eq!(rows.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    // phase 1 ran once and every epsilon started from it
    for eps in ["0.1", "1", "10", "30", "50"] {
        let lines = log_lines(&dir.path().join(format!("eps_{}", eps)));
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0]["phase"], 2);
    }
}

#[test]
fn attack_tables() {
    let dir = tempfile::tempdir().unwrap();
    let r = tiny(dir.path(), &["mode=base"]);
    cmd_train(&r).unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let curve = cmd_attack(&r, &ckpt, "last_k", 5, 1.0, false).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[1].starts_with("1,") && rows[5].starts_with("5,"));
    let last = cmd_attack(&r, &ckpt, "last", 5, 1.0, true).unwrap();
    assert!(last.lines().nth(1).unwrap().starts_with("last,"));
    assert!(cmd_attack(&r, &ckpt, "sideways", 5, 1.0, false).is_err());
}

#[test]
fn checkpoint_for_another_catalog_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let r = tiny(dir.path(), &["mode=base"]);
    cmd_train(&r).unwrap();
    let other = tiny(dir.path(), &["synthetic_items=60"]);
    let err = cmd_eval(&other, &dir.path().join("checkpoint.json"), Split::Test).unwrap_err();
    assert!(err.to_string().contains("items"), "{}", err);
    assert_eq!(ErrorRecord::from_error(&err).error, "version");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cascade-rec"))
}

#[test]
fn binary_reports_errors_as_json() {
    let out = bin().args(["train", "dim=0", "mode=nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["problems"].as_array().unwrap().len(), 2);

    let out = bin().args(["eval", "--checkpoint", "/nonexistent/ckpt.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["error"], "checkpoint");
}

#[test]
fn commands_leave_input_files_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("log.tsv");
    let log = sparse_log(&SparseLogConfig {
        users: 80,
        items: 60,
        ..Default::default()
    });
    log.write_tsv(std::fs::File::create(&data).unwrap()).unwrap();
    let before = std::fs::read(&data).unwrap();
    let out_dir = dir.path().join("run");
    let args = |cmd: &str| {
        vec![
            cmd.to_string(),
            format!("dataset={}", data.display()),
            "format=tsv".into(),
            "dim=8".into(),
            "max_len=8".into(),
            "base_epochs=1".into(),
            "mode=base".into(),
            format!("output_dir={}", out_dir.display()),
        ]
    };
    let stats = bin().args(args("dataset-stats")).output().unwrap();
    assert!(stats.status.success(), "{}", String::from_utf8_lossy(&stats.stderr));
    let summary: Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert!(summary["users"].as_u64().unwrap() > 0);
    let train = bin().args(args("train")).output().unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert_eq!(std::fs::read(&data).unwrap(), before);
}
