//! End-to-end pipeline on a miniature configuration: gen → pretrain →
//! unlearn → attack → eval, plus config-error handling and idempotence.

mod common;

use std::path::{Path, PathBuf};

use mrplab::cli::{
    cmd_attack, cmd_eval, cmd_gen, cmd_pretrain, cmd_unlearn, load_config, Method, Mode,
    OrderSpec, RunConfig,
};
use mrplab::Error;

fn mini_config(out: &Path, method: Method) -> RunConfig {
    let mut cfg = base_config_json(out);
    cfg.method = method;
    cfg
}

fn base_config_json(out: &Path) -> RunConfig {
    let text = format!(
        r#"{{
  "seed": 1234,
  "out_dir": {out:?},
  "method": "mrp",
  "model": {{
    "vocab": 128, "d_model": 32, "n_blocks": 2, "n_heads": 2,
    "context_len": 32, "mlp_expansion": 2
  }},
  "corpus": {{
    "topics": 6, "entities_per_topic": 6, "attributes_per_topic": 8,
    "facts_per_entity": 2, "train_per_topic": 48, "test_per_topic": 16,
    "attack_per_topic": 16, "attack_fraction": 0.5
  }},
  "pretrain": {{ "lr": 0.003, "batch": 16, "max_epochs": 60, "target_acc": 0.85 }},
  "mrp": {{
    "alpha": 1.2, "lr": 0.005, "batch": 5, "epochs": 1, "init_samples": 16,
    "dims_per_task": 2, "hooked_layers": [0, 1],
    "unlearn_ce_cap": null, "reortho_every_step": true
  }},
  "ga": {{ "w_unl": 0.1, "w_ret": 1.0, "lr": 0.0005, "batch": 5, "epochs": 1, "unlearn_ce_cap": null }},
  "attack": {{ "epochs": 1, "lr": 0.0005, "batch": 5 }}
}}"#,
        out = out.display().to_string()
    );
    let path = out.join("config.json");
    std::fs::create_dir_all(out).unwrap();
    std::fs::write(&path, text).unwrap();
    load_config(&path).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("missing {}: {e}", path.display()))
}

#[test]
fn full_pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = mini_config(&out, Method::Mrp);

    cmd_gen(&cfg).unwrap();
    let corpus_file = cfg.corpus_dir().join("physics.jsonl");
    let first = read(&corpus_file);
    cmd_gen(&cfg).unwrap();
    assert_eq!(first, read(&corpus_file), "gen must be byte-idempotent");

    cmd_pretrain(&cfg).unwrap();
    let pretrained = cfg.checkpoints_dir().join("pretrained.ckpt");
    assert!(pretrained.exists());

    // Evaluating the pretrained checkpoint: upper bound equals measured
    // accuracy, so every defined topic score is exactly 1.
    let report = cmd_eval(&cfg, &pretrained).unwrap();
    for (topic, ts) in &report.topics {
        let s = ts.s.unwrap_or_else(|| panic!("undefined score for {topic}"));
        assert!(
            (s - 1.0).abs() < 1e-9,
            "pretrained S_t must be 1.0, got {s} for {topic}"
        );
    }

    cmd_unlearn(&cfg).unwrap();
    for stage in 1..=4 {
        assert!(cfg
            .checkpoints_dir()
            .join(format!("mrp_stage{stage}.ckpt"))
            .exists());
        assert!(cfg
            .reports_dir()
            .join(format!("mrp_stage{stage}.json"))
            .exists());
    }
    assert!(cfg.reports_dir().join("unlearn_log_mrp.jsonl").exists());

    cmd_attack(&cfg, None).unwrap();
    let trace = cfg.reports_dir().join("attack_trace_mrp.csv");
    let text = String::from_utf8(read(&trace)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# mrplab attack-trace"));
    assert_eq!(lines[1], "epoch,unlearn_test_acc,retain1_acc,retain2_acc");
    assert_eq!(lines.len(), 2 + cfg.attack.epochs + 1);

    let stage4 = cfg.checkpoints_dir().join("mrp_stage4.ckpt");
    let rep = cmd_eval(&cfg, &stage4).unwrap();
    assert_eq!(rep.stage, Some(4));
    assert_eq!(rep.unlearned_topics.len(), 4);
    assert!(rep.score.is_some());
    assert_eq!(rep.trainable_params, 2 * (4 * 2) * 32);
}

#[test]
fn ga_pipeline_emits_conflict_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = mini_config(&out, Method::Ga);
    cfg.unlearn_order = OrderSpec::Explicit(vec![
        "biology".into(),
        "chemistry".into(),
        "physics".into(),
        "earth_science".into(),
    ]);
    cmd_gen(&cfg).unwrap();
    cmd_pretrain(&cfg).unwrap();
    cmd_unlearn(&cfg).unwrap();
    for stage in [1, 2] {
        let path = cfg.reports_dir().join(format!("conflict_stage{stage}.csv"));
        let text = String::from_utf8(read(&path)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "block,cosine");
        assert_eq!(lines.len(), 2 + cfg.model.n_blocks);
    }
    // GA stage checkpoints carry no hooks.
    let (model, meta) =
        mrplab::nanomodel::load_checkpoint(&cfg.checkpoints_dir().join("ga_stage1.ckpt")).unwrap();
    assert!(model.hooks.is_empty());
    assert_eq!(meta.method.as_deref(), Some("ga"));
}

#[test]
fn combined_mode_reports_score_all() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = mini_config(&out, Method::Mrp);
    cfg.mode = Mode::Combined;
    cmd_gen(&cfg).unwrap();
    cmd_pretrain(&cfg).unwrap();
    cmd_unlearn(&cfg).unwrap();
    let report_path = cfg.reports_dir().join("mrp_stage1.json");
    let report: mrplab::evalkit::ScoreReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.score_all.is_some());
    assert_eq!(report.unlearned_topics.len(), 4);
    // Single combined request: rank grows once.
    assert_eq!(report.trainable_params, 2 * 2 * 32);
}

#[test]
fn config_errors_name_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");

    // missing required key: seed
    std::fs::write(&path, r#"{ "method": "mrp" }"#).unwrap();
    match load_config(&path) {
        Err(Error::Config { msg, .. }) => assert!(msg.contains("seed"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }

    // unknown key is rejected and named
    std::fs::write(
        &path,
        r#"{ "seed": 1, "method": "mrp", "typo_key": 3 }"#,
    )
    .unwrap();
    match load_config(&path) {
        Err(Error::Config { msg, .. }) => assert!(msg.contains("typo_key"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }

    // nested invalid value reports its path
    std::fs::write(
        &path,
        r#"{ "seed": 1, "method": "mrp", "mrp": { "alpha": "high" } }"#,
    )
    .unwrap();
    match load_config(&path) {
        Err(Error::Config { path: p, .. }) => assert!(p.contains("mrp"), "{p}"),
        other => panic!("expected config error, got {other:?}"),
    }

    // semantic validation: alpha must exceed 1
    std::fs::write(
        &path,
        r#"{ "seed": 1, "method": "mrp", "mrp": { "alpha": 0.5, "lr": 2e-4, "batch": 5,
             "epochs": 2, "init_samples": 200, "dims_per_task": 2,
             "hooked_layers": [2, 3], "unlearn_ce_cap": null, "reortho_every_step": true } }"#,
    )
    .unwrap();
    assert!(load_config(&path).is_err());
}

#[test]
fn cli_binary_interface_parses_and_fails_cleanly() {
    // Bad config path → nonzero exit through the argument entry point.
    let code = mrplab::cli::run(["mrplab", "gen", "--config", "/nonexistent/x.json"]);
    assert_eq!(code, 1);
    let code = mrplab::cli::run(["mrplab", "bogus-subcommand"]);
    assert_eq!(code, 2);
}

#[test]
fn seed_and_out_overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let cfg = mini_config(&out_a, Method::Mrp);
    let cfg_path = out_a.join("config.json");

    let out_b: PathBuf = dir.path().join("b");
    let code = mrplab::cli::run([
        "mrplab".to_string(),
        "gen".to_string(),
        "--config".to_string(),
        cfg_path.display().to_string(),
        "--out".to_string(),
        out_b.display().to_string(),
    ]);
    assert_eq!(code, 0);
    assert!(out_b.join("corpus/meta.json").exists());

    // Different seed ⇒ different corpus bytes.
    let code = mrplab::cli::run([
        "mrplab".to_string(),
        "gen".to_string(),
        "--config".to_string(),
        cfg_path.display().to_string(),
        "--seed".to_string(),
        "999".to_string(),
    ]);
    assert_eq!(code, 0);
    let a = std::fs::read(out_b.join("corpus/physics.jsonl")).unwrap();
    let b = std::fs::read(cfg.corpus_dir().join("physics.jsonl")).unwrap();
    assert_ne!(a, b);
}
