use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use mlr_cli::ablation::{run_ablation, Grid};
use mlr_cli::config::{load_config, parse_override, parse_pairs};
use mlr_cli::log::read_log;
use mlr_cli::plot::{emit_plots, profile_curves};
use mlr_cli::runner::checkpoint_name;
use mlr_cli::{CliError, ExperimentConfig, Trainer};
use proptest::prelude::*;

fn toy(extra: &[&str]) -> ExperimentConfig {
    let mut pairs = parse_pairs(
        "preset = desk_continuous\nseeds = [0]\ntrain.env_steps = 400\ntrain.eval_every = 200\ntrain.eval_episodes = 1\ntrain.log_every = 5\nsac.init_steps = 20\ntrain.regression_samples = 2\n",
    )
    .unwrap();
    pairs.extend(extra.iter().map(|s| parse_override(s).unwrap()));
    ExperimentConfig::resolve(&pairs).unwrap()
}

#[test]
fn empty_budget_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let s = Trainer::new(&toy(&["train.env_steps=0"]), 0, Some(dir.path())).unwrap().run().unwrap();
    assert_eq!((s.env_steps, s.updates), (0, 0));
    let mut files: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, vec![checkpoint_name(0), "config.txt".into(), "metrics.jsonl".into()]);
    assert!(read_log(&dir.path().join("metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn baseline_runs_log_no_auxiliary_loss() {
    let base = Trainer::new(&toy(&["mlr.lambda=0"]), 1, None).unwrap().run().unwrap();
    assert!(base.updates > 0);
    assert!(base.records.iter().all(|r| r.name != "mlr_loss"));
    assert!(base.records.iter().any(|r| r.name == "rl_loss"));
    let with = Trainer::new(&toy(&[]), 1, None).unwrap().run().unwrap();
    assert!(with.records.iter().any(|r| r.name == "mlr_loss"));
}

#[test]
fn metric_log_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(&[]);
    Trainer::new(&cfg, 2, Some(dir.path())).unwrap().run().unwrap();
    let log = read_log(&dir.path().join("metrics.jsonl")).unwrap();
    assert!(!log.is_empty());
    let hash = cfg.hash().unwrap();
    assert!(log.iter().all(|r| r.config_hash == hash && r.seed == 2));
    let mut last: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &log {
        let prev = last.insert(&r.split, r.step).unwrap_or(0);
        assert!(r.step >= prev, "{} step went back to {}", r.split, r.step);
    }
    let evals: Vec<u64> = log.iter().filter(|r| r.split == "eval" && r.name == "return").map(|r| r.step).collect();
    assert_eq!(evals, vec![200, 400]);
}

#[test]
fn degenerate_and_ratio_grids() {
    let base: Vec<(String, String)> = toy(&["train.env_steps=200"])
        .to_flat()
        .unwrap()
        .into_iter()
        .filter(|(k, _)| k.starts_with("train.") || k == "preset" || k == "seeds" || k == "sac.init_steps")
        .map(|(k, v)| (k, v.to_string().trim_matches('"').to_string()))
        .collect();
    let single = run_ablation(&base, &Grid::parse("mask.strategy = cube").unwrap(), None);
    assert_eq!(single.len(), 1);
    assert_eq!((single[0].seeds, single[0].error.clone()), (1, None));
    let g = Grid::parse("mask.ratio = 0.05 | 0.5 | 0.95").unwrap();
    let rows = run_ablation(&base, &g, None);
    assert_eq!(rows.len(), 3);
    for (r, ratio) in rows.iter().zip(["0.05", "0.5", "0.95"]) {
        assert_eq!(r.overrides, vec![("mask.ratio".to_string(), ratio.to_string())]);
        assert!(r.error.is_none());
    }
    let bad = run_ablation(&base, &Grid::parse("mask.strategy = cube | diagonal").unwrap(), None);
    assert!(bad[0].error.is_none());
    assert!(bad[1].error.as_deref().unwrap().contains("diagonal"));
}

#[test]
fn depth_grid_reports_decoder_sizes() {
    let g = Grid::parse("mlr.decoder_layers = 1 | 2 | 4 | 8").unwrap();
    for (cell, layers) in g.cells().iter().zip([1usize, 2, 4, 8]) {
        let cfg = ExperimentConfig::resolve(&cell[0].overrides).unwrap();
        let m = cfg.mlr_config().unwrap().unwrap();
        let n = m.decoder_layers * m.decoder_config(cfg.encoder.latent_dim).block_params();
        let reference = 20_400.0 * layers as f64;
        assert!((n as f64 - reference).abs() <= 0.01 * reference, "{layers}: {n}");
    }
}

#[test]
fn plots_from_run_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(&[]);
    let logs: Vec<_> = [0u64, 1]
        .iter()
        .map(|&s| {
            let d = dir.path().join(format!("seed-{s}"));
            Trainer::new(&cfg, s, Some(&d)).unwrap().run().unwrap();
            d.join("metrics.jsonl")
        })
        .collect();
    let (path, curves) = emit_plots(&logs, &dir.path().join("plots")).unwrap();
    assert!(std::fs::read_to_string(path).unwrap().contains("<svg"));
    assert_eq!(curves.len(), 1);
    assert_eq!(curves[0].seeds, 2);
    assert_eq!(curves[0].steps, vec![200, 400]);
    let taus: Vec<f64> = (0..21).map(|i| i as f64 / 10.0).collect();
    let prof = profile_curves(&[("a".into(), vec![vec![0.2, 1.4, 0.9], vec![0.5, 2.0, 0.0]])], &taus);
    assert!(prof[0].1.windows(2).all(|w| w[1].1 <= w[0].1));
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(matches!(emit_plots(&[empty], dir.path()), Err(CliError::EmptyLog)));
}

#[test]
fn config_files_and_presets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.cfg");
    std::fs::write(&p, "preset = discrete  # Atari settings\ntask = up_n_down\n").unwrap();
    let c = load_config(Some(&p), &[("mask.ratio".into(), "0.3".into())]).unwrap();
    assert_eq!((c.mask.cube, c.mlr.lambda, c.mask.ratio), ([8, 12, 12], 5.0, 0.3));
    assert!(matches!(load_config(Some(&dir.path().join("nope.cfg")), &[]), Err(CliError::FileNotFound(_))));
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&repo).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        match path.extension().and_then(|e| e.to_str()) {
            Some("cfg") => {
                load_config(Some(&path), &[]).unwrap();
            }
            Some("grid") => {
                for cell in Grid::parse(&text).unwrap().cells() {
                    let pairs: Vec<_> = cell.iter().flat_map(|v| v.overrides.clone()).collect();
                    ExperimentConfig::resolve(&pairs).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                }
            }
            _ => {}
        }
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mlr");
    let out = Command::new(bin).args(["config", "--set", "mask.ratio=0.3"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("mask.ratio = 0.3"));
    let out = Command::new(bin).args(["config", "--set", "mask.colour=red"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).args(["eval", "--checkpoint", "/definitely/missing.cbor"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.cbor");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = Command::new(bin).args(["eval", "--checkpoint"]).arg(&junk).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_eval_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_mlr");
    let sets = ["preset=desk_continuous", "train.env_steps=160", "train.eval_every=0", "sac.init_steps=10", "train.regression_samples=0"];
    let mut cmd = Command::new(bin);
    cmd.arg("train").arg("--seed").arg("3").arg("--out").arg(dir.path());
    for s in sets {
        cmd.args(["--set", s]);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = dir.path().join("seed-3").join(checkpoint_name(160));
    let out = Command::new(bin).args(["eval", "--episodes", "1", "--checkpoint"]).arg(&ck).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["episodes"], 1);
}

fn key_and_value() -> impl Strategy<Value = (&'static str, String)> {
    prop_oneof![
        (0.0f64..=1.0).prop_map(|x| ("mask.ratio", x.to_string())),
        (1usize..5).prop_map(|x| ("mlr.decoder_layers", x.to_string())),
        any::<bool>().prop_map(|x| ("mlr.action_tokens", x.to_string())),
        prop_oneof![Just("cube"), Just("spatial"), Just("temporal"), Just("feature")].prop_map(|s| ("mask.strategy", s.to_string())),
        (0.0f64..3.0).prop_map(|x| ("mlr.lambda", x.to_string())),
        (1u64..10).prop_map(|x| ("seeds", format!("[{x}, {}]", x + 1))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolved_configs_round_trip(sets in proptest::collection::vec(key_and_value(), 0..6)) {
        let pairs: Vec<(String, String)> = sets.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let c = ExperimentConfig::resolve(&pairs).unwrap();
        let text = c.to_text().unwrap();
        let back = ExperimentConfig::resolve(&parse_pairs(&text).unwrap()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }
}
