//! End-to-end runs of the `ppf` binary on a small configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = "\
corpus.n_train=1500
corpus.n_heldout=128
corpus.n_calib=64
train.steps=60
collect.ratios=0.1:0.5:0.1
collect.scales=0,0.25,0.5
predictor.epochs=4
agent.episodes=6
agent.window.k=3
agent.updates_per_episode=4
agent.batch=8
";

fn ppf(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ppf"));
    cmd.args(args).env_remove("PPF_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

/// Collect, train-predictor and train-agent once; tests only read from it.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = fresh_dir("cli-pipeline");
        let cfg = write_config(&dir, "");
        let (c, o) = (cfg.to_str().unwrap(), dir.to_str().unwrap());
        ok(ppf(&["--config", c, "--out", o, "collect"], &[]));
        ok(ppf(&["--config", c, "--out", o, "train-predictor"], &[]));
        ok(ppf(&["--config", c, "--out", o, "train-agent"], &[]));
        dir
    })
}

fn key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn value(text: &str, key: &str) -> String {
    key_values(text)
        .into_iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .1
}

#[test]
fn pipeline_writes_its_artifacts() {
    let dir = pipeline();
    for f in [
        "dataset.txt",
        "predictor.ckpt",
        "predictor_loss.csv",
        "predictor_test.csv",
        "predictor_metrics.txt",
        "agent.ckpt",
        "reward_curve.csv",
        "best_policies.csv",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let curve = std::fs::read_to_string(dir.join("reward_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 6);
}

#[test]
fn reported_metrics_match_the_held_out_predictions() {
    let dir = pipeline();
    let csv = std::fs::read_to_string(dir.join("predictor_test.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    let n = rows.len() as f64;
    let mae = rows.iter().map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let mse = rows.iter().map(|(t, p)| (t - p).powi(2)).sum::<f64>() / n;
    let metrics = std::fs::read_to_string(dir.join("predictor_metrics.txt")).unwrap();
    let reported = |k: &str| value(&metrics, k).parse::<f64>().unwrap();
    assert!((reported("mae") - mae).abs() < 1e-12);
    assert!((reported("mse") - mse).abs() < 1e-12);
    assert_eq!(value(&metrics, "n_test").parse::<usize>().unwrap(), rows.len());
}

#[test]
fn policy_is_served_quickly() {
    let dir = pipeline();
    let cfg = dir.join("run.cfg");
    let out = ok(ppf(
        &["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "policy", "--ratio", "0.3"],
        &[],
    ));
    assert!(value(&out, "latency_ms").parse::<f64>().unwrap() < 1000.0);
    let js: f64 = value(&out, "predicted_js").parse().unwrap();
    assert!(js.is_finite());
    let n_layers = ppf_core::model::ModelConfig::default().n_layers;
    assert_eq!(value(&out, "layer_ratios").split(',').count(), n_layers);
    assert!(!out.contains("warning="));
}

#[test]
fn ratios_outside_the_window_are_flagged() {
    let dir = pipeline();
    let cfg = dir.join("run.cfg");
    let out = ok(ppf(
        &["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "policy", "--ratio", "0.6"],
        &[],
    ));
    assert!(out.contains("warning="), "{out}");
}

#[test]
fn prune_eval_reward_is_negative_ppr() {
    let dir = fresh_dir("cli-prune-eval");
    let cfg = write_config(&dir, "");
    let args = |ratio: &'static str| {
        let (c, o) = (cfg.to_str().unwrap().to_string(), dir.to_str().unwrap().to_string());
        move || {
            ppf(
                &["--config", &c, "--out", &o, "prune-eval", "--method", "lod", "--a-eta", "0.3", "--ratio", ratio],
                &[],
            )
        }
    };
    ok(args("0.3")());
    ok(args("0.5")());
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "method,a_eta,s_tar,r_act,js,ppr,reward,wall_time_ms");
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        let (r_act, js, reward): (f64, f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap(), f[6].parse().unwrap());
        assert_eq!(f[0], "lod");
        assert!((reward + js / r_act).abs() < 1e-8, "{l}");
    }
}

#[test]
fn zero_epochs_still_writes_a_predictor() {
    let src = pipeline();
    let dir = fresh_dir("cli-zero-epochs");
    let cfg = write_config(&dir, "predictor.epochs=0\n");
    let dataset = src.join("dataset.txt");
    ok(ppf(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "train-predictor",
            "--dataset",
            dataset.to_str().unwrap(),
        ],
        &[],
    ));
    let loss = std::fs::read_to_string(dir.join("predictor_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
    assert!(dir.join("predictor.ckpt").exists());
}

#[test]
fn flag_seed_beats_environment_seed() {
    let src = pipeline();
    let dataset = src.join("dataset.txt");
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let dir = fresh_dir(name);
        let cfg = write_config(&dir, "seed=11\n");
        let mut args = vec![
            "--config".to_string(),
            cfg.to_str().unwrap().to_string(),
            "--out".to_string(),
            dir.to_str().unwrap().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        args.extend(["train-predictor".into(), "--dataset".into(), dataset.to_str().unwrap().into()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(ppf(&args, env));
        std::fs::read(dir.join("predictor.ckpt")).unwrap()
    };
    let env_only = run("cli-seed-env", &[], &[("PPF_SEED", "3")]);
    let flag = run("cli-seed-flag", &["--seed", "3"], &[("PPF_SEED", "5")]);
    let file = run("cli-seed-file", &[], &[]);
    let again = run("cli-seed-file-again", &[], &[]);
    assert_eq!(env_only, flag);
    assert_ne!(env_only, file);
    assert_eq!(file, again);
}

#[test]
fn corrupted_dataset_names_the_line() {
    let src = pipeline();
    let dir = fresh_dir("cli-corrupt");
    let text = std::fs::read_to_string(src.join("dataset.txt")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[4] = "0.1 0.2 not-a-number".into();
    let bad = dir.join("bad.txt");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let cfg = write_config(&dir, "");
    let out = ppf(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "train-predictor",
            "--dataset",
            bad.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = fresh_dir("cli-exit");
    let o = dir.to_str().unwrap();
    assert_eq!(ppf(&["--out", o, "ablate", "sideways"], &[]).status.code(), Some(2));
    assert_eq!(ppf(&["--out", o, "policy"], &[]).status.code(), Some(2));

    let bad = dir.join("bad.cfg");
    std::fs::write(&bad, "model.d_model=63\n").unwrap();
    let out = ppf(&["--config", bad.to_str().unwrap(), "--out", o, "collect"], &[]);
    assert_eq!(out.status.code(), Some(4));
    std::fs::write(&bad, "seed=1\nno.such.key=2\n").unwrap();
    let out = ppf(&["--config", bad.to_str().unwrap(), "--out", o, "collect"], &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = ppf(&["--out", o, "collect"], &[("PPF_SEED", "minus one")]);
    assert_eq!(out.status.code(), Some(4));

    let missing = dir.join("nope.ckpt");
    let out = ppf(&["--out", o, "policy", "--ratio", "0.3", "--agent", missing.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3));
    let out = ppf(&["--config", dir.join("absent.cfg").to_str().unwrap(), "--out", o, "collect"], &[]);
    assert_eq!(out.status.code(), Some(3));
}
