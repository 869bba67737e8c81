use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualcorr(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dualcorr"));
    cmd.args(args).env_remove("DUALCORR_SEED");
    if let Some(s) = seed_env {
        cmd.env("DUALCORR_SEED", s);
    }
    cmd.output().expect("spawn dualcorr")
}

fn ok(args: &[&str]) -> String {
    let out = dualcorr(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn report_values(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}

#[test]
fn gen_train_eval_viz_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen", "--n", "8", "--seed", "2", "--out", &path(d, "data")]);
    fs::write(d.join("run.cfg"), "# short run\nsteps = 15\nlambda_cross = 0.5\n").unwrap();
    let text = ok(&[
        "train",
        "--config",
        &path(d, "run.cfg"),
        "--data",
        &path(d, "data"),
        "--out",
        &path(d, "run"),
        "--set",
        "seed=4",
    ]);
    for (k, v) in report_values(&text) {
        if k != "videos" && k != "frames" {
            assert!((0.0..=1.0).contains(&v), "{k}={v}");
        }
    }
    let echo = fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(echo.contains("seed = 4\n") && echo.contains("steps = 15\n") && echo.contains("lambda_cross = 0.5\n"));
    let log = fs::read_to_string(d.join("run/metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 16);
    assert!(d.join("run/report.json").exists());

    let json = path(d, "eval.json");
    let text = ok(&[
        "eval",
        "--checkpoint",
        &path(d, "run/checkpoint.bin"),
        "--data",
        &path(d, "data"),
        "--json",
        &json,
    ]);
    let values = report_values(&text);
    assert!(values.contains(&("videos".to_string(), 8.0)));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed["videos"], 8);
    assert!(parsed["accu_at"]["0.5"].is_number());

    ok(&[
        "viz",
        "--checkpoint",
        &path(d, "run/checkpoint.bin"),
        "--sample",
        &path(d, "data/sample_0003"),
        "--out",
        &path(d, "viz"),
    ]);
    let conf = fs::read(d.join("viz/conf_t00.pgm")).unwrap();
    assert!(conf.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(conf.len(), 11 + 64);
    let ranges = fs::read_to_string(d.join("viz/ranges.txt")).unwrap();
    let maps = fs::read_dir(d.join("viz")).unwrap().count() - 1;
    assert_eq!(ranges.lines().count(), maps + 1);
}

#[test]
fn gen_uses_the_seed_variable_as_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(dualcorr(&["gen", "--n", "2", "--out", &path(d, "env")], Some("9")).status.success());
    ok(&["gen", "--n", "2", "--seed", "9", "--out", &path(d, "flag")]);
    ok(&["gen", "--n", "2", "--seed", "10", "--out", &path(d, "other")]);
    let q = |s: &str| fs::read(d.join(s).join("sample_0001/frame_000.bin")).unwrap();
    assert_eq!(q("env"), q("flag"));
    assert_ne!(q("env"), q("other"));
}

#[test]
fn unknown_config_key_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "steps = 3\nlearning_rate = 0.1\n").unwrap();
    let out = dualcorr(
        &["train", "--config", &path(d, "bad.cfg"), "--data", &path(d, "x"), "--out", &path(d, "run")],
        None,
    );
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("learning_rate"));
}

#[test]
fn gradcheck_passes_at_toy_scale() {
    let text = ok(&["gradcheck", "--scale", "toy"]);
    assert!(text.trim_end().ends_with("PASS"), "{text}");
}

#[test]
fn loss_ablation_has_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen", "--n", "8", "--seed", "1", "--out", &path(d, "data")]);
    let table = ok(&[
        "ablate",
        "--axis",
        "losses",
        "--data",
        &path(d, "data"),
        "--seeds",
        "1",
        "--set",
        "steps=3",
        "--out",
        &path(d, "abl"),
    ]);
    let names: Vec<&str> = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().next())
        .take(4)
        .collect();
    assert_eq!(names, ["both", "inter_only", "cross_only", "neither"]);
    assert!(d.join("abl/ablation.txt").exists());
    let bad = dualcorr(&["ablate", "--axis", "colour", "--data", &path(d, "data")], None);
    assert!(!bad.status.success());
}
