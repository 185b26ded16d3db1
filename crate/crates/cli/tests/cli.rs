use std::path::Path;
use std::process::{Command, Output};

use dfqlab::report::RunReport;

const TINY: &str = r#"
[data]
size = 40
[train]
epochs = 1
batch = 16
[synth]
samples_total = 4
batch = 4
steps_per_batch = 2
[distill]
epochs = 1
batch = 4
"#;

fn dfqlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfqlab"))
        .arg("--quiet")
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn malformed_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\ngamma = \"high\"\n").unwrap();
    let out = dfqlab(dir.path(), &["--config", cfg.to_str().unwrap(), "train-teacher"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("distill.gamma"));

    let missing = dfqlab(dir.path(), &["--config", "/nonexistent/cfg.toml", "train-teacher"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfqlab(dir.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(3));
    let out = dfqlab(dir.path(), &["eval", "--model", "nope.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_flag_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!dfqlab(dir.path(), &["dfq", "--quant", "W4B4"]).status.success());
    assert!(!dfqlab(dir.path(), &["dfq", "--metric", "cosine"]).status.success());
}

#[test]
fn report_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    ok(dfqlab(d, &["--config", c, "train-teacher"]));
    ok(dfqlab(d, &["--config", c, "synth", "--alpha", "0.5"]));
    ok(dfqlab(d, &["--config", c, "--seed", "3", "dfq", "--quant", "W8A8", "--gamma", "2"]));
    let first = RunReport::load(&d.join("dfq_report.json")).unwrap();
    assert_eq!(first.config.distill.gamma, 2.0);
    assert_eq!(first.config.distill.seed, 3);
    assert_eq!(first.config.distill.bits.to_string(), "W8A8");
    assert!(first.metrics["accuracy"].is_some());
    assert!(d.join("student.ckpt").exists());

    // rerun from the echoed config alone, without the flags
    let echo = d.join("echo.toml");
    std::fs::write(&echo, first.config.to_toml_string()).unwrap();
    let again = d.join("again");
    std::fs::create_dir_all(&again).unwrap();
    for f in ["teacher.ckpt", "synth.ckpt"] {
        std::fs::copy(d.join(f), again.join(f)).unwrap();
    }
    ok(dfqlab(&again, &["--config", echo.to_str().unwrap(), "dfq"]));
    let second = RunReport::load(&again.join("dfq_report.json")).unwrap();
    assert_eq!(second, first);

    ok(dfqlab(d, &["--config", c, "eval"]));
    let eval = RunReport::load(&d.join("eval_report.json")).unwrap();
    let acc = eval.metrics["accuracy"].unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(eval.metrics["held_out_mean_coherency"].is_some());

    ok(dfqlab(d, &["--config", c, "report"]));
    let summary = std::fs::read_to_string(d.join("summary.csv")).unwrap();
    assert!(summary.lines().count() > 3);
}

#[test]
fn degenerate_synthesis_keeps_gaussian_init() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("one_head.toml");
    std::fs::write(&cfg, format!("{TINY}[model]\nheads = 1\n")).unwrap();
    let c = cfg.to_str().unwrap();
    ok(dfqlab(d, &["--config", c, "train-teacher"]));
    ok(dfqlab(d, &["--config", c, "synth", "--alpha", "0", "--beta", "0", "--n", "64"]));
    let (set, _) = dfqlab::checkpoint::load_synth(&d.join("synth.ckpt")).unwrap();
    let px = set.images.data();
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.03, "variance {var}");
}
