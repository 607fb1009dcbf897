use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hyperprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperprune")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "N": 4, "M": 6, "beta": 0.01, "prune_target": 0.3,
  "train": {"steps": 4, "batch_size": 2, "patch": 64, "patches": 4, "log_interval": 2},
  "prune": {"max_steps": 30, "selection_interval": 5, "threshold": 1.0, "lr": 0.05,
            "finetune_steps": 4, "eval_interval": 2}
}"#;

#[test]
fn merge_verify_passes() {
    let o = hyperprune(&["merge-verify", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.ends_with("ok")));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.hpck");
    assert_eq!(code(&hyperprune(&["eval", "--checkpoint", s(&missing), "--data", s(dir.path())])), 1);
    assert_eq!(code(&hyperprune(&["eval", "--no-such-flag"])), 1);
    assert_eq!(code(&hyperprune(&[])), 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"N": 4, "unknown_key": 1}"#).unwrap();
    let o = hyperprune(&["pretrain", "--config", s(&bad), "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    assert_eq!(code(&hyperprune(&["merge-verify", "--trials", "0"])), 1);
    assert_eq!(code(&hyperprune(&["--help"])), 0);
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("cfg.json"), TINY).unwrap();
    assert_eq!(code(&hyperprune(&["synth", "--out", s(&p("data")), "--train", "3", "--val", "2", "--size", "64", "--val-size", "40"])), 0);

    let pre = hyperprune(&["pretrain", "--config", s(&p("cfg.json")), "--data", s(&p("data")), "--out", s(&p("pre"))]);
    assert_eq!(code(&pre), 0, "{}", String::from_utf8_lossy(&pre.stderr));
    let ck = p("pre").join("model.hpck");

    for run in ["a", "b"] {
        let o = hyperprune(&["prune", "--config", s(&p("cfg.json")), "--checkpoint", s(&ck), "--data", s(&p("data")), "--out", s(&p(run))]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.hpck", "prune_history.csv", "report.csv"] {
        assert_eq!(fs::read(p("a").join(f)).unwrap(), fs::read(p("b").join(f)).unwrap(), "{f} differs");
    }

    let eval = hyperprune(&["eval", "--config", s(&p("cfg.json")), "--checkpoint", s(&p("a").join("model.hpck")), "--data", s(&p("data")), "--tag", "erhp", "--out", s(&p("ev"))]);
    assert_eq!(code(&eval), 0);
    let csv = fs::read_to_string(p("ev").join("report.csv")).unwrap();
    assert!(csv.starts_with("model,psnr_db,bpp,bpp_y,bpp_z,params_total,params_hyper\n"));
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    let agg: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    let hyper_after: f64 = agg[6].parse().unwrap();
    let base = fs::read_to_string(p("pre").join("report.csv")).unwrap();
    let hyper_before: f64 = base.lines().last().unwrap().split(',').nth(6).unwrap().parse().unwrap();
    assert!(1.0 - hyper_after / hyper_before >= 0.3 - 0.05, "{hyper_after} vs {hyper_before}");

    let rep = hyperprune(&["report", s(&p("pre").join("report.csv")), s(&p("ev").join("report.csv")), "--out", s(&p("cmp"))]);
    assert_eq!(code(&rep), 0);
    let text = String::from_utf8(rep.stdout).unwrap();
    assert!(text.contains("pretrained") && text.contains("erhp") && text.contains('↓'), "{text}");
    assert!(p("cmp").join("comparison.csv").exists());

    let manual = hyperprune(&["manual-prune", "--ratio", "0.5", "--config", s(&p("cfg.json")), "--checkpoint", s(&ck), "--data", s(&p("data")), "--out", s(&p("m"))]);
    assert_eq!(code(&manual), 0, "{}", String::from_utf8_lossy(&manual.stderr));
    let ft = hyperprune(&["finetune", "--config", s(&p("cfg.json")), "--checkpoint", s(&ck), "--data", s(&p("data")), "--out", s(&p("f"))]);
    assert_eq!(code(&ft), 0, "{}", String::from_utf8_lossy(&ft.stderr));
    assert_eq!(code(&hyperprune(&["manual-prune", "--ratio", "1.5", "--checkpoint", s(&ck), "--data", s(&p("data")), "--out", s(&p("x"))])), 1);
}
