use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const EXEMPLAR: &str =
    "Bilateral pulmonary infection, two infected areas, upper middle left lung and middle lower right lung";

fn tiny_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn c2fvl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2fvl"))
        .current_dir(dir)
        .env_remove("C2FVL_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Tiny dataset plus a trained tiny run under `dir`.
fn trained(dir: &Path, extra: &[&str]) -> String {
    let cfg = tiny_cfg();
    let cfg = cfg.to_str().unwrap();
    ok(&c2fvl(dir, &["gen-data", "--config", cfg]));
    let mut args = vec!["train", "--config", cfg];
    args.extend_from_slice(extra);
    ok(&c2fvl(dir, &args))
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s.trim()).unwrap()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = c2fvl(dir.path(), &["train", "--config", "absent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent/run.cfg"));
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    for args in [vec!["--train.batch_size", "0"], vec!["--no.such.key", "1"], vec!["--loss.alpha"]] {
        let mut a = vec!["train", "--config", cfg.to_str().unwrap()];
        a.extend(args.iter());
        assert_eq!(c2fvl(dir.path(), &a).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn tiny_training_writes_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let summary = json(&trained(dir.path(), &[]));
    let run = dir.path().join("runs/tiny");
    for f in ["checkpoint.c2fvl", "history.csv", "config.txt", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(summary["rounds_run"], 6);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);
    assert!(history.starts_with("round,loss_total,loss_dice,loss_ce,cos1,cos2,cos3,val_dice,val_iou\n"));
}

#[test]
fn zero_cosine_weights_still_log_cosine_terms() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), &["--loss.alpha", "0", "--loss.beta=0", "--loss.gamma", "0"]);
    let history = fs::read_to_string(dir.path().join("runs/tiny/history.csv")).unwrap();
    for line in history.lines().skip(1) {
        let f: Vec<f64> = line.split(',').take(7).map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[1], 0.5 * f[2] + 0.5 * f[3], "{line}");
        assert!(f[4..7].iter().all(|c| *c > 0.0), "{line}");
    }
}

#[test]
fn encode_text_compiles_and_decodes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ok(&c2fvl(dir.path(), &["encode-text", "--report", EXEMPLAR])).trim(), "[1,2,1,1,0,0,1,1]");
    assert_eq!(ok(&c2fvl(dir.path(), &["encode-text", "--decode", "[1,2,1,1,0,0,1,1]"])).trim(), EXEMPLAR);
    let bad = c2fvl(dir.path(), &["encode-text", "--report", "Bilateral pulmonary infection, one infected area, upper left lung"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_of_identical_mask_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    ok(&c2fvl(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]));
    let masks = dir.path().join("data/tiny/val/masks");
    let m = masks.to_str().unwrap();
    let csv = dir.path().join("scores.csv");
    let report = json(&ok(&c2fvl(dir.path(), &["eval", "--pred-dir", m, "--gt-dir", m, "--csv", csv.to_str().unwrap()])));
    assert_eq!(report["dice"], 100.0);
    assert_eq!(report["iou"], 100.0);
    let csv = fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert_eq!(csv.lines().last(), Some("mean,100,100"));
}

#[test]
fn eval_and_predict_from_a_checkpoint_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), &[]);
    let ck = "runs/tiny/checkpoint.c2fvl";
    let e1 = ok(&c2fvl(dir.path(), &["eval", "--checkpoint", ck, "--data", "data/tiny"]));
    let e2 = ok(&c2fvl(dir.path(), &["eval", "--checkpoint", ck, "--data", "data/tiny"]));
    assert_eq!(e1, e2);
    let r = json(&e1);
    assert!(r["iou"].as_f64().unwrap() <= r["dice"].as_f64().unwrap());

    for out in ["p1", "p2"] {
        ok(&c2fvl(dir.path(), &["predict", "--checkpoint", ck, "--data", "data/tiny", "--out-dir", out]));
    }
    for id in ["test-00000", "test-00001"] {
        let a = fs::read(dir.path().join(format!("p1/{id}.png"))).unwrap();
        let b = fs::read(dir.path().join(format!("p2/{id}.png"))).unwrap();
        assert_eq!(a, b, "{id}");
    }
    let image = "data/tiny/test/images/test-00000.png";
    let one = json(&ok(&c2fvl(dir.path(), &["predict", "--checkpoint", ck, "--image", image, "--report", EXEMPLAR, "--out", "one.png"])));
    assert_eq!(one["out"], "one.png");
    assert!(dir.path().join("one.png").is_file());
}

#[test]
fn repeated_training_is_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path(), &[]);
    trained(b.path(), &[]);
    for f in ["checkpoint.c2fvl", "history.csv", "summary.json"] {
        let x = fs::read(a.path().join("runs/tiny").join(f)).unwrap();
        let y = fs::read(b.path().join("runs/tiny").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn seed_variable_replaces_the_file_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    ok(&c2fvl(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]));
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_c2fvl"));
        c.current_dir(dir.path()).env_remove("C2FVL_SEED");
        if let Some(s) = seed {
            c.env("C2FVL_SEED", s);
        }
        let o = c.args(["train", "--config", cfg.to_str().unwrap(), "--output.dir", out]).output().unwrap();
        ok(&o);
        fs::read_to_string(dir.path().join(out).join("config.txt")).unwrap()
    };
    assert!(run(Some("7"), "s7").lines().any(|l| l == "seed = 7"));
    assert!(run(None, "s0").lines().any(|l| l == "seed = 0"));
    let c = Command::new(env!("CARGO_BIN_EXE_c2fvl"))
        .current_dir(dir.path())
        .env("C2FVL_SEED", "7")
        .args(["train", "--config", cfg.to_str().unwrap(), "--output.dir", "s9", "--seed", "9"])
        .output()
        .unwrap();
    ok(&c);
    let text = fs::read_to_string(dir.path().join("s9/config.txt")).unwrap();
    assert!(text.lines().any(|l| l == "seed = 9"), "flag overrides the variable");
}

#[test]
fn saliency_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), &[]);
    let ck = "runs/tiny/checkpoint.c2fvl";
    let image = "data/tiny/val/images/val-00000.png";
    let report = fs::read_to_string(dir.path().join("data/tiny/val/reports.tsv")).unwrap();
    let report = report.lines().next().unwrap().split_once('\t').unwrap().1.to_string();
    let s = json(&ok(&c2fvl(dir.path(), &["saliency", "--checkpoint", ck, "--image", image, "--report", &report, "--out-dir", "sal"])));
    assert_eq!(s["overlay_stage"], 4);
    for i in 1..=4 {
        assert!(dir.path().join(format!("sal/stage{i}_heatmap.png")).is_file());
    }
    assert!(dir.path().join("sal/overlay.png").is_file());
    let bad = c2fvl(dir.path(), &["saliency", "--checkpoint", ck, "--image", image, "--report", &report, "--out-dir", "sal", "--stage", "9"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn sweep_tabulates_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let cfg = cfg.to_str().unwrap();
    ok(&c2fvl(dir.path(), &["gen-data", "--config", cfg]));
    let table = ok(&c2fvl(
        dir.path(),
        &["sweep", "--grid", "loss.alpha=0,0.5", "--grid", "batch=1,2", "--config", cfg, "--train.max_rounds", "2", "--train.eval_every", "1"],
    ));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "cell,loss.alpha,train.batch_size,fingerprint,best_round,val_dice,val_iou");
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(fs::read_to_string(dir.path().join("runs/tiny/sweep.csv")).unwrap(), table);
    assert!(dir.path().join("runs/tiny/cell003/checkpoint.c2fvl").is_file());
}

#[test]
fn empty_or_data_sweep_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(c2fvl(dir.path(), &["sweep", "--config", cfg]).status.code(), Some(2));
    assert_eq!(c2fvl(dir.path(), &["sweep", "--grid", "loss.alpha=", "--config", cfg]).status.code(), Some(2));
    assert_eq!(c2fvl(dir.path(), &["sweep", "--grid", "data.seed=1,2", "--config", cfg]).status.code(), Some(2));
}
