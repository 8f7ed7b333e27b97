use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ropelab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ropelab"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("ROPELAB_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn write_config(dir: &Path, name: &str, value: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, value.to_string()).unwrap();
    path
}

#[test]
fn fig_extrapolation_writes_three_curves_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let status = ropelab(&out, &["fig-extrapolation", "--seed", "3"]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(
        listing(&out),
        [
            "extrapolation_fit.csv",
            "extrapolation_full.csv",
            "extrapolation_summary.json",
            "interpolation.csv"
        ]
    );
    let summary = json(&out.join("extrapolation_summary.json"));
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["config"]["d"], 128);
    let s = &summary["results"]["summary"];
    assert!(s["max_abs_out_of_range"].as_f64().unwrap() > s["max_abs_in_range"].as_f64().unwrap());

    let interp = fs::read_to_string(out.join("interpolation.csv")).unwrap();
    assert_eq!(interp.lines().count(), 401);
    assert!(interp.starts_with("s,value\n25,"));

    let again = dir.path().join("b");
    assert!(ropelab(&again, &["fig-extrapolation", "--seed", "3"]).status.success());
    for name in listing(&out) {
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn b_curve_defaults_and_degenerate_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("default");
    assert!(ropelab(&out, &["b-curve"]).status.success());
    let summary = json(&out.join("b_curve_summary.json"));
    assert!(summary["results"]["summary"]["min_B_over_d"].as_f64().unwrap() >= 1.0);
    let csv = fs::read_to_string(out.join("b_curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("s,B,B_over_d"));
    assert!(lines.next().unwrap().starts_with("0,2080,"));
    assert_eq!(csv.lines().count(), 4097);

    let small = dir.path().join("d2");
    assert!(ropelab(&small, &["b-curve", "--d", "2", "--s-end", "50"]).status.success());
    let csv = fs::read_to_string(small.join("b_curve.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("1")));
}

#[test]
fn verify_bounds_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ropelab(&dir.path().join("ok"), &["verify-bounds", "--trials", "100"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report = json(&dir.path().join("ok/verify_bounds.json"));
    assert_eq!(report["results"]["violations"], 0);
    assert!(report["results"]["ratio"]["min_ratio"].as_f64().unwrap() >= 589.0);

    let bad = ropelab(
        &dir.path().join("bad"),
        &["verify-bounds", "--trials", "20", "--bound-scale", "0.01"],
    );
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("worst case"));
    let report = json(&dir.path().join("bad/verify_bounds.json"));
    assert!(report["results"]["violations"].as_u64().unwrap() > 0);
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.json", serde_json::json!({"d": 64, "s_end": 10}));

    let from_file = dir.path().join("file");
    assert!(ropelab(&from_file, &["--config", cfg.to_str().unwrap(), "b-curve"]).status.success());
    let summary = json(&from_file.join("b_curve_summary.json"));
    assert_eq!(summary["config"]["d"], 64);
    assert_eq!(summary["config"]["s_end"], 10);
    assert_eq!(summary["config"]["c"], 10000.0);

    let from_flag = dir.path().join("flag");
    let args = ["--config", cfg.to_str().unwrap(), "b-curve", "--d", "32"];
    assert!(ropelab(&from_flag, &args).status.success());
    assert_eq!(json(&from_flag.join("b_curve_summary.json"))["config"]["d"], 32);
}

#[test]
fn output_directory_from_environment_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_ropelab"))
        .args(["b-curve", "--s-end", "4"])
        .env("ROPELAB_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(env_dir.join("b_curve.csv").exists());

    let file_dir = dir.path().join("from-file");
    let cfg = write_config(
        dir.path(),
        "c.json",
        serde_json::json!({"s_end": 4, "out_dir": file_dir.to_str().unwrap()}),
    );
    let status = Command::new(env!("CARGO_BIN_EXE_ropelab"))
        .args(["--config", cfg.to_str().unwrap(), "b-curve"])
        .env_remove("ROPELAB_OUT_DIR")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(file_dir.join("b_curve.csv").exists());
}

#[test]
fn argument_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let unknown = write_config(dir.path(), "u.json", serde_json::json!({"d": 8, "bogus": 1}));
    assert_eq!(ropelab(&out, &["--config", unknown.to_str().unwrap(), "b-curve"]).status.code(), Some(2));
    assert_eq!(ropelab(&out, &["b-curve", "--d", "3"]).status.code(), Some(2));
    assert_eq!(ropelab(&out, &["train", "--steps", "many"]).status.code(), Some(2));
    assert_eq!(ropelab(&out, &["extend", "--method", "yarn"]).status.code(), Some(2));
    let wrong_version = write_config(dir.path(), "v.json", serde_json::json!({"schema_version": 7}));
    assert_eq!(
        ropelab(&out, &["--config", wrong_version.to_str().unwrap(), "b-curve"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for cmd in ["extend", "eval-ppl", "eval-passkey"] {
        let result = ropelab(&out, &[cmd]);
        assert_eq!(result.status.code(), Some(3), "{cmd}");
        assert!(String::from_utf8_lossy(&result.stderr).contains("pretrained.ckpt"));
    }
    let missing_config = dir.path().join("nope.json");
    assert_eq!(
        ropelab(&out, &["--config", missing_config.to_str().unwrap(), "b-curve"]).status.code(),
        Some(3)
    );
}

fn tiny_train_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "train.json",
        serde_json::json!({
            "seed": 7,
            "window": 32,
            "steps": 4,
            "d_model": 16,
            "n_heads": 2,
            "n_layers": 1,
            "training": {"batch_size": 2}
        }),
    )
}

#[test]
fn toy_pipeline_runs_end_to_end_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path());
    let run = |out: &Path| {
        let train = ropelab(out, &["--config", cfg.to_str().unwrap(), "train"]);
        assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
        let extend = ropelab(out, &["extend", "--method", "pi", "--steps", "2", "--extended-window", "64"]);
        assert!(extend.status.success(), "{}", String::from_utf8_lossy(&extend.stderr));
        let ckpt = out.join("extended.ckpt");
        let ckpt = ckpt.to_str().unwrap();
        assert!(ropelab(out, &["eval-ppl", "--checkpoint", ckpt, "--stride", "16"]).status.success());
        let passkey = ropelab(out, &["eval-passkey", "--checkpoint", ckpt, "--trials", "2"]);
        assert!(passkey.status.success(), "{}", String::from_utf8_lossy(&passkey.stderr));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&a);
    run(&b);

    let files = listing(&a);
    for name in [
        "extend_loss.csv",
        "extend_summary.json",
        "extended.ckpt",
        "passkey.csv",
        "passkey_summary.json",
        "ppl.csv",
        "ppl_summary.json",
        "pretrained.ckpt",
        "train_loss.csv",
        "train_summary.json",
    ] {
        assert!(files.contains(&name.to_string()), "missing {name}");
    }
    for name in ["train_loss.csv", "extend_loss.csv", "ppl.csv", "passkey.csv", "pretrained.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let extend = json(&a.join("extend_summary.json"));
    assert_eq!(extend["config"]["method"], "pi");
    assert_eq!(extend["config"]["extended_window"], 64);
    assert_eq!(extend["results"]["position_scale"], 0.5);
    let passkey = json(&a.join("passkey_summary.json"));
    assert_eq!(passkey["results"]["window"], 64);
    assert_eq!(passkey["results"]["distances"].as_array().unwrap().len(), 32);
    assert!(passkey["results"]["k_max"].as_u64().unwrap() <= 64);
    let csv = fs::read_to_string(a.join("passkey.csv")).unwrap();
    assert!(csv.starts_with("k,success_rate\n2,"));
    let ppl = fs::read_to_string(a.join("ppl.csv")).unwrap();
    assert!(ppl.starts_with("window,stride,ppl\n64,16,"));

    // A run's recorded config is enough to replay it.
    let recorded = json(&a.join("ppl_summary.json"));
    let replay_cfg = write_config(dir.path(), "replay.json", recorded["config"].clone());
    let c = dir.path().join("c");
    assert!(ropelab(&c, &["--config", replay_cfg.to_str().unwrap(), "eval-ppl"]).status.success());
    assert_eq!(fs::read(a.join("ppl.csv")).unwrap(), fs::read(c.join("ppl.csv")).unwrap());
}

#[test]
fn eval_window_larger_than_the_model_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path());
    let model_dir = dir.path().join("model");
    assert!(ropelab(&model_dir, &["--config", cfg.to_str().unwrap(), "train"]).status.success());
    let ckpt = model_dir.join("pretrained.ckpt");

    let out = dir.path().join("eval");
    let result = ropelab(&out, &["eval-ppl", "--checkpoint", ckpt.to_str().unwrap(), "--window", "64"]);
    assert_eq!(result.status.code(), Some(2));
    assert!(!out.exists());
    let result = ropelab(
        &out,
        &["eval-passkey", "--checkpoint", ckpt.to_str().unwrap(), "--extended-window", "64"],
    );
    assert_eq!(result.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn training_lowers_held_out_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.json",
        serde_json::json!({"window": 32, "steps": 60, "copy_warmup_steps": 0, "d_model": 16, "n_heads": 2, "n_layers": 1,
                           "training": {"batch_size": 4, "learning_rate": 0.01}}),
    );
    let out = dir.path().join("t");
    assert!(ropelab(&out, &["--config", cfg.to_str().unwrap(), "train"]).status.success());
    let summary = json(&out.join("train_summary.json"));
    let before = summary["results"]["held_out_ppl_before"].as_f64().unwrap();
    let after = summary["results"]["held_out_ppl_after"].as_f64().unwrap();
    assert!(after < before, "{before} -> {after}");
    let losses = fs::read_to_string(out.join("train_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 61);
}
