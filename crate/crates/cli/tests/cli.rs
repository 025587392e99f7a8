use std::path::Path;
use std::process::{Command, Output};

fn alft(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alft"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ALFT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn manifest(out: &Path, cmd: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifests").join(format!("{cmd}.json"))).unwrap()).unwrap()
}

const TINY: [&str; 6] = ["--n", "4", "--test-n", "6", "--epochs", "1"];

#[test]
fn gen_is_byte_reproducible_across_output_dirs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&alft(&["gen", "--seed", "5", "--n", "5", "--test-n", "3"], a.path()));
    ok(&alft(&["gen", "--seed", "5", "--n", "5", "--test-n", "3"], b.path()));
    for f in ["train.json", "train.alft", "test.json", "test.alft"] {
        let (x, y) = (
            std::fs::read(a.path().join("data").join(f)).unwrap(),
            std::fs::read(b.path().join("data").join(f)).unwrap(),
        );
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
    let m = manifest(a.path(), "gen");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["succeeded"], true);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert!(m["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
}

#[test]
fn oracle_evaluation_scores_zero_error() {
    let d = tempfile::tempdir().unwrap();
    let o = alft(&["eval", "--oracle", "--test-n", "8"], d.path());
    ok(&o);
    let csv = std::fs::read_to_string(d.path().join("eval/oracle_full.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("split,mpjpe,pa_mpjpe,pck,auc,n"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "full");
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 100.0);
    assert_eq!(row[5], "8");
}

#[test]
fn train_sweep_lift_and_report() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path();
    let mut args = vec!["train", "--variant", "full"];
    args.extend(TINY);
    ok(&alft(&args, out));
    let ckpt = out.join("checkpoints/full.alft");
    assert!(ckpt.exists());
    let curve = std::fs::read_to_string(out.join("curves/full.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);

    let ck = ckpt.to_str().unwrap();
    let mut args = vec!["sweep-noise", "--checkpoint", ck, "--sigmas", "0,1,2.5"];
    args.extend(TINY);
    ok(&alft(&args, out));
    let sweep = std::fs::read_to_string(out.join("sweeps/full.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "sigma,mpjpe,pa_mpjpe,pck,auc");
    assert_eq!(lines.len(), 4);
    let sigmas: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(sigmas, [0.0, 1.0, 2.5]);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 5);
        assert!(l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite()));
    }

    let input = out.join("pose.json");
    let pose: Vec<[f64; 2]> = (0..17).map(|j| [40.0 + 3.0 * j as f64, 30.0 + 4.0 * j as f64]).collect();
    std::fs::write(&input, serde_json::json!({ "pose2d": pose }).to_string()).unwrap();
    let o = alft(&["lift", "--input", input.to_str().unwrap(), "--checkpoint", ck], out);
    ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pose3d"].as_array().map(|a| a.len()), Some(17), "{v}");

    ok(&alft(&["report"], out));
    let first = std::fs::read(out.join("report.md")).unwrap();
    ok(&alft(&["report"], out));
    assert_eq!(std::fs::read(out.join("report.md")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("## Noise sweeps"));
    assert!(text.contains("| sigma | mpjpe"));
}

#[test]
fn ablation_writes_one_row_per_arm_and_split() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--suite", "sampling"];
    args.extend(TINY);
    ok(&alft(&args, d.path()));
    let csv = std::fs::read_to_string(d.path().join("ablations/sampling.csv")).unwrap();
    assert!(csv.starts_with("arm,variant,split,mpjpe,pa_mpjpe,pck,auc,n,mean_tokens\n"));
    let arms: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(arms.len(), 3);
    assert!(csv.lines().skip(1).any(|l| l.contains(",full,")));
}

#[test]
fn seed_precedence_is_defaults_then_config_then_env_then_flag() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"synth": {"seed": 11, "sample_count": 3}, "test_count": 2}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let out = d.path().join("o");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_alft"));
        cmd.args(["gen", "--config", c])
            .args(extra)
            .arg("--out")
            .arg(&out)
            .env_remove("ALFT_SEED");
        if let Some(s) = env {
            cmd.env("ALFT_SEED", s);
        }
        ok(&cmd.output().unwrap());
        let m = manifest(&out, "gen");
        (m["seed"].as_u64().unwrap(), m["config"]["synth"]["sample_count"].as_u64().unwrap())
    };
    assert_eq!(run(&[], None), (11, 3));
    assert_eq!(run(&[], Some("12")), (12, 3));
    assert_eq!(run(&["--seed", "13", "--n", "2"], Some("12")), (13, 2));
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["bogus"][..],
        &["eval", "--split", "sideways", "--oracle"],
        &["train", "--variant", "nope"],
        &["sweep-noise"],
    ] {
        let o = alft(args, d.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let missing = d.path().join("missing.alft");
    let o = alft(&["eval", "--checkpoint", missing.to_str().unwrap(), "--test-n", "2"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.alft"));
    let m = manifest(d.path(), "eval");
    assert_eq!(m["succeeded"], false);

    let o = alft(&["gen", "--lr", "0"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(Command::new(env!("CARGO_BIN_EXE_alft"))
        .arg("--help")
        .output()
        .unwrap()
        .status
        .success());
}
