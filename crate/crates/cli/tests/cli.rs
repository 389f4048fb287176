use std::path::Path;
use std::process::{Command, Output};

fn mvtop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvtop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvtop(args);
    assert!(
        out.status.success(),
        "mvtop {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_train_eval_runtime_audit() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let runs = root.join("runs");
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    std::fs::write(root.join("data.toml"), "samples_per_scene = 3\nmodel_points = 100\n").unwrap();
    let printed = ok(&[
        "generate", "--config", &s(&root.join("data.toml")), "--out", &s(&data),
        "--train", "6", "--easy", "3", "--hard", "3", "--seed", "11",
    ]);
    assert!(printed.contains("train: 6 samples"));
    assert!(data.join("models/obj_000001.json").is_file());

    let run = format!(
        "dataset = {:?}\noutput = {:?}\nviews = 2\nruntime_runs = 2\nruntime_views = [1, 2]\n\
         [model]\nd_model = 16\nheads = 2\npoints = 2\nffn_dim = 16\nbackbone_channels = [4, 8, 8]\n\
         [optimizer]\nbatch_size = 3\nepochs = 1\n",
        s(&data),
        s(&runs)
    );
    std::fs::write(root.join("run.toml"), run).unwrap();
    let cfg = s(&root.join("run.toml"));
    ok(&["train", "--config", &cfg, "--lr", "1e-3", "--sequential"]);
    let log = json(&runs.join("training_log.json"));
    assert_eq!(log["steps"].as_array().unwrap().len(), 2);
    assert_eq!(log["config"]["optimizer"]["learning_rate"], 1e-3);

    for split in ["test_easy", "test_hard"] {
        ok(&["eval", "--config", &cfg, "--split", split]);
        let r = json(&runs.join(format!("eval_{split}.json")));
        assert_eq!(r["sample_count"], 3);
        assert!(r["mean_rotation_error_deg"].as_f64().unwrap().is_finite());
    }
    ok(&["eval", "--config", &cfg, "--views", "1", "--checkpoint", &s(&runs.join("last.json")), "--out", &s(&root.join("one.json"))]);
    assert_eq!(json(&root.join("one.json"))["split"], "test_easy");

    ok(&["runtime", "--config", &cfg]);
    let rt = json(&runs.join("runtime.json"));
    assert_eq!(rt["entries"].as_array().unwrap().len(), 2);

    let report = root.join("audit.json");
    let plot = root.join("audit.png");
    ok(&[
        "audit", "--split-a", &s(&data.join("train")), "--split-b", &s(&data.join("train")),
        "--models", &s(&data.join("models")), "--out", &s(&report), "--plot", &s(&plot),
    ]);
    let a = json(&report);
    assert_eq!(a["duplicates"]["records_a"], 12);
    assert_eq!(a["duplicates"]["fraction_of_a_with_duplicate_in_b"], 1.0);
    assert_eq!(a["add_histogram"]["fraction_below_first_bin"], 1.0);
    assert!(plot.is_file());

    std::fs::write(root.join("audit.toml"), format!("split_a = {:?}\nsplit_b = {:?}\n", s(&data.join("train")), s(&data.join("test_easy")))).unwrap();
    let printed = ok(&["audit", "--config", &s(&root.join("audit.toml"))]);
    let a: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(a["duplicates"]["a_with_duplicate"], 0);
    assert!(a["add_histogram"].is_null());
}

#[test]
fn invalid_input_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvtop(&["eval", "--dataset", dir.path().to_str().unwrap(), "--views", "3"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let out = mvtop(&["audit", "--split-a", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("split-b"));

    std::fs::write(dir.path().join("bad.toml"), "unknown_key = 1\n").unwrap();
    let out = mvtop(&["train", "--config", dir.path().join("bad.toml").to_str().unwrap()]);
    assert!(!out.status.success());
}
