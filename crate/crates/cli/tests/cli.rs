use std::path::Path;
use std::process::{Command, Output};

fn attnsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnsync"))
        .args(args)
        .env_remove("ATTN_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = attnsync(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(line).expect("error line is JSON");
    v["error"]["code"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_then_pipeline_produces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("cohort"), tmp.path().join("run"));
    ok(&["synth", "--seed", "7", "--subjects", "6", "--duration", "180", "-o", s(&data)]);
    assert!(data.join("s06__v1.jsonl").exists());
    assert!(data.join("ground_truth.json").exists());

    ok(&["pipeline", "--threads", "1", "--seed", "7", "--epochs", "2", "-i", s(&data), "-o", s(&out), "--emit-plots"]);
    for f in [
        "traces/traces_v1.csv",
        "dataset/manifest.json",
        "model.bin",
        "evaluation.json",
        "comparison.csv",
        "predictions.csv",
        "suppression.json",
        "plots/mae_by_subject.csv",
        "plots/suppression_eyes.csv",
        "run.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let ev = json(&out.join("evaluation.json"));
    assert_eq!(ev["comparison"]["subjects"].as_array().unwrap().len(), 1);
    let run = json(&out.join("run.json"));
    assert_eq!(run["command"], "pipeline");
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config"]["train"]["epochs"], 2);
    assert_eq!(run["inputs"].as_array().unwrap().len(), 6);
    assert_eq!(run["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let sup = json(&out.join("suppression.json"));
    assert_eq!(sup["groups"][0]["group"], "none");
    assert_eq!(sup["groups"][0]["mean_percent_change"], 0.0);
}

#[test]
fn isc_needs_two_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cohort");
    ok(&["synth", "--subjects", "3", "--duration", "30", "-o", s(&data)]);
    for f in ["s02__v1.jsonl", "s03__v1.jsonl"] {
        std::fs::remove_file(data.join(f)).unwrap();
    }
    let out = attnsync(&["isc", "-i", s(&data), "-o", s(&tmp.path().join("isc"))]);
    assert_eq!(error_code(&out), "isc.TooFewSubjects");

    std::fs::write(data.join("s02__v1.jsonl"), "{\"t\": 0.0}\n").unwrap();
    let out = attnsync(&["isc", "-i", s(&data), "-o", s(&tmp.path().join("isc"))]);
    assert_eq!(error_code(&out), "landmark_io.MalformedRecord");
}

#[test]
fn isc_writes_one_trace_file_per_video() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("cohort"), tmp.path().join("isc"));
    ok(&["synth", "--subjects", "3", "--videos", "2", "--duration", "30", "-o", s(&data)]);
    ok(&["isc", "-i", s(&data), "-o", s(&out)]);
    let text = std::fs::read_to_string(out.join("traces_v2.csv")).unwrap();
    // 30 s at 1 s steps after the first 10 s window: 21 windows per subject
    assert_eq!(text.lines().count(), 1 + 3 * 21);
    assert!(out.join("run.json").exists());
}

#[test]
fn train_twice_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ds) = (tmp.path().join("cohort"), tmp.path().join("ds"));
    ok(&["synth", "--seed", "3", "--subjects", "4", "--duration", "40", "-o", s(&data)]);
    ok(&["build-dataset", "--seed", "1", "--split", "2,1,1", "-i", s(&data), "-o", s(&ds)]);
    let bytes: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            ok(&["train", "--seed", "1", "--threads", "1", "--epochs", "3", "-d", s(&ds), "-o", s(&out)]);
            std::fs::read(out.join("model.bin")).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);

    let model = tmp.path().join("a/model.bin");
    let ev = tmp.path().join("ev");
    ok(&["evaluate", "-m", s(&model), "-d", s(&ds), "-o", s(&ev)]);
    assert!(json(&ev.join("evaluation.json"))["comparison"]["percent_change"].is_number());
    ok(&["predict", "-m", s(&model), "-i", s(&data), "-o", s(&tmp.path().join("pred"))]);
    let preds = std::fs::read_to_string(tmp.path().join("pred/predictions.csv")).unwrap();
    // 4 subjects x 31 windows, no targets
    assert_eq!(preds.lines().count(), 1 + 4 * 31);
    assert!(preds.lines().nth(1).unwrap().contains(",,"));
    ok(&["suppress", "-m", s(&model), "-d", s(&ds), "-o", s(&tmp.path().join("sup"))]);
}

#[test]
fn config_file_is_checked_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    let data = tmp.path().join("cohort");

    std::fs::write(&cfg, "version = 1\nseed = 3\n[synth]\nn_subjects = 3\nduration_s = 30.0\n").unwrap();
    ok(&["synth", "--config", s(&cfg), "--seed", "5", "-o", s(&data)]);
    let run = json(&data.join("run.json"));
    assert_eq!(run["seed"], 5);
    assert_eq!(run["config"]["synth"]["seed"], 5);
    assert_eq!(run["config"]["synth"]["n_subjects"], 3);

    let printed = ok(&["config", "--config", s(&cfg)]);
    assert!(String::from_utf8_lossy(&printed.stdout).contains("version = 1"));

    std::fs::write(&cfg, "version = 2\n").unwrap();
    assert_eq!(error_code(&attnsync(&["config", "--config", s(&cfg)])), "cli.BadConfig");
    std::fs::write(&cfg, "version = 1\n[paths]\ngroup_map = \"/nonexistent/groups.json\"\n").unwrap();
    assert_eq!(error_code(&attnsync(&["config", "--config", s(&cfg)])), "cli.BadConfig");
    assert_eq!(error_code(&attnsync(&["train", "--bogus"])), "cli.Usage");
}
