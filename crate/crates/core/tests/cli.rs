use std::path::Path;
use std::process::{Command, Output};

fn reachdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reachdiff")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&reachdiff(&[])), 1);
    assert_eq!(code(&reachdiff(&["frobnicate"])), 1);
    assert_eq!(code(&reachdiff(&["gen-data", "--env", "pendulum", "--out", "/tmp/x"])), 1);
    assert_eq!(code(&reachdiff(&["schedule", "--curriculum", "sometimes"])), 1);
    assert_eq!(code(&reachdiff(&["train", "--steps", "ten"])), 1);
    assert_eq!(code(&reachdiff(&["--help"])), 0);
}

#[test]
fn schedule_prints_ladder_and_table() {
    let o = reachdiff(&["schedule", "--curriculum", "mid"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "i,sigma,p_skip");
    assert_eq!(rows[1], "0,80,1");
    assert_eq!(rows[5], "4,0.002,0");
    assert_eq!(rows[6], "5,0,0");
    assert!(text.starts_with("# {"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"N": 3, "curriculum": "post"}"#).unwrap();
    let o = reachdiff(&["--config", p(&cfg), "schedule"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 2 + 4);
    assert!(text.lines().next().unwrap().contains("\"post\""));
    let o = reachdiff(&["--config", p(&cfg), "schedule", "--N", "6"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 2 + 7);
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("di.rdds");
    let ck = dir.path().join("di.ck");
    let samples = dir.path().join("s.jsonl");

    let o = reachdiff(&["gen-data", "--env", "double-integrator", "--n", "32", "--horizon", "8", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(&data).unwrap();
    let again = dir.path().join("again.rdds");
    reachdiff(&["gen-data", "--env", "double-integrator", "--n", "32", "--horizon", "8", "--seed", "3", "--out", p(&again)]);
    assert_eq!(first, std::fs::read(&again).unwrap());

    let o = reachdiff(&["train", "--data", p(&data), "--steps", "40", "--batch", "8", "--width", "16", "--projector", "PA", "--out", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(ck.with_extension("loss.csv")).unwrap();
    assert!(trace.lines().nth(1).unwrap().starts_with("step,loss"));
    assert_eq!(trace.lines().count(), 2 + 40);

    let o = reachdiff(&["sample", "--checkpoint", p(&ck), "--batch", "3", "--initial-states", "2", "--seed", "1", "--out", p(&samples)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(&samples).unwrap();
    assert_eq!(lines.lines().count(), 1 + 6);
    assert!(lines.lines().next().unwrap().contains("\"projector\":\"PA\""));

    let report = dir.path().join("verify.json");
    let o = reachdiff(&["verify", "--input", p(&samples), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // A tampered claimed-admissible trajectory fails verification.
    let tampered = dir.path().join("t.jsonl");
    let mut rows: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let x = rows[1]["states"][2][0].as_f64().unwrap();
    rows[1]["states"][2][0] = serde_json::json!(x + 1e-9);
    let text: String = rows.iter().map(|r| r.to_string() + "\n").collect();
    std::fs::write(&tampered, text).unwrap();
    assert_eq!(code(&reachdiff(&["verify", "--input", p(&tampered)])), 2);

    let o = reachdiff(&["project", "--input", p(&data), "--kind", "P", "--out", p(&dir.path().join("proj.json"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("t0: e="));

    let o = reachdiff(&["sample", "--checkpoint", p(&dir.path().join("nope.ck")), "--out", p(&samples)]);
    assert_eq!(code(&o), 3);
    let o = reachdiff(&["sample", "--checkpoint", p(&ck), "--env", "unicycle", "--out", p(&samples)]);
    assert_ne!(code(&o), 0);

    let plan = dir.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"{"env": "double-integrator", "horizon": 8,
            "configs": [{"name": "PA", "checkpoint": "di.ck", "projector": "PA"},
                        {"name": "off", "checkpoint": "di.ck", "projector": "none"}],
            "n_initial_states": 2, "samples_per_state": 2,
            "metrics": ["CAE", "reward"], "seeds": [0]}"#,
    )
    .unwrap();
    let out = dir.path().join("report");
    let o = reachdiff(&["evaluate", "--plan", p(&plan), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("summary.csv").exists());
}
