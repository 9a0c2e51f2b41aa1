use std::process::{Command, Output};

fn mmfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfuse"))
        .args(args)
        .env_remove("MMFUSE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn jsonl(o: &Output) -> Vec<serde_json::Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn audit_json_has_exact_budget() {
    let o = mmfuse(&["audit", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["params"]["amg_lora"], 147_468);
    assert_eq!(v["params"]["hmoe"], 423_936);
    let merged = mmfuse(&["audit", "--json", "--merged"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&merged)).unwrap();
    assert_eq!(v["params"]["amg_lora"], 12);
}

#[test]
fn oracle_emits_one_record_per_check() {
    let o = mmfuse(&["oracle", "--configs", "4"]);
    assert!(o.status.success());
    let records = jsonl(&o);
    assert_eq!(records.len(), 12);
    for r in &records {
        for key in ["name", "config", "error", "tolerance", "pass"] {
            assert!(r.get(key).is_some(), "{r}");
        }
        assert_eq!(r["pass"], true);
    }
}

#[test]
fn gradcheck_single_module() {
    let o = mmfuse(&["gradcheck", "--module", "hmoe", "--configs", "2"]);
    assert!(o.status.success());
    let records = jsonl(&o);
    assert!(records.iter().any(|r| r["name"] == "phi"));
    assert!(records.iter().all(|r| !r["config"].as_str().unwrap().starts_with("attention")));
}

#[test]
fn seed_comes_from_environment() {
    let run = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_mmfuse"))
            .args(["oracle", "--configs", "2", "--module", "hmoe"])
            .env("MMFUSE_SEED", seed)
            .output()
            .unwrap();
        stdout(&o)
    };
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
    let flag = mmfuse(&["oracle", "--configs", "2", "--module", "hmoe", "--seed", "5"]);
    assert_eq!(stdout(&flag), run("5"));
}

#[test]
fn sweep_exit_code_reflects_row_errors() {
    let ok = mmfuse(&["sweep", "--axis", "lora_rank", "--values", "4,8,16", "--format", "jsonl"]);
    assert!(ok.status.success());
    let rows = jsonl(&ok);
    let amg: Vec<u64> = rows.iter().map(|r| r["amg_lora_params"].as_u64().unwrap()).collect();
    assert_eq!(amg, vec![73_740, 147_468, 294_924]);

    let bad = mmfuse(&["sweep", "--axis", "heads", "--values", "2,7"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("not reproduced"));
}

#[test]
fn bench_small_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = mmfuse(&[
        "bench", "--variant", "mcp,hmoe", "--n", "8,16,32", "--d", "16", "--experts", "2", "--rank", "2",
        "--format", "jsonl", "--csv", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = jsonl(&o);
    assert_eq!(reports.len(), 6);
    assert!(reports.iter().all(|r| r["iterations"].as_u64().unwrap() >= 30));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 7);
}

#[test]
fn bad_arguments_fail() {
    assert_eq!(mmfuse(&["bench", "--variant", "conv"]).status.code(), Some(2));
    assert_eq!(mmfuse(&["bench", "--n", "8,16", "--d", "16"]).status.code(), Some(2));
    assert!(!mmfuse(&["gradcheck", "--module", "ffn"]).status.success());
}

#[test]
fn checkpoint_forward_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let init = mmfuse(&["init-ckpt", "--tiny", "--random", "--out", &p("ck"), "--tokens", &p("tok.bin")]);
    assert!(init.status.success());
    let fwd = mmfuse(&["demo-forward", "--ckpt", &p("ck"), "--in", &p("tok.bin"), "--out", &p("fwd.bin")]);
    assert!(fwd.status.success(), "{}", String::from_utf8_lossy(&fwd.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&fwd)).unwrap();
    assert_eq!(summary["fused_candidate"], serde_json::json!([4, 8]));

    let stats = mmfuse(&["align-metrics", "--archive", &p("fwd.bin")]);
    assert!(stats.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 4);
    let skl = v["mean_skl"].as_f64().unwrap();
    assert!(skl >= 0.0 && skl.is_finite());

    let missing = mmfuse(&["demo-forward", "--ckpt", &p("nope"), "--in", &p("tok.bin"), "--out", &p("x.bin")]);
    assert_eq!(missing.status.code(), Some(2));
}
