use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn resflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resflow")).args(args).output().unwrap()
}

fn gen(dir: &Path, net: &str) -> (String, String) {
    let out = resflow(&["gen", "--net", net, "--seed", "4", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir.join("model.json").display().to_string(), dir.join("weights.bin").display().to_string())
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn plan_resnet20_kv260() {
    let t = tempfile::tempdir().unwrap();
    let (m, w) = gen(&t.path().join("net"), "resnet20");
    let out_dir = t.path().join("out");
    let o = resflow(&["plan", "--model", &m, "--weights", &w, "--board", "kv260", "--out", out_dir.to_str().unwrap(), "--dump-opt-graph"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("cp_tot"));
    let plan = json(&out_dir.join("plan.json"));
    assert_eq!(plan["schema"], "resflow.plan/1");
    assert!(plan["totals"]["budget_used"].as_u64().unwrap() <= 1248);
    assert_eq!(plan["totals"]["n_par"], 1248);
    assert_eq!(plan["freq_mhz"], 274.0);
    assert!(plan["layers"].as_array().unwrap().iter().all(|l| l["och_par"].as_u64().unwrap() >= 1));
    assert!(out_dir.join("optimized.json").exists() && out_dir.join("optimized.bin").exists());
    // The dumped optimized graph is itself a valid model.
    let again = resflow(&["plan", "--model", out_dir.join("optimized.json").to_str().unwrap(), "--weights", out_dir.join("optimized.bin").to_str().unwrap(), "--out", t.path().join("o2").to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(json(&t.path().join("o2/plan.json"))["totals"], plan["totals"]);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let (m, w) = gen(t.path(), "two-block");
    let out = t.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(resflow(&["plan", "--model", &m, "--weights", &w, "--n-par", "1", "--out", o]).status.code(), Some(2));
    let missing = t.path().join("missing.bin");
    let r = resflow(&["plan", "--model", &m, "--weights", missing.to_str().unwrap(), "--out", o]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.bin"));
    std::fs::write(t.path().join("bad.json"), "{\"version\": 1, \"nodes\": [], \"edges\": []").unwrap();
    let bad = t.path().join("bad.json");
    assert_eq!(resflow(&["plan", "--model", bad.to_str().unwrap(), "--weights", &w, "--out", o]).status.code(), Some(1));
    assert_eq!(resflow(&["plan", "--model", &m, "--weights", &w, "--board", "zynq", "--out", o]).status.code(), Some(1));
    assert_eq!(resflow(&["plan", "--model", &m, "--weights", &w, "--freq-mhz", "0", "--out", o]).status.code(), Some(1));
}

#[test]
fn verify_and_fault_injection() {
    let t = tempfile::tempdir().unwrap();
    let (m, w) = gen(t.path(), "resnet8");
    let o = t.path().join("o");
    let ok = resflow(&["verify", "--model", &m, "--weights", &w, "--frames", "10", "--board", "kv260", "--out", o.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let mut blob = std::fs::read(&w).unwrap();
    blob[5] ^= 0x40;
    let bad = t.path().join("corrupt.bin");
    std::fs::write(&bad, blob).unwrap();
    let r = resflow(&["verify", "--model", &m, "--weights", &w, "--param-image", bad.to_str().unwrap(), "--frames", "2", "--out", o.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    let err = String::from_utf8_lossy(&r.stderr);
    for part in ["layer", "index", "expected", "got"] {
        assert!(err.contains(part), "{err}");
    }
}

#[test]
fn simulate_and_report() {
    let t = tempfile::tempdir().unwrap();
    let (m, w) = gen(t.path(), "resnet8");
    let out = t.path().join("o");
    let o = out.to_str().unwrap();
    let csv = t.path().join("events.csv");
    let s = resflow(&["simulate", "--model", &m, "--weights", &w, "--board", "ultra96", "--out", o, "--trace-csv", csv.to_str().unwrap()]);
    assert_eq!(s.status.code(), Some(0), "{}", String::from_utf8_lossy(&s.stderr));
    let trace = json(&out.join("trace.json"));
    assert_eq!(trace["schema"], "resflow.trace/1");
    assert_eq!(trace["frames"], 3);
    assert_eq!(trace["output_digests"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("cycle,task,status\n"));

    assert_eq!(resflow(&["plan", "--model", &m, "--weights", &w, "--board", "ultra96", "--out", o]).status.code(), Some(0));
    let plan_path = out.join("plan.json");
    let r = resflow(&["report", "--model", &m, "--weights", &w, "--board", "ultra96", "--out", o, "--plan", plan_path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let rep = json(&out.join("report.json"));
    assert_eq!(rep["schema"], "resflow.report/1");
    let ratio = rep["fps"].as_f64().unwrap() / rep["predicted_fps"].as_f64().unwrap();
    assert!((0.95..=1.05).contains(&ratio), "{ratio}");
    for key in ["latency_cycles", "gops", "cp_tot", "buffers"] {
        assert!(!rep[key].is_null(), "{key}");
    }
    assert_eq!(rep["board"]["dsp"], 360);
}

#[test]
fn deterministic_outputs() {
    let t = tempfile::tempdir().unwrap();
    let (m, w) = gen(t.path(), "two-block");
    let run = |dir: &str| {
        let out = t.path().join(dir);
        let s = resflow(&["simulate", "--model", &m, "--weights", &w, "--n-par", "128", "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(s.status.success());
        std::fs::read(out.join("trace.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
