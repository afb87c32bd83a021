use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockprefill")).args(args).output().unwrap()
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run(&["verify", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn injected_fault_fails_causality() {
    let out = run(&["verify", "--inject-fault", "--trials", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], false);
    let causality = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "causality_pruned")
        .unwrap();
    assert_eq!(causality["pass"], false);
}

#[test]
fn verify_exit_matches_report() {
    let out = run(&["verify", "--trials", "2", "--seed", "3"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let all = report["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true);
    assert_eq!(report["pass"], all);
    assert_eq!(out.status.success(), all);
}

#[test]
fn flops_small_closed_form() {
    let out = run(&["flops", "--seq-len", "2", "--layers", "1", "--heads", "1", "--head-dim", "1", "--mode", "dense"]);
    assert!(out.status.success());
    let r = &json_lines(&out)[0];
    assert_eq!(r["dense"], 12);
    assert_eq!(r["schema_version"], 1);
}

#[test]
fn flops_rejects_csv() {
    assert_eq!(run(&["flops", "--format", "csv"]).status.code(), Some(2));
}

#[test]
fn locality_csv_grid() {
    let out = run(&["locality", "--seq-len", "256", "--top-k", "16", "--stride", "64"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row,col,overlap"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 16);
    for r in &rows {
        if r[0] == r[1] {
            assert_eq!(r[2], 1.0);
        }
    }
    assert_eq!(run(&["locality", "--seq-len", "64", "--top-k", "65"]).status.code(), Some(2));
}

#[test]
fn needle_depth_out_of_range() {
    let out = run(&["needle", "--seq-len", "1024", "--depths", "1.0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn needle_small_grid() {
    let out = run(&["needle", "--seq-len", "2048", "--depths", "0.1,0.9"]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["all_found"], true);
    assert_eq!(r["total"], 2);
}

#[test]
fn bench_json_lines_schema() {
    let out = run(&[
        "bench", "--seq-len", "128", "--layers", "1", "--heads", "2", "--head-dim", "4", "--segment-size", "32",
        "--block-size", "8", "--budget", "32", "--repeats", "1", "--warmup", "0", "--verify",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mode"], "dense");
    assert!(rows[0].get("max_abs_deviation").is_none());
    assert!(rows[1]["max_abs_deviation"].as_f64().unwrap() >= 0.0);
    assert!(rows[1]["flops"]["ratio"].as_f64().unwrap() > 0.0);

    let guarded = run(&["bench", "--seq-len", "4096", "--max-elements", "1000"]);
    assert_eq!(guarded.status.code(), Some(2));
}

#[test]
fn bench_flop_ratio_grows_with_length() {
    let out = run(&["flops", "--seq-len", "4096,8192,16384"]);
    let ratios: Vec<f64> = json_lines(&out).iter().map(|r| r["ratio"].as_f64().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
}
