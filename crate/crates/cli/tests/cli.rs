use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mih-localmap"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let (header, body) = text.split_once('\n').unwrap();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_owned).collect())
        .collect();
    (header.to_owned(), rows)
}

#[test]
fn recall_single_point_is_exact_at_zero_flips() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["recall", "--t", "32", "--eps", "0", "--trials", "10", "--seed", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&dir.path().join("recall.csv"));
    assert!(header.starts_with("# mih-localmap recall seed=5 config_hash="), "{header}");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "32");
    assert_eq!(rows[0][1], "0");
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn recall_self_check_passes_on_small_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["recall", "--t", "4,16", "--eps", "0:64:16", "--trials", "2000", "--self-check"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_arguments_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["recall", "--eps", "9:1:x"], dir.path())), 2);
    assert_eq!(code(&bin(&["recall", "--t", "0"], dir.path())), 2);
    assert_eq!(code(&bin(&["select-bench", "--t", "13"], dir.path())), 2);
    assert_eq!(code(&bin(&["no-such-command"], dir.path())), 2);
}

#[test]
fn select_bench_degenerate_cases_reach_optimum() {
    for (t, k) in [("1", "1"), ("5", "5")] {
        let dir = tempfile::tempdir().unwrap();
        let o = bin(&["select-bench", "--t", t, "--k", k, "--instances", "20"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let (_, rows) = csv_rows(&dir.path().join("select_bench.csv"));
        assert_eq!(rows.len(), 20);
        for r in rows {
            let ratio: f64 = r[4].parse().unwrap();
            assert!((ratio - 1.0).abs() < 1e-12, "t={t} k={k}: ratio {ratio}");
        }
    }
}

#[test]
fn oracle_check_reports_seed_and_catches_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["oracle-check", "--seed", "7", "--operations", "2000"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&dir.path().join("oracle_check.csv"));
    assert!(header.contains("seed=7"), "{header}");
    assert!(rows.iter().all(|r| r[3] == "0"));

    let o = bin(&["oracle-check", "--operations", "2000", "--inject-fault"], dir.path());
    assert_eq!(code(&o), 1);
    let (_, rows) = csv_rows(&dir.path().join("oracle_check.csv"));
    assert!(rows.iter().any(|r| r[3] != "0" && !r[4].is_empty()));
}

#[test]
fn simulate_config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"strategies": ["covis_only", "mih_some"]}"#, "strategies[1]"),
        (r#"{"world": {"fov": 90}, "strategies": ["mih_all"]}"#, "world.fov"),
    ];
    for (json, field) in cases {
        let cfg = dir.path().join("bad.json");
        std::fs::write(&cfg, json).unwrap();
        let o = bin(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(code(&o), 2);
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(field), "{err}");
    }
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["recall", "--config", "/nonexistent/cfg.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_writes_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(
        &cfg,
        r#"{"world": {"frames_per_segment": 5}, "strategies": ["mih_selected", {"kind": "rnd", "budget": 300}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = bin(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "2"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("metrics/mih_selected_seed2.csv").is_file());
    assert!(out.join("metrics/rnd_b300_seed2.csv").is_file());
    assert!(out.join("traces/mih_selected_seed2.csv").is_file());
    let agg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], serde_json::json!([2]));
    assert!(agg["strategies"]["rnd_b300"]["runs"] == 1);
    let (header, rows) = csv_rows(&out.join("metrics/mih_selected_seed2.csv"));
    assert!(header.starts_with("# mih-localmap simulate seed=2"), "{header}");
    assert_eq!(rows.len(), 8 * 5 + 1);
}
