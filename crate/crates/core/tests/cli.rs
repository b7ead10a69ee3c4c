mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use fedd2s::experiment::{average_ua, load_metrics};
use serde_json::Value;

fn fedd2s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedd2s")).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RUN: &str = r#"
protocol = "fedd2s"
rounds = 3
clients = 4
ua_window = 2
batch_size = 8
dataset = "synth:3,20,16,2.0"
seed = 4
"#;

#[test]
fn missing_config_exits_nonzero_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = fedd2s(&["run", "--config", path_str(&missing)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains(path_str(&missing)), "{stderr}");
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "roundz = 3\n").unwrap();
    let out = fedd2s(&["run", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("m.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("roundz"));
}

#[test]
fn partition_of_bundled_fixture_matches_schema_and_covers() {
    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("plan.json");
    let fixture = common::fixture("digits8x8.csv");
    let dataset = format!("csv:{}", fixture.display());
    let out = fedd2s(&[
        "partition",
        "--dataset",
        &dataset,
        "--clients",
        "10",
        "--alpha",
        "0.1",
        "--out",
        path_str(&plan_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let plan: Value = serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    let obj = plan.as_object().unwrap();
    let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["alpha", "seed", "clients", "discarded"]));
    assert_eq!(obj["alpha"].as_f64(), Some(0.1));
    assert_eq!(obj["seed"].as_u64(), Some(0));
    let clients = obj["clients"].as_array().unwrap();
    assert_eq!(clients.len(), 10);

    let samples = std::fs::read_to_string(&fixture).unwrap().lines().count() - 1;
    let mut seen = BTreeSet::new();
    for list in clients.iter().chain([&obj["discarded"]]) {
        for i in list.as_array().unwrap() {
            let i = i.as_u64().unwrap() as usize;
            assert!(i < samples);
            assert!(seen.insert(i), "index {i} appears twice");
        }
    }
    assert_eq!(seen.len(), samples);
    assert!(obj["discarded"].as_array().unwrap().len() < 10);
    assert!(clients.iter().all(|c| !c.as_array().unwrap().is_empty()));
}

#[test]
fn run_is_reproducible_and_feeds_report_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let res = fedd2s(&["run", "--config", path_str(&cfg), "--out", path_str(out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let stdout = String::from_utf8(res.stdout).unwrap();
        assert!(stdout.starts_with("average UA over last 2 rounds: "), "{stdout}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // A seed override changes the run.
    let c = dir.path().join("c.json");
    assert!(fedd2s(&["run", "--config", path_str(&cfg), "--seed", "5", "--out", path_str(&c)]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let report = dir.path().join("report");
    let res = fedd2s(&["report-data", "--metrics", path_str(&a), "--out", path_str(&report), "--bucket-width", "25"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let log = load_metrics(&a).unwrap();
    let curve = std::fs::read_to_string(report.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("round,mean_accuracy"));
    assert_eq!(curve.lines().count(), 1 + 4);
    let ua = std::fs::read_to_string(report.join("client_ua.csv")).unwrap();
    let per_client: Vec<f64> = ua.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(per_client.len(), 4);
    let mean = per_client.iter().sum::<f64>() / 4.0;
    assert!((mean - average_ua(&log, 2).unwrap()).abs() < 1e-9);

    let fairness = std::fs::read_to_string(report.join("fairness.csv")).unwrap();
    let counts: usize = fairness.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 4);
    assert_eq!(fairness.lines().count(), 1 + 4);

    let schedule = std::fs::read_to_string(report.join("schedule.csv")).unwrap();
    let selected: usize = log.rounds.iter().map(|r| r.selected.len()).sum();
    assert_eq!(schedule.lines().count(), 1 + selected);
}

#[test]
fn csv_metrics_round_trip_through_report_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let json = dir.path().join("m.json");
    let csv = dir.path().join("m.csv");
    assert!(fedd2s(&["run", "--config", path_str(&cfg), "--out", path_str(&json)]).status.success());
    assert!(fedd2s(&["run", "--config", path_str(&cfg), "--out", path_str(&csv)]).status.success());
    let from_json = load_metrics(&json).unwrap();
    let from_csv = load_metrics(&csv).unwrap();
    assert_eq!(from_json.rounds, from_csv.rounds);

    let text = std::fs::read_to_string(&csv).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, fedd2s::experiment::CSV_COLUMNS.join(","));
}

#[test]
fn report_data_names_a_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "round,client_id,selected,test_acc\n1,0,1,0.5\n").unwrap();
    let out = fedd2s(&["report-data", "--metrics", path_str(&csv), "--out", path_str(&dir.path().join("r"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("distill_layer"), "{stderr}");
}
