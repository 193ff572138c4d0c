//! Result artifacts: metric and weight tables plus the summary document.

use std::fs;

use fedmtl::config::{AggregationMode, ExperimentConfig};
use fedmtl::federation::{manifest, run_experiment, run_with_baseline};
use fedmtl::metrics::{emit, load_final_metrics, RunResult, METRICS_FILE, SUMMARY_FILE, WEIGHTS_FILE};

fn tiny(mode: AggregationMode, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::benchmark(rounds, 5).with_mode(mode);
    for c in &mut cfg.scenario.clients {
        c.n_train = 12;
        c.n_test = 30;
    }
    cfg.batch_size = 6;
    cfg
}

#[test]
fn empty_result_gives_header_only_tables() {
    let cfg = tiny(AggregationMode::Local, 1);
    let result = RunResult {
        rounds: Vec::new(),
        final_metrics: Vec::new(),
        delta_m: None,
        manifest: manifest(&cfg),
        config: cfg,
        wall_time_secs: 0.0,
    };
    let dir = tempfile::tempdir().unwrap();
    emit(&result, dir.path()).unwrap();
    assert_eq!(
        fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(),
        "round,client,task,metric,lower_is_better,value\n"
    );
    assert_eq!(
        fs::read_to_string(dir.path().join(WEIGHTS_FILE)).unwrap(),
        "round,client,weight,task,layer,value\n"
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert!(summary["delta_m"].is_null());
}

#[test]
fn two_rounds_give_one_row_per_round_client_and_task() {
    let cfg = tiny(AggregationMode::Hca2, 2);
    let tasks_total: usize = cfg.scenario.clients.iter().map(|c| c.tasks.len()).sum();
    let result = run_experiment(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit(&result, dir.path()).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join(METRICS_FILE)).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * tasks_total);
    for row in &rows {
        let value: f64 = row[5].parse().unwrap();
        assert!(value.is_finite());
        assert!(matches!(&row[4], "0" | "1"));
    }
}

#[test]
fn weight_table_has_alpha_per_client_and_beta_per_layer() {
    let cfg = tiny(AggregationMode::Hca2, 2);
    let clients = cfg.scenario.clients.len();
    let decoders: usize = cfg.scenario.clients.iter().map(|c| c.tasks.len()).sum();
    let layers = cfg.arch.decoder_schema().layers().len();
    let result = run_experiment(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit(&result, dir.path()).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join(WEIGHTS_FILE)).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let alphas = rows.iter().filter(|r| &r[2] == "alpha").count();
    let betas = rows.iter().filter(|r| &r[2] == "beta").count();
    assert_eq!(alphas, 2 * clients);
    assert_eq!(betas, 2 * decoders * layers);
}

#[test]
fn re_emitting_is_byte_identical_and_summary_reloads() {
    let (result, _) = run_with_baseline(tiny(AggregationMode::Fedavg, 2)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit(&result, a.path()).unwrap();
    emit(&result, b.path()).unwrap();
    for f in [METRICS_FILE, WEIGHTS_FILE, SUMMARY_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_final_metrics(a.path()).unwrap(), result.final_metrics);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["delta_m"].as_f64(), result.delta_m);
    assert_eq!(summary["manifest"]["mode"], "fedavg");
}

#[test]
fn unwritable_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let result = run_experiment(tiny(AggregationMode::Local, 1)).unwrap();
    let err = emit(&result, &blocker.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}
