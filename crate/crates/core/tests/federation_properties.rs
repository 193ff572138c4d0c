//! Round-loop invariants: head locality, mode degeneracy, determinism and
//! independence from client scheduling.

use fedmtl::config::{AggregationMode, ExperimentConfig};
use fedmtl::data::make_scenario;
use fedmtl::federation::{client_update, run_experiment, Federation};
use fedmtl::model::TaskId;
use fedmtl::seed::{rng_for, Stream};
use fedmtl::Error;

fn small(mode: AggregationMode, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::benchmark(rounds, 11).with_mode(mode);
    for c in &mut cfg.scenario.clients {
        c.n_train = 16;
        c.n_test = 50;
    }
    cfg.batch_size = 8;
    cfg
}

#[test]
fn heads_only_ever_see_local_training() {
    for mode in AggregationMode::ALL {
        let mut fed = Federation::new(small(mode, 3)).unwrap();
        for round in 1..=3u32 {
            let before = fed.state().models.clone();
            let expected: Vec<_> = before
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let mut rng = rng_for(11, Stream::ClientRound { client: i as u32, round });
                    let upd = client_update(
                        &fed.state().clients[i],
                        m,
                        &fed.datasets()[i],
                        1,
                        fed.config().lr,
                        8,
                        &mut rng,
                    )
                    .unwrap();
                    upd.trained.params.heads
                })
                .collect();
            fed.run_round().unwrap();
            for (m, heads) in fed.state().models.iter().zip(&expected) {
                assert_eq!(&m.params.heads, heads, "{mode} round {round}");
            }
        }
    }
}

#[test]
fn degenerate_hca2_is_local_training_bit_for_bit() {
    let mut cfg = small(AggregationMode::Hca2, 10);
    cfg.conflict_averse.c = 0.0;
    cfg.hyper.lr = 0.0;
    cfg.hyper.frozen = true;
    cfg.hyper.init_alpha = 0.0;
    cfg.hyper.init_beta = 0.0;
    let hca = run_experiment(cfg.clone()).unwrap();
    let local = run_experiment(cfg.with_mode(AggregationMode::Local)).unwrap();
    assert_eq!(hca.rounds, local.rounds);
    assert_eq!(hca.final_metrics, local.final_metrics);
}

#[test]
fn one_round_of_local_mode_is_one_round_of_local_training() {
    let cfg = small(AggregationMode::Local, 1);
    let mut fed = Federation::new(cfg.clone()).unwrap();
    let manual: Vec<_> = fed
        .state()
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = rng_for(11, Stream::ClientRound { client: i as u32, round: 1 });
            let upd = client_update(&fed.state().clients[i], m, &fed.datasets()[i], 1, cfg.lr, 8, &mut rng)
                .unwrap();
            let tasks: Vec<TaskId> = upd.trained.tasks.keys().cloned().collect();
            upd.trained.evaluate(&fed.datasets()[i].test, &tasks).unwrap()
        })
        .collect();
    let record = fed.run_round().unwrap();
    let mut k = 0;
    for per_client in &manual {
        for metric in per_client.values() {
            assert_eq!(&record.metrics[k].metric, metric);
            k += 1;
        }
    }
    assert_eq!(k, record.metrics.len());
}

#[test]
fn repeated_runs_are_identical() {
    for mode in [AggregationMode::Hca2, AggregationMode::Fedavg] {
        let a = run_experiment(small(mode, 4)).unwrap();
        let b = run_experiment(small(mode, 4)).unwrap();
        assert_eq!(a.rounds, b.rounds, "{mode}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = small(AggregationMode::Hca2, 3);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg.clone()))
        .unwrap();
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg))
        .unwrap();
    assert_eq!(one.rounds, many.rounds);
}

#[test]
fn adding_a_client_leaves_other_clients_data_alone() {
    let cfg = small(AggregationMode::Local, 1);
    let mut bigger = cfg.clone();
    let mut extra = bigger.scenario.clients[0].clone();
    extra.id = "st_extra".into();
    bigger.scenario.clients.push(extra);
    let a = make_scenario(&cfg.scenario, 11).unwrap();
    let b = make_scenario(&bigger.scenario, 11).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train, y.train);
        assert_eq!(x.test, y.test);
    }
}

#[test]
fn hyper_weights_stay_in_range_and_are_logged_per_layer() {
    let res = run_experiment(small(AggregationMode::Hca2, 5)).unwrap();
    let layers = ExperimentConfig::benchmark(1, 0).arch.decoder_schema().layers().len();
    for r in &res.rounds {
        assert_eq!(r.alpha.len(), 6);
        for (client, tasks) in &r.beta {
            for per_layer in tasks.values() {
                assert_eq!(per_layer.len(), layers, "{client}");
                assert!(per_layer.values().all(|b| (0.0..=1.0).contains(b)));
            }
        }
    }
}

#[test]
fn divergence_is_reported_with_the_round() {
    let mut cfg = small(AggregationMode::Fedavg, 3);
    cfg.lr = 1e200;
    match run_experiment(cfg) {
        Err(Error::Round { round, .. }) => assert!(round >= 1),
        other => panic!("expected a round failure, got {:?}", other.map(|r| r.rounds.len())),
    }
}
