//! Round loop: local training on every client, then server aggregation.
//!
//! Each round the clients train from their current models and report the
//! encoder and decoder deltas; heads are updated on the client and never
//! leave it. The server then aggregates according to the configured mode and
//! hands every client its personalized encoder and decoders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    self, aggregate_decoders, apply_layerwise_update, apply_personalized_update,
    solve_conflict_averse, ConflictAverseConfig, DecoderKey, HyperConfig, HyperUpdateOrder,
    HyperWeights,
};
use crate::config::{AggregationMode, ExperimentConfig};
use crate::data::{make_scenario, BatchSampler, ClientDataset, ClientId};
use crate::error::{Error, Result};
use crate::metrics::{delta_m_clients, ClientTaskMetric, RoundRecord, RunResult};
use crate::model::{init_model, Batch, ClientModel, TaskId};
use crate::param::{unflatten, FlatVector, ParamTree};
use crate::seed::{rng_for, Stream};

/// Encoder and decoder deltas one client sends to the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDelta {
    pub client: ClientId,
    pub encoder: ParamTree,
    pub decoders: BTreeMap<TaskId, ParamTree>,
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub delta: ClientDelta,
    pub trained: ClientModel,
    pub mean_loss: f64,
}

/// Runs `epochs` epochs of mini-batch SGD on the summed task loss and returns
/// the parameter change of the shared parts together with the trained model.
pub fn client_update(
    client: &ClientId,
    model: &ClientModel,
    dataset: &ClientDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<ClientUpdate> {
    for t in model.tasks.keys() {
        if !dataset.tasks.contains(t) {
            return Err(Error::InvalidArgument(format!(
                "client {client} model task {t} has no labels in its dataset"
            )));
        }
    }
    let tasks: Vec<TaskId> = model.tasks.keys().cloned().collect();
    let mut sampler = BatchSampler::new(dataset.n_train(), batch_size.min(dataset.n_train()))?;
    let mut current = model.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for epoch in 0..epochs {
        for indices in sampler.epoch(rng) {
            let batch = dataset.train_batch(&indices);
            let lg = current.loss_and_grad(&batch, &tasks).map_err(|e| {
                Error::NonFinite(format!("client {client} epoch {epoch} step {steps}: {e}"))
            })?;
            loss_sum += lg.total_loss();
            steps += 1;
            current = current.sgd_step(&lg.grad, lr)?;
        }
    }
    if !current.params.all_finite() {
        return Err(Error::NonFinite(format!("client {client} parameters diverged")));
    }
    let delta = ClientDelta {
        client: client.clone(),
        encoder: current.params.encoder.sub(&model.params.encoder)?,
        decoders: current
            .params
            .decoders
            .iter()
            .map(|(t, d)| Ok((t.clone(), d.sub(&model.params.decoders[t])?)))
            .collect::<Result<_>>()?,
    };
    Ok(ClientUpdate {
        delta,
        trained: current,
        mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
    })
}

/// Shared-encoder update of a multi-task model after one plain gradient step
/// on `Σ_t L_t`: `−lr · Σ_t g_t`.
pub fn mtl_reference_step(model: &ClientModel, batch: &Batch, lr: f64) -> Result<ParamTree> {
    let tasks: Vec<TaskId> = model.tasks.keys().cloned().collect();
    let lg = model.loss_and_grad(batch, &tasks)?;
    Ok(lg.grad.encoder.scale(-lr))
}

/// Server-side settings for one round.
#[derive(Clone, Debug)]
pub struct ServerSettings {
    pub mode: AggregationMode,
    pub conflict_averse: ConflictAverseConfig,
    pub hyper: HyperConfig,
}

impl ServerSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            mode: cfg.mode,
            conflict_averse: cfg.conflict_averse.clone(),
            hyper: cfg.hyper.clone(),
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "fedmtl.round_state";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What the server holds between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    /// Completed rounds.
    pub round: usize,
    pub clients: Vec<ClientId>,
    /// Client models after the last aggregation, heads included.
    pub models: Vec<ClientModel>,
    pub hyper: HyperWeights,
    /// Last round's aggregated encoder update, for next-round weight steps.
    pub prev_encoder_agg: Option<ParamTree>,
    /// Last round's aggregated decoder updates, for next-round weight steps.
    pub prev_decoder_agg: BTreeMap<ClientId, BTreeMap<TaskId, ParamTree>>,
    /// Deltas gathered for the round in progress.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<ClientDelta>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    state: RoundState,
    history: Vec<RoundRecord>,
}

impl RoundState {
    pub fn save(&self, history: &[RoundRecord], path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            state: self.clone(),
            history: history.to_vec(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Serialization {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(RoundState, Vec<RoundRecord>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ser = |message: String| Error::Serialization {
            path: path.to_path_buf(),
            message,
        };
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| ser(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(ser(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        Ok((file.state, file.history))
    }
}

fn flat(tree: &ParamTree) -> FlatVector {
    tree.to_flat()
}

/// Aggregates the gathered deltas and applies them, consuming `state.reports`.
pub fn server_round(mut state: RoundState, settings: &ServerSettings) -> Result<RoundState> {
    let reports: BTreeMap<ClientId, ClientDelta> = std::mem::take(&mut state.reports)
        .into_iter()
        .map(|r| (r.client.clone(), r))
        .collect();
    for c in &state.clients {
        if !reports.contains_key(c) {
            return Err(Error::MissingReport(c.to_string()));
        }
    }
    if reports.len() != state.clients.len() {
        return Err(Error::InvalidArgument("report from an unknown client".into()));
    }
    let deltas: Vec<&ClientDelta> = state.clients.iter().map(|c| &reports[c]).collect();
    let mode = settings.mode;
    let hyper_cfg = &settings.hyper;

    // encoder
    let mut new_encoders: Vec<ParamTree> = Vec::with_capacity(deltas.len());
    match mode {
        AggregationMode::Fedavg => {
            let mean = unflatten(&aggregation::fedavg(
                &deltas.iter().map(|d| flat(&d.encoder)).collect::<Vec<_>>(),
            )?);
            for model in &state.models {
                new_encoders.push(model.params.encoder.add(&mean)?);
            }
        }
        m if m.aggregates_encoder() => {
            let enc: Vec<FlatVector> = deltas.iter().map(|d| flat(&d.encoder)).collect();
            let solution = solve_conflict_averse(&enc, &settings.conflict_averse)?;
            let u_tilde = unflatten(&solution.u_tilde);
            let signal = match hyper_cfg.order {
                HyperUpdateOrder::SameRound => Some(&u_tilde),
                HyperUpdateOrder::NextRound => state.prev_encoder_agg.as_ref(),
            };
            for (i, client) in state.clients.iter().enumerate() {
                let current = state.hyper.alpha.get(client).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("no alpha for client {client}"))
                })?;
                if let (false, Some(sig)) = (hyper_cfg.frozen, signal) {
                    let next = state.hyper.step(
                        current,
                        flat(sig).as_slice(),
                        flat(&deltas[i].encoder).as_slice(),
                    );
                    state.hyper.alpha.insert(client.clone(), next);
                }
                new_encoders.push(apply_personalized_update(
                    &state.models[i].params.encoder,
                    &deltas[i].encoder,
                    state.hyper.alpha[client],
                    &u_tilde,
                )?);
            }
            state.prev_encoder_agg = Some(u_tilde);
        }
        _ => {
            for (model, d) in state.models.iter().zip(&deltas) {
                new_encoders.push(model.params.encoder.add(&d.encoder)?);
            }
        }
    }

    // decoders
    let mut new_decoders: Vec<BTreeMap<TaskId, ParamTree>> = Vec::with_capacity(deltas.len());
    match mode {
        AggregationMode::Fedavg => {
            let all: Vec<FlatVector> = deltas
                .iter()
                .flat_map(|d| d.decoders.values().map(flat))
                .collect();
            let mean = unflatten(&aggregation::fedavg(&all)?);
            for model in &state.models {
                new_decoders.push(
                    model
                        .params
                        .decoders
                        .iter()
                        .map(|(t, p)| Ok((t.clone(), p.add(&mean)?)))
                        .collect::<Result<_>>()?,
                );
            }
        }
        m if m.aggregates_decoders() => {
            let mut updates = BTreeMap::new();
            for d in &deltas {
                for (t, tree) in &d.decoders {
                    updates.insert(DecoderKey::new(d.client.clone(), t.clone()), tree.clone());
                }
            }
            let aggregated = aggregate_decoders(&updates)?;
            let mut current_agg: BTreeMap<ClientId, BTreeMap<TaskId, ParamTree>> = BTreeMap::new();
            for (key, tree) in aggregated {
                current_agg.entry(key.client).or_default().insert(key.task, tree);
            }
            for (i, client) in state.clients.iter().enumerate() {
                let mut out = BTreeMap::new();
                for (task, delta) in &deltas[i].decoders {
                    let tilde = &current_agg[client][task];
                    let signal = match hyper_cfg.order {
                        HyperUpdateOrder::SameRound => Some(tilde),
                        HyperUpdateOrder::NextRound => {
                            state.prev_decoder_agg.get(client).and_then(|m| m.get(task))
                        }
                    };
                    if let (false, Some(sig)) = (hyper_cfg.frozen, signal) {
                        let updated: Vec<(String, f64)> = delta
                            .layers()
                            .iter()
                            .zip(sig.layers())
                            .map(|(dl, sl)| {
                                let current = state.beta(client, task, &dl.id)?;
                                Ok((
                                    dl.id.clone(),
                                    state.hyper.step(current, sl.tensor.data(), dl.tensor.data()),
                                ))
                            })
                            .collect::<Result<_>>()?;
                        let slot = state
                            .hyper
                            .beta
                            .get_mut(client)
                            .and_then(|m| m.get_mut(task))
                            .expect("checked by beta()");
                        slot.extend(updated);
                    }
                    let psi = &state.hyper.beta[client][task];
                    let prev = &state.models[i].params.decoders[task];
                    out.insert(task.clone(), apply_layerwise_update(prev, delta, psi, tilde)?);
                }
                new_decoders.push(out);
            }
            state.prev_decoder_agg = current_agg;
        }
        _ => {
            for (model, d) in state.models.iter().zip(&deltas) {
                new_decoders.push(
                    model
                        .params
                        .decoders
                        .iter()
                        .map(|(t, p)| Ok((t.clone(), p.add(&d.decoders[t])?)))
                        .collect::<Result<_>>()?,
                );
            }
        }
    }

    for ((model, enc), decs) in state.models.iter_mut().zip(new_encoders).zip(new_decoders) {
        model.params.encoder = enc;
        model.params.decoders = decs;
        if !model.params.all_finite() {
            return Err(Error::NonFinite("aggregated parameters".into()));
        }
    }
    state.round += 1;
    Ok(state)
}

impl RoundState {
    fn beta(&self, client: &ClientId, task: &TaskId, layer: &str) -> Result<f64> {
        self.hyper
            .beta
            .get(client)
            .and_then(|m| m.get(task))
            .and_then(|m| m.get(layer))
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no beta for {client}/{task}/{layer}")))
    }
}

/// A running federation: datasets plus server state.
pub struct Federation {
    cfg: ExperimentConfig,
    datasets: Vec<ClientDataset>,
    state: RoundState,
    history: Vec<RoundRecord>,
}

impl Federation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let datasets = make_scenario(&cfg.scenario, cfg.seed)?;
        let mut models = Vec::with_capacity(datasets.len());
        for spec in &cfg.scenario.clients {
            let tasks = spec
                .tasks
                .iter()
                .map(|t| (t.clone(), cfg.scenario.task_kind(t).expect("validated")))
                .collect();
            models.push(init_model(&cfg.arch, &tasks, cfg.seed)?);
        }
        let clients: Vec<ClientId> = cfg.scenario.clients.iter().map(|c| c.id.clone()).collect();
        let layer_ids: Vec<String> = cfg
            .arch
            .decoder_schema()
            .layers()
            .iter()
            .map(|l| l.id.clone())
            .collect();
        let hyper = HyperWeights::init(
            &cfg.hyper,
            cfg.scenario
                .clients
                .iter()
                .map(|c| (&c.id, c.tasks.as_slice())),
            &layer_ids,
        );
        Ok(Self {
            cfg,
            datasets,
            state: RoundState {
                round: 0,
                clients,
                models,
                hyper,
                prev_encoder_agg: None,
                prev_decoder_agg: BTreeMap::new(),
                reports: Vec::new(),
            },
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by the same config.
    pub fn resume(cfg: ExperimentConfig, state: RoundState, history: Vec<RoundRecord>) -> Result<Self> {
        let mut fed = Self::new(cfg)?;
        if state.clients != fed.state.clients {
            return Err(Error::InvalidArgument("checkpoint client list does not match config".into()));
        }
        if history.len() != state.round {
            return Err(Error::InvalidArgument("checkpoint history length mismatch".into()));
        }
        fed.state = state;
        fed.history = history;
        Ok(fed)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn datasets(&self) -> &[ClientDataset] {
        &self.datasets
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    pub fn evaluate(&self) -> Result<Vec<ClientTaskMetric>> {
        let mut out = Vec::new();
        for ((client, model), data) in self.state.clients.iter().zip(&self.state.models).zip(&self.datasets) {
            let tasks: Vec<TaskId> = model.tasks.keys().cloned().collect();
            for (_, metric) in model.evaluate(&data.test, &tasks)? {
                out.push(ClientTaskMetric {
                    client: client.clone(),
                    metric,
                });
            }
        }
        Ok(out)
    }

    /// One full communication round; returns its record.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.state.round + 1;
        self.step(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn step(&mut self, round: usize) -> Result<RoundRecord> {
        let cfg = &self.cfg;
        let updates: Vec<ClientUpdate> = self
            .state
            .clients
            .par_iter()
            .enumerate()
            .map(|(i, client)| {
                let mut rng = rng_for(
                    cfg.seed,
                    Stream::ClientRound {
                        client: i as u32,
                        round: round as u32,
                    },
                );
                client_update(
                    client,
                    &self.state.models[i],
                    &self.datasets[i],
                    cfg.epochs_for(i),
                    cfg.lr,
                    cfg.batch_size,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;

        let mut train_loss = BTreeMap::new();
        let mut reports = Vec::with_capacity(updates.len());
        for (model, update) in self.state.models.iter_mut().zip(updates) {
            // heads are trained and kept on the client
            model.params.heads = update.trained.params.heads;
            train_loss.insert(update.delta.client.clone(), update.mean_loss);
            reports.push(update.delta);
        }
        let mut state = std::mem::replace(&mut self.state, placeholder_state());
        state.reports = reports;
        self.state = server_round(state, &ServerSettings::from_config(cfg))?;

        let evaluate = round.is_multiple_of(cfg.eval_every) || round == cfg.rounds;
        let metrics = if evaluate { self.evaluate()? } else { Vec::new() };
        let record = RoundRecord {
            round,
            train_loss,
            metrics,
            alpha: self.state.hyper.alpha.clone(),
            beta: self.state.hyper.beta.clone(),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining rounds, calling `after_round` after each.
    pub fn run_with(mut self, mut after_round: impl FnMut(&Federation) -> Result<()>) -> Result<RunResult> {
        let started = Instant::now();
        while !self.is_done() {
            self.run_round()?;
            after_round(&self)?;
        }
        let final_metrics = match self.history.last() {
            Some(r) if !r.metrics.is_empty() => r.metrics.clone(),
            _ => self.evaluate()?,
        };
        Ok(RunResult {
            rounds: self.history,
            final_metrics,
            delta_m: None,
            manifest: manifest(&self.cfg),
            config: self.cfg,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }
}

fn placeholder_state() -> RoundState {
    RoundState {
        round: 0,
        clients: Vec::new(),
        models: Vec::new(),
        hyper: HyperWeights {
            alpha: BTreeMap::new(),
            beta: BTreeMap::new(),
            hyper_lr: 0.0,
            clamp_range: [0.0, 0.0],
        },
        prev_encoder_agg: None,
        prev_decoder_agg: BTreeMap::new(),
        reports: Vec::new(),
    }
}

/// Defaults and modelling choices in effect for a run.
pub fn manifest(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let [lo, hi] = cfg.hyper.clamp;
    let entries = [
        ("mode", cfg.mode.to_string()),
        ("optimizer", "plain SGD".to_string()),
        ("losses", "regression: mean squared error; classification: mean logistic loss".into()),
        ("task_losses_combined", "unweighted sum".into()),
        ("layer_unit", "each weight matrix and bias vector is one layer".into()),
        ("conflict_averse_c", cfg.conflict_averse.c.to_string()),
        (
            "conflict_averse_solver",
            format!(
                "projected gradient descent on the simplex, backtracking from step {}, at most {} iterations, tol {}",
                cfg.conflict_averse.solver_step,
                cfg.conflict_averse.solver_max_iters,
                cfg.conflict_averse.solver_tol
            ),
        ),
        ("attention_temperature", "sqrt(flattened layer length)".into()),
        ("encoder_aggregate", "one shared update per round, personalized through alpha".into()),
        (
            "hyper_weight_update",
            format!(
                "ascent, step {} times cosine of aggregated and local update, clamped to [{lo}, {hi}]",
                cfg.hyper.lr
            ),
        ),
        (
            "hyper_weight_init",
            format!("alpha {}, beta {}", cfg.hyper.init_alpha, cfg.hyper.init_beta),
        ),
        (
            "hyper_weight_order",
            match cfg.hyper.order {
                HyperUpdateOrder::SameRound => "same round, before applying the aggregate".into(),
                HyperUpdateOrder::NextRound => "previous aggregate scored against this round's deltas".into(),
            },
        ),
        ("hyper_weights_frozen", cfg.hyper.frozen.to_string()),
        ("fedavg_decoders", "mean update over every decoder in the federation".into()),
        ("norm_guard", aggregation::NORM_GUARD.to_string()),
        ("participation", "all clients every round".into()),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunResult> {
    Federation::new(cfg)?.run_with(|_| Ok(()))
}

/// Runs `cfg` and, unless it already is the local baseline, the local
/// baseline with the same seed, filling in `delta_m`.
pub fn run_with_baseline(cfg: ExperimentConfig) -> Result<(RunResult, RunResult)> {
    let baseline = run_experiment(cfg.clone().with_mode(AggregationMode::Local))?;
    let mut result = if cfg.mode == AggregationMode::Local {
        baseline.clone()
    } else {
        run_experiment(cfg)?
    };
    result.delta_m = Some(delta_m_clients(&result.final_metrics, &baseline.final_metrics)?);
    Ok((result, baseline))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClientSpec, ScenarioConfig};
    use crate::model::ArchSpec;

    fn tiny_cfg(mode: AggregationMode) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::benchmark(2, 3).with_mode(mode);
        cfg.scenario.clients.truncate(3);
        for c in &mut cfg.scenario.clients {
            c.n_train = 12;
            c.n_test = 20;
        }
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn local_mode_is_prev_plus_delta() {
        let mut fed = Federation::new(tiny_cfg(AggregationMode::Local)).unwrap();
        let before = fed.state().models.clone();
        let mut rng = rng_for(3, Stream::ClientRound { client: 0, round: 1 });
        let upd = client_update(
            &fed.state().clients[0],
            &before[0],
            &fed.datasets()[0],
            1,
            fed.config().lr,
            4,
            &mut rng,
        )
        .unwrap();
        fed.run_round().unwrap();
        let after = &fed.state().models[0];
        assert_eq!(after.params.encoder, before[0].params.encoder.add(&upd.delta.encoder).unwrap());
        assert_eq!(after.params.heads, upd.trained.params.heads);
    }

    #[test]
    fn zero_lr_gives_zero_delta() {
        let fed = Federation::new(tiny_cfg(AggregationMode::Local)).unwrap();
        let mut rng = rng_for(0, Stream::ModelInit);
        let upd = client_update(
            &fed.state().clients[1],
            &fed.state().models[1],
            &fed.datasets()[1],
            3,
            0.0,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(upd.delta.encoder.to_flat().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_report_is_an_error() {
        let fed = Federation::new(tiny_cfg(AggregationMode::Hca2)).unwrap();
        let mut state = fed.state().clone();
        state.reports = vec![ClientDelta {
            client: state.clients[0].clone(),
            encoder: state.models[0].params.encoder.zeros_like(),
            decoders: BTreeMap::new(),
        }];
        let err = server_round(state, &ServerSettings::from_config(fed.config())).unwrap_err();
        assert!(matches!(err, Error::MissingReport(ref c) if c == "st1"), "{err}");
    }

    #[test]
    fn next_round_order_leaves_round_one_local() {
        let mut cfg = tiny_cfg(AggregationMode::Hca2);
        cfg.hyper.order = HyperUpdateOrder::NextRound;
        cfg.rounds = 1;
        let hca = run_experiment(cfg.clone()).unwrap();
        let local = run_experiment(cfg.with_mode(AggregationMode::Local)).unwrap();
        assert_eq!(hca.final_metrics, local.final_metrics);
        assert!(hca.rounds[0].alpha.values().all(|&a| a == 0.0));
    }

    #[test]
    fn same_round_order_moves_weights_in_round_one() {
        let res = run_experiment(tiny_cfg(AggregationMode::Hca2)).unwrap();
        assert!(res.rounds[0].alpha.values().any(|&a| a > 0.0));
        for r in &res.rounds {
            for a in r.alpha.values() {
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn fedavg_with_identical_deltas_gives_identical_encoders() {
        // every client: same task, same domain; identical deltas come from identical data
        let mut cfg = tiny_cfg(AggregationMode::Fedavg);
        cfg.scenario = ScenarioConfig {
            clients: (0..3)
                .map(|i| ClientSpec {
                    id: format!("c{i}").into(),
                    tasks: vec![if i == 0 { "t1" } else { "t0" }.into()],
                    domain: 0,
                    n_train: 10,
                    n_test: 10,
                    local_epochs: None,
                })
                .collect(),
            ..ScenarioConfig::default()
        };
        let mut fed = Federation::new(cfg).unwrap();
        fed.run_round().unwrap();
        let encs: Vec<&ParamTree> = fed.state().models.iter().map(|m| &m.params.encoder).collect();
        assert_eq!(encs[0], encs[1]);
        assert_eq!(encs[1], encs[2]);
    }

    #[test]
    fn enc_and_dec_only_touch_their_part() {
        for (mode, enc_changes, dec_changes) in [
            (AggregationMode::EncOnly, true, false),
            (AggregationMode::DecOnly, false, true),
        ] {
            let mut cfg = tiny_cfg(mode);
            cfg.rounds = 1;
            let a = Federation::new(cfg.clone()).unwrap();
            let mut fed = Federation::new(cfg.clone()).unwrap();
            let mut loc = Federation::new(cfg.with_mode(AggregationMode::Local)).unwrap();
            fed.run_round().unwrap();
            loc.run_round().unwrap();
            drop(a);
            let (m, l) = (&fed.state().models[0], &loc.state().models[0]);
            assert_eq!(m.params.encoder != l.params.encoder, enc_changes, "{mode}");
            assert_eq!(m.params.decoders != l.params.decoders, dec_changes, "{mode}");
            assert_eq!(m.params.heads, l.params.heads);
        }
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let mut cfg = tiny_cfg(AggregationMode::Local);
        cfg.arch = ArchSpec {
            input_dim: 3,
            ..ArchSpec::default()
        };
        assert!(Federation::new(cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = tiny_cfg(AggregationMode::Hca2);
        let full = run_experiment(cfg.clone()).unwrap();

        let mut fed = Federation::new(cfg.clone()).unwrap();
        fed.run_round().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        fed.state().save(fed.history(), &path).unwrap();
        let (state, history) = RoundState::load(&path).unwrap();
        assert_eq!(&state, fed.state());
        let resumed = Federation::resume(cfg, state, history).unwrap().run_with(|_| Ok(())).unwrap();
        assert_eq!(resumed.rounds, full.rounds);
    }
}
