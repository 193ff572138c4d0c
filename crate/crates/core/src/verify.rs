//! Self-checks behind `fedmtl verify`.
//!
//! Each suite compares an implementation against an independent oracle on
//! randomly drawn instances: finite differences for gradients, an exhaustive
//! simplex grid for the conflict-averse solver, a naive double loop for cross
//! attention, and published benchmark rows for `delta_m`.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aggregation::{
    apply_layerwise_update, apply_personalized_update, conflict_averse_update, cross_attention_layer,
    hyper_weight_delta, objective_f, solve_conflict_averse, ConflictAverseConfig, SimplexWeights,
};
use crate::data::{ClientDataset, ClientId, DomainDescriptor};
use crate::error::{Error, Result};
use crate::federation::{client_update, mtl_reference_step};
use crate::metrics::{delta_m, Direction, TaskMetric};
use crate::model::{init_model, ArchSpec, Batch, ClientModel, ModelParams, TaskId, TaskKind};
use crate::param::{self, FlatVector, ParamTree, Tensor};

pub const SUITES: [&str; 6] = ["gradient", "solver", "attention", "one_step", "hyper_chain", "delta_m"];

/// `Ũ` as a function of simplex weights, updates, their mean and `φ`.
pub type UpdateRule = fn(&SimplexWeights, &[FlatVector], &FlatVector, f64) -> Result<(FlatVector, Option<f64>)>;

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    /// First violated property, if any.
    pub failure: Option<String>,
    pub secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type Outcome = std::result::Result<usize, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn report(name: &'static str, f: impl FnOnce() -> Outcome) -> SuiteReport {
    let started = Instant::now();
    let (checks, failure) = match f() {
        Ok(n) => (n, None),
        Err(msg) => (0, Some(msg)),
    };
    SuiteReport {
        name,
        checks,
        failure,
        secs: started.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    Ok(match name {
        "gradient" => report("gradient", || gradient_suite(20, seed)),
        "solver" => report("solver", || solver_suite(100, seed, conflict_averse_update)),
        "attention" => report("attention", || attention_suite(100, seed)),
        "one_step" => report("one_step", || one_step_equivalence_suite(seed)),
        "hyper_chain" => report("hyper_chain", || hyper_chain_suite(50, seed)),
        "delta_m" => report("delta_m", delta_m_suite),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite {other:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    })
}

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|s| run_suite(s, seed).expect("listed suites exist"))
        .collect()
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

// ---- model gradients -------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_TOL: f64 = 1e-8;

fn random_arch(rng: &mut impl Rng) -> ArchSpec {
    let widths = |rng: &mut ChaCha8Rng, max: usize| -> Vec<usize> {
        (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=max)).collect()
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    ArchSpec {
        input_dim: local.random_range(1..=4),
        encoder_widths: widths(&mut local, 5),
        decoder_widths: widths(&mut local, 4),
    }
}

fn random_tasks(rng: &mut impl Rng, n: usize) -> BTreeMap<TaskId, TaskKind> {
    (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.5) {
                TaskKind::Regression
            } else {
                TaskKind::Classification
            };
            (TaskId::new(format!("t{i}")), kind)
        })
        .collect()
}

fn random_batch(rng: &mut impl Rng, n: usize, dim: usize, tasks: &BTreeMap<TaskId, TaskKind>) -> Batch {
    let x = Array2::from_shape_vec((n, dim), normal_vec(rng, n * dim)).expect("sized");
    let labels = tasks
        .iter()
        .map(|(t, kind)| {
            let y: Vec<f64> = match kind {
                TaskKind::Regression => normal_vec(rng, n),
                TaskKind::Classification => (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect(),
            };
            (t.clone(), Array1::from(y))
        })
        .collect();
    Batch { x, labels }
}

fn perturbed_loss(model: &ClientModel, batch: &Batch, tasks: &[TaskId], index: usize, h: f64) -> Result<f64> {
    let mut m = model.clone();
    let mut k = 0usize;
    m.params.for_each_mut(|v| {
        if k == index {
            *v += h;
        }
        k += 1;
    });
    Ok(m.loss_and_grad(batch, tasks)?.total_loss())
}

fn flat_params(params: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.num_params());
    let mut p = params.clone();
    p.for_each_mut(|v| out.push(*v));
    out
}

/// Analytic gradients against central differences on random models.
pub fn gradient_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut checks = 0;
    for inst in 0..instances {
        let arch = random_arch(&mut rng);
        let n_tasks = rng.random_range(1..=3);
        let tasks = random_tasks(&mut rng, n_tasks);
        let mut model = lift(init_model(&arch, &tasks, rng.random()))?;
        // move away from the zero-bias initial point
        model.params.for_each_mut(|v| *v += 0.3 * rng.sample::<f64, _>(StandardNormal));
        let n = rng.random_range(1..=6);
        let batch = random_batch(&mut rng, n, arch.input_dim, &tasks);
        let ids: Vec<TaskId> = tasks.keys().cloned().collect();
        let analytic = flat_params(&lift(model.loss_and_grad(&batch, &ids))?.grad);
        for (k, &a) in analytic.iter().enumerate() {
            let up = lift(perturbed_loss(&model, &batch, &ids, k, FD_STEP))?;
            let down = lift(perturbed_loss(&model, &batch, &ids, k, -FD_STEP))?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            ensure(close(a, numeric, GRAD_REL_TOL, GRAD_ABS_TOL), || {
                format!("instance {inst} ({arch:?}), coordinate {k}: analytic {a:e} vs finite difference {numeric:e}")
            })?;
            checks += 1;
        }
    }
    Ok(checks)
}

// ---- conflict-averse solver ------------------------------------------------

pub const GRID_STEP: f64 = 1e-3;
pub const GRID_SLACK: f64 = 1e-4;
pub const CONSTRAINT_SLACK: f64 = 1e-9;
pub const IDENTICAL_TOL: f64 = 1e-12;

/// `F(w)` computed directly from the definition, without the solver's Gram
/// matrix.
fn objective_direct(w: &[f64], updates: &[Vec<f64>], mean: &[f64], sqrt_phi: f64) -> f64 {
    let n = updates.len() as f64;
    let mut u = vec![0.0; mean.len()];
    for (wi, d) in w.iter().zip(updates) {
        for (uk, dk) in u.iter_mut().zip(d) {
            *uk += wi * dk / n;
        }
    }
    let dot: f64 = u.iter().zip(mean).map(|(a, b)| a * b).sum();
    dot + sqrt_phi * u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Smallest `F` over the simplex grid with spacing [`GRID_STEP`].
pub fn grid_minimum(updates: &[Vec<f64>], mean: &[f64], phi: f64) -> f64 {
    let steps = (1.0 / GRID_STEP).round() as usize;
    let sqrt_phi = phi.sqrt();
    let mut best = f64::INFINITY;
    match updates.len() {
        1 => best = objective_direct(&[1.0], updates, mean, sqrt_phi),
        2 => {
            for i in 0..=steps {
                let a = i as f64 / steps as f64;
                best = best.min(objective_direct(&[a, 1.0 - a], updates, mean, sqrt_phi));
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let a = i as f64 / steps as f64;
                    let b = j as f64 / steps as f64;
                    let w = [a, b, (1.0 - a - b).max(0.0)];
                    best = best.min(objective_direct(&w, updates, mean, sqrt_phi));
                }
            }
        }
        n => panic!("grid oracle supports at most 3 updates, got {n}"),
    }
    best
}

fn min_inner(u: &[f64], updates: &[Vec<f64>]) -> f64 {
    updates
        .iter()
        .map(|d| param::dot(u, d))
        .fold(f64::INFINITY, f64::min)
}

/// Solver optimality and the properties of `Ũ`, with `Ũ` built by `rule`
/// from the solver's weights.
pub fn solver_suite(instances: usize, seed: u64, rule: UpdateRule) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x736f_6c76);
    let cs = [0.2, 0.4, 0.8];
    let mut checks = 0;
    for inst in 0..instances {
        let n = 2 + inst % 2;
        let c = cs[inst % cs.len()];
        let dim = rng.random_range(1..=10);
        let raw: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, dim)).collect();
        let updates: Vec<FlatVector> = raw.iter().map(|v| FlatVector::from_vec(v.clone())).collect();
        let cfg = ConflictAverseConfig::with_c(c);
        let sol = lift(solve_conflict_averse(&updates, &cfg))?;
        let mean = sol.mean_update.as_slice().to_vec();

        let f_solver = lift(objective_f(&sol.weights, &updates, &sol.mean_update, sol.phi))?.value;
        let f_grid = grid_minimum(&raw, &mean, sol.phi);
        ensure(f_solver <= f_grid + GRID_SLACK, || {
            format!("instance {inst} (N={n}, dim={dim}, c={c}): F(solver) = {f_solver} > F(grid) = {f_grid}")
        })?;

        let (u, _) = lift(rule(&sol.weights, &updates, &sol.mean_update, sol.phi))?;
        ensure(u == sol.u_tilde, || format!("instance {inst}: solver Ũ disagrees with the update rule"))?;
        let radius = c * param::norm(&sol.mean_update);
        let dist = param::norm(&lift(param::add_scaled(&u, -1.0, &sol.mean_update))?);
        ensure(dist <= radius * (1.0 + CONSTRAINT_SLACK), || {
            format!("instance {inst}: ‖Ũ − Δ̄‖ = {dist} exceeds c‖Δ̄‖ = {radius}")
        })?;
        let scale = raw.iter().map(|d| param::dot(d, d)).fold(0.0, f64::max);
        let (gain, base) = (min_inner(u.as_slice(), &raw), min_inner(&mean, &raw));
        ensure(gain >= base - 1e-6 * scale, || {
            format!("instance {inst}: min_i ⟨Ũ, Δ_i⟩ = {gain} below the mean update's {base}")
        })?;

        let zero = lift(solve_conflict_averse(&updates, &ConflictAverseConfig::with_c(0.0)))?;
        ensure(zero.u_tilde == zero.mean_update, || format!("instance {inst}: c = 0 did not return Δ̄"))?;
        let (u0, _) = lift(rule(&zero.weights, &updates, &zero.mean_update, 0.0))?;
        ensure(u0 == zero.mean_update, || format!("instance {inst}: φ = 0 rule did not return Δ̄"))?;

        let g = updates[0].clone();
        let same = vec![g.clone(); n];
        let sol_same = lift(solve_conflict_averse(&same, &cfg))?;
        let (u_same, _) = lift(rule(&sol_same.weights, &same, &sol_same.mean_update, sol_same.phi))?;
        let err = u_same
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(a, b)| (a - (1.0 + c) * b).abs())
            .fold(0.0, f64::max);
        ensure(err <= IDENTICAL_TOL * param::norm(&g).max(1.0), || {
            format!("instance {inst}: identical updates gave max error {err:e} against (1 + c)·g")
        })?;
        checks += 6;
    }
    Ok(checks)
}

// ---- cross attention --------------------------------------------------------

pub const ATTENTION_TOL: f64 = 1e-12;

/// Output of decoder `target` by the textbook double loop.
pub fn naive_attention(updates: &[Vec<f64>], target: usize) -> (Vec<f64>, Vec<f64>) {
    let d = updates[0].len();
    let mut scores = Vec::with_capacity(updates.len());
    for v in updates {
        let mut s = 0.0;
        for k in 0..d {
            s += updates[target][k] * v[k];
        }
        scores.push(s / (d as f64).sqrt());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut out = vec![0.0; d];
    for (k, o) in out.iter_mut().enumerate() {
        for (j, v) in updates.iter().enumerate() {
            *o += weights[j] * v[k];
        }
    }
    (out, weights)
}

pub fn attention_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6174_746e);
    let ks = [1, 2, 3, 8];
    let dims = [1, 5, 64];
    let mut checks = 0;
    for inst in 0..instances {
        let k = ks[inst % ks.len()];
        let d = dims[(inst / ks.len()) % dims.len()];
        let raw: Vec<Vec<f64>> = (0..k).map(|_| normal_vec(&mut rng, d)).collect();
        let updates: Vec<FlatVector> = raw.iter().map(|v| FlatVector::from_vec(v.clone())).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<FlatVector> = perm.iter().map(|&p| updates[p].clone()).collect();

        let outputs = (0..k)
            .map(|i| cross_attention_layer(&updates, i))
            .collect::<Result<Vec<_>>>();
        let outputs = lift(outputs)?;
        for (i, att) in outputs.iter().enumerate() {
            let (oracle, oracle_w) = naive_attention(&raw, i);
            let err = att
                .output
                .as_slice()
                .iter()
                .zip(&oracle)
                .chain(att.weights.iter().zip(&oracle_w))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure(err <= ATTENTION_TOL, || {
                format!("instance {inst} (K={k}, d={d}), decoder {i}: max error {err:e} against the double loop")
            })?;
            let sum: f64 = att.weights.iter().sum();
            ensure(att.weights.iter().all(|&w| w >= 0.0) && (sum - 1.0).abs() <= ATTENTION_TOL, || {
                format!("instance {inst}, decoder {i}: weights {:?} are not a distribution", att.weights)
            })?;
            checks += 2;
        }
        if k == 1 {
            ensure(outputs[0].output == updates[0], || format!("instance {inst}: K = 1 is not the identity"))?;
            checks += 1;
        }
        for (j, &p) in perm.iter().enumerate() {
            let att = lift(cross_attention_layer(&permuted, j))?;
            ensure(att.output == outputs[p].output, || {
                format!("instance {inst}: permuting the decoders changed decoder {p}'s output")
            })?;
            checks += 1;
        }
    }
    Ok(checks)
}

// ---- one-step equivalence with multi-task training ------------------------

pub const ONE_STEP_TOL: f64 = 1e-12;

fn single_task_client(mtl: &ClientModel, task: &TaskId) -> ClientModel {
    ClientModel {
        arch: mtl.arch.clone(),
        tasks: [(task.clone(), mtl.tasks[task])].into(),
        params: ModelParams {
            encoder: mtl.params.encoder.clone(),
            decoders: [(task.clone(), mtl.params.decoders[task].clone())].into(),
            heads: [(task.clone(), mtl.params.heads[task].clone())].into(),
        },
    }
}

fn dataset_for(id: &ClientId, task: &TaskId, batch: &Batch) -> ClientDataset {
    let dim = batch.x.ncols();
    let only = Batch {
        x: batch.x.clone(),
        labels: [(task.clone(), batch.labels[task].clone())].into(),
    };
    ClientDataset {
        client_id: id.clone(),
        tasks: vec![task.clone()],
        domain: DomainDescriptor {
            id: 0,
            mean: Array1::zeros(dim),
            mixing: Array2::eye(dim),
        },
        train: only.clone(),
        test: only,
    }
}

/// Max-abs gap between the average of `N` single-task clients' encoder deltas
/// (one full-batch SGD step from a shared model) and `1/N` times the
/// multi-task model's encoder step on the same batch.
pub fn one_step_gap(n: usize, rng: &mut impl Rng) -> Result<f64> {
    let arch = random_arch(rng);
    let tasks = random_tasks(rng, n);
    let mtl = init_model(&arch, &tasks, rng.random())?;
    let rows = rng.random_range(2..=8);
    let batch = random_batch(rng, rows, arch.input_dim, &tasks);
    let lr = rng.random_range(0.01..0.5);

    let reference = mtl_reference_step(&mtl, &batch, lr)?.to_flat();
    let mut deltas = Vec::with_capacity(n);
    for (i, task) in tasks.keys().enumerate() {
        let id = ClientId(format!("c{i}"));
        let client = single_task_client(&mtl, task);
        let data = dataset_for(&id, task, &batch);
        let mut client_rng = ChaCha8Rng::seed_from_u64(i as u64);
        let upd = client_update(&id, &client, &data, 1, lr, rows, &mut client_rng)?;
        deltas.push(upd.delta.encoder.to_flat());
    }
    let avg = param::mean(&deltas)?;
    Ok(avg
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, r)| (a - r / n as f64).abs())
        .fold(0.0, f64::max))
}

pub fn one_step_equivalence_suite(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7468_6d31);
    let mut checks = 0;
    for n in [2, 3, 5] {
        for trial in 0..5 {
            let gap = lift(one_step_gap(n, &mut rng))?;
            ensure(gap <= ONE_STEP_TOL, || {
                format!("N={n}, trial {trial}: averaged client step differs from the multi-task step by {gap:e}")
            })?;
            checks += 1;
        }
    }
    Ok(checks)
}

// ---- hyper weight chain rule ------------------------------------------------

pub const CHAIN_REL_TOL: f64 = 1e-6;
const CHAIN_STEP: f64 = 1e-4;

struct Quadratic {
    q: Vec<Vec<f64>>,
    center: Vec<f64>,
}

impl Quadratic {
    fn random(rng: &mut impl Rng, d: usize) -> Self {
        let a: Vec<Vec<f64>> = (0..d).map(|_| normal_vec(rng, d)).collect();
        let q = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|k| a[k][i] * a[k][j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            q,
            center: normal_vec(rng, d),
        }
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let r: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        0.5 * self.q.iter().zip(&r).map(|(row, ri)| ri * param::dot(row, &r)).sum::<f64>()
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        self.q.iter().map(|row| param::dot(row, &r)).collect()
    }
}

fn two_layer_tree(v: &[f64], split: usize) -> ParamTree {
    ParamTree::new()
        .with_layer("l0", Tensor::new(vec![split], v[..split].to_vec()).expect("sized"))
        .with_layer("l1", Tensor::new(vec![v.len() - split], v[split..].to_vec()).expect("sized"))
}

/// Finite-difference derivative of the loss in the blending weight against
/// `θ̃ᵀ∇L`, for the whole-tree weight and for each per-layer weight.
pub fn hyper_chain_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6879_7072);
    let mut checks = 0;
    for inst in 0..instances {
        let d = rng.random_range(2..=10);
        let split = rng.random_range(1..d);
        let loss = Quadratic::random(&mut rng, d);
        let prev = two_layer_tree(&normal_vec(&mut rng, d), split);
        let delta = two_layer_tree(&normal_vec(&mut rng, d), split);
        let tilde = two_layer_tree(&normal_vec(&mut rng, d), split);
        let psi: f64 = rng.random_range(0.0..1.0);

        let at = |p: f64| -> Result<f64> {
            Ok(loss.loss(apply_personalized_update(&prev, &delta, p, &tilde)?.to_flat().as_slice()))
        };
        let theta = lift(apply_personalized_update(&prev, &delta, psi, &tilde))?.to_flat();
        let grad = FlatVector::from_vec(loss.grad(theta.as_slice()));
        let analytic = lift(hyper_weight_delta(&FlatVector::from_vec(tilde.to_flat().into_vec()), &grad))?;
        let numeric = (lift(at(psi + CHAIN_STEP))? - lift(at(psi - CHAIN_STEP))?) / (2.0 * CHAIN_STEP);
        ensure(close(analytic, numeric, CHAIN_REL_TOL, 1e-10), || {
            format!("instance {inst}: θ̃ᵀ∇L = {analytic} vs finite difference {numeric}")
        })?;
        checks += 1;

        for (l, id) in ["l0", "l1"].iter().enumerate() {
            let at_layer = |p: f64| -> Result<f64> {
                let weights: BTreeMap<String, f64> = ["l0", "l1"]
                    .iter()
                    .map(|k| (k.to_string(), if k == id { p } else { psi }))
                    .collect();
                Ok(loss.loss(apply_layerwise_update(&prev, &delta, &weights, &tilde)?.to_flat().as_slice()))
            };
            let range = if l == 0 { 0..split } else { split..d };
            let t = tilde.to_flat();
            let analytic: f64 = range.clone().map(|k| t.as_slice()[k] * grad.as_slice()[k]).sum();
            let numeric =
                (lift(at_layer(psi + CHAIN_STEP))? - lift(at_layer(psi - CHAIN_STEP))?) / (2.0 * CHAIN_STEP);
            ensure(close(analytic, numeric, CHAIN_REL_TOL, 1e-10), || {
                format!("instance {inst}, layer {id}: θ̃_lᵀ∇_l L = {analytic} vs finite difference {numeric}")
            })?;
            checks += 1;
        }
    }
    Ok(checks)
}

// ---- delta_m against published rows ----------------------------------------

pub const DELTA_M_TOL: f64 = 0.01;

/// A published results table: the local baseline row, and for each method
/// its per-task metrics and the reported average change in percent.
pub struct ReferenceTable {
    pub name: &'static str,
    pub tasks: &'static [(&'static str, Direction)],
    pub local: &'static [f64],
    pub methods: &'static [(&'static str, &'static [f64], f64)],
}

use Direction::{HigherBetter as Up, LowerBetter as Down};

/// Five single-task PASCAL-Context clients and one four-task NYUD-v2 client.
pub const PASCAL_ST_NYUD_MT: ReferenceTable = ReferenceTable {
    name: "pascal-st/nyud-mt",
    tasks: &[
        ("pascal/semseg", Up),
        ("pascal/parts", Up),
        ("pascal/sal", Up),
        ("pascal/normals", Down),
        ("pascal/edge", Up),
        ("nyud/semseg", Up),
        ("nyud/depth", Down),
        ("nyud/normals", Down),
        ("nyud/edge", Up),
    ],
    local: &[51.69, 49.94, 80.91, 15.76, 71.95, 41.86, 0.6487, 20.59, 76.46],
    methods: &[
        ("fedavg", &[39.98, 37.33, 77.56, 18.27, 69.17, 38.94, 0.7858, 21.62, 75.77], -11.76),
        ("fedprox", &[44.42, 38.10, 77.26, 18.03, 69.39, 39.19, 0.8068, 21.52, 76.03], -10.68),
        ("fedper", &[54.51, 46.56, 78.85, 16.95, 71.00, 44.02, 0.6467, 21.19, 76.61], -1.11),
        ("ditto", &[46.23, 39.69, 77.99, 17.52, 69.77, 41.49, 0.6508, 20.60, 76.45], -5.57),
        ("fedamp", &[55.98, 52.05, 80.79, 15.74, 72.02, 41.67, 0.6428, 20.54, 76.40], 1.47),
        ("mat-fl", &[57.45, 48.63, 79.26, 17.26, 71.23, 40.99, 0.6352, 20.65, 76.59], -0.46),
        ("hca2", &[57.55, 52.30, 80.71, 15.60, 72.08, 41.47, 0.6281, 20.53, 76.50], 2.18),
    ],
};

/// Four single-task NYUD-v2 clients and one five-task PASCAL-Context client.
pub const NYUD_ST_PASCAL_MT: ReferenceTable = ReferenceTable {
    name: "nyud-st/pascal-mt",
    tasks: &[
        ("nyud/semseg", Up),
        ("nyud/depth", Down),
        ("nyud/normals", Down),
        ("nyud/edge", Up),
        ("pascal/semseg", Up),
        ("pascal/parts", Up),
        ("pascal/sal", Up),
        ("pascal/normals", Down),
        ("pascal/edge", Up),
    ],
    local: &[33.59, 0.7129, 23.22, 75.02, 65.80, 55.01, 83.23, 14.21, 71.89],
    methods: &[
        ("fedavg", &[25.80, 0.8295, 24.85, 75.31, 64.63, 52.88, 81.08, 15.56, 68.95], -7.56),
        ("fedprox", &[25.96, 0.8316, 25.20, 75.34, 64.97, 50.78, 81.29, 15.83, 69.81], -8.12),
        ("fedper", &[35.93, 0.7460, 23.75, 75.53, 67.78, 54.75, 82.50, 14.75, 71.90], -0.16),
        ("ditto", &[28.15, 0.7482, 23.96, 75.42, 65.99, 51.45, 81.74, 15.29, 69.96], -4.67),
        ("fedamp", &[34.75, 0.7103, 23.31, 75.03, 66.08, 54.10, 83.35, 14.20, 71.88], 0.27),
        ("mat-fl", &[35.05, 0.7504, 23.39, 75.33, 67.90, 54.78, 82.84, 14.58, 71.94], -0.16),
        ("hca2", &[34.95, 0.7018, 23.19, 75.03, 65.81, 55.01, 83.18, 14.08, 71.97], 0.75),
    ],
};

pub const REFERENCE_TABLES: [&ReferenceTable; 2] = [&PASCAL_ST_NYUD_MT, &NYUD_ST_PASCAL_MT];

impl ReferenceTable {
    pub fn row(&self, values: &[f64]) -> Vec<TaskMetric> {
        self.tasks
            .iter()
            .zip(values)
            .map(|(&(id, dir), &v)| TaskMetric::new(id, v, dir))
            .collect()
    }

    pub fn local_row(&self) -> Vec<TaskMetric> {
        self.row(self.local)
    }

    /// Recomputed change of `method` against the local row, in percent.
    pub fn delta_m_of(&self, method: &str) -> Result<f64> {
        let (_, values, _) = self
            .methods
            .iter()
            .find(|(m, _, _)| *m == method)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no row {method:?}", self.name)))?;
        delta_m(&self.row(values), &self.local_row())
    }
}

pub fn delta_m_suite() -> Outcome {
    let mut checks = 0;
    for table in REFERENCE_TABLES {
        let local = table.local_row();
        ensure(lift(delta_m(&local, &local))? == 0.0, || format!("{}: local vs local is not 0", table.name))?;
        for &(method, _, reported) in table.methods {
            let got = lift(table.delta_m_of(method))?;
            ensure((got - reported).abs() <= DELTA_M_TOL, || {
                format!("{} {method}: recomputed {got:.4} vs reported {reported:.2}", table.name)
            })?;
            checks += 1;
        }
        let (_, values, _) = table.methods[0];
        let mut fed = table.row(values);
        let mut base = table.local_row();
        let forward = lift(delta_m(&fed, &base))?;
        fed.reverse();
        base.rotate_left(4);
        let shuffled = lift(delta_m(&fed, &base))?;
        ensure(forward == shuffled, || format!("{}: task order changed the result", table.name))?;
        checks += 2;
    }
    for dir in [Up, Down] {
        let better = if dir == Up { 1.1 } else { 0.9 };
        let got = lift(delta_m(&[TaskMetric::new("t", better, dir)], &[TaskMetric::new("t", 1.0, dir)]))?;
        ensure(got > 0.0, || format!("improving a {dir:?} metric gave Δ_m = {got}"))?;
        checks += 1;
    }
    Ok(checks)
}
