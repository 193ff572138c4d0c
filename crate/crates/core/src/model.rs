//! Small tanh MLP multi-task networks with hand-written backpropagation.
//!
//! A client model is a shared encoder, one decoder per task and one linear
//! head per task. Encoders share one schema federation-wide, as do decoders;
//! heads stay private to their client.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Direction, TaskMetric};
use crate::param::{LayerSpec, ParamSchema, ParamTree, Tensor};
use crate::seed::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        TaskId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Stable 24-bit key used to pick the head-initialization stream.
    fn stream_key(&self) -> u32 {
        // FNV-1a
        let mut h: u32 = 0x811c_9dc5;
        for b in self.0.bytes() {
            h ^= u32::from(b);
            h = h.wrapping_mul(0x0100_0193);
        }
        h & 0xFF_FFFF
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Squared-error loss, evaluated by RMSE.
    Regression,
    /// Logistic loss on a single logit, evaluated by accuracy.
    Classification,
}

impl TaskKind {
    pub fn direction(self) -> Direction {
        match self {
            TaskKind::Regression => Direction::LowerBetter,
            TaskKind::Classification => Direction::HigherBetter,
        }
    }
}

fn default_input_dim() -> usize {
    8
}
fn default_encoder_widths() -> Vec<usize> {
    vec![16]
}
fn default_decoder_widths() -> Vec<usize> {
    vec![16, 8]
}

/// Layer widths of the client networks. Activation is always tanh; heads are
/// linear with one output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_encoder_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_dim: default_input_dim(),
            encoder_widths: default_encoder_widths(),
            decoder_widths: default_decoder_widths(),
        }
    }
}

const HEAD_OUTPUT_DIM: usize = 1;

fn linear_specs(prefix: &str, input: usize, widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(2 * widths.len());
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        specs.push(LayerSpec {
            id: format!("{prefix}.{i}.weight"),
            shape: vec![w, fan_in],
        });
        specs.push(LayerSpec {
            id: format!("{prefix}.{i}.bias"),
            shape: vec![w],
        });
        fan_in = w;
    }
    specs
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input_dim must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return Err(Error::InvalidArch(
                "encoder and decoder need at least one layer".into(),
            ));
        }
        if let Some(pos) = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .position(|&w| w == 0)
        {
            return Err(Error::InvalidArch(format!("zero-width layer at index {pos}")));
        }
        Ok(())
    }

    fn encoder_out(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    fn decoder_out(&self) -> usize {
        *self.decoder_widths.last().expect("validated")
    }

    pub fn encoder_schema(&self) -> ParamSchema {
        ParamSchema::new(linear_specs("enc", self.input_dim, &self.encoder_widths))
    }

    pub fn decoder_schema(&self) -> ParamSchema {
        ParamSchema::new(linear_specs("dec", self.encoder_out(), &self.decoder_widths))
    }

    pub fn head_schema(&self) -> ParamSchema {
        ParamSchema::new(linear_specs("head", self.decoder_out(), &[HEAD_OUTPUT_DIM]))
    }
}

/// Parameters (or gradients, or deltas) of one client model, split into the
/// parts the server treats differently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: ParamTree,
    pub decoders: BTreeMap<TaskId, ParamTree>,
    pub heads: BTreeMap<TaskId, ParamTree>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoders: self
                .decoders
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Self> {
        fn zip_map(
            a: &BTreeMap<TaskId, ParamTree>,
            b: &BTreeMap<TaskId, ParamTree>,
            f: impl Fn(f64, f64) -> f64 + Copy,
        ) -> Result<BTreeMap<TaskId, ParamTree>> {
            if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
                return Err(Error::ShapeMismatch("task sets differ".into()));
            }
            a.iter()
                .zip(b.values())
                .map(|((k, x), y)| Ok((k.clone(), x.zip_with(y, f)?)))
                .collect()
        }
        Ok(Self {
            encoder: self.encoder.zip_with(&other.encoder, f)?,
            decoders: zip_map(&self.decoders, &other.decoders, f)?,
            heads: zip_map(&self.heads, &other.heads, f)?,
        })
    }

    pub fn sub(&self, other: &ModelParams) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_scaled(&self, scale: f64, other: &ModelParams) -> Result<Self> {
        self.zip_with(other, move |a, b| a + scale * b)
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.all_finite()
            && self.decoders.values().all(ParamTree::all_finite)
            && self.heads.values().all(ParamTree::all_finite)
    }

    /// Visits every parameter coordinate in a fixed order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let trees = std::iter::once(&mut self.encoder)
            .chain(self.decoders.values_mut())
            .chain(self.heads.values_mut());
        for tree in trees {
            for layer in tree.layers_mut() {
                layer.tensor.data_mut().iter_mut().for_each(&mut f);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        std::iter::once(&self.encoder)
            .chain(self.decoders.values())
            .chain(self.heads.values())
            .flat_map(|t| t.layers())
            .map(|l| l.tensor.numel())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub arch: ArchSpec,
    pub tasks: BTreeMap<TaskId, TaskKind>,
    pub params: ModelParams,
}

/// Inputs plus labels for some tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub labels: BTreeMap<TaskId, Array1<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub losses: BTreeMap<TaskId, f64>,
    pub grad: ModelParams,
}

impl LossAndGrad {
    pub fn total_loss(&self) -> f64 {
        self.losses.values().sum()
    }
}

fn init_linear_stack(schema: &ParamSchema, rng: &mut impl Rng) -> ParamTree {
    let mut tree = ParamTree::new();
    for spec in schema.layers() {
        let tensor = if spec.shape.len() == 2 {
            let bound = 1.0 / (spec.shape[1] as f64).sqrt();
            let data = (0..spec.numel())
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(spec.shape.clone(), data).expect("shape from schema")
        } else {
            Tensor::zeros(spec.shape.clone())
        };
        tree.push(spec.id.clone(), tensor);
    }
    tree
}

/// Builds a model whose weights are uniform in `±1/sqrt(fan_in)` and biases
/// zero. The encoder and every decoder start from the same draws for a given
/// seed, so all clients sharing the seed share their initial encoder and
/// decoders; heads are drawn per task.
pub fn init_model(
    arch: &ArchSpec,
    tasks: &BTreeMap<TaskId, TaskKind>,
    seed: u64,
) -> Result<ClientModel> {
    arch.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("model needs at least one task".into()));
    }
    let mut rng = rng_for(seed, Stream::ModelInit);
    let encoder = init_linear_stack(&arch.encoder_schema(), &mut rng);
    let decoder = init_linear_stack(&arch.decoder_schema(), &mut rng);
    let head_schema = arch.head_schema();
    let heads = tasks
        .keys()
        .map(|t| {
            let mut rng = rng_for(seed, Stream::HeadInit(t.stream_key()));
            (t.clone(), init_linear_stack(&head_schema, &mut rng))
        })
        .collect();
    Ok(ClientModel {
        arch: arch.clone(),
        tasks: tasks.clone(),
        params: ModelParams {
            encoder,
            decoders: tasks.keys().map(|t| (t.clone(), decoder.clone())).collect(),
            heads,
        },
    })
}

fn weight_view(tensor: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((tensor.shape()[0], tensor.shape()[1]), tensor.data())
        .expect("weight tensors are 2-d")
}

/// Forward pass through a stack of linear layers. Returns the input followed
/// by each layer's output; every layer is tanh-activated except a linear
/// final layer when `linear_last` is set.
fn stack_forward(tree: &ParamTree, input: Array2<f64>, linear_last: bool) -> Vec<Array2<f64>> {
    let layers = tree.layers();
    let depth = layers.len() / 2;
    let mut acts = Vec::with_capacity(depth + 1);
    acts.push(input);
    for i in 0..depth {
        let w = weight_view(&layers[2 * i].tensor);
        let b = Array1::from(layers[2 * i + 1].tensor.data().to_vec());
        let mut pre = acts[i].dot(&w.t());
        pre += &b;
        if !(linear_last && i + 1 == depth) {
            pre.mapv_inplace(f64::tanh);
        }
        acts.push(pre);
    }
    acts
}

/// Backward pass matching [`stack_forward`]. `grad_out` is dL/d(output).
/// Returns parameter gradients and dL/d(input).
fn stack_backward(
    tree: &ParamTree,
    acts: &[Array2<f64>],
    grad_out: Array2<f64>,
    linear_last: bool,
) -> (ParamTree, Array2<f64>) {
    let layers = tree.layers();
    let depth = layers.len() / 2;
    let mut grads: Vec<Option<Tensor>> = vec![None; layers.len()];
    let mut upstream = grad_out;
    for i in (0..depth).rev() {
        let out = &acts[i + 1];
        let delta = if linear_last && i + 1 == depth {
            upstream
        } else {
            upstream * &out.mapv(|h| 1.0 - h * h)
        };
        let dw = delta.t().dot(&acts[i]);
        let db = delta.sum_axis(Axis(0));
        let w = weight_view(&layers[2 * i].tensor);
        upstream = delta.dot(&w);
        grads[2 * i] = Some(
            Tensor::new(layers[2 * i].tensor.shape().to_vec(), dw.iter().copied().collect())
                .expect("gradient shape"),
        );
        grads[2 * i + 1] = Some(
            Tensor::new(layers[2 * i + 1].tensor.shape().to_vec(), db.to_vec())
                .expect("gradient shape"),
        );
    }
    let mut out = ParamTree::new();
    for (layer, g) in layers.iter().zip(grads) {
        out.push(layer.id.clone(), g.expect("every layer visited"));
    }
    (out, upstream)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample-mean loss of one task and dL/d(prediction).
fn task_loss(kind: TaskKind, pred: &Array1<f64>, target: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = pred.len() as f64;
    match kind {
        TaskKind::Regression => {
            let resid = pred - target;
            let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
            (loss, resid.mapv(|r| 2.0 * r / n))
        }
        TaskKind::Classification => {
            let mut loss = 0.0;
            let mut grad = Array1::zeros(pred.len());
            for (k, (&z, &y)) in pred.iter().zip(target).enumerate() {
                loss += softplus(z) - y * z;
                grad[k] = (sigmoid(z) - y) / n;
            }
            (loss / n, grad)
        }
    }
}

impl ClientModel {
    fn check_task(&self, task: &TaskId) -> Result<TaskKind> {
        self.tasks
            .get(task)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("model has no task {task}")))
    }

    /// Head outputs (one per sample) for each requested task.
    pub fn predict(&self, x: &Array2<f64>, tasks: &[TaskId]) -> Result<BTreeMap<TaskId, Array1<f64>>> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::DimMismatch {
                expected: self.arch.input_dim,
                got: x.ncols(),
            });
        }
        let enc = stack_forward(&self.params.encoder, x.to_owned(), false);
        let z = enc.last().expect("nonempty").clone();
        let mut out = BTreeMap::new();
        for task in tasks {
            self.check_task(task)?;
            let dec = stack_forward(&self.params.decoders[task], z.clone(), false);
            let head = stack_forward(
                &self.params.heads[task],
                dec.last().expect("nonempty").clone(),
                true,
            );
            out.insert(task.clone(), head.last().expect("nonempty").column(0).to_owned());
        }
        Ok(out)
    }

    /// Summed per-task loss over `tasks` and its gradient. The encoder
    /// gradient is the sum of the per-task backpropagated contributions;
    /// decoders and heads of tasks outside `tasks` get zero gradient.
    pub fn loss_and_grad(&self, batch: &Batch, tasks: &[TaskId]) -> Result<LossAndGrad> {
        if batch.x.ncols() != self.arch.input_dim {
            return Err(Error::DimMismatch {
                expected: self.arch.input_dim,
                got: batch.x.ncols(),
            });
        }
        if batch.is_empty() {
            return Err(Error::EmptyInput("loss_and_grad"));
        }
        let enc_acts = stack_forward(&self.params.encoder, batch.x.clone(), false);
        let z = enc_acts.last().expect("nonempty");
        let mut grad = self.params.zeros_like();
        let mut dz_total = Array2::<f64>::zeros(z.raw_dim());
        let mut losses = BTreeMap::new();
        for task in tasks {
            let kind = self.check_task(task)?;
            let target = batch.labels.get(task).ok_or_else(|| {
                Error::InvalidArgument(format!("batch carries no labels for task {task}"))
            })?;
            let decoder = &self.params.decoders[task];
            let head = &self.params.heads[task];
            let dec_acts = stack_forward(decoder, z.clone(), false);
            let head_acts = stack_forward(head, dec_acts.last().expect("nonempty").clone(), true);
            let pred = head_acts.last().expect("nonempty").column(0).to_owned();
            let (loss, dpred) = task_loss(kind, &pred, target);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("forward pass loss of task {task}")));
            }
            let dpred = dpred.insert_axis(Axis(1));
            let (g_head, d_dec_out) = stack_backward(head, &head_acts, dpred, true);
            let (g_dec, dz) = stack_backward(decoder, &dec_acts, d_dec_out, false);
            dz_total += &dz;
            grad.heads.insert(task.clone(), g_head);
            grad.decoders.insert(task.clone(), g_dec);
            losses.insert(task.clone(), loss);
        }
        let (g_enc, _) = stack_backward(&self.params.encoder, &enc_acts, dz_total, false);
        grad.encoder = g_enc;
        if !grad.all_finite() {
            return Err(Error::NonFinite("backward pass gradient".into()));
        }
        Ok(LossAndGrad { losses, grad })
    }

    /// Plain gradient step `θ ← θ − lr·g` on every part, heads included.
    pub fn sgd_step(&self, grad: &ModelParams, lr: f64) -> Result<ClientModel> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} is invalid")));
        }
        Ok(ClientModel {
            arch: self.arch.clone(),
            tasks: self.tasks.clone(),
            params: self.params.add_scaled(-lr, grad)?,
        })
    }

    /// RMSE for regression tasks, accuracy (logit > 0) for classification.
    pub fn evaluate(&self, batch: &Batch, tasks: &[TaskId]) -> Result<BTreeMap<TaskId, TaskMetric>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("evaluate"));
        }
        let preds = self.predict(&batch.x, tasks)?;
        let n = batch.len() as f64;
        let mut out = BTreeMap::new();
        for (task, pred) in preds {
            let kind = self.tasks[&task];
            let target = batch.labels.get(&task).ok_or_else(|| {
                Error::InvalidArgument(format!("dataset carries no labels for task {task}"))
            })?;
            let value = match kind {
                TaskKind::Regression => {
                    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
                    (sse / n).sqrt()
                }
                TaskKind::Classification => {
                    let correct = pred
                        .iter()
                        .zip(target)
                        .filter(|(&p, &y)| (p > 0.0) == (y > 0.5))
                        .count();
                    correct as f64 / n
                }
            };
            out.insert(
                task.clone(),
                TaskMetric {
                    task_id: task,
                    value,
                    direction: kind.direction(),
                },
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn tasks(spec: &[(&str, TaskKind)]) -> BTreeMap<TaskId, TaskKind> {
        spec.iter().map(|(t, k)| (TaskId::from(*t), *k)).collect()
    }

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 4,
            encoder_widths: vec![5],
            decoder_widths: vec![3, 2],
        }
    }

    fn random_batch(n: usize, dim: usize, task_ids: &[&str], seed: u64) -> Batch {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
        let labels = task_ids
            .iter()
            .map(|t| {
                let y = Array1::from_shape_fn(n, |_| f64::from(u8::from(rng.random_bool(0.5))));
                (TaskId::from(*t), y)
            })
            .collect();
        Batch { x, labels }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let t = tasks(&[("a", TaskKind::Regression)]);
        let m1 = init_model(&small_arch(), &t, 1).unwrap();
        let m1b = init_model(&small_arch(), &t, 1).unwrap();
        let m2 = init_model(&small_arch(), &t, 2).unwrap();
        assert_eq!(m1, m1b);
        assert_ne!(m1.params, m2.params);
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let t = tasks(&[("a", TaskKind::Regression)]);
        let m = init_model(&small_arch(), &t, 3).unwrap();
        // first encoder layer has fan_in = 4, so |w| <= 0.5
        let w = m.params.encoder.layer("enc.0.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        assert!(w.data().iter().any(|v| v.abs() > 0.25));
        let b = m.params.encoder.layer("enc.0.bias").unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_zero_width_and_empty_tasks() {
        let mut arch = small_arch();
        arch.decoder_widths = vec![3, 0];
        let t = tasks(&[("a", TaskKind::Regression)]);
        assert!(matches!(init_model(&arch, &t, 0), Err(Error::InvalidArch(_))));
        assert!(init_model(&small_arch(), &BTreeMap::new(), 0).is_err());
    }

    #[test]
    fn clients_sharing_a_seed_share_encoder_and_decoders() {
        let a = init_model(&small_arch(), &tasks(&[("a", TaskKind::Regression)]), 9).unwrap();
        let b = init_model(
            &small_arch(),
            &tasks(&[("a", TaskKind::Regression), ("b", TaskKind::Classification)]),
            9,
        )
        .unwrap();
        assert_eq!(a.params.encoder, b.params.encoder);
        assert_eq!(a.params.decoders[&TaskId::from("a")], b.params.decoders[&TaskId::from("b")]);
        assert_eq!(a.params.heads[&TaskId::from("a")], b.params.heads[&TaskId::from("a")]);
    }

    #[test]
    fn zero_head_on_zero_targets_has_zero_head_gradient() {
        let t = tasks(&[("a", TaskKind::Regression)]);
        let mut m = init_model(&small_arch(), &t, 4).unwrap();
        let head = m.params.heads.get_mut(&TaskId::from("a")).unwrap();
        *head = head.zeros_like();
        let mut batch = random_batch(6, 4, &["a"], 1);
        batch.labels.insert("a".into(), Array1::zeros(6));
        let lg = m.loss_and_grad(&batch, &["a".into()]).unwrap();
        let gh = &lg.grad.heads[&TaskId::from("a")];
        assert!(gh.layers().iter().all(|l| l.tensor.data().iter().all(|&v| v == 0.0)));
        assert_eq!(lg.losses[&TaskId::from("a")], 0.0);
    }

    #[test]
    fn encoder_gradient_is_additive_over_tasks() {
        let t = tasks(&[("a", TaskKind::Regression), ("b", TaskKind::Classification)]);
        let m = init_model(&small_arch(), &t, 5).unwrap();
        let batch = random_batch(8, 4, &["a", "b"], 2);
        let both = m.loss_and_grad(&batch, &["a".into(), "b".into()]).unwrap();
        let ga = m.loss_and_grad(&batch, &["a".into()]).unwrap();
        let gb = m.loss_and_grad(&batch, &["b".into()]).unwrap();
        let sum = ga.grad.encoder.add(&gb.grad.encoder).unwrap();
        for (x, y) in both.grad.encoder.to_flat().as_slice().iter().zip(sum.to_flat().as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn missing_labels_and_wrong_dims_are_errors() {
        let t = tasks(&[("a", TaskKind::Regression)]);
        let m = init_model(&small_arch(), &t, 5).unwrap();
        let batch = random_batch(3, 4, &[], 2);
        assert!(m.loss_and_grad(&batch, &["a".into()]).is_err());
        let batch = random_batch(3, 5, &["a"], 2);
        assert!(matches!(
            m.loss_and_grad(&batch, &["a".into()]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let t = tasks(&[("a", TaskKind::Regression)]);
        let m = init_model(&small_arch(), &t, 5).unwrap();
        let mut batch = random_batch(3, 4, &["a"], 2);
        batch.x[[0, 0]] = f64::NAN;
        let err = m.loss_and_grad(&batch, &["a".into()]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn sgd_step_arithmetic() {
        let t = tasks(&[("a", TaskKind::Regression)]);
        let m = init_model(&small_arch(), &t, 5).unwrap();
        let g = m.params.zeros_like();
        assert_eq!(m.sgd_step(&g, 0.3).unwrap(), m);
        let g = m.params.zeros_like().add_scaled(1.0, &m.params).unwrap();
        assert_eq!(m.sgd_step(&g, 0.0).unwrap(), m);
        assert!(m.sgd_step(&g, -1.0).is_err());

        let mut scalar = m.clone();
        scalar.params.for_each_mut(|v| *v = 1.0);
        let mut g2 = m.params.zeros_like();
        g2.for_each_mut(|v| *v = 2.0);
        let stepped = scalar.sgd_step(&g2, 0.1).unwrap();
        let first = stepped.params.encoder.layers()[0].tensor.data()[0];
        assert!((first - 0.8).abs() < 1e-15);
    }

    #[test]
    fn evaluate_perfect_and_zero_predictors() {
        let t = tasks(&[("r", TaskKind::Regression), ("c", TaskKind::Classification)]);
        let mut m = init_model(&small_arch(), &t, 6).unwrap();
        for head in m.params.heads.values_mut() {
            *head = head.zeros_like();
        }
        let x = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) as f64 * 0.1);
        let mut labels = BTreeMap::new();
        labels.insert(TaskId::from("r"), array![1.0, -1.0, 1.0, -1.0]);
        labels.insert(TaskId::from("c"), array![0.0, 0.0, 0.0, 0.0]);
        let batch = Batch { x, labels };
        let metrics = m.evaluate(&batch, &["r".into(), "c".into()]).unwrap();
        // zero predictor on unit-magnitude targets
        assert!((metrics[&TaskId::from("r")].value - 1.0).abs() < 1e-15);
        // logit 0 predicts class 0 for every sample
        assert_eq!(metrics[&TaskId::from("c")].value, 1.0);
        assert_eq!(metrics[&TaskId::from("r")].direction.flag(), 1);
        assert_eq!(metrics[&TaskId::from("c")].direction.flag(), 0);

        let mut batch2 = batch.clone();
        batch2.labels.insert("r".into(), Array1::zeros(4));
        let metrics = m.evaluate(&batch2, &["r".into()]).unwrap();
        assert_eq!(metrics[&TaskId::from("r")].value, 0.0);
    }
}
