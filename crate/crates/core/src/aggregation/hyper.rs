//! Learnable per-client blending weights for aggregated updates.
//!
//! Client `i` receives `θ_i ← θ_i^prev + Δθ_i + ψ_i θ̃_i`, where `ψ` is `α_i`
//! for the encoder and `β_{i,l}` for decoder layer `l`. The weights move by
//! gradient ascent on `⟨θ̃_i, Δθ_i⟩`, cosine-normalized and clamped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::param::{self, FlatVector, ParamTree};

/// Added to the norm product when normalizing a weight step.
pub const NORMALIZATION_EPS: f64 = 1e-12;

/// Which round's local updates drive the weight step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperUpdateOrder {
    /// Update with this round's deltas, then aggregate with the new weights.
    #[default]
    SameRound,
    /// Score last round's aggregated update against this round's deltas.
    NextRound,
}

fn default_hyper_lr() -> f64 {
    0.1
}
fn default_clamp() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    #[serde(default = "default_hyper_lr")]
    pub lr: f64,
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
    #[serde(default)]
    pub init_alpha: f64,
    #[serde(default)]
    pub init_beta: f64,
    #[serde(default)]
    pub order: HyperUpdateOrder,
    /// Keep the weights at their initial values.
    #[serde(default)]
    pub frozen: bool,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lr: default_hyper_lr(),
            clamp: default_clamp(),
            init_alpha: 0.0,
            init_beta: 0.0,
            order: HyperUpdateOrder::default(),
            frozen: false,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.clamp;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("hyper lr must be finite and >= 0".into()));
        }
        for v in [self.init_alpha, self.init_beta] {
            if !(lo..=hi).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "initial hyper weight {v} outside clamp range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer decoder weights of one client: task → layer id → β.
pub type LayerWeights = BTreeMap<TaskId, BTreeMap<String, f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperWeights {
    pub alpha: BTreeMap<ClientId, f64>,
    pub beta: BTreeMap<ClientId, LayerWeights>,
    pub hyper_lr: f64,
    pub clamp_range: [f64; 2],
}

impl HyperWeights {
    /// Every client gets `α = init_alpha` and every decoder layer
    /// `β = init_beta`.
    pub fn init<'a>(
        cfg: &HyperConfig,
        clients: impl IntoIterator<Item = (&'a ClientId, &'a [TaskId])>,
        decoder_layers: &[String],
    ) -> Self {
        let mut alpha = BTreeMap::new();
        let mut beta = BTreeMap::new();
        for (client, tasks) in clients {
            alpha.insert(client.clone(), cfg.init_alpha);
            let per_task = tasks
                .iter()
                .map(|t| {
                    let layers = decoder_layers
                        .iter()
                        .map(|l| (l.clone(), cfg.init_beta))
                        .collect();
                    (t.clone(), layers)
                })
                .collect();
            beta.insert(client.clone(), per_task);
        }
        Self {
            alpha,
            beta,
            hyper_lr: cfg.lr,
            clamp_range: cfg.clamp,
        }
    }

    /// One normalized ascent step on a weight, clamped to the range.
    pub fn step(&self, current: f64, theta_tilde: &[f64], delta: &[f64]) -> f64 {
        let raw = param::dot(theta_tilde, delta);
        let denom = param::dot(theta_tilde, theta_tilde).sqrt() * param::dot(delta, delta).sqrt()
            + NORMALIZATION_EPS;
        let [lo, hi] = self.clamp_range;
        (current + self.hyper_lr * raw / denom).clamp(lo, hi)
    }
}

/// Raw weight signal `θ̃ᵀ Δθ`.
pub fn hyper_weight_delta(theta_tilde: &FlatVector, delta_theta: &FlatVector) -> Result<f64> {
    param::inner(theta_tilde, delta_theta)
}

/// `θ^prev + Δθ + ψ θ̃` with one scalar for the whole tree.
pub fn apply_personalized_update(
    theta_prev: &ParamTree,
    delta_theta: &ParamTree,
    psi: f64,
    theta_tilde: &ParamTree,
) -> Result<ParamTree> {
    theta_prev.add(delta_theta)?.add_scaled(psi, theta_tilde)
}

/// Layer-wise variant: layer `l` uses `psi[l.id]`.
pub fn apply_layerwise_update(
    theta_prev: &ParamTree,
    delta_theta: &ParamTree,
    psi: &BTreeMap<String, f64>,
    theta_tilde: &ParamTree,
) -> Result<ParamTree> {
    let mut out = theta_prev.add(delta_theta)?;
    if out.len() != theta_tilde.len() {
        return Err(Error::ShapeMismatch("aggregated tree layout differs".into()));
    }
    for (layer, tilde) in out.layers_mut().iter_mut().zip(theta_tilde.layers()) {
        if layer.id != tilde.id || layer.tensor.shape() != tilde.tensor.shape() {
            return Err(Error::ShapeMismatch(format!("layer {} vs {}", layer.id, tilde.id)));
        }
        let w = *psi
            .get(&layer.id)
            .ok_or_else(|| Error::InvalidArgument(format!("no weight for layer {}", layer.id)))?;
        for (v, t) in layer.tensor.data_mut().iter_mut().zip(tilde.tensor.data()) {
            *v += w * t;
        }
    }
    Ok(out)
}
