//! Layer-wise cross attention over decoder updates.
//!
//! For one layer, the `K` decoder updates are stacked into `V`. Decoder `i`
//! attends over all of them with scores `⟨Δ_i, Δ_j⟩ / √d`, where `d` is the
//! flattened layer length, and its aggregated update is the softmax-weighted
//! sum of the rows of `V`.
//!
//! Reductions over the `K` decoders are taken in value-sorted order, which
//! makes every output independent of the order decoders are listed in.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::param::{self, FlatVector, ParamTree, Tensor};

/// Identifies one decoder in the federation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DecoderKey {
    pub client: ClientId,
    pub task: TaskId,
}

impl DecoderKey {
    pub fn new(client: impl Into<ClientId>, task: impl Into<TaskId>) -> Self {
        Self {
            client: client.into(),
            task: task.into(),
        }
    }
}

impl fmt::Display for DecoderKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.client, self.task)
    }
}

impl From<String> for ClientId {
    fn from(s: String) -> Self {
        ClientId(s)
    }
}

impl From<String> for TaskId {
    fn from(s: String) -> Self {
        TaskId(s)
    }
}

fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: FlatVector,
    /// Softmax weights over the `K` inputs, in input order.
    pub weights: Vec<f64>,
}

/// Cross attention of update `target` over all `K` layer updates.
pub fn cross_attention_layer(layer_updates: &[FlatVector], target: usize) -> Result<AttentionOutput> {
    let first = layer_updates.first().ok_or(Error::EmptyInput("cross_attention_layer"))?;
    let query = layer_updates.get(target).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "target index {target} out of range for {} updates",
            layer_updates.len()
        ))
    })?;
    let d = first.len();
    let temperature = (d.max(1) as f64).sqrt();
    let scores = layer_updates
        .iter()
        .map(|v| Ok(param::inner(query, v)? / temperature))
        .collect::<Result<Vec<f64>>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom = order_free_sum(&mut exps.clone());
    let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();

    let mut out = vec![0.0; d];
    let mut terms = vec![0.0; layer_updates.len()];
    for (k, o) in out.iter_mut().enumerate() {
        for (j, v) in layer_updates.iter().enumerate() {
            terms[j] = weights[j] * v.as_slice()[k];
        }
        *o = order_free_sum(&mut terms);
    }
    Ok(AttentionOutput {
        output: FlatVector::new(first.schema().clone(), out)?,
        weights,
    })
}

/// Runs cross attention independently for every layer over all decoder
/// updates and reassembles one aggregated tree per decoder.
pub fn aggregate_decoders(
    updates: &BTreeMap<DecoderKey, ParamTree>,
) -> Result<BTreeMap<DecoderKey, ParamTree>> {
    let Some(reference) = updates.values().next() else {
        return Ok(BTreeMap::new());
    };
    let schema = reference.schema();
    for (key, tree) in updates {
        if !tree.matches(&schema) {
            return Err(Error::ShapeMismatch(format!(
                "decoder {key} does not match the shared decoder schema"
            )));
        }
    }
    let keys: Vec<&DecoderKey> = updates.keys().collect();
    let mut outputs: Vec<ParamTree> = vec![ParamTree::new(); keys.len()];
    for (l, spec) in schema.layers().iter().enumerate() {
        let layer_vectors: Vec<FlatVector> = updates
            .values()
            .map(|t| FlatVector::from_vec(t.layers()[l].tensor.data().to_vec()))
            .collect();
        for (i, out) in outputs.iter_mut().enumerate() {
            let att = cross_attention_layer(&layer_vectors, i)?;
            out.push(spec.id.clone(), Tensor::new(spec.shape.clone(), att.output.into_vec())?);
        }
    }
    Ok(keys.into_iter().cloned().zip(outputs).collect())
}
