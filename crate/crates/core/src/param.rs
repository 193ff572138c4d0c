//! Layer-structured parameter containers and the flat-vector algebra that the
//! aggregation schemes operate on.
//!
//! A [`ParamTree`] is an ordered list of named tensors. Every weight matrix and
//! every bias vector is its own layer unit, so layer-wise aggregation works at
//! tensor granularity. Flattening concatenates the tensors row-major in layer
//! order. All reductions are sequential `f64` sums, so results are
//! bit-reproducible.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered layer layout shared by every tree of the same kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSchema {
    layers: Vec<LayerSpec>,
    total_dim: usize,
}

impl ParamSchema {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        let total_dim = layers.iter().map(LayerSpec::numel).sum();
        Self { layers, total_dim }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Offset of each layer inside the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.numel();
        }
        offsets
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamTree {
    layers: Vec<Layer>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, tensor: Tensor) {
        self.layers.push(Layer {
            id: id.into(),
            tensor,
        });
    }

    pub fn with_layer(mut self, id: impl Into<String>, tensor: Tensor) -> Self {
        self.push(id, tensor);
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&Tensor> {
        self.layers.iter().find(|l| l.id == id).map(|l| &l.tensor)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn schema(&self) -> ParamSchema {
        ParamSchema::new(
            self.layers
                .iter()
                .map(|l| LayerSpec {
                    id: l.id.clone(),
                    shape: l.tensor.shape.clone(),
                })
                .collect(),
        )
    }

    pub fn matches(&self, schema: &ParamSchema) -> bool {
        self.layers.len() == schema.layers.len()
            && self
                .layers
                .iter()
                .zip(&schema.layers)
                .all(|(l, s)| l.id == s.id && l.tensor.shape == s.shape)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    tensor: Tensor::zeros(l.tensor.shape.clone()),
                })
                .collect(),
        }
    }

    fn check_same_layout(&self, other: &ParamTree) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "tree has {} layers, other has {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.id != b.id || a.tensor.shape != b.tensor.shape {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}{:?} vs {}{:?}",
                    a.id, a.tensor.shape, b.id, b.tensor.shape
                )));
            }
        }
        Ok(())
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, scale: f64, other: &ParamTree) -> Result<ParamTree> {
        self.zip_with(other, |a, b| a + scale * b)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamTree) -> Result<ParamTree> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ParamTree) -> Result<ParamTree> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> ParamTree {
        self.map(|v| s * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamTree {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    tensor: Tensor {
                        shape: l.tensor.shape.clone(),
                        data: l.tensor.data.iter().map(|&v| f(v)).collect(),
                    },
                })
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &ParamTree, f: impl Fn(f64, f64) -> f64) -> Result<ParamTree> {
        self.check_same_layout(other)?;
        Ok(Self {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| Layer {
                    id: a.id.clone(),
                    tensor: Tensor {
                        shape: a.tensor.shape.clone(),
                        data: a
                            .tensor
                            .data
                            .iter()
                            .zip(&b.tensor.data)
                            .map(|(&x, &y)| f(x, y))
                            .collect(),
                    },
                })
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.tensor.data.iter().all(|v| v.is_finite()))
    }

    /// Flattens against the tree's own layout.
    pub fn to_flat(&self) -> FlatVector {
        let schema = Arc::new(self.schema());
        let mut data = Vec::with_capacity(schema.total_dim());
        for layer in &self.layers {
            data.extend_from_slice(&layer.tensor.data);
        }
        FlatVector { schema, data }
    }
}

/// Contiguous parameter vector bound to the schema it was flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatVector {
    schema: Arc<ParamSchema>,
    data: Vec<f64>,
}

impl FlatVector {
    pub fn new(schema: Arc<ParamSchema>, data: Vec<f64>) -> Result<Self> {
        if data.len() != schema.total_dim() {
            return Err(Error::DimMismatch {
                expected: schema.total_dim(),
                got: data.len(),
            });
        }
        Ok(Self { schema, data })
    }

    /// A vector carrying a single anonymous layer; handy for raw arrays.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let schema = Arc::new(ParamSchema::new(vec![LayerSpec {
            id: "v".to_string(),
            shape: vec![data.len()],
        }]));
        Self { schema, data }
    }

    pub fn zeros(schema: Arc<ParamSchema>) -> Self {
        let data = vec![0.0; schema.total_dim()];
        Self { schema, data }
    }

    pub fn schema(&self) -> &Arc<ParamSchema> {
        &self.schema
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scale(&self, s: f64) -> FlatVector {
        FlatVector {
            schema: Arc::clone(&self.schema),
            data: self.data.iter().map(|v| s * v).collect(),
        }
    }

    fn check_compatible(&self, other: &FlatVector) -> Result<()> {
        if Arc::ptr_eq(&self.schema, &other.schema) || self.schema == other.schema {
            Ok(())
        } else if self.data.len() != other.data.len() {
            Err(Error::DimMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            })
        } else {
            Err(Error::ShapeMismatch(
                "flat vectors were built from different schemas".to_string(),
            ))
        }
    }
}

pub fn flatten(tree: &ParamTree, schema: &Arc<ParamSchema>) -> Result<FlatVector> {
    if !tree.matches(schema) {
        return Err(Error::ShapeMismatch(format!(
            "tree layout {:?} does not match schema {:?}",
            tree.schema().layers(),
            schema.layers()
        )));
    }
    let mut data = Vec::with_capacity(schema.total_dim());
    for layer in tree.layers() {
        data.extend_from_slice(layer.tensor.data());
    }
    Ok(FlatVector {
        schema: Arc::clone(schema),
        data,
    })
}

pub fn unflatten(flat: &FlatVector) -> ParamTree {
    let mut tree = ParamTree::new();
    let mut offset = 0;
    for spec in flat.schema.layers() {
        let n = spec.numel();
        tree.push(
            spec.id.clone(),
            Tensor {
                shape: spec.shape.clone(),
                data: flat.data[offset..offset + n].to_vec(),
            },
        );
        offset += n;
    }
    tree
}

/// Sequential dot product of two raw slices.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |acc, (a, b)| acc + a * b)
}

pub fn inner(x: &FlatVector, y: &FlatVector) -> Result<f64> {
    x.check_compatible(y)?;
    Ok(dot(&x.data, &y.data))
}

pub fn norm(x: &FlatVector) -> f64 {
    dot(&x.data, &x.data).sqrt()
}

/// `y + a * x`.
pub fn add_scaled(y: &FlatVector, a: f64, x: &FlatVector) -> Result<FlatVector> {
    y.check_compatible(x)?;
    Ok(FlatVector {
        schema: Arc::clone(&y.schema),
        data: y.data.iter().zip(&x.data).map(|(u, v)| u + a * v).collect(),
    })
}

/// Elementwise mean. Each coordinate is summed in input order and divided by
/// the count once, so the mean of identical vectors reproduces them exactly.
pub fn mean(vectors: &[FlatVector]) -> Result<FlatVector> {
    let first = vectors.first().ok_or(Error::EmptyInput("mean"))?;
    for v in &vectors[1..] {
        first.check_compatible(v)?;
    }
    let n = vectors.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(&v.data) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(FlatVector {
        schema: Arc::clone(&first.schema),
        data: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_layer_tree() -> ParamTree {
        ParamTree::new()
            .with_layer(
                "W",
                Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            )
            .with_layer("b", Tensor::new(vec![1], vec![5.0]).unwrap())
    }

    #[test]
    fn flatten_is_row_major_concatenation() {
        let flat = two_layer_tree().to_flat();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn empty_tree_flattens_to_empty_vector() {
        let flat = ParamTree::new().to_flat();
        assert!(flat.is_empty());
        assert_eq!(unflatten(&flat), ParamTree::new());
    }

    #[test]
    fn flatten_rejects_mismatched_schema() {
        let tree = two_layer_tree();
        let other = Arc::new(
            ParamTree::new()
                .with_layer("W", Tensor::zeros(vec![2, 3]))
                .schema(),
        );
        assert!(matches!(
            flatten(&tree, &other),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tensor_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn inner_of_orthogonal_and_self() {
        let e1 = FlatVector::from_vec(vec![1.0, 0.0]);
        let e2 = FlatVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(inner(&e1, &e2).unwrap(), 0.0);
        let x = FlatVector::from_vec(vec![3.0, -4.0]);
        assert_eq!(inner(&x, &x).unwrap(), 25.0);
        assert_eq!(norm(&x), 5.0);
    }

    #[test]
    fn inner_rejects_dimension_mismatch() {
        let a = FlatVector::from_vec(vec![1.0, 2.0]);
        let b = FlatVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(inner(&a, &b), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn inner_matches_naive_loop_on_1000_dims() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut reference = 0.0f64;
        for i in 0..1000 {
            reference += x[i] * y[i];
        }
        let got = inner(&FlatVector::from_vec(x), &FlatVector::from_vec(y)).unwrap();
        assert!((got - reference).abs() <= 1e-12 * reference.abs().max(1.0));
    }

    #[test]
    fn mean_and_add_scaled_basics() {
        let v = FlatVector::from_vec(vec![0.1, -0.7, 3.3]);
        let w = FlatVector::from_vec(vec![9.0, 8.0, 7.0]);
        assert_eq!(mean(&[v.clone(), v.clone()]).unwrap(), v);
        assert_eq!(add_scaled(&v, 0.0, &w).unwrap(), v);
        assert!(matches!(mean(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mean_of_three_matches_elementwise_oracle() {
        let a = vec![0.3, 1.7, -2.2, 5.0];
        let b = vec![-0.9, 0.4, 0.8, 1.25];
        let c = vec![2.5, -3.1, 0.05, 0.0];
        let got = mean(&[
            FlatVector::from_vec(a.clone()),
            FlatVector::from_vec(b.clone()),
            FlatVector::from_vec(c.clone()),
        ])
        .unwrap();
        for k in 0..4 {
            let expected = (a[k] + b[k] + c[k]) / 3.0;
            assert!((got.as_slice()[k] - expected).abs() <= 1e-15);
        }
    }

    fn arb_tree() -> impl Strategy<Value = ParamTree> {
        prop::collection::vec(
            (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
                prop::collection::vec(-1e3f64..1e3, r * c).prop_map(move |d| (r, c, d))
            }),
            3,
        )
        .prop_map(|layers| {
            let mut tree = ParamTree::new();
            for (i, (r, c, d)) in layers.into_iter().enumerate() {
                tree.push(format!("l{i}"), Tensor::new(vec![r, c], d).unwrap());
            }
            tree
        })
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(tree in arb_tree()) {
            let schema = Arc::new(tree.schema());
            let flat = flatten(&tree, &schema).unwrap();
            prop_assert_eq!(flat.len(), schema.total_dim());
            prop_assert_eq!(unflatten(&flat), tree);
        }

        #[test]
        fn inner_is_linear(
            a in -10.0f64..10.0,
            xs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..40),
        ) {
            let x = FlatVector::from_vec(xs.iter().map(|t| t.0).collect());
            let y = FlatVector::from_vec(xs.iter().map(|t| t.1).collect());
            let z = FlatVector::from_vec(xs.iter().map(|t| t.2).collect());
            let lhs = inner(&add_scaled(&y, a, &x).unwrap(), &z).unwrap();
            let rhs = a * inner(&x, &z).unwrap() + inner(&y, &z).unwrap();
            let scale = (a.abs() * norm(&x) + norm(&y)) * norm(&z);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn mean_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..6),
            rot in 0usize..6,
        ) {
            let vs: Vec<FlatVector> = rows.iter().cloned().map(FlatVector::from_vec).collect();
            let mut permuted = vs.clone();
            permuted.rotate_left(rot % vs.len());
            permuted.reverse();
            let m1 = mean(&vs).unwrap();
            let m2 = mean(&permuted).unwrap();
            for (a, b) in m1.as_slice().iter().zip(m2.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}
