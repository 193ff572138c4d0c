//! Conflict-averse aggregation of encoder updates.
//!
//! Given client updates `Δ_1..Δ_N` with mean `Δ̄`, the server looks for the
//! update inside the ball `‖U − Δ̄‖ ≤ c‖Δ̄‖` that maximizes the smallest inner
//! product with any client update. Its dual is a convex problem over simplex
//! weights `w`:
//!
//! ```text
//! F(w) = U_wᵀ Δ̄ + √φ ‖U_w‖,   U_w = (1/N) Σ w_i Δ_i,   φ = c² ‖Δ̄‖²
//! ```
//!
//! and the aggregated update is `Ũ = Δ̄ + (√φ / ‖U_w*‖) U_w*`.
//!
//! The solver runs projected gradient descent on `w` with a backtracking step
//! that is allowed to grow between iterations. It only needs the Gram
//! matrix of the updates, rescaled by its largest diagonal entry; `F` is
//! homogeneous of degree two in the updates so the minimizer is unchanged.

use serde::{Deserialize, Serialize};

use super::simplex::{project_onto_simplex, SimplexWeights};
use crate::error::{Error, Result};
use crate::param::{self, FlatVector};

/// Norms below this are treated as zero in denominators.
pub const NORM_GUARD: f64 = 1e-12;

const MIN_STEP: f64 = 1e-12;
const MAX_STEP: f64 = 1e6;

fn default_c() -> f64 {
    0.4
}
fn default_max_iters() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-10
}
fn default_step() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictAverseConfig {
    /// Radius of the trust region as a fraction of `‖Δ̄‖`; must lie in `[0, 1)`.
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_max_iters")]
    pub solver_max_iters: usize,
    #[serde(default = "default_tol")]
    pub solver_tol: f64,
    /// Initial step of the line search.
    #[serde(default = "default_step")]
    pub solver_step: f64,
}

impl Default for ConflictAverseConfig {
    fn default() -> Self {
        Self {
            c: default_c(),
            solver_max_iters: default_max_iters(),
            solver_tol: default_tol(),
            solver_step: default_step(),
        }
    }
}

impl ConflictAverseConfig {
    pub fn with_c(c: f64) -> Self {
        Self {
            c,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.c) {
            return Err(Error::InvalidArgument(format!("c = {} violates c ∈ [0,1)", self.c)));
        }
        if self.solver_max_iters == 0 {
            return Err(Error::InvalidArgument("solver_max_iters must be >= 1".into()));
        }
        if self.solver_tol.is_nan() || self.solver_tol < 0.0 {
            return Err(Error::InvalidArgument("solver_tol must be >= 0".into()));
        }
        if !(self.solver_step > 0.0 && self.solver_step.is_finite()) {
            return Err(Error::InvalidArgument("solver_step must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub value: f64,
    pub u_w: FlatVector,
}

/// `U_w = (1/N) Σ w_i Δ_i`.
pub fn weighted_update(w: &SimplexWeights, updates: &[FlatVector]) -> Result<FlatVector> {
    let first = updates.first().ok_or(Error::EmptyInput("weighted_update"))?;
    if w.len() != updates.len() {
        return Err(Error::DimMismatch {
            expected: updates.len(),
            got: w.len(),
        });
    }
    let n = updates.len() as f64;
    let mut acc = FlatVector::zeros(first.schema().clone());
    for (wi, u) in w.as_slice().iter().zip(updates) {
        acc = param::add_scaled(&acc, wi / n, u)?;
    }
    Ok(acc)
}

/// `F(w) = U_wᵀ Δ̄ + √φ ‖U_w‖`.
pub fn objective_f(
    w: &SimplexWeights,
    updates: &[FlatVector],
    mean_update: &FlatVector,
    phi: f64,
) -> Result<Objective> {
    let u_w = weighted_update(w, updates)?;
    let value = param::inner(&u_w, mean_update)? + phi.sqrt() * param::norm(&u_w);
    Ok(Objective { value, u_w })
}

#[derive(Clone, Debug)]
pub struct ConflictAverseSolution {
    pub weights: SimplexWeights,
    pub u_tilde: FlatVector,
    pub mean_update: FlatVector,
    pub phi: f64,
    /// `‖U_w*‖ / √φ`; `None` when the correction term was dropped.
    pub lambda: Option<f64>,
    pub iterations: usize,
}

/// `Ũ = Δ̄ + (√φ/‖U_w‖) U_w` for given weights, with the zero-norm guard.
pub fn conflict_averse_update(
    w: &SimplexWeights,
    updates: &[FlatVector],
    mean_update: &FlatVector,
    phi: f64,
) -> Result<(FlatVector, Option<f64>)> {
    if phi == 0.0 {
        return Ok((mean_update.clone(), None));
    }
    let u_w = weighted_update(w, updates)?;
    let u_norm = param::norm(&u_w);
    if u_norm < NORM_GUARD {
        return Ok((mean_update.clone(), None));
    }
    let sqrt_phi = phi.sqrt();
    Ok((param::add_scaled(mean_update, sqrt_phi / u_norm, &u_w)?, Some(u_norm / sqrt_phi)))
}

struct GramProblem {
    gram: Vec<Vec<f64>>,
    linear: Vec<f64>,
    sqrt_phi: f64,
}

impl GramProblem {
    fn quad(&self, w: &[f64]) -> Vec<f64> {
        self.gram
            .iter()
            .map(|row| param::dot(row, w))
            .collect()
    }

    /// Objective scaled by `N / scale`, plus its gradient.
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let gw = self.quad(w);
        let sq = param::dot(w, &gw).max(0.0);
        let norm = sq.sqrt();
        let value = param::dot(w, &self.linear) + self.sqrt_phi * norm;
        let grad = if norm > NORM_GUARD {
            self.linear
                .iter()
                .zip(&gw)
                .map(|(b, g)| b + self.sqrt_phi * g / norm)
                .collect()
        } else {
            self.linear.clone()
        };
        (value, grad)
    }
}

/// Minimizes `F` over the simplex and builds `Ũ`.
///
/// Degenerate inputs: if every update is zero the result is `Ũ = 0` with
/// uniform weights; if `‖U_w*‖` vanishes the correction term is dropped and
/// `Ũ = Δ̄`.
pub fn solve_conflict_averse(
    updates: &[FlatVector],
    cfg: &ConflictAverseConfig,
) -> Result<ConflictAverseSolution> {
    cfg.validate()?;
    let n = updates.len();
    let mean_update = param::mean(updates)?;
    let mean_norm = param::norm(&mean_update);
    let phi = cfg.c * cfg.c * mean_norm * mean_norm;

    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let g = param::inner(&updates[i], &updates[j])?;
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let scale = (0..n).map(|i| gram[i][i]).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(ConflictAverseSolution {
            weights: SimplexWeights::uniform(n),
            u_tilde: mean_update.clone(),
            mean_update,
            phi,
            lambda: None,
            iterations: 0,
        });
    }
    for row in gram.iter_mut() {
        for g in row.iter_mut() {
            *g /= scale;
        }
    }
    let linear: Vec<f64> = gram.iter().map(|row| row.iter().sum::<f64>() / n as f64).collect();
    let problem = GramProblem {
        gram,
        linear,
        sqrt_phi: (phi / scale).sqrt(),
    };

    let mut w = vec![1.0 / n as f64; n];
    let (mut val, mut grad) = problem.eval(&w);
    let mut best_val = val;
    let mut best_w = w.clone();
    let mut iterations = 0;
    let mut step = cfg.solver_step;
    for _ in 0..cfg.solver_max_iters {
        iterations += 1;
        // try a longer step first, then backtrack until the step satisfies
        // the sufficient-decrease condition
        step = (2.0 * step).min(MAX_STEP);
        let (next, next_val, next_grad) = loop {
            let stepped: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let next = project_onto_simplex(&stepped);
            let diff: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a - b).collect();
            let (v, g) = problem.eval(&next);
            let bound = val + param::dot(&grad, &diff) + param::dot(&diff, &diff) / (2.0 * step);
            if v <= bound || step < MIN_STEP {
                break (next, v, g);
            }
            step *= 0.5;
        };
        let moved = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        w = next;
        val = next_val;
        grad = next_grad;
        if val < best_val {
            best_val = val;
            best_w.clone_from(&w);
        }
        if moved < cfg.solver_tol {
            break;
        }
    }

    let weights = SimplexWeights::new(best_w)?;
    let (u_tilde, lambda) = conflict_averse_update(&weights, updates, &mean_update, phi)?;
    Ok(ConflictAverseSolution {
        weights,
        u_tilde,
        mean_update,
        phi,
        lambda,
        iterations,
    })
}
