//! Class-distribution estimation from final-layer weight norms, and the
//! weight-distribution regularizer (WDR) built on it.
//!
//! The estimate is the share of each class's final-layer row norm:
//! `p~_j = ||row_j|| / sum_k ||row_k||` (biases excluded). WDR penalizes the
//! Euclidean distance between a target distribution and that estimate, so
//! training pulls the norm shares toward the target.

use crate::data::ClassDistribution;
use crate::error::{Error, Result};
use crate::nn::{GradientSet, ModelParams, Regularizer};

/// L2 norms of the final-layer weight rows, one per class (bias excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct NormVector {
    pub norms: Vec<f64>,
}

impl NormVector {
    pub fn sum(&self) -> f64 {
        self.norms.iter().sum()
    }
}

/// WDR settings: penalty weight and the guard for the distance singularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdrConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-9;

impl WdrConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Argument(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        if !(epsilon > 0.0 && epsilon <= 1e-6) {
            return Err(Error::Argument(format!(
                "epsilon must be in (0, 1e-6], got {epsilon}"
            )));
        }
        Ok(WdrConfig { lambda, epsilon })
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, DEFAULT_EPSILON)
    }
}

/// Final-layer row norms of a model.
pub fn final_layer_norms(params: &ModelParams) -> NormVector {
    let layer = params.final_layer();
    let norms = (0..layer.out_dim)
        .map(|j| layer.row(j).iter().map(|w| w * w).sum::<f64>().sqrt())
        .collect();
    NormVector { norms }
}

/// Estimates a class distribution as normalized final-layer row norms.
///
/// Errors if every row is zero; callers fall back to the uniform
/// distribution in that case.
pub fn estimate_distribution(params: &ModelParams) -> Result<ClassDistribution> {
    let norms = final_layer_norms(params);
    let total = norms.sum();
    if total <= 0.0 {
        return Err(Error::ZeroFinalLayer);
    }
    ClassDistribution::new(norms.norms.iter().map(|&n| n / total).collect())
}

/// Euclidean distance between `target` and the weight-norm estimate.
pub fn wdr_penalty(params: &ModelParams, target: &ClassDistribution) -> Result<f64> {
    let estimate = estimate_distribution(params)?;
    if estimate.len() != target.len() {
        return Err(Error::Shape(format!(
            "target has {} classes, model has {}",
            target.len(),
            estimate.len()
        )));
    }
    Ok(target.l2_distance(&estimate))
}

/// Analytic gradient of `lambda * ||target - estimate||` with respect to the
/// final-layer weight rows; all other parameters have zero gradient.
///
/// Row `j` gets `lambda * [(p~_j - p_j) - sum_k (p~_k - p_k) p~_k] / (O * S)`
/// times the unit row direction, where `S` is the norm sum and `O` the
/// penalty. Rows with near-zero norm, or a near-zero penalty, contribute
/// nothing (the subgradient at the minimum is zero).
pub fn wdr_gradient(
    params: &ModelParams,
    target: &ClassDistribution,
    cfg: &WdrConfig,
) -> Result<Vec<Vec<f64>>> {
    let layer = params.final_layer();
    let k = layer.out_dim;
    if target.len() != k {
        return Err(Error::Shape(format!(
            "target has {} classes, model has {k}",
            target.len()
        )));
    }
    let mut rows = vec![vec![0.0; layer.in_dim]; k];
    if cfg.lambda == 0.0 {
        return Ok(rows);
    }
    let norms = final_layer_norms(params);
    let total = norms.sum();
    if total <= 0.0 {
        return Err(Error::ZeroFinalLayer);
    }
    let estimate: Vec<f64> = norms.norms.iter().map(|&n| n / total).collect();
    let omega = estimate
        .iter()
        .zip(target.probs())
        .map(|(e, p)| (e - p) * (e - p))
        .sum::<f64>()
        .sqrt();
    if omega < cfg.epsilon {
        return Ok(rows);
    }
    let dot: f64 = estimate
        .iter()
        .zip(target.probs())
        .map(|(e, p)| (e - p) * e)
        .sum();
    for (j, row) in rows.iter_mut().enumerate() {
        let norm_j = norms.norms[j];
        if norm_j < cfg.epsilon {
            continue;
        }
        let coeff =
            cfg.lambda * ((estimate[j] - target.probs()[j]) - dot) / (omega * total * norm_j);
        for (g, w) in row.iter_mut().zip(layer.row(j)) {
            *g = coeff * w;
        }
    }
    Ok(rows)
}

/// WDR as a [`Regularizer`] hook: returns `(lambda * penalty, gradient)` for
/// the current parameters, gradient confined to final-layer weight rows.
pub struct WdrHook {
    target: ClassDistribution,
    cfg: WdrConfig,
}

pub fn make_wdr_hook(target: ClassDistribution, cfg: WdrConfig) -> WdrHook {
    WdrHook { target, cfg }
}

impl Regularizer for WdrHook {
    fn penalty_and_grad(&self, params: &ModelParams) -> (f64, GradientSet) {
        let mut grads = GradientSet::zeros_like(params);
        if self.cfg.lambda == 0.0 {
            return (0.0, grads);
        }
        // An all-zero final layer has no defined estimate; contribute nothing
        // rather than aborting the training step.
        let Ok(penalty) = wdr_penalty(params, &self.target) else {
            return (0.0, grads);
        };
        let rows = wdr_gradient(params, &self.target, &self.cfg)
            .expect("penalty succeeded, gradient shares its preconditions");
        let last = grads.layers.last_mut().expect("at least one layer");
        for (j, row) in rows.iter().enumerate() {
            last.row_mut(j).copy_from_slice(row);
        }
        (self.cfg.lambda * penalty, grads)
    }
}
