use num_traits::Zero;

use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::merge::{aligned_names, build_map, check_lambda};
use crate::tensor::{compute_dtype, with_float, Scalar, Tensor};

pub const DEFAULT_FISHER_EPSILON: f64 = 1e-10;

/// Per-model diagonal Fisher estimates and mixing weights.
#[derive(Clone, Debug)]
pub struct FisherParams {
    /// One map per model, each tensor shaped like the parameter it describes.
    pub stats: Vec<TensorMap>,
    /// Positive per-model weights; empty means all ones.
    pub model_weights: Vec<f64>,
    pub epsilon: f64,
}

impl FisherParams {
    pub fn new(stats: Vec<TensorMap>) -> Self {
        FisherParams {
            stats,
            model_weights: Vec::new(),
            epsilon: DEFAULT_FISHER_EPSILON,
        }
    }
}

/// Fisher-weighted average. For element `j`:
///
/// ```text
/// merged[j] = sum_k c_k F_k[j] theta_k[j] / (sum_k c_k F_k[j] + eps),   c_k = lambda * w_k
/// ```
///
/// Where every `c_k F_k[j]` is zero the weighted mean by `w_k` is used instead.
pub fn fisher_merge(models: &[TensorMap], params: &FisherParams, lambda: f64) -> Result<TensorMap> {
    check_lambda(lambda)?;
    let k = models.len();
    if params.stats.len() != k {
        return Err(Error::Config(format!(
            "{} Fisher maps for {k} models",
            params.stats.len()
        )));
    }
    let weights: Vec<f64> = if params.model_weights.is_empty() {
        vec![1.0; k]
    } else {
        params.model_weights.clone()
    };
    if weights.len() != k || weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
        return Err(Error::Config(format!(
            "need {k} positive model weights, got {weights:?}"
        )));
    }
    if !(params.epsilon.is_finite() && params.epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be non-negative, got {}",
            params.epsilon
        )));
    }
    let refs: Vec<&TensorMap> = models.iter().collect();
    let names = aligned_names(&refs)?;

    build_map(&names, |name| {
        let thetas: Vec<&Tensor> = models
            .iter()
            .map(|m| m.get(name).expect("aligned"))
            .collect();
        let shape = thetas[0].shape();
        let mut fishers = Vec::with_capacity(k);
        for (i, s) in params.stats.iter().enumerate() {
            let f = s.get(name).ok_or_else(|| {
                Error::Alignment(format!("Fisher map {i} has no entry for '{name}'"))
            })?;
            if f.shape() != shape {
                return Err(Error::Alignment(format!(
                    "Fisher entry '{name}' of model {i} has shape {:?}, parameter has {shape:?}",
                    f.shape()
                )));
            }
            fishers.push(f);
        }
        let dt = compute_dtype(thetas.iter().chain(fishers.iter()).copied());
        with_float!(dt, T => {
            let th: Vec<_> = thetas.iter().map(|t| t.values::<T>()).collect();
            let fi: Vec<_> = fishers.iter().map(|t| t.values::<T>()).collect();
            for (i, f) in fi.iter().enumerate() {
                if let Some(j) = f.iter().position(|v| !v.is_finite() || *v < T::zero()) {
                    return Err(Error::Config(format!(
                        "Fisher entry '{name}' of model {i} is negative or non-finite at element {j}"
                    )));
                }
            }
            let coef: Vec<T> = weights.iter().map(|&w| T::from_f64(lambda * w)).collect();
            let plain: Vec<T> = weights.iter().map(|&w| T::from_f64(w)).collect();
            let plain_total: T = plain.iter().copied().sum();
            let eps = T::from_f64(params.epsilon);
            let out: Vec<T> = (0..th[0].len())
                .map(|j| {
                    let mut num = T::zero();
                    let mut den = T::zero();
                    for m in 0..k {
                        let w = coef[m] * fi[m][j];
                        num += w * th[m][j];
                        den += w;
                    }
                    if den > T::zero() {
                        num / (den + eps)
                    } else {
                        (0..k).map(|m| plain[m] * th[m][j]).sum::<T>() / plain_total
                    }
                })
                .collect();
            Tensor::from_vec(shape.to_vec(), out)
        })
    })
}
