use num_traits::Zero;

use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::merge::{aligned_names, build_map, check_lambda};
use crate::sparsify::top_k_by_magnitude;
use crate::tensor::{compute_dtype, with_float, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiesParams {
    /// Fraction of largest-magnitude delta entries kept per tensor per model.
    pub retain_ratio: f64,
}

impl Default for TiesParams {
    fn default() -> Self {
        TiesParams { retain_ratio: 0.2 }
    }
}

impl TiesParams {
    pub fn validate(&self) -> Result<()> {
        if self.retain_ratio > 0.0 && self.retain_ratio <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "retain ratio must be in (0, 1], got {}",
                self.retain_ratio
            )))
        }
    }
}

/// Trim, elect sign, disjoint merge.
///
/// Per tensor and model the `ceil(k * n)` largest-magnitude delta entries are
/// kept. The elected sign of an element is the sign of the summed trimmed
/// deltas (a zero sum elects `+`). The merged delta is the mean of the trimmed
/// nonzero entries carrying the elected sign, or zero when there are none.
pub fn ties_merge(
    backbone: &TensorMap,
    models: &[TensorMap],
    params: &TiesParams,
    lambda: f64,
) -> Result<TensorMap> {
    check_lambda(lambda)?;
    params.validate()?;
    let mut refs: Vec<&TensorMap> = vec![backbone];
    refs.extend(models.iter());
    let names = aligned_names(&refs)?;
    build_map(&names, |name| {
        let base = backbone.get(name).expect("aligned");
        let ts: Vec<&Tensor> = models
            .iter()
            .map(|m| m.get(name).expect("aligned"))
            .collect();
        let dt = compute_dtype(ts.iter().copied().chain([base]));
        with_float!(dt, T => {
            let b = base.values::<T>();
            let n = b.len();
            let keep = crate::delta::fraction_count(params.retain_ratio, n);
            let trimmed: Vec<Vec<T>> = ts
                .iter()
                .map(|t| {
                    let v = t.values::<T>();
                    let d: Vec<T> = v.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
                    let mask = top_k_by_magnitude(&d, keep);
                    d.into_iter()
                        .zip(mask)
                        .map(|(x, m)| if m { x } else { T::zero() })
                        .collect()
                })
                .collect();
            let l = T::from_f64(lambda);
            let out: Vec<T> = (0..n)
                .map(|j| {
                    let total: T = trimmed.iter().map(|d| d[j]).sum();
                    let positive = total >= T::zero();
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for d in &trimmed {
                        let v = d[j];
                        if (positive && v > T::zero()) || (!positive && v < T::zero()) {
                            sum += v;
                            count += 1;
                        }
                    }
                    let tau = if count == 0 {
                        T::zero()
                    } else {
                        sum / T::from_f64(count as f64)
                    };
                    b[j] + l * tau
                })
                .collect();
            Tensor::from_vec(base.shape().to_vec(), out)
        })
    })
}
