use crate::checkpoint::TensorMap;
use crate::error::Result;
use crate::merge::{aligned_names, build_map, check_lambda};
use crate::tensor::{compute_dtype, with_float, Scalar, Tensor};

/// Element-wise mean of the models.
///
/// Computed as `m0 + sum_k (m_k - m0) / K` so that averaging identical
/// models returns them bit for bit.
pub fn average_merge(models: &[TensorMap]) -> Result<TensorMap> {
    let refs: Vec<&TensorMap> = models.iter().collect();
    let names = aligned_names(&refs)?;
    let k = models.len();
    build_map(&names, |name| {
        let ts: Vec<&Tensor> = models
            .iter()
            .map(|m| m.get(name).expect("aligned"))
            .collect();
        with_float!(compute_dtype(ts.iter().copied()), T => {
            let vals: Vec<_> = ts.iter().map(|t| t.values::<T>()).collect();
            let first = &vals[0];
            let count = T::from_f64(k as f64);
            let out: Vec<T> = (0..first.len())
                .map(|j| {
                    let shift: T = vals[1..].iter().map(|v| v[j] - first[j]).sum();
                    first[j] + shift / count
                })
                .collect();
            Tensor::from_vec(ts[0].shape().to_vec(), out)
        })
    })
}

/// `backbone + lambda * sum_k (model_k - backbone)`.
pub fn task_arithmetic_merge(
    backbone: &TensorMap,
    models: &[TensorMap],
    lambda: f64,
) -> Result<TensorMap> {
    check_lambda(lambda)?;
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
            let vals: Vec<_> = ts.iter().map(|t| t.values::<T>()).collect();
            let l = T::from_f64(lambda);
            let out: Vec<T> = (0..b.len())
                .map(|j| {
                    let task_sum: T = vals.iter().map(|v| v[j] - b[j]).sum();
                    b[j] + l * task_sum
                })
                .collect();
            Tensor::from_vec(base.shape().to_vec(), out)
        })
    })
}
