use nalgebra::{DMatrix, SymmetricEigen};

use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::merge::{aligned_names, build_map};
use crate::tensor::{compute_dtype, DType, Tensor};

pub const DEFAULT_REGMEAN_ALPHA: f64 = 0.9;
/// Gram matrices are stored under `<weight name>.gram`.
pub const GRAM_SUFFIX: &str = ".gram";
/// Largest accepted condition number of the summed reduced gram.
pub const MAX_CONDITION: f64 = 1e12;
const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// Per-model input gram matrices and the off-diagonal reduction factor.
#[derive(Clone, Debug)]
pub struct RegMeanParams {
    pub grams: Vec<TensorMap>,
    pub alpha: f64,
}

impl RegMeanParams {
    pub fn new(grams: Vec<TensorMap>) -> Self {
        RegMeanParams {
            grams,
            alpha: DEFAULT_REGMEAN_ALPHA,
        }
    }
}

pub fn gram_name(weight: &str) -> String {
    format!("{weight}{GRAM_SUFFIX}")
}

/// Closed-form regression merge.
///
/// Each 2-D weight `W` of shape `[d_out, d_in]` with grams `G_k` (`[d_in, d_in]`) becomes
/// the solution of `(sum_k G'_k) W^T = sum_k G'_k W_k^T`, where `G'_k` is `G_k` with
/// off-diagonal entries scaled by `alpha`. Tensors without grams are averaged.
pub fn regmean_merge(models: &[TensorMap], params: &RegMeanParams) -> Result<TensorMap> {
    let k = models.len();
    if params.grams.len() != k {
        return Err(Error::Config(format!(
            "{} gram maps for {k} models",
            params.grams.len()
        )));
    }
    if !(params.alpha > 0.0 && params.alpha <= 1.0) {
        return Err(Error::Config(format!(
            "regmean alpha must be in (0, 1], got {}",
            params.alpha
        )));
    }
    let refs: Vec<&TensorMap> = models.iter().collect();
    let names = aligned_names(&refs)?;
    for (i, g) in params.grams.iter().enumerate() {
        for gname in g.names() {
            let weight = gname.strip_suffix(GRAM_SUFFIX).unwrap_or(gname);
            if !models[0].contains(weight) || !gname.ends_with(GRAM_SUFFIX) {
                return Err(Error::Alignment(format!(
                    "gram map {i} entry '{gname}' does not name a model weight"
                )));
            }
        }
    }

    build_map(&names, |name| {
        let ws: Vec<&Tensor> = models
            .iter()
            .map(|m| m.get(name).expect("aligned"))
            .collect();
        let gname = gram_name(name);
        let present = params.grams.iter().filter(|g| g.contains(&gname)).count();
        if present == 0 {
            return mean_tensor(&ws);
        }
        if present != k {
            return Err(Error::Alignment(format!(
                "gram '{gname}' is present for {present} of {k} models"
            )));
        }
        let grams: Vec<&Tensor> = params
            .grams
            .iter()
            .map(|g| g.get(&gname).expect("present"))
            .collect();
        solve_weight(name, &ws, &grams, params.alpha)
    })
}

fn mean_tensor(ws: &[&Tensor]) -> Result<Tensor> {
    let dt = compute_dtype(ws.iter().copied());
    let vals: Vec<Vec<f64>> = ws.iter().map(|t| t.to_f64_vec()).collect();
    let first = &vals[0];
    let k = ws.len() as f64;
    let out: Vec<f64> = (0..first.len())
        .map(|j| first[j] + vals[1..].iter().map(|v| v[j] - first[j]).sum::<f64>() / k)
        .collect();
    Ok(Tensor::from_f64(ws[0].shape().to_vec(), out)?.cast(dt))
}

fn solve_weight(name: &str, ws: &[&Tensor], grams: &[&Tensor], alpha: f64) -> Result<Tensor> {
    let shape = ws[0].shape();
    if shape.len() != 2 {
        return Err(Error::Alignment(format!(
            "gram given for '{name}' but it has shape {shape:?}, not 2-D"
        )));
    }
    let (d_out, d_in) = (shape[0], shape[1]);
    let mut lhs = DMatrix::<f64>::zeros(d_in, d_in);
    let mut rhs = DMatrix::<f64>::zeros(d_in, d_out);
    for (i, (w, g)) in ws.iter().zip(grams).enumerate() {
        if g.shape() != [d_in, d_in] {
            return Err(Error::Alignment(format!(
                "gram for '{name}' of model {i} has shape {:?}, expected [{d_in}, {d_in}]",
                g.shape()
            )));
        }
        let gv = g.to_f64_vec();
        let scale = gv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for r in 0..d_in {
            for c in (r + 1)..d_in {
                let (a, b) = (gv[r * d_in + c], gv[c * d_in + r]);
                if (a - b).abs() > SYMMETRY_TOLERANCE * scale {
                    return Err(Error::Validation(vec![format!(
                        "gram for '{name}' of model {i} is not symmetric at ({r}, {c}): {a} vs {b}"
                    )]));
                }
            }
        }
        let reduced = DMatrix::from_fn(d_in, d_in, |r, c| {
            let v = 0.5 * (gv[r * d_in + c] + gv[c * d_in + r]);
            if r == c {
                v
            } else {
                alpha * v
            }
        });
        // W_k^T as a [d_in, d_out] matrix
        let wt = DMatrix::from_row_slice(d_out, d_in, &w.to_f64_vec()).transpose();
        rhs += &reduced * wt;
        lhs += reduced;
    }

    let eig = SymmetricEigen::new(lhs.clone());
    let max = eig
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition.is_nan() || condition > MAX_CONDITION {
        return Err(Error::Singular {
            tensor: name.to_string(),
            condition,
        });
    }
    let chol = lhs.cholesky().ok_or_else(|| Error::Singular {
        tensor: name.to_string(),
        condition,
    })?;
    let x = chol.solve(&rhs);
    // x is W^T; row-major W[o, i] = x[(i, o)]
    let mut out = Vec::with_capacity(d_out * d_in);
    for o in 0..d_out {
        for i in 0..d_in {
            out.push(x[(i, o)]);
        }
    }
    let dt = compute_dtype(ws.iter().copied());
    let t = Tensor::from_f64(vec![d_out, d_in], out)?;
    Ok(if dt == DType::F64 { t } else { t.cast(dt) })
}
