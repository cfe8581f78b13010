//! Merging homologous checkpoints.
//!
//! Every method here expects aligned inputs (same tensor names and shapes);
//! [`recipe::run_recipe`] takes care of alignment, optional drop-and-rescale
//! preprocessing and output dtype.

mod basic;
mod fisher;
pub mod recipe;
mod regmean;
mod ties;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use basic::{average_merge, task_arithmetic_merge};
pub use fisher::{fisher_merge, FisherParams, DEFAULT_FISHER_EPSILON};
pub use recipe::{
    load_inputs, merge_inputs, prepare_inputs, run_recipe, MergeInputs, MergeJob, MergeOutcome,
    MergeRecipe, MergeReport, RunOptions,
};
pub use regmean::{
    gram_name, regmean_merge, RegMeanParams, DEFAULT_REGMEAN_ALPHA, GRAM_SUFFIX, MAX_CONDITION,
};
pub use ties::{ties_merge, TiesParams};

use crate::checkpoint::TensorMap;
use crate::delta::{apply_delta, compute_delta};
use crate::error::{Error, Result};
use crate::keyed_rng::derive_seed;
use crate::sparsify::{drop_delta, zero_fraction, DropConfig};
use crate::tensor::Tensor;
use crate::MismatchPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Fisher,
    RegMean,
    Ties,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::Fisher,
        MergeMethod::RegMean,
        MergeMethod::Ties,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Fisher => "fisher",
            MergeMethod::RegMean => "regmean",
            MergeMethod::Ties => "ties",
        }
    }

    /// Methods that are defined relative to a backbone.
    pub fn needs_backbone(self) -> bool {
        matches!(self, MergeMethod::TaskArithmetic | MergeMethod::Ties)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let allowed: Vec<_> = MergeMethod::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown merge method '{s}' (allowed: {})",
                    allowed.join(", ")
                ))
            })
    }
}

/// Tensor names shared by all maps, or an alignment error if they differ.
pub(crate) fn aligned_names(maps: &[&TensorMap]) -> Result<Vec<String>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no models to merge".into()))?;
    for (k, m) in maps.iter().enumerate().skip(1) {
        if m.len() != first.len() {
            return Err(Error::Alignment(format!(
                "model {k} has {} tensors, model 0 has {}",
                m.len(),
                first.len()
            )));
        }
        for (name, t) in first.iter() {
            match m.get(name) {
                Some(u) if u.shape() == t.shape() => {}
                Some(u) => {
                    return Err(Error::Alignment(format!(
                        "tensor '{name}' has shape {:?} in model {k} but {:?} in model 0",
                        u.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::Alignment(format!(
                        "tensor '{name}' is missing from model {k}"
                    )))
                }
            }
        }
    }
    Ok(first.names().map(str::to_string).collect())
}

/// Build a map by computing each named tensor independently (in parallel).
pub(crate) fn build_map<F>(names: &[String], f: F) -> Result<TensorMap>
where
    F: Fn(&str) -> Result<Tensor> + Sync,
{
    let out: Vec<(String, Result<Tensor>)> = names.par_iter().map(|n| (n.clone(), f(n))).collect();
    let mut tm = TensorMap::new();
    for (name, t) in out {
        tm.insert(name, t?)?;
    }
    Ok(tm)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "scaling term must be positive, got {lambda}"
        )))
    }
}

/// Models after per-model drop and rescale, with the realized delta sparsity of each.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub models: Vec<TensorMap>,
    pub sparsity: Vec<f64>,
}

/// `backbone + drop(model - backbone)` for every model. Model `k` uses seed
/// `derive_seed(cfg.seed, k)` so masks are independent across models. A zero
/// drop rate returns the models untouched.
pub fn preprocess_dare_detailed(
    models: &[TensorMap],
    backbone: &TensorMap,
    cfg: &DropConfig,
) -> Result<Preprocessed> {
    cfg.validate()?;
    let mut out = Preprocessed {
        models: Vec::with_capacity(models.len()),
        sparsity: Vec::with_capacity(models.len()),
    };
    for (k, model) in models.iter().enumerate() {
        let (delta, _) = compute_delta(model, backbone, MismatchPolicy::Error)?;
        if cfg.drop_rate == 0.0 {
            out.sparsity.push(zero_fraction(delta.tensors()));
            out.models.push(model.clone());
            continue;
        }
        let model_cfg = DropConfig {
            seed: derive_seed(cfg.seed, k as u64),
            ..cfg.clone()
        };
        let dropped = drop_delta(&delta, &model_cfg)?;
        out.sparsity.push(zero_fraction(dropped.tensors()));
        let mut merged = apply_delta(backbone, &dropped)?;
        *merged.metadata_mut() = model.metadata().clone();
        out.models.push(merged);
    }
    Ok(out)
}

pub fn preprocess_dare(
    models: &[TensorMap],
    backbone: &TensorMap,
    cfg: &DropConfig,
) -> Result<Vec<TensorMap>> {
    preprocess_dare_detailed(models, backbone, cfg).map(|p| p.models)
}
