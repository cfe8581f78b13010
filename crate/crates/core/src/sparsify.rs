//! Random drop (with or without rescale) and magnitude pruning of deltas.
//!
//! With drop rate `p`, every element is kept independently with probability
//! `1 - p`. DARE multiplies survivors by `1 / (1 - p)` so each element keeps
//! its expected value; DropOnly leaves survivors as they are. Magnitude
//! pruning instead keeps the `ceil((1 - p) * n)` largest-magnitude elements
//! of each tensor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_traits::Zero;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorMap;
use crate::delta::{fraction_count, DeltaMap, Provenance};
use crate::error::{Error, Result};
use crate::keyed_rng;
use crate::tensor::{compute_dtype, with_float, Scalar, Tensor};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum DropVariant {
    #[default]
    Dare,
    DropOnly,
}

impl fmt::Display for DropVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropVariant::Dare => "dare",
            DropVariant::DropOnly => "drop_only",
        })
    }
}

impl FromStr for DropVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dare" => Ok(DropVariant::Dare),
            "drop_only" | "droponly" => Ok(DropVariant::DropOnly),
            _ => Err(Error::Config(format!(
                "unknown drop variant '{s}' (expected dare or drop_only)"
            ))),
        }
    }
}

/// Tensors whose names match are left untouched by sparsification.
#[derive(Clone, Debug, Default)]
pub struct NameFilter(Option<Regex>);

impl NameFilter {
    pub fn none() -> Self {
        NameFilter(None)
    }

    pub fn new(pattern: &str) -> Result<Self> {
        Regex::new(pattern)
            .map(|r| NameFilter(Some(r)))
            .map_err(|e| Error::Config(format!("bad exclusion pattern: {e}")))
    }

    pub fn matches(&self, name: &str) -> bool {
        self.0.as_ref().is_some_and(|r| r.is_match(name))
    }
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "drop rate must lie in [0, 1), got {p}"
        )))
    }
}

#[derive(Clone, Debug)]
pub struct DropConfig {
    pub drop_rate: f64,
    pub seed: u64,
    pub variant: DropVariant,
    pub exclude: NameFilter,
}

impl DropConfig {
    pub fn new(drop_rate: f64, seed: u64, variant: DropVariant) -> Result<Self> {
        let cfg = DropConfig {
            drop_rate,
            seed,
            variant,
            exclude: NameFilter::none(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.drop_rate)
    }

    /// `1 / (1 - p)`.
    pub fn rescale(&self) -> f64 {
        1.0 / (1.0 - self.drop_rate)
    }
}

#[derive(Clone, Debug, Default)]
pub struct PruneConfig {
    pub drop_rate: f64,
    pub rescale_after: bool,
    pub exclude: NameFilter,
}

impl PruneConfig {
    pub fn new(drop_rate: f64) -> Result<Self> {
        let cfg = PruneConfig {
            drop_rate,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.drop_rate)
    }
}

/// Binary keep (true) / drop (false) mask for one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != keep.len() {
            return Err(Error::Config(format!(
                "mask of {} elements does not fit shape {shape:?}",
                keep.len()
            )));
        }
        Ok(Mask { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskMap {
    masks: BTreeMap<String, Mask>,
}

impl MaskMap {
    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mask)> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, mask: Mask) {
        self.masks.insert(name.into(), mask);
    }

    pub fn kept(&self) -> usize {
        self.masks.values().map(Mask::kept).sum()
    }

    pub fn numel(&self) -> usize {
        self.masks.values().map(|m| m.keep.len()).sum()
    }

    /// Masks as 0.0 / 1.0 `f32` tensors, for audit files.
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut tm = TensorMap::new();
        for (name, m) in &self.masks {
            let values = m
                .keep
                .iter()
                .map(|&k| if k { 1.0f32 } else { 0.0 })
                .collect();
            tm.insert(name.clone(), Tensor::from_f32(m.shape.clone(), values)?)?;
        }
        Ok(tm)
    }
}

/// Keep flags for `n` elements of tensor `name`: element `i` survives iff
/// its keyed uniform draw is at least `p`.
pub fn bernoulli_keep(seed: u64, name: &str, n: usize, p: f64) -> Vec<bool> {
    if p == 0.0 {
        return vec![true; n];
    }
    keyed_rng::units(seed, name, n)
        .into_iter()
        .map(|u| u >= p)
        .collect()
}

/// Random keep/drop masks for every tensor of `delta`.
pub fn generate_mask(delta: &DeltaMap, cfg: &DropConfig) -> Result<MaskMap> {
    cfg.validate()?;
    mask_for(delta.tensors(), cfg)
}

fn mask_for(tm: &TensorMap, cfg: &DropConfig) -> Result<MaskMap> {
    let entries: Vec<(&str, &Tensor)> = tm.iter().collect();
    let masks: Vec<(String, Mask)> = entries
        .par_iter()
        .map(|(name, t)| {
            let keep = if cfg.exclude.matches(name) {
                vec![true; t.numel()]
            } else {
                bernoulli_keep(cfg.seed, name, t.numel(), cfg.drop_rate)
            };
            (
                name.to_string(),
                Mask {
                    shape: t.shape().to_vec(),
                    keep,
                },
            )
        })
        .collect();
    Ok(MaskMap {
        masks: masks.into_iter().collect(),
    })
}

/// `mask * t * scale`, in the tensor's compute dtype.
fn masked_scale(t: &Tensor, keep: &[bool], scale: f64) -> Result<Tensor> {
    let dt = compute_dtype([t]);
    with_float!(dt, T => {
        let s = T::from_f64(scale);
        let out: Vec<T> = t
            .values::<T>()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v * s } else { T::zero() })
            .collect();
        Tensor::from_vec(t.shape().to_vec(), out)
    })
}

fn apply_masks(
    tm: &TensorMap,
    masks: &MaskMap,
    scale: f64,
    skip: &NameFilter,
) -> Result<TensorMap> {
    let entries: Vec<(&str, &Tensor)> = tm.iter().collect();
    let out: Vec<(String, Result<Tensor>)> = entries
        .par_iter()
        .map(|(name, t)| {
            let r = if skip.matches(name) {
                Ok((*t).clone())
            } else {
                match masks.get(name) {
                    Some(m) if m.shape == t.shape() => masked_scale(t, &m.keep, scale),
                    Some(_) => Err(Error::Alignment(format!(
                        "mask for '{name}' has the wrong shape"
                    ))),
                    None => Err(Error::Alignment(format!("no mask for tensor '{name}'"))),
                }
            };
            (name.to_string(), r)
        })
        .collect();
    let mut result = TensorMap::new();
    *result.metadata_mut() = tm.metadata().clone();
    for (name, t) in out {
        result.insert(name, t?)?;
    }
    Ok(result)
}

/// DARE with an explicit mask: `mask * delta / (1 - p)`.
pub fn dare_with_mask(delta: &DeltaMap, masks: &MaskMap, drop_rate: f64) -> Result<DeltaMap> {
    check_rate(drop_rate)?;
    let tm = apply_masks(
        delta.tensors(),
        masks,
        1.0 / (1.0 - drop_rate),
        &NameFilter::none(),
    )?;
    Ok(DeltaMap::new(tm, Provenance::Rescaled))
}

/// DropOnly with an explicit mask: `mask * delta`.
pub fn drop_only_with_mask(delta: &DeltaMap, masks: &MaskMap) -> Result<DeltaMap> {
    let tm = apply_masks(delta.tensors(), masks, 1.0, &NameFilter::none())?;
    Ok(DeltaMap::new(tm, Provenance::Dropped))
}

/// Drop with rate `p` and rescale survivors by `1 / (1 - p)`.
pub fn dare(delta: &DeltaMap, cfg: &DropConfig) -> Result<DeltaMap> {
    let masks = generate_mask(delta, cfg)?;
    let tm = apply_masks(delta.tensors(), &masks, cfg.rescale(), &cfg.exclude)?;
    Ok(DeltaMap::new(tm, Provenance::Rescaled))
}

/// Drop with rate `p`, leaving survivors unchanged.
pub fn drop_only(delta: &DeltaMap, cfg: &DropConfig) -> Result<DeltaMap> {
    let masks = generate_mask(delta, cfg)?;
    let tm = apply_masks(delta.tensors(), &masks, 1.0, &cfg.exclude)?;
    Ok(DeltaMap::new(tm, Provenance::Dropped))
}

/// [`dare`] or [`drop_only`] according to `cfg.variant`.
pub fn drop_delta(delta: &DeltaMap, cfg: &DropConfig) -> Result<DeltaMap> {
    match cfg.variant {
        DropVariant::Dare => dare(delta, cfg),
        DropVariant::DropOnly => drop_only(delta, cfg),
    }
}

/// Keep flags selecting the `k` largest-magnitude entries; ties go to the
/// lower flat index.
pub fn top_k_by_magnitude<T: Scalar>(values: &[T], k: usize) -> Vec<bool> {
    let n = values.len();
    let mut keep = vec![false; n];
    if k >= n {
        keep.iter_mut().for_each(|f| *f = true);
        return keep;
    }
    if k == 0 {
        return keep;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |&a: &usize, &b: &usize| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite values")
            .then(a.cmp(&b))
    };
    idx.select_nth_unstable_by(k - 1, order);
    for &i in &idx[..k] {
        keep[i] = true;
    }
    keep
}

/// Keep the `ceil((1 - p) * n)` largest-magnitude entries of each tensor.
pub fn magnitude_prune(delta: &DeltaMap, cfg: &PruneConfig) -> Result<DeltaMap> {
    cfg.validate()?;
    let tm = prune_map(delta.tensors(), cfg)?;
    let provenance = if cfg.rescale_after {
        Provenance::Rescaled
    } else {
        Provenance::Dropped
    };
    Ok(DeltaMap::new(tm, provenance))
}

fn prune_masks(tm: &TensorMap, cfg: &PruneConfig) -> MaskMap {
    let entries: Vec<(&str, &Tensor)> = tm.iter().collect();
    let masks: Vec<(String, Mask)> = entries
        .par_iter()
        .map(|(name, t)| {
            let k = fraction_count(1.0 - cfg.drop_rate, t.numel());
            let keep =
                with_float!(compute_dtype([*t]), T => top_k_by_magnitude(&t.values::<T>(), k));
            (
                name.to_string(),
                Mask {
                    shape: t.shape().to_vec(),
                    keep,
                },
            )
        })
        .collect();
    MaskMap {
        masks: masks.into_iter().collect(),
    }
}

fn prune_map(tm: &TensorMap, cfg: &PruneConfig) -> Result<TensorMap> {
    let masks = prune_masks(tm, cfg);
    let scale = if cfg.rescale_after {
        1.0 / (1.0 - cfg.drop_rate)
    } else {
        1.0
    };
    apply_masks(tm, &masks, scale, &cfg.exclude)
}

/// A sparsification scheme that can be applied to any tensor map.
#[derive(Clone, Debug)]
pub enum Scheme {
    Drop(DropConfig),
    Prune(PruneConfig),
}

/// Apply a scheme directly to fine-tuned weights rather than to their delta.
pub fn drop_finetuned(sft: &TensorMap, scheme: &Scheme) -> Result<TensorMap> {
    match scheme {
        Scheme::Drop(cfg) => {
            cfg.validate()?;
            let masks = mask_for(sft, cfg)?;
            let scale = match cfg.variant {
                DropVariant::Dare => cfg.rescale(),
                DropVariant::DropOnly => 1.0,
            };
            apply_masks(sft, &masks, scale, &cfg.exclude)
        }
        Scheme::Prune(cfg) => {
            cfg.validate()?;
            prune_map(sft, cfg)
        }
    }
}

/// Zero count and element count per tensor.
pub fn zero_counts(tm: &TensorMap) -> Vec<(String, usize, usize)> {
    tm.iter()
        .map(|(name, t)| {
            let zeros = t.to_f64_vec().iter().filter(|&&v| v == 0.0).count();
            (name.to_string(), zeros, t.numel())
        })
        .collect()
}

/// Fraction of exactly-zero elements over the whole map.
pub fn zero_fraction(tm: &TensorMap) -> f64 {
    let (z, n) = zero_counts(tm)
        .iter()
        .fold((0usize, 0usize), |(z, n), (_, zz, nn)| (z + zz, n + nn));
    if n == 0 {
        0.0
    } else {
        z as f64 / n as f64
    }
}
