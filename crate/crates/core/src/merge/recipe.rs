//! Declarative merge jobs read from JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    align, cast_map, load_tensor_map_with, upcast, Disposition, LoadOptions, MismatchPolicy,
    TensorMap,
};
use crate::error::{Error, Result};
use crate::merge::{
    average_merge, fisher_merge, preprocess_dare_detailed, regmean_merge, task_arithmetic_merge,
    ties_merge, FisherParams, MergeMethod, RegMeanParams, TiesParams, DEFAULT_FISHER_EPSILON,
    DEFAULT_REGMEAN_ALPHA, GRAM_SUFFIX,
};
use crate::sparsify::{DropConfig, DropVariant, NameFilter};
use crate::tensor::DType;

pub const DEFAULT_LAMBDA: f64 = 0.5;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_epsilon() -> f64 {
    DEFAULT_FISHER_EPSILON
}

fn default_alpha() -> f64 {
    DEFAULT_REGMEAN_ALPHA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareSection {
    pub drop_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherSection {
    pub stats_paths: Vec<PathBuf>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegMeanSection {
    pub gram_paths: Vec<PathBuf>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiesSection {
    pub retain_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub dtype: Option<DType>,
}

/// A merge job. Relative paths are resolved against `base_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: String,
    #[serde(default)]
    pub backbone_path: Option<PathBuf>,
    pub model_paths: Vec<PathBuf>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub dare: Option<DareSection>,
    #[serde(default)]
    pub fisher: Option<FisherSection>,
    #[serde(default)]
    pub regmean: Option<RegMeanSection>,
    #[serde(default)]
    pub ties: Option<TiesSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl MergeRecipe {
    /// Parse without validating.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("recipe: {e}")]))
    }

    /// Read, parse and validate a recipe file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut recipe = Self::from_json(&text)?;
        recipe.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Check every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let method = match self.method.parse::<MergeMethod>() {
            Ok(m) => Some(m),
            Err(e) => {
                issues.push(format!("method: {e}"));
                None
            }
        };
        let k = self.model_paths.len();
        if k < 2 {
            issues.push(format!("model_paths: need at least 2 models, got {k}"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            issues.push(format!("lambda: must be positive, got {}", self.lambda));
        }
        let needs_backbone = method.is_some_and(|m| m.needs_backbone()) || self.dare.is_some();
        if needs_backbone && self.backbone_path.is_none() {
            issues.push("backbone_path: required for this method or with dare".into());
        }
        if let Some(d) = &self.dare {
            if !(d.drop_rate >= 0.0 && d.drop_rate < 1.0) {
                issues.push(format!(
                    "dare.drop_rate: must be in [0, 1), got {}",
                    d.drop_rate
                ));
            }
        }
        let is = |m: MergeMethod| method == Some(m);
        match (&self.fisher, is(MergeMethod::Fisher)) {
            (None, true) => issues.push("fisher: section required for method fisher".into()),
            (Some(_), false) if method.is_some() => {
                issues.push("fisher: only allowed with method fisher".into())
            }
            (Some(f), _) => {
                if f.stats_paths.len() != k {
                    issues.push(format!(
                        "fisher.stats_paths: need one per model ({k}), got {}",
                        f.stats_paths.len()
                    ));
                }
                if !f.weights.is_empty() && f.weights.len() != k {
                    issues.push(format!(
                        "fisher.weights: need one per model ({k}), got {}",
                        f.weights.len()
                    ));
                }
                if f.weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
                    issues.push("fisher.weights: must all be positive".into());
                }
                if !(f.epsilon.is_finite() && f.epsilon >= 0.0) {
                    issues.push(format!(
                        "fisher.epsilon: must be non-negative, got {}",
                        f.epsilon
                    ));
                }
            }
            _ => {}
        }
        match (&self.regmean, is(MergeMethod::RegMean)) {
            (None, true) => issues.push("regmean: section required for method regmean".into()),
            (Some(_), false) if method.is_some() => {
                issues.push("regmean: only allowed with method regmean".into())
            }
            (Some(r), _) => {
                if r.gram_paths.len() != k {
                    issues.push(format!(
                        "regmean.gram_paths: need one per model ({k}), got {}",
                        r.gram_paths.len()
                    ));
                }
                if !(r.alpha > 0.0 && r.alpha <= 1.0) {
                    issues.push(format!("regmean.alpha: must be in (0, 1], got {}", r.alpha));
                }
            }
            _ => {}
        }
        match (&self.ties, is(MergeMethod::Ties)) {
            (None, true) => issues.push("ties: section required for method ties".into()),
            (Some(_), false) if method.is_some() => {
                issues.push("ties: only allowed with method ties".into())
            }
            (Some(t), _) if !(t.retain_ratio > 0.0 && t.retain_ratio <= 1.0) => {
                issues.push(format!(
                    "ties.retain_ratio: must be in (0, 1], got {}",
                    t.retain_ratio
                ));
            }
            _ => {}
        }
        if let Some(dt) = self.output.dtype {
            if !DType::ALL.contains(&dt) {
                issues.push(format!("output.dtype: unsupported {dt}"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(issues))
        }
    }

    /// The method and hyperparameters, detached from any files.
    pub fn job(&self) -> Result<MergeJob> {
        self.validate()?;
        Ok(MergeJob {
            method: self.method.parse()?,
            lambda: self.lambda,
            dare: self.dare.as_ref().map(|d| DropConfig {
                drop_rate: d.drop_rate,
                seed: d.seed,
                variant: DropVariant::Dare,
                exclude: NameFilter::none(),
            }),
            fisher_weights: self
                .fisher
                .as_ref()
                .map(|f| f.weights.clone())
                .unwrap_or_default(),
            fisher_epsilon: self
                .fisher
                .as_ref()
                .map_or(DEFAULT_FISHER_EPSILON, |f| f.epsilon),
            regmean_alpha: self
                .regmean
                .as_ref()
                .map_or(DEFAULT_REGMEAN_ALPHA, |r| r.alpha),
            ties: TiesParams {
                retain_ratio: self
                    .ties
                    .as_ref()
                    .map_or(TiesParams::default().retain_ratio, |t| t.retain_ratio),
            },
        })
    }
}

/// Method and hyperparameters of one merge.
#[derive(Clone, Debug)]
pub struct MergeJob {
    pub method: MergeMethod,
    pub lambda: f64,
    pub dare: Option<DropConfig>,
    pub fisher_weights: Vec<f64>,
    pub fisher_epsilon: f64,
    pub regmean_alpha: f64,
    pub ties: TiesParams,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub policy: MismatchPolicy,
    /// Arithmetic dtype; defaults to the widest compute dtype among inputs.
    pub compute: Option<DType>,
    pub load: LoadOptions,
}

/// Checkpoints and statistics of a recipe, loaded, upcast and aligned.
#[derive(Clone, Debug)]
pub struct MergeInputs {
    pub models: Vec<TensorMap>,
    pub backbone: Option<TensorMap>,
    pub fisher_stats: Vec<TensorMap>,
    pub grams: Vec<TensorMap>,
    /// Tensors copied unchanged into the output under a take-from policy.
    pub passthrough: TensorMap,
    pub alignment: Vec<String>,
    pub output_dtype: DType,
    pub load_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorDisposition {
    pub name: String,
    pub disposition: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct MergeReport {
    pub method: String,
    pub lambda: f64,
    pub models: usize,
    pub drop_rate: Option<f64>,
    pub output_dtype: DType,
    pub tensors: Vec<TensorDisposition>,
    /// Fraction of zero delta entries per model after preprocessing.
    pub realized_sparsity: Vec<f64>,
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub merged: TensorMap,
    pub report: MergeReport,
}

fn load_all(recipe: &MergeRecipe, paths: &[PathBuf], opts: &RunOptions) -> Result<Vec<TensorMap>> {
    paths
        .iter()
        .map(|p| load_tensor_map_with(recipe.resolve(p), opts.load))
        .collect()
}

fn widest(maps: &[&TensorMap]) -> DType {
    let any_f64 = maps
        .iter()
        .flat_map(|m| m.iter())
        .any(|(_, t)| t.dtype() == DType::F64);
    if any_f64 {
        DType::F64
    } else {
        DType::F32
    }
}

/// Load, upcast and align everything a recipe refers to.
pub fn load_inputs(recipe: &MergeRecipe, opts: &RunOptions) -> Result<MergeInputs> {
    recipe.validate().map_err(|e| e.in_stage("validate"))?;
    let start = Instant::now();
    let models = load_all(recipe, &recipe.model_paths, opts).map_err(|e| e.in_stage("load"))?;
    let backbone = recipe
        .backbone_path
        .as_ref()
        .map(|p| load_tensor_map_with(recipe.resolve(p), opts.load))
        .transpose()
        .map_err(|e| e.in_stage("load"))?;
    let fisher_stats = match &recipe.fisher {
        Some(f) => load_all(recipe, &f.stats_paths, opts).map_err(|e| e.in_stage("load"))?,
        None => Vec::new(),
    };
    let grams = match &recipe.regmean {
        Some(r) => load_all(recipe, &r.gram_paths, opts).map_err(|e| e.in_stage("load"))?,
        None => Vec::new(),
    };
    let output_dtype = recipe
        .output
        .dtype
        .or_else(|| models[0].leading_dtype())
        .unwrap_or(DType::F32);
    let load_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut inputs = prepare_inputs(models, backbone, fisher_stats, grams, opts)?;
    inputs.output_dtype = output_dtype;
    inputs.load_ms = load_ms;
    Ok(inputs)
}

/// Upcast and align in-memory inputs. Under `take-from:k`, `k` indexes the
/// models and `K` (the model count) names the backbone.
pub fn prepare_inputs(
    models: Vec<TensorMap>,
    backbone: Option<TensorMap>,
    fisher_stats: Vec<TensorMap>,
    grams: Vec<TensorMap>,
    opts: &RunOptions,
) -> Result<MergeInputs> {
    let output_dtype = models
        .first()
        .and_then(|m| m.leading_dtype())
        .unwrap_or(DType::F32);
    let mut all: Vec<&TensorMap> = models.iter().collect();
    all.extend(backbone.iter());
    let compute = opts.compute.unwrap_or_else(|| widest(&all));
    let alignment = align(&all, opts.policy).map_err(|e| e.in_stage("align"))?;
    let common: Vec<&str> = alignment.common.iter().map(String::as_str).collect();

    let mut passthrough = TensorMap::new();
    for entry in &alignment.report {
        if let Disposition::TakenFrom(k) = entry.disposition {
            let t = all[k].get(&entry.name).expect("present in source");
            passthrough.insert(entry.name.clone(), t.clone())?;
        }
    }
    let prep = |m: &TensorMap| upcast(&m.restrict(common.iter().copied()), compute);
    let models = models.iter().map(prep).collect::<Result<Vec<_>>>()?;
    let backbone = backbone.as_ref().map(prep).transpose()?;
    let fisher_stats = fisher_stats.iter().map(prep).collect::<Result<Vec<_>>>()?;
    let gram_names: Vec<String> = common.iter().map(|n| format!("{n}{GRAM_SUFFIX}")).collect();
    let grams = grams
        .iter()
        .map(|g| {
            for name in g.names() {
                let weight = name.strip_suffix(GRAM_SUFFIX).unwrap_or(name);
                if !all.iter().any(|m| m.contains(weight)) {
                    return Err(Error::Alignment(format!(
                        "gram entry '{name}' does not name a model weight"
                    )));
                }
            }
            upcast(&g.restrict(gram_names.iter().map(String::as_str)), compute)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("align"))?;
    Ok(MergeInputs {
        models,
        backbone,
        fisher_stats,
        grams,
        passthrough,
        alignment: alignment.report.iter().map(|e| e.to_string()).collect(),
        output_dtype,
        load_ms: 0.0,
    })
}

/// Run one merge over loaded inputs.
pub fn merge_inputs(job: &MergeJob, inputs: &MergeInputs) -> Result<MergeOutcome> {
    let mut timings = BTreeMap::new();
    if inputs.load_ms > 0.0 {
        timings.insert("load".to_string(), inputs.load_ms);
    }
    let need_backbone = |what: &str| {
        inputs
            .backbone
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{what} needs a backbone checkpoint")))
    };

    let start = Instant::now();
    let (models, sparsity) = match &job.dare {
        Some(cfg) => {
            let backbone = need_backbone("dare").map_err(|e| e.in_stage("preprocess"))?;
            let p = preprocess_dare_detailed(&inputs.models, backbone, cfg)
                .map_err(|e| e.in_stage("preprocess"))?;
            (p.models, p.sparsity)
        }
        None => (inputs.models.clone(), Vec::new()),
    };
    timings.insert(
        "preprocess".to_string(),
        start.elapsed().as_secs_f64() * 1e3,
    );

    let start = Instant::now();
    let merged = match job.method {
        MergeMethod::Average => average_merge(&models),
        MergeMethod::TaskArithmetic => need_backbone("task_arithmetic")
            .and_then(|b| task_arithmetic_merge(b, &models, job.lambda)),
        MergeMethod::Fisher => fisher_merge(
            &models,
            &FisherParams {
                stats: inputs.fisher_stats.clone(),
                model_weights: job.fisher_weights.clone(),
                epsilon: job.fisher_epsilon,
            },
            job.lambda,
        ),
        MergeMethod::RegMean => regmean_merge(
            &models,
            &RegMeanParams {
                grams: inputs.grams.clone(),
                alpha: job.regmean_alpha,
            },
        ),
        MergeMethod::Ties => {
            need_backbone("ties").and_then(|b| ties_merge(b, &models, &job.ties, job.lambda))
        }
    }
    .map_err(|e| e.in_stage("merge"))?;
    timings.insert("merge".to_string(), start.elapsed().as_secs_f64() * 1e3);

    let start = Instant::now();
    let mut out = cast_map(&merged, inputs.output_dtype).map_err(|e| e.in_stage("output"))?;
    for (name, t) in inputs.passthrough.iter() {
        out.insert(name, t.clone())?;
    }
    *out.metadata_mut() = BTreeMap::from([
        (
            "deltaforge.method".to_string(),
            job.method.name().to_string(),
        ),
        ("deltaforge.lambda".to_string(), job.lambda.to_string()),
    ]);
    timings.insert("output".to_string(), start.elapsed().as_secs_f64() * 1e3);

    let mut tensors: Vec<TensorDisposition> = merged
        .names()
        .map(|n| TensorDisposition {
            name: n.to_string(),
            disposition: "merged".into(),
        })
        .collect();
    tensors.extend(inputs.alignment.iter().map(|line| {
        let (name, rest) = line.split_once(": ").unwrap_or((line.as_str(), ""));
        TensorDisposition {
            name: name.to_string(),
            disposition: rest.to_string(),
        }
    }));
    tensors.sort_by(|a, b| a.name.cmp(&b.name));

    Ok(MergeOutcome {
        merged: out,
        report: MergeReport {
            method: job.method.name().to_string(),
            lambda: job.lambda,
            models: inputs.models.len(),
            drop_rate: job.dare.as_ref().map(|d| d.drop_rate),
            output_dtype: inputs.output_dtype,
            tensors,
            realized_sparsity: sparsity,
            timings_ms: timings,
        },
    })
}

/// Load a recipe's inputs and merge them.
pub fn run_recipe(recipe: &MergeRecipe, opts: &RunOptions) -> Result<MergeOutcome> {
    let job = recipe.job().map_err(|e| e.in_stage("validate"))?;
    let inputs = load_inputs(recipe, opts)?;
    merge_inputs(&job, &inputs)
}
