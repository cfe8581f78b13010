//! Grid runs of a merge over drop rate, variant, scaling term and seed.
//!
//! Each cell merges with per-model drop preprocessing and measures output
//! drift on a probe set against the same merge without dropping. Cells run
//! in parallel; rows always come back in grid order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::calibration::{class_means, output_drift, Drift, ToyModel, ToyTask};
use crate::checkpoint::save_tensor_map;
use crate::error::{Error, Result};
use crate::merge::recipe::{merge_inputs, MergeInputs, MergeJob};
use crate::sparsify::{DropConfig, DropVariant, NameFilter};

pub const DEFAULT_DROP_RATES: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99];
pub const DEFAULT_PROBE_EXAMPLES: usize = 256;

pub const CSV_HEADER: [&str; 11] = [
    "method",
    "drop_rate",
    "variant",
    "lambda",
    "seed",
    "mean_abs_dlogit",
    "mean_abs_dprob",
    "acc_delta",
    "realized_sparsity",
    "wall_ms",
    "error",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub drop_rates: Vec<f64>,
    pub variants: Vec<DropVariant>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        for (name, empty) in [
            ("drop_rates", self.drop_rates.is_empty()),
            ("variants", self.variants.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                issues.push(format!("{name}: must not be empty"));
            }
        }
        for &p in &self.drop_rates {
            if !(0.0..1.0).contains(&p) {
                issues.push(format!("drop_rates: {p} is outside [0, 1)"));
            }
        }
        for &l in &self.lambdas {
            if !(l.is_finite() && l > 0.0) {
                issues.push(format!("lambdas: {l} is not positive"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(issues))
        }
    }

    /// Cells ordered by drop rate, then variant, then lambda, then seed.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &drop_rate in &self.drop_rates {
            for &variant in &self.variants {
                for &lambda in &self.lambdas {
                    for &seed in &self.seeds {
                        out.push(SweepCell {
                            drop_rate,
                            variant,
                            lambda,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            drop_rates: DEFAULT_DROP_RATES.to_vec(),
            variants: vec![DropVariant::Dare],
            lambdas: vec![crate::merge::recipe::DEFAULT_LAMBDA],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub drop_rate: f64,
    pub variant: DropVariant,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub cell: SweepCell,
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellResult {
    pub drift: Drift,
    /// Mean over models of the zero fraction of the preprocessed deltas.
    pub realized_sparsity: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Record wall-clock time per cell; without it `wall_ms` is 0 and the
    /// output is fully reproducible.
    pub timing: bool,
    /// Write each cell's merged checkpoint into this directory.
    pub save_models: Option<PathBuf>,
}

/// A probe drawn from a Gaussian mixture matching the model's shape.
pub fn default_probe(classes: usize, dim: usize, seed: u64) -> Result<ToyTask> {
    let means = class_means(seed, classes, dim, 4.0);
    ToyTask::gaussian_mixture(
        seed.wrapping_add(1),
        &means,
        classes,
        DEFAULT_PROBE_EXAMPLES.max(classes),
        1.0,
    )
}

fn cell_file_name(cell: &SweepCell) -> String {
    format!(
        "p{}_{}_lambda{}_seed{}.safetensors",
        cell.drop_rate, cell.variant, cell.lambda, cell.seed
    )
}

/// Run every cell of `spec`. Fails only on an invalid spec or when the
/// reference merge itself fails; per-cell failures are recorded in the rows.
pub fn run_sweep(
    template: &MergeJob,
    inputs: &MergeInputs,
    spec: &SweepSpec,
    probe: &ToyTask,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if let Some(dir) = &opts.save_models {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut lambdas = spec.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let references: BTreeMap<u64, std::result::Result<ToyModel, String>> = lambdas
        .par_iter()
        .map(|&lambda| {
            let job = MergeJob {
                lambda,
                dare: None,
                ..template.clone()
            };
            let r = merge_inputs(&job, inputs)
                .and_then(|o| ToyModel::from_tensor_map(&o.merged))
                .map_err(|e| format!("reference merge: {e}"));
            (lambda.to_bits(), r)
        })
        .collect();

    let method = template.method.name().to_string();
    let rows = spec
        .cells()
        .into_par_iter()
        .map(|cell| {
            let start = Instant::now();
            let outcome = references[&cell.lambda.to_bits()]
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|reference| {
                    run_cell(template, inputs, &cell, reference, probe, opts)
                        .map_err(|e| e.to_string())
                })
                .map(|(drift, realized_sparsity)| CellResult {
                    drift,
                    realized_sparsity,
                    wall_ms: if opts.timing {
                        start.elapsed().as_secs_f64() * 1e3
                    } else {
                        0.0
                    },
                });
            SweepRow {
                method: method.clone(),
                cell,
                outcome,
            }
        })
        .collect();
    Ok(rows)
}

fn run_cell(
    template: &MergeJob,
    inputs: &MergeInputs,
    cell: &SweepCell,
    reference: &ToyModel,
    probe: &ToyTask,
    opts: &SweepOptions,
) -> Result<(Drift, f64)> {
    let job = MergeJob {
        lambda: cell.lambda,
        dare: Some(DropConfig {
            drop_rate: cell.drop_rate,
            seed: cell.seed,
            variant: cell.variant,
            exclude: template
                .dare
                .as_ref()
                .map(|d| d.exclude.clone())
                .unwrap_or_else(NameFilter::none),
        }),
        ..template.clone()
    };
    let outcome = merge_inputs(&job, inputs)?;
    if let Some(dir) = &opts.save_models {
        save_tensor_map(&outcome.merged, dir.join(cell_file_name(cell)))?;
    }
    let candidate = ToyModel::from_tensor_map(&outcome.merged)?;
    let drift = output_drift(reference, &candidate, probe)?;
    let s = &outcome.report.realized_sparsity;
    let sparsity = if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    };
    Ok((drift, sparsity))
}

/// Write rows under [`CSV_HEADER`]. Failed cells leave the numeric columns
/// empty and carry the message in `error`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let to_err = |e: csv::Error| Error::Config(format!("writing sweep CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(to_err)?;
    for r in rows {
        let c = &r.cell;
        let mut rec = vec![
            r.method.clone(),
            c.drop_rate.to_string(),
            c.variant.to_string(),
            c.lambda.to_string(),
            c.seed.to_string(),
        ];
        match &r.outcome {
            Ok(res) => rec.extend([
                res.drift.mean_abs_dlogit.to_string(),
                res.drift.mean_abs_dprob.to_string(),
                res.drift.acc_delta.to_string(),
                res.realized_sparsity.to_string(),
                format!("{:.3}", res.wall_ms),
                String::new(),
            ]),
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 5));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("writing sweep CSV: {e}")))?;
    Ok(())
}
