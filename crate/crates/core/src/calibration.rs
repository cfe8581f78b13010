//! Linear-softmax toy models for checking data-dependent behaviour.
//!
//! A [`ToyModel`] maps `x` (length `D`) to `logits = W x + b` with `W` of
//! shape `[C, D]`. Tasks are seeded Gaussian mixtures. Everything here is
//! `f64` and a pure function of its seeds.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::TensorMap;
use crate::delta::{apply_delta, compute_delta};
use crate::error::{Error, Result};
use crate::keyed_rng::derive_seed;
use crate::merge::GRAM_SUFFIX;
use crate::sparsify::{drop_delta, DropConfig, DropVariant, NameFilter};
use crate::tensor::Tensor;
use crate::MismatchPolicy;

pub const WEIGHT: &str = "W";
pub const BIAS: &str = "b";

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    classes: usize,
    dim: usize,
    /// Row-major `[C, D]`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl ToyModel {
    pub fn new(classes: usize, dim: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if classes < 2 || dim < 1 {
            return Err(Error::Config(format!(
                "toy model needs C >= 2 and D >= 1, got C={classes} D={dim}"
            )));
        }
        if w.len() != classes * dim || b.len() != classes {
            return Err(Error::Config(format!(
                "toy model parameters have {} and {} entries, expected {} and {classes}",
                w.len(),
                b.len(),
                classes * dim
            )));
        }
        if let Some(i) = w.iter().chain(&b).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: if i < w.len() {
                    WEIGHT.into()
                } else {
                    BIAS.into()
                },
                index: if i < w.len() { i } else { i - w.len() },
            });
        }
        Ok(ToyModel { classes, dim, w, b })
    }

    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        Self::new(classes, dim, vec![0.0; classes * dim], vec![0.0; classes])
    }

    /// Every row of `W` equal to one Gaussian vector with standard deviation
    /// `scale`, zero bias. Such a component shifts all logits equally, so it
    /// never changes predictions and gradient descent never changes it.
    pub fn shared_init(seed: u64, classes: usize, dim: usize, scale: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = (0..classes).flat_map(|_| u.iter().copied()).collect();
        Self::new(classes, dim, w, vec![0.0; classes])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    /// All parameters, `W` then `b`.
    pub fn params(&self) -> Vec<f64> {
        self.w.iter().chain(&self.b).copied().collect()
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let n = self.w.len();
        if params.len() != n + self.classes {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                n + self.classes,
                params.len()
            )));
        }
        Self::new(
            self.classes,
            self.dim,
            params[..n].to_vec(),
            params[n..].to_vec(),
        )
    }

    fn check_task(&self, task: &ToyTask) -> Result<()> {
        if task.dim != self.dim || task.classes != self.classes {
            return Err(Error::Config(format!(
                "task has D={} C={}, model has D={} C={}",
                task.dim, task.classes, self.dim, self.classes
            )));
        }
        Ok(())
    }

    /// Logits for every example, row-major `[N, C]`.
    pub fn logits(&self, task: &ToyTask) -> Result<Vec<f64>> {
        self.check_task(task)?;
        let (c, d) = (self.classes, self.dim);
        let mut out = Vec::with_capacity(task.len() * c);
        for x in task.x.chunks_exact(d) {
            for k in 0..c {
                let row = &self.w[k * d..(k + 1) * d];
                out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b[k]);
            }
        }
        Ok(out)
    }

    pub fn probabilities(&self, task: &ToyTask) -> Result<Vec<f64>> {
        let mut z = self.logits(task)?;
        z.chunks_exact_mut(self.classes).for_each(softmax_in_place);
        Ok(z)
    }

    pub fn accuracy(&self, task: &ToyTask) -> Result<f64> {
        let z = self.logits(task)?;
        Ok(accuracy_of(&z, &task.y, self.classes))
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, task: &ToyTask) -> Result<f64> {
        let z = self.logits(task)?;
        let total: f64 = z
            .chunks_exact(self.classes)
            .zip(&task.y)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .sum();
        Ok(total / task.len() as f64)
    }

    /// `(dL/dW, dL/db)` of the mean cross-entropy: `(P - Y)^T X / N` and `mean(P - Y)`.
    pub fn gradients(&self, task: &ToyTask) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self.residuals(task)?;
        let (c, d, n) = (self.classes, self.dim, task.len() as f64);
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        for (er, x) in e.chunks_exact(c).zip(task.x.chunks_exact(d)) {
            for k in 0..c {
                gb[k] += er[k];
                let row = &mut gw[k * d..(k + 1) * d];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += er[k] * v;
                }
            }
        }
        gw.iter_mut().for_each(|g| *g /= n);
        gb.iter_mut().for_each(|g| *g /= n);
        Ok((gw, gb))
    }

    /// `P - Y`, row-major `[N, C]`.
    fn residuals(&self, task: &ToyTask) -> Result<Vec<f64>> {
        let mut p = self.probabilities(task)?;
        for (row, &y) in p.chunks_exact_mut(self.classes).zip(&task.y) {
            row[y] -= 1.0;
        }
        Ok(p)
    }

    /// Checkpoint with `"W"` `[C, D]` and `"b"` `[C]` in f64.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut tm = TensorMap::new();
        tm.insert(
            WEIGHT,
            Tensor::from_f64(vec![self.classes, self.dim], self.w.clone()).expect("shape"),
        )
        .expect("name");
        tm.insert(
            BIAS,
            Tensor::from_f64(vec![self.classes], self.b.clone()).expect("shape"),
        )
        .expect("name");
        tm
    }

    pub fn from_tensor_map(tm: &TensorMap) -> Result<Self> {
        let w = tm
            .get(WEIGHT)
            .ok_or_else(|| Error::Config("toy checkpoint has no tensor 'W'".into()))?;
        let b = tm
            .get(BIAS)
            .ok_or_else(|| Error::Config("toy checkpoint has no tensor 'b'".into()))?;
        if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
            return Err(Error::Config(format!(
                "toy checkpoint shapes W {:?} and b {:?} do not fit [C, D] and [C]",
                w.shape(),
                b.shape()
            )));
        }
        Self::new(w.shape()[0], w.shape()[1], w.to_f64_vec(), b.to_f64_vec())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// First index of the maximum; ties resolve to the lower class.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy_of(logits: &[f64], y: &[usize], classes: usize) -> f64 {
    let hits = logits
        .chunks_exact(classes)
        .zip(y)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / y.len() as f64
}

/// Labelled examples: inputs `[N, D]` and labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    classes: usize,
    dim: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl ToyTask {
    pub fn new(classes: usize, dim: usize, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        if classes < 2 || dim < 1 {
            return Err(Error::Config(format!(
                "task needs C >= 2 and D >= 1, got C={classes} D={dim}"
            )));
        }
        if y.is_empty() {
            return Err(Error::EmptyInput("task has no examples".into()));
        }
        if x.len() != y.len() * dim {
            return Err(Error::Config(format!(
                "{} input values for {} examples of dimension {dim}",
                x.len(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "X".into(),
                index: i,
            });
        }
        Ok(ToyTask { classes, dim, x, y })
    }

    /// `N` examples with label `n mod C` and input `means[label] + noise * z`,
    /// `z` standard normal. `means` is row-major `[C, D]`.
    pub fn gaussian_mixture(
        seed: u64,
        means: &[f64],
        classes: usize,
        n: usize,
        noise: f64,
    ) -> Result<Self> {
        if classes == 0 || !means.len().is_multiple_of(classes) {
            return Err(Error::Config(format!(
                "{} mean values do not split into {classes} classes",
                means.len()
            )));
        }
        if n < classes {
            return Err(Error::Config(format!(
                "need at least one example per class ({classes}), got {n}"
            )));
        }
        let dim = means.len() / classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut x = Vec::with_capacity(n * dim);
        for &label in &y {
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                x.push(means[label * dim + j] + noise * z);
            }
        }
        Self::new(classes, dim, x, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `[N, D]`.
    pub fn inputs(&self) -> &[f64] {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    /// `"X"` `[N, D]` and `"y"` `[N]` (labels stored as floats).
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut tm = TensorMap::new();
        tm.insert(
            "X",
            Tensor::from_f64(vec![self.len(), self.dim], self.x.clone()).expect("shape"),
        )
        .expect("name");
        let y = self.y.iter().map(|&l| l as f64).collect();
        tm.insert("y", Tensor::from_f64(vec![self.len()], y).expect("shape"))
            .expect("name");
        tm
    }

    pub fn from_tensor_map(tm: &TensorMap, classes: usize) -> Result<Self> {
        let x = tm
            .get("X")
            .ok_or_else(|| Error::Config("probe file has no tensor 'X'".into()))?;
        let y = tm
            .get("y")
            .ok_or_else(|| Error::Config("probe file has no tensor 'y'".into()))?;
        if x.shape().len() != 2 || y.shape() != [x.shape()[0]] {
            return Err(Error::Config(format!(
                "probe shapes X {:?} and y {:?} do not fit [N, D] and [N]",
                x.shape(),
                y.shape()
            )));
        }
        let labels = y
            .to_f64_vec()
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Config(format!(
                        "probe label {v} is not a class index"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, x.shape()[1], x.to_f64_vec(), labels)
    }
}

/// Class means with i.i.d. entries `N(0, (scale / sqrt(D))^2)`, so each
/// mean has norm close to `scale`. Row-major `[C, D]`.
pub fn class_means(seed: u64, classes: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = scale / (dim as f64).sqrt();
    (0..classes * dim)
        .map(|_| s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `means` plus an independent offset of relative size `shift`.
pub fn shift_means(seed: u64, means: &[f64], dim: usize, scale: f64, shift: f64) -> Vec<f64> {
    let offset = class_means(seed, means.len() / dim, dim, scale * shift);
    means.iter().zip(offset).map(|(m, o)| m + o).collect()
}

/// Full-batch gradient descent on the mean cross-entropy.
pub fn fit_toy(pre: &ToyModel, task: &ToyTask, steps: usize, lr: f64) -> Result<ToyModel> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    pre.check_task(task)?;
    let mut model = pre.clone();
    for step in 0..steps {
        let loss = model.loss(task)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss, lr });
        }
        let (gw, gb) = model.gradients(task)?;
        for (w, g) in model.w.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in model.b.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
        if model.w.iter().chain(&model.b).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: step + 1,
                loss: f64::NAN,
                lr,
            });
        }
    }
    Ok(model)
}

/// Empirical diagonal Fisher: the mean over examples of the squared gradient
/// of `log p(y | x)`. Returned under the parameter names `"W"` and `"b"`.
pub fn fisher_diag(model: &ToyModel, task: &ToyTask) -> Result<TensorMap> {
    let e = model.residuals(task)?;
    let (c, d, n) = (model.classes, model.dim, task.len() as f64);
    // (E o E)^T (X o X) / N
    let mut fw = vec![0.0; c * d];
    let mut fb = vec![0.0; c];
    for (er, x) in e.chunks_exact(c).zip(task.x.chunks_exact(d)) {
        for k in 0..c {
            let e2 = er[k] * er[k];
            fb[k] += e2;
            for (f, v) in fw[k * d..(k + 1) * d].iter_mut().zip(x) {
                *f += e2 * v * v;
            }
        }
    }
    fw.iter_mut().for_each(|f| *f /= n);
    fb.iter_mut().for_each(|f| *f /= n);
    let mut tm = TensorMap::new();
    tm.insert(WEIGHT, Tensor::from_f64(vec![c, d], fw)?)?;
    tm.insert(BIAS, Tensor::from_f64(vec![c], fb)?)?;
    Ok(tm)
}

/// `X^T X` of the task inputs as `"W.gram"` `[D, D]`, exactly symmetric.
pub fn gram(task: &ToyTask) -> Result<TensorMap> {
    let d = task.dim;
    let mut g = vec![0.0; d * d];
    for x in task.x.chunks_exact(d) {
        for i in 0..d {
            for j in i..d {
                g[i * d + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] = g[j * d + i];
        }
    }
    let mut tm = TensorMap::new();
    tm.insert(
        format!("{WEIGHT}{GRAM_SUFFIX}"),
        Tensor::from_f64(vec![d, d], g)?,
    )?;
    Ok(tm)
}

/// How far a candidate's outputs move from a reference on a probe set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Drift {
    pub mean_abs_dlogit: f64,
    pub mean_abs_dprob: f64,
    /// `accuracy(candidate) - accuracy(reference)`.
    pub acc_delta: f64,
}

pub fn output_drift(reference: &ToyModel, candidate: &ToyModel, probe: &ToyTask) -> Result<Drift> {
    if reference.classes != candidate.classes || reference.dim != candidate.dim {
        return Err(Error::Config(format!(
            "models differ in shape: C={} D={} vs C={} D={}",
            reference.classes, reference.dim, candidate.classes, candidate.dim
        )));
    }
    let zr = reference.logits(probe)?;
    let zc = candidate.logits(probe)?;
    let m = zr.len() as f64;
    let mean_abs_dlogit = zr.iter().zip(&zc).map(|(a, b)| (a - b).abs()).sum::<f64>() / m;
    let mut pr = zr.clone();
    let mut pc = zc.clone();
    pr.chunks_exact_mut(reference.classes)
        .for_each(softmax_in_place);
    pc.chunks_exact_mut(reference.classes)
        .for_each(softmax_in_place);
    let mean_abs_dprob = pr.iter().zip(&pc).map(|(a, b)| (a - b).abs()).sum::<f64>() / m;
    let acc_delta = accuracy_of(&zc, &probe.y, reference.classes)
        - accuracy_of(&zr, &probe.y, reference.classes);
    Ok(Drift {
        mean_abs_dlogit,
        mean_abs_dprob,
        acc_delta,
    })
}

/// Parameters of the standard calibration setup: one pretrained model and
/// several models fine-tuned from it on shifted versions of its task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SetupConfig {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub tasks: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Relative size of each fine-tuning task's shift of the class means.
    pub shift: f64,
    pub noise: f64,
    /// Standard deviation of the shared row component of the initial weights.
    pub shared_scale: f64,
    pub train_examples: usize,
    pub probe_examples: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lr: f64,
}

impl Default for SetupConfig {
    fn default() -> Self {
        SetupConfig {
            seed: 0,
            classes: 4,
            dim: 256,
            tasks: 2,
            separation: 4.0,
            shift: 2.0,
            noise: 0.5,
            shared_scale: 3.0,
            train_examples: 512,
            probe_examples: 512,
            pretrain_steps: 300,
            finetune_steps: 200,
            lr: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Setup {
    pub pretrained: ToyModel,
    pub finetuned: Vec<ToyModel>,
    pub train: Vec<ToyTask>,
    /// Held-out examples of each fine-tuning task.
    pub probes: Vec<ToyTask>,
}

impl Setup {
    pub fn build(cfg: &SetupConfig) -> Result<Self> {
        let seed = |i: u64| derive_seed(cfg.seed, i);
        let (c, d) = (cfg.classes, cfg.dim);
        let base = class_means(seed(0), c, d, cfg.separation);
        let init = ToyModel::shared_init(seed(1), c, d, cfg.shared_scale)?;
        let base_task =
            ToyTask::gaussian_mixture(seed(2), &base, c, cfg.train_examples, cfg.noise)?;
        let pretrained = fit_toy(&init, &base_task, cfg.pretrain_steps, cfg.lr)?;
        let mut out = Setup {
            pretrained,
            finetuned: Vec::new(),
            train: Vec::new(),
            probes: Vec::new(),
        };
        for t in 0..cfg.tasks as u64 {
            let means = shift_means(seed(10 + 3 * t), &base, d, cfg.separation, cfg.shift);
            let train = ToyTask::gaussian_mixture(
                seed(11 + 3 * t),
                &means,
                c,
                cfg.train_examples,
                cfg.noise,
            )?;
            let probe = ToyTask::gaussian_mixture(
                seed(12 + 3 * t),
                &means,
                c,
                cfg.probe_examples,
                cfg.noise,
            )?;
            out.finetuned.push(fit_toy(
                &out.pretrained,
                &train,
                cfg.finetune_steps,
                cfg.lr,
            )?);
            out.train.push(train);
            out.probes.push(probe);
        }
        Ok(out)
    }

    /// All probe examples pooled, in task order.
    pub fn pooled_probe(&self) -> Result<ToyTask> {
        let first = &self.probes[0];
        let x = self
            .probes
            .iter()
            .flat_map(|p| p.x.iter().copied())
            .collect();
        let y = self
            .probes
            .iter()
            .flat_map(|p| p.y.iter().copied())
            .collect();
        ToyTask::new(first.classes, first.dim, x, y)
    }
}

/// `pretrained + drop(finetuned - pretrained)`.
pub fn drop_toy(pretrained: &ToyModel, finetuned: &ToyModel, cfg: &DropConfig) -> Result<ToyModel> {
    let pre = pretrained.to_tensor_map();
    let (delta, _) = compute_delta(&finetuned.to_tensor_map(), &pre, MismatchPolicy::Error)?;
    let dropped = drop_delta(&delta, cfg)?;
    ToyModel::from_tensor_map(&apply_delta(&pre, &dropped)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftRow {
    pub seed: u64,
    pub p: f64,
    pub variant: DropVariant,
    #[serde(flatten)]
    pub drift: Drift,
}

/// Drift of `pretrained + drop(delta)` from the fine-tuned model, for every
/// combination of rate, variant and seed (rows in that order).
pub fn drift_experiment(
    pretrained: &ToyModel,
    finetuned: &ToyModel,
    probe: &ToyTask,
    rates: &[f64],
    variants: &[DropVariant],
    seeds: &[u64],
) -> Result<Vec<DriftRow>> {
    let cells: Vec<(f64, DropVariant, u64)> = rates
        .iter()
        .flat_map(|&p| {
            variants
                .iter()
                .flat_map(move |&v| seeds.iter().map(move |&s| (p, v, s)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(p, variant, seed)| {
            let cfg = DropConfig {
                drop_rate: p,
                seed,
                variant,
                exclude: NameFilter::none(),
            };
            let candidate = drop_toy(pretrained, finetuned, &cfg)?;
            Ok(DriftRow {
                seed,
                p,
                variant,
                drift: output_drift(finetuned, &candidate, probe)?,
            })
        })
        .collect()
}

/// CSV with columns `seed,p,variant,mean_abs_dlogit,mean_abs_dprob,acc_delta`.
pub fn write_drift_csv<W: Write>(rows: &[DriftRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Config(format!("writing drift CSV: {e}"));
    w.write_record([
        "seed",
        "p",
        "variant",
        "mean_abs_dlogit",
        "mean_abs_dprob",
        "acc_delta",
    ])
    .map_err(to_err)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.p.to_string(),
            r.variant.to_string(),
            r.drift.mean_abs_dlogit.to_string(),
            r.drift.mean_abs_dprob.to_string(),
            r.drift.acc_delta.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("writing drift CSV: {e}")))?;
    Ok(())
}
