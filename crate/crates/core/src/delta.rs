//! Delta parameters: the element-wise difference between a fine-tuned
//! checkpoint and the backbone it was tuned from.

use std::fmt::{self, Write as _};
use std::io;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{align, Alignment, MismatchPolicy, TensorMap};
use crate::error::{Error, Result};
use crate::keyed_rng;
use crate::tensor::{compute_dtype, with_float, Tensor};

const PROVENANCE_KEY: &str = "deltaforge.provenance";

/// Where a delta came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// `sft - pre`.
    Raw,
    /// Some entries zeroed, survivors untouched.
    Dropped,
    /// Some entries zeroed, survivors rescaled.
    Rescaled,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Raw => "raw",
            Provenance::Dropped => "dropped",
            Provenance::Rescaled => "rescaled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaMap {
    tensors: TensorMap,
    provenance: Provenance,
}

impl DeltaMap {
    pub fn new(tensors: TensorMap, provenance: Provenance) -> Self {
        DeltaMap {
            tensors,
            provenance,
        }
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn into_tensors(self) -> TensorMap {
        self.tensors
    }

    /// Tensor map with the provenance recorded in the file metadata.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut tm = self.tensors.clone();
        tm.metadata_mut()
            .insert(PROVENANCE_KEY.into(), self.provenance.as_str().into());
        tm
    }

    /// Inverse of [`DeltaMap::to_tensor_map`]; files without the tag are raw.
    pub fn from_tensor_map(mut tm: TensorMap) -> Self {
        let provenance = match tm.metadata_mut().remove(PROVENANCE_KEY).as_deref() {
            Some("dropped") => Provenance::Dropped,
            Some("rescaled") => Provenance::Rescaled,
            _ => Provenance::Raw,
        };
        DeltaMap {
            tensors: tm,
            provenance,
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
}

fn zip_tensors(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let dt = compute_dtype([a, b]);
    with_float!(dt, T => {
        let x = a.values::<T>();
        let y = b.values::<T>();
        let out: Vec<T> = match op {
            BinOp::Add => x.iter().zip(y.iter()).map(|(&p, &q)| p + q).collect(),
            BinOp::Sub => x.iter().zip(y.iter()).map(|(&p, &q)| p - q).collect(),
        };
        Tensor::from_vec(a.shape().to_vec(), out)
    })
}

/// Element-wise `sft - pre` over the tensors the two maps share.
pub fn compute_delta(
    sft: &TensorMap,
    pre: &TensorMap,
    policy: MismatchPolicy,
) -> Result<(DeltaMap, Alignment)> {
    let alignment = align(&[sft, pre], policy)?;
    let diffs: Vec<(String, Result<Tensor>)> = alignment
        .common
        .par_iter()
        .map(|name| {
            let a = sft.get(name).expect("aligned");
            let b = pre.get(name).expect("aligned");
            (name.clone(), zip_tensors(a, b, BinOp::Sub))
        })
        .collect();
    let mut out = TensorMap::new();
    for (name, t) in diffs {
        out.insert(name, t?)?;
    }
    Ok((DeltaMap::new(out, Provenance::Raw), alignment))
}

/// `pre + delta` for every tensor the delta covers; the rest of `pre` is copied.
pub fn apply_delta(pre: &TensorMap, delta: &DeltaMap) -> Result<TensorMap> {
    for (name, d) in delta.tensors().iter() {
        match pre.get(name) {
            None => {
                return Err(Error::Alignment(format!(
                    "delta tensor '{name}' has no counterpart in the backbone"
                )))
            }
            Some(p) if p.shape() != d.shape() => {
                return Err(Error::Alignment(format!(
                    "delta tensor '{name}' has shape {:?}, backbone has {:?}",
                    d.shape(),
                    p.shape()
                )))
            }
            Some(_) => {}
        }
    }
    let sums: Vec<(String, Result<Tensor>)> = pre
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(name, p)| {
            let t = match delta.tensors().get(name) {
                Some(d) => zip_tensors(p, d, BinOp::Add),
                None => Ok((*p).clone()),
            };
            (name.to_string(), t)
        })
        .collect();
    let mut out = TensorMap::new();
    *out.metadata_mut() = pre.metadata().clone();
    for (name, t) in sums {
        out.insert(name, t?)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

/// Order statistics and moments of one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// 0%, 10%, ..., 100% points.
    pub deciles: [f64; 11],
    pub max_abs: f64,
    pub histogram: Histogram,
}

impl Summary {
    /// Summarize an ascending-sorted, non-empty sample.
    fn from_sorted(sorted: &[f64], bins: usize) -> Summary {
        let n = sorted.len();
        debug_assert!(n > 0);
        let mut deciles = [0.0; 11];
        for (i, d) in deciles.iter_mut().enumerate() {
            // position i/10 * (n-1), kept exact for integer ratios
            let num = i * (n - 1);
            let lo = num / 10;
            let frac = (num % 10) as f64 / 10.0;
            *d = if frac == 0.0 {
                sorted[lo]
            } else {
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            };
        }
        let min = sorted[0];
        let max = sorted[n - 1];
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        let width = max - min;
        for &v in sorted {
            let b = if width > 0.0 {
                (((v - min) / width) * bins as f64) as usize
            } else {
                0
            };
            counts[b.min(bins - 1)] += 1;
        }
        Summary {
            count: n,
            min,
            max,
            mean,
            deciles,
            max_abs: min.abs().max(max.abs()),
            histogram: Histogram {
                lo: min,
                hi: max,
                counts,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaStats {
    pub per_tensor: Vec<(String, Summary)>,
    pub global: Summary,
    pub sample_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StatsOptions {
    pub sample_fraction: f64,
    pub seed: u64,
    pub bins: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            sample_fraction: 1.0,
            seed: 0,
            bins: 50,
        }
    }
}

/// `ceil(fraction * n)`, ignoring floating point noise in the product.
pub(crate) fn fraction_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (c.max(0.0) as usize).min(n)
}

fn sample_tensor(t: &Tensor, name: &str, opts: &StatsOptions) -> Vec<f64> {
    let values = t.to_f64_vec();
    let n = values.len();
    if opts.sample_fraction >= 1.0 {
        return values;
    }
    let m = fraction_count(opts.sample_fraction, n).max(1).min(n);
    let mut rng = keyed_rng::stream(opts.seed, name, 0);
    rand::seq::index::sample(&mut rng, n, m)
        .into_iter()
        .map(|i| values[i])
        .collect()
}

/// Statistics over a seeded uniform sample (without replacement) of each
/// tensor. The global summary is computed from the pooled sample.
pub fn delta_stats(delta: &DeltaMap, opts: StatsOptions) -> Result<DeltaStats> {
    if !(opts.sample_fraction > 0.0 && opts.sample_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "sample fraction must lie in (0, 1], got {}",
            opts.sample_fraction
        )));
    }
    let named: Vec<(&str, &Tensor)> = delta
        .tensors()
        .iter()
        .filter(|(_, t)| t.numel() > 0)
        .collect();
    if named.is_empty() {
        return Err(Error::EmptyInput("delta has no elements".into()));
    }
    let samples: Vec<(String, Vec<f64>)> = named
        .par_iter()
        .map(|(name, t)| {
            let mut s = sample_tensor(t, name, &opts);
            s.sort_unstable_by(f64::total_cmp);
            (name.to_string(), s)
        })
        .collect();

    let mut pooled: Vec<f64> = samples
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .collect();
    pooled.par_sort_unstable_by(f64::total_cmp);
    let per_tensor = samples
        .iter()
        .map(|(name, s)| (name.clone(), Summary::from_sorted(s, opts.bins)))
        .collect();
    Ok(DeltaStats {
        per_tensor,
        global: Summary::from_sorted(&pooled, opts.bins),
        sample_fraction: opts.sample_fraction,
        seed: opts.seed,
    })
}

/// Largest delta magnitude at which dropping and rescaling is expected to work.
pub const DEFAULT_APPLICABILITY_THRESHOLD: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Applicable,
    Inapplicable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Applicable => "applicable",
            Verdict::Inapplicable => "inapplicable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Applicability {
    pub verdict: Verdict,
    pub max_abs: f64,
    pub threshold: f64,
}

/// Advisory check: applicable iff the sampled `max |delta| < threshold`.
pub fn dare_applicability(stats: &DeltaStats, threshold: f64) -> Applicability {
    let max_abs = stats.global.max_abs;
    Applicability {
        verdict: if max_abs < threshold {
            Verdict::Applicable
        } else {
            Verdict::Inapplicable
        },
        max_abs,
        threshold,
    }
}

/// Human-readable decile table, one row per tensor plus a GLOBAL row.
pub fn render_table(stats: &DeltaStats) -> String {
    let mut rows: Vec<(&str, &Summary)> = stats
        .per_tensor
        .iter()
        .map(|(n, s)| (n.as_str(), s))
        .collect();
    rows.push(("GLOBAL", &stats.global));
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$} {:>10}", "scope", "count");
    for label in [
        "min", "10%", "20%", "30%", "40%", "50%", "60%", "70%", "80%", "90%", "max", "max_abs",
    ] {
        let _ = write!(out, " {label:>11}");
    }
    out.push('\n');
    for (name, s) in rows {
        let _ = write!(out, "{name:<width$} {:>10}", s.count);
        for v in s.deciles.iter().chain(std::iter::once(&s.max_abs)) {
            let _ = write!(out, " {v:>11.4e}");
        }
        out.push('\n');
    }
    out
}

/// CSV columns: scope, count, min, d10..d90, max, max_abs.
pub fn write_stats_csv<W: io::Write>(stats: &DeltaStats, writer: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["scope".to_string(), "count".into(), "min".into()];
    header.extend((1..10).map(|i| format!("d{}", i * 10)));
    header.extend(["max".to_string(), "max_abs".into()]);
    w.write_record(&header).map_err(csv_err)?;
    let rows = stats
        .per_tensor
        .iter()
        .map(|(n, s)| (n.as_str(), s))
        .chain(std::iter::once(("GLOBAL", &stats.global)));
    for (name, s) in rows {
        let mut rec = vec![name.to_string(), s.count.to_string()];
        rec.extend(s.deciles.iter().map(|v| v.to_string()));
        rec.push(s.max_abs.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("csv write failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn map1(name: &str, values: Vec<f32>) -> TensorMap {
        let mut m = TensorMap::new();
        let n = values.len();
        m.insert(name, Tensor::from_f32(vec![n], values).unwrap())
            .unwrap();
        m
    }

    fn delta_of(values: Vec<f64>) -> DeltaMap {
        let mut m = TensorMap::new();
        let n = values.len();
        m.insert("d", Tensor::from_f64(vec![n], values).unwrap())
            .unwrap();
        DeltaMap::new(m, Provenance::Raw)
    }

    #[test]
    fn delta_of_small_example() {
        let (d, al) = compute_delta(
            &map1("w", vec![3.0, 5.0]),
            &map1("w", vec![1.0, 2.0]),
            MismatchPolicy::Skip,
        )
        .unwrap();
        assert!(al.report.is_empty());
        assert_eq!(
            d.tensors().get("w").unwrap().as_slice::<f32>().unwrap(),
            &[2.0, 3.0]
        );
        assert_eq!(d.provenance(), Provenance::Raw);
    }

    #[test]
    fn identical_maps_give_zero_delta() {
        let m = map1("w", vec![0.1, -7.5, 3.25]);
        let (d, _) = compute_delta(&m, &m, MismatchPolicy::Skip).unwrap();
        assert!(d
            .tensors()
            .get("w")
            .unwrap()
            .as_slice::<f32>()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn apply_small_example_and_zero_delta() {
        let pre = map1("w", vec![1.0, 2.0]);
        let d = DeltaMap::new(map1("w", vec![2.0, 3.0]), Provenance::Raw);
        let out = apply_delta(&pre, &d).unwrap();
        assert_eq!(
            out.get("w").unwrap().as_slice::<f32>().unwrap(),
            &[3.0, 5.0]
        );

        let zero = DeltaMap::new(map1("w", vec![0.0, 0.0]), Provenance::Raw);
        assert!(apply_delta(&pre, &zero).unwrap().bitwise_eq(&pre));
    }

    #[test]
    fn apply_copies_uncovered_and_rejects_shape_mismatch() {
        let mut pre = map1("w", vec![1.0, 2.0]);
        pre.insert("head", Tensor::from_f32(vec![1], vec![9.0]).unwrap())
            .unwrap();
        let d = DeltaMap::new(map1("w", vec![1.0, 1.0]), Provenance::Raw);
        let out = apply_delta(&pre, &d).unwrap();
        assert_eq!(out.get("head").unwrap().as_slice::<f32>().unwrap(), &[9.0]);

        let bad = DeltaMap::new(map1("w", vec![1.0, 1.0, 1.0]), Provenance::Raw);
        assert!(matches!(apply_delta(&pre, &bad), Err(Error::Alignment(_))));
        let missing = DeltaMap::new(map1("nope", vec![1.0]), Provenance::Raw);
        assert!(matches!(
            apply_delta(&pre, &missing),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn half_inputs_are_promoted() {
        let mut sft = TensorMap::new();
        sft.insert(
            "w",
            Tensor::from_f32(vec![2], vec![1.5, 2.0])
                .unwrap()
                .cast(DType::F16),
        )
        .unwrap();
        let pre = map1("w", vec![1.0, 1.0]);
        let (d, _) = compute_delta(&sft, &pre, MismatchPolicy::Skip).unwrap();
        assert_eq!(d.tensors().get("w").unwrap().dtype(), DType::F32);
        assert_eq!(
            d.tensors().get("w").unwrap().as_slice::<f32>().unwrap(),
            &[0.5, 1.0]
        );
    }

    #[test]
    fn provenance_survives_metadata() {
        let d = DeltaMap::new(map1("w", vec![1.0]), Provenance::Rescaled);
        let back = DeltaMap::from_tensor_map(d.to_tensor_map());
        assert_eq!(back, d);
    }

    #[test]
    fn deciles_of_zero_to_ten() {
        let s = delta_stats(
            &delta_of((0..=10).map(f64::from).collect()),
            StatsOptions::default(),
        )
        .unwrap();
        let expect: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(s.global.deciles.to_vec(), expect);
        assert_eq!(s.global.min, 0.0);
        assert_eq!(s.global.max, 10.0);
        assert_eq!(s.global.mean, 5.0);
        assert_eq!(s.global.max_abs, 10.0);
    }

    #[test]
    fn deciles_interpolate() {
        // n = 5: position q*4, so the 10% point sits 0.4 of the way from 1 to 2
        let s = delta_stats(
            &delta_of(vec![5.0, 1.0, 4.0, 2.0, 3.0]),
            StatsOptions::default(),
        )
        .unwrap();
        assert!((s.global.deciles[1] - 1.4).abs() < 1e-15);
        assert!((s.global.deciles[5] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_stats() {
        let s = delta_stats(&delta_of(vec![0.0; 37]), StatsOptions::default()).unwrap();
        assert!(s.global.deciles.iter().all(|&d| d == 0.0));
        assert_eq!(s.global.max_abs, 0.0);
        assert_eq!(s.global.histogram.counts[0], 37);
        assert_eq!(
            dare_applicability(&s, DEFAULT_APPLICABILITY_THRESHOLD).verdict,
            Verdict::Applicable
        );
    }

    #[test]
    fn empty_delta_is_an_error() {
        let d = DeltaMap::new(TensorMap::new(), Provenance::Raw);
        assert!(matches!(
            delta_stats(&d, StatsOptions::default()),
            Err(Error::EmptyInput(_))
        ));
        assert!(delta_stats(
            &delta_of(vec![1.0]),
            StatsOptions {
                sample_fraction: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let d = delta_of((0..10_000).map(|i| (i as f64).sin()).collect());
        let opts = StatsOptions {
            sample_fraction: 0.1,
            seed: 3,
            bins: 10,
        };
        let a = delta_stats(&d, opts).unwrap();
        assert_eq!(a.global.count, 1000);
        assert_eq!(a, delta_stats(&d, opts).unwrap());
        let b = delta_stats(&d, StatsOptions { seed: 4, ..opts }).unwrap();
        assert_ne!(a.global.deciles, b.global.deciles);
    }

    #[test]
    fn threshold_is_strict() {
        let s = delta_stats(&delta_of(vec![-0.005, 0.001]), StatsOptions::default()).unwrap();
        let a = dare_applicability(&s, 0.005);
        assert_eq!(a.verdict, Verdict::Inapplicable);
        assert_eq!(a.max_abs, 0.005);
    }

    #[test]
    fn fraction_count_ignores_rounding_noise() {
        assert_eq!(fraction_count(1.0 - 0.7, 10), 3);
        assert_eq!(fraction_count(1.0 - 0.9, 10), 1);
        assert_eq!(fraction_count(0.25, 10), 3);
        assert_eq!(fraction_count(2.0 / 3.0, 3), 2);
        assert_eq!(fraction_count(0.0, 10), 0);
        assert_eq!(fraction_count(1.0, 10), 10);
    }

    #[test]
    fn csv_has_table_columns() {
        let s = delta_stats(
            &delta_of((0..=10).map(f64::from).collect()),
            StatsOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_stats_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scope,count,min,d10,d20,d30,d40,d50,d60,d70,d80,d90,max,max_abs"
        );
        assert_eq!(lines.next().unwrap(), "d,11,0,1,2,3,4,5,6,7,8,9,10,10");
        assert_eq!(lines.next().unwrap(), "GLOBAL,11,0,1,2,3,4,5,6,7,8,9,10,10");
        assert!(render_table(&s).contains("GLOBAL"));
    }
}
