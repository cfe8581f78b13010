//! Checkpoint files and named tensor maps.
//!
//! On-disk layout (safetensors compatible, little-endian):
//!
//! ```text
//! [u64 header length N][N bytes of JSON header][tensor data]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! with offsets relative to the start of the data section, plus an optional
//! `"__metadata__"` object of string values. The writer emits tensors in
//! lexicographic name order, packs them without gaps, and pads the header
//! with spaces to a multiple of eight bytes, so identical maps always
//! produce identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, DType, Tensor};

const METADATA_KEY: &str = "__metadata__";

/// Ordered map from tensor name to tensor, plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Option<Tensor>> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Config("tensor names must be non-empty".into()));
        }
        if name == METADATA_KEY {
            return Err(Error::Config(format!("'{METADATA_KEY}' is reserved")));
        }
        Ok(self.tensors.insert(name, tensor))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Total number of elements over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Dtype of the first tensor in name order.
    pub fn leading_dtype(&self) -> Option<DType> {
        self.tensors.values().next().map(Tensor::dtype)
    }

    /// A map holding only the named tensors (metadata is kept).
    pub fn restrict<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> TensorMap {
        let tensors = names
            .into_iter()
            .filter_map(|n| self.tensors.get_key_value(n))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        TensorMap {
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    /// Apply `f` to every tensor, keeping names and metadata.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<TensorMap> {
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            tensors.insert(name.clone(), f(name, t)?);
        }
        Ok(TensorMap {
            tensors,
            metadata: self.metadata.clone(),
        })
    }

    /// Same names, metadata, dtypes, shapes and element bits.
    pub fn bitwise_eq(&self, other: &TensorMap) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Accept NaN and infinite elements instead of failing the load.
    pub allow_nonfinite: bool,
}

pub fn load_tensor_map(path: impl AsRef<Path>) -> Result<TensorMap> {
    load_tensor_map_with(path, LoadOptions::default())
}

pub fn load_tensor_map_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, opts)
}

pub fn save_tensor_map(tm: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tm)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct HeaderEntry<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [u64; 2],
}

/// Serialize a tensor map to the checkpoint byte layout.
pub fn encode(tm: &TensorMap) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !tm.metadata.is_empty() {
        let meta: Map<String, Value> = tm
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let mut offset: u64 = 0;
    for (name, t) in &tm.tensors {
        let len = u64::try_from(t.byte_len())
            .map_err(|_| Error::Config(format!("tensor '{name}' too large for 64-bit offsets")))?;
        let end = offset.checked_add(len).ok_or_else(|| {
            Error::Config(format!("tensor '{name}' too large for 64-bit offsets"))
        })?;
        let entry = HeaderEntry {
            dtype: t.dtype().tag(),
            shape: t.shape(),
            data_offsets: [offset, end],
        };
        header.insert(
            name.clone(),
            serde_json::to_value(entry).expect("header entry serializes"),
        );
        offset = end;
    }
    let mut json = serde_json::to_string(&Value::Object(header)).expect("header serializes");
    while !json.len().is_multiple_of(8) {
        json.push(' ');
    }

    let data_len = usize::try_from(offset)
        .map_err(|_| Error::Config("checkpoint does not fit in memory".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data_len);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for t in tm.tensors.values() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

/// Parse the checkpoint byte layout.
pub fn decode(bytes: &[u8], opts: LoadOptions) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::format(
            0,
            format!(
                "file is {} bytes, shorter than the 8-byte header length",
                bytes.len()
            ),
        ));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if n > available {
        return Err(Error::format(
            0,
            format!("header length {n} exceeds the {available} bytes that follow"),
        ));
    }
    let header_end = 8 + n as usize;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::format(8 + e.valid_up_to() as u64, "header is not valid UTF-8"))?;
    let header: Value = serde_json::from_str(text)
        .map_err(|e| Error::format(8, format!("header is not valid JSON: {e}")))?;
    let Value::Object(header) = header else {
        return Err(Error::format(8, "header is not a JSON object"));
    };

    let data = &bytes[header_end..];
    let data_start = header_end as u64;
    let mut metadata = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut spans: Vec<(u64, u64, String)> = Vec::new();

    for (name, entry) in &header {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(Error::format(8, "__metadata__ must be an object"));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(Error::format(
                        8,
                        format!("metadata value for '{k}' is not a string"),
                    ));
                };
                metadata.insert(k.clone(), s.clone());
            }
            continue;
        }
        if name.is_empty() {
            return Err(Error::format(8, "empty tensor name"));
        }
        let bad = |what: &str| Error::format(8, format!("tensor '{name}': {what}"));
        let dtype_tag = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing dtype"))?;
        let dtype = DType::from_tag(dtype_tag)
            .ok_or_else(|| bad(&format!("unknown dtype tag '{dtype_tag}'")))?;
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing shape"))?
            .iter()
            .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
        let offsets = entry
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .and_then(|a| Some([a[0].as_u64()?, a[1].as_u64()?]))
            .ok_or_else(|| bad("data_offsets must be two non-negative integers"))?;
        let [begin, end] = offsets;
        if begin > end {
            return Err(Error::format(
                data_start + begin,
                format!("tensor '{name}': data_offsets begin {begin} > end {end}"),
            ));
        }
        if end > data.len() as u64 {
            return Err(Error::format(
                data_start + end,
                format!("tensor '{name}': data ends past the end of the file (truncated buffer)"),
            ));
        }
        let expected = checked_numel(&shape)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| bad("element count overflows"))?;
        if (end - begin) as usize != expected {
            return Err(Error::format(
                data_start + begin,
                format!(
                    "tensor '{name}': {} data bytes for shape {shape:?} of {dtype}, expected {expected}",
                    end - begin
                ),
            ));
        }
        let raw = &data[begin as usize..end as usize];
        let tensor = Tensor::from_le_bytes(dtype, shape, raw)?;
        if !opts.allow_nonfinite {
            if let Some(i) = tensor.first_non_finite() {
                return Err(Error::format(
                    data_start + begin + (i * dtype.width()) as u64,
                    format!("tensor '{name}': non-finite element {i}"),
                ));
            }
        }
        spans.push((begin, end, name.clone()));
        tensors.insert(name.clone(), tensor);
    }

    spans.sort();
    for pair in spans.windows(2) {
        let (_, prev_end, ref prev) = pair[0];
        let (begin, _, ref name) = pair[1];
        if begin < prev_end {
            return Err(Error::format(
                data_start + begin,
                format!("tensor '{name}' overlaps tensor '{prev}'"),
            ));
        }
    }

    Ok(TensorMap { tensors, metadata })
}

/// Convert every tensor to a compute dtype (`f32` or `f64`).
pub fn upcast(tm: &TensorMap, target: DType) -> Result<TensorMap> {
    if !target.is_compute() {
        return Err(Error::Config(format!(
            "upcast target must be f32 or f64, got {target}"
        )));
    }
    tm.try_map(|_, t| Ok(t.cast(target)))
}

/// Convert every tensor to `target`, failing on any non-finite result.
pub fn cast_map(tm: &TensorMap, target: DType) -> Result<TensorMap> {
    tm.try_map(|name, t| t.cast_checked(target, name))
}

/// What to do with tensors that are missing from some maps or whose shapes differ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MismatchPolicy {
    #[default]
    Skip,
    Error,
    /// Keep the tensor from map `k` unchanged.
    TakeFrom(usize),
}

impl FromStr for MismatchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(MismatchPolicy::Skip),
            "error" => Ok(MismatchPolicy::Error),
            _ => s
                .strip_prefix("take-from:")
                .and_then(|k| k.parse().ok())
                .map(MismatchPolicy::TakeFrom)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown mismatch policy '{s}' (expected skip, error or take-from:<k>)"
                    ))
                }),
        }
    }
}

impl fmt::Display for MismatchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MismatchPolicy::Skip => f.write_str("skip"),
            MismatchPolicy::Error => f.write_str("error"),
            MismatchPolicy::TakeFrom(k) => write!(f, "take-from:{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignIssue {
    /// Present only in the listed maps.
    Missing { present_in: Vec<usize> },
    /// Present everywhere with differing shapes (one entry per map).
    ShapeMismatch { shapes: Vec<Vec<usize>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Skipped,
    TakenFrom(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AlignEntry {
    pub name: String,
    pub issue: AlignIssue,
    pub disposition: Disposition,
}

impl fmt::Display for AlignEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.issue {
            AlignIssue::Missing { present_in } => {
                write!(f, "{}: present only in maps {present_in:?}", self.name)?
            }
            AlignIssue::ShapeMismatch { shapes } => {
                write!(f, "{}: shapes differ {shapes:?}", self.name)?
            }
        }
        match self.disposition {
            Disposition::Skipped => f.write_str(" -> skipped"),
            Disposition::TakenFrom(k) => write!(f, " -> taken from map {k}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Alignment {
    /// Names present in every map with identical shapes, sorted.
    pub common: Vec<String>,
    pub report: Vec<AlignEntry>,
}

/// Find the tensors shared by all maps and classify the rest under `policy`.
pub fn align(maps: &[&TensorMap], policy: MismatchPolicy) -> Result<Alignment> {
    if maps.len() < 2 {
        return Err(Error::Config(format!(
            "alignment needs at least two maps, got {}",
            maps.len()
        )));
    }
    if let MismatchPolicy::TakeFrom(k) = policy {
        if k >= maps.len() {
            return Err(Error::Config(format!(
                "take-from:{k} is out of range for {} maps",
                maps.len()
            )));
        }
    }
    let all: BTreeSet<&str> = maps.iter().flat_map(|m| m.names()).collect();
    let mut out = Alignment::default();
    for name in all {
        let found: Vec<Option<&Tensor>> = maps.iter().map(|m| m.get(name)).collect();
        let issue = if found.iter().all(Option::is_some) {
            let first = found[0].expect("present").shape();
            if found.iter().all(|t| t.expect("present").shape() == first) {
                out.common.push(name.to_string());
                continue;
            }
            AlignIssue::ShapeMismatch {
                shapes: found
                    .iter()
                    .map(|t| t.expect("present").shape().to_vec())
                    .collect(),
            }
        } else {
            AlignIssue::Missing {
                present_in: found
                    .iter()
                    .enumerate()
                    .filter_map(|(i, t)| t.map(|_| i))
                    .collect(),
            }
        };
        let disposition = match policy {
            MismatchPolicy::TakeFrom(k) if found[k].is_some() => Disposition::TakenFrom(k),
            _ => Disposition::Skipped,
        };
        out.report.push(AlignEntry {
            name: name.to_string(),
            issue,
            disposition,
        });
    }
    if policy == MismatchPolicy::Error && !out.report.is_empty() {
        let names: Vec<_> = out.report.iter().map(|e| e.to_string()).collect();
        return Err(Error::Alignment(format!(
            "{} mismatched tensor(s): {}",
            names.len(),
            names.join(", ")
        )));
    }
    Ok(out)
}
