//! Sparsify fine-tuning deltas by random drop and rescale, and merge
//! homologous fine-tuned checkpoints.

pub mod calibration;
pub mod checkpoint;
pub mod delta;
pub mod error;
pub mod keyed_rng;
pub mod merge;
pub mod sparsify;
pub mod sweep;
pub mod tensor;

pub use checkpoint::{align, load_tensor_map, save_tensor_map, upcast, MismatchPolicy, TensorMap};
pub use delta::{apply_delta, compute_delta, delta_stats, DeltaMap, DeltaStats, Provenance};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
