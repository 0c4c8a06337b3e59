//! Multi-level-scaled low-bit tensor toolkit.
//!
//! The pieces, bottom up:
//!
//! * [`format`] — the unsigned `<E,M>` minifloat codec with gradual underflow
//!   and the stochastic-rounding primitive.
//! * [`tensor`] — dense 4-d tensors, grouping, the counter-based RNG, and the
//!   MLST tensor blob format.
//! * [`quant`] — dynamic quantization to/from the multi-level-scaled format
//!   (per-element codes, per-group scales, one tensor scale) and error stats.
//! * [`conv`] — bit-exact convolution on quantized operands: integer
//!   multiply-accumulate within groups, shift-add combination across groups.
//! * [`train`] — a small CNN training engine built on the quantized conv
//!   (float batch norm, SGD with momentum, straight-through estimator).
//! * [`energy`] — operation counting and per-MAC energy estimation for the
//!   supported arithmetic flavors.
//! * [`data`] — MNIST IDX / CIFAR-10 binary ingestion and synthetic sources.
//! * [`sweep`] — quantization-error sweep harness over format/grouping axes.

pub mod config;
pub mod conv;
pub mod data;
pub mod energy;
pub mod error;
pub mod format;
pub mod quant;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{MlsError, Result};

/// Pin the global worker pool size. Results are bit-identical for any worker
/// count; this only trades throughput. Callable once, before parallel work.
pub fn set_worker_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| MlsError::InvalidInput(format!("thread pool: {e}")))
}
