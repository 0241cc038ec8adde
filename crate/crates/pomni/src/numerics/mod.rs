//! Deterministic numerics: tensors, a reverse-mode tape, finite-difference-checked operators,
//! AdamW with warmup+cosine schedule, and a splittable counter RNG.
//!
//! Precision: values always live in f64 storage. In [`Precision::F32`] mode every tape
//! allocation and every optimizer write rounds through f32, so training behaves like an f32
//! implementation (and checkpoints, which store f32, round-trip bit-identically). F64 mode
//! skips the rounding and is used for gradient verification.

pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{clip_grad_norm, AdamW, OptimizerConfig, Schedule};
pub use rng::Rng;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

static DEFAULT_PRECISION: AtomicU8 = AtomicU8::new(0);

/// Sets the process default used by `Tape::new()` and fresh optimizers. The CLI calls this
/// once at startup; tests that need a specific mode use `Tape::with_precision` instead so
/// parallel test threads never race on the global.
pub fn set_default_precision(p: Precision) {
    DEFAULT_PRECISION.store(if p == Precision::F64 { 1 } else { 0 }, Ordering::Relaxed);
}

pub fn default_precision() -> Precision {
    if DEFAULT_PRECISION.load(Ordering::Relaxed) == 1 {
        Precision::F64
    } else {
        Precision::F32
    }
}

#[inline]
pub(crate) fn round_slice(p: Precision, xs: &mut [f64]) {
    if p == Precision::F32 {
        for x in xs {
            *x = *x as f32 as f64;
        }
    }
}
