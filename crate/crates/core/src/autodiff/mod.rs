//! Reverse-mode automatic differentiation over a fixed operator set, the
//! vector-field U-Net, the Adam optimizer, and checkpointing.
//!
//! Storage is `f32` everywhere; the tape is generic over [`Scalar`] so the
//! same code paths run in f64 for finite-difference gradient verification.

mod adam;
mod checkpoint;
mod tape;
mod unet;

pub use adam::{AdamConfig, AdamError, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelKind, TrainMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use tape::{Buffer, Tape, Var};
pub use unet::{
    time_embedding, ArchConfig, ForwardPass, GradStore, NetError, ParamStore, VectorFieldNet,
    TIME_EMBED_SCALE,
};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Element type the tape is generic over. `f32` is the production type,
/// `f64` the shadow precision used by gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}
