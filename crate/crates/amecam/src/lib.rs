//! Weakly supervised tumor segmentation from multi-exit class activation maps.
//!
//! A four-stage residual classifier trained on image-level labels exposes an
//! internal classifier after every stage. Each exit yields a class activation
//! map at its own resolution; a small pixel-wise attention network learns
//! convex weights that fuse the four maps into one, trained with a contrastive
//! foreground/background objective. The fused map is thresholded into a mask
//! and scored against ground truth with Dice, IoU and HD95.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the CLI
//! pipeline runs `f32`, tests that need tight gradient checks run `f64`.

pub mod agg;
pub mod cam;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod nn;
pub mod overlay;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};

use ndarray::ScalarOperand;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag stored in checkpoints and sidecar files.
    const DTYPE: &'static str;
    /// Size of the little-endian on-disk encoding.
    const BYTES: usize;

    fn from_f64_(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("f64 conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Scalar the command-line pipeline is instantiated with.
pub type PipelineScalar = f32;

/// `f32` instantiations of the main domain types, as used by the CLI.
pub type Volume32 = data::VolumeRecord<f32>;
pub type Slice32 = data::SliceSample<f32>;
pub type Map32 = cam::ActivationMap<f32>;
pub type Backbone32 = net::MultiExitNet<f32>;
