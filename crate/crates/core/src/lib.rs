//! Single-step diffusion models for inverse rendering (image → intrinsic
//! G-buffers) and forward rendering (G-buffers → image), trained jointly with
//! cycle-consistency losses, plus a procedural ground-truth renderer,
//! training-free windowed video inference and an evaluation harness.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the training precision.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod imageio;
pub mod nn;
pub mod objectives;
pub mod otns;
pub mod scalar;
pub mod sceneforge;
pub mod temporal;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::{
    decode_normal, encode_normal, validate_record, Caption, Channel, ChannelMask, Colorspace, DatasetRecord,
    ImageTensor, IntrinsicSet, Profile, TaskToken, Violation,
};

/// Training and inference precision.
pub type Real = f32;
pub type Image = ImageTensor<Real>;
pub type Intrinsics = IntrinsicSet<Real>;
pub type Record = DatasetRecord<Real>;
