//! SparseFormer models bootstrapped from plain ViT teachers.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`numerics`]) that every model component builds on:
//!
//! - [`vit`] — a standard pre-norm ViT encoder used as the frozen teacher
//!   and as the weight donor for the cortex transformer.
//! - [`focusing`] — the recurrent focusing transformer: latent tokens with
//!   RoIs, sparse feature sampling, RoI position encoding, and the
//!   normalized-delta RoI update.
//! - [`cortex`] — inherited encoder blocks with the truncate/tune/freeze
//!   partition and the learnable `[CLS]` token.
//! - [`bootstrap`] — the alignment trainer: cosine loss against the teacher
//!   representation, warmup + half-cosine schedule, differential learning
//!   rates, and continued training with more tokens.
//! - [`dense_head`] — attention-based projection of token logits onto a
//!   dense grid for segmentation.
//! - [`analysis`] — closed-form parameter / multiply-add accounting and RoI
//!   visualization.
//! - [`io`] — checkpoint archive, run configuration, image loading.
//!
//! All numeric code is generic over the scalar type: `f32` for training and
//! checkpoints, `f64` for finite-difference gradient checking.

pub mod analysis;
pub mod bootstrap;
pub mod cortex;
pub mod data;
pub mod dense_head;
pub mod focusing;
pub mod io;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod vit;

pub use numerics::scalar::Scalar;
pub use numerics::tensor::Tensor;

/// Training-precision tensor (matches the checkpoint payload dtype).
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by the gradient-check suite.
pub type Tensor64 = Tensor<f64>;

use thiserror::Error;

/// Errors surfaced by model-level forwards and training loops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image is {got_h}x{got_w} but the model expects {want}x{want}")]
    ResolutionMismatch { got_h: usize, got_w: usize, want: usize },
    #[error("resolution {h}x{w} not divisible by {by}")]
    IndivisibleResolution { h: usize, w: usize, by: usize },
    #[error("token width {got} does not match model width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("non-finite values produced by op `{op}`")]
    NonFinite { op: String },
    #[error("teacher depth {depth} too shallow to truncate (need >= 3)")]
    DepthTooSmall { depth: usize },
    #[error("truncate count {truncate} out of range for depth {depth}")]
    TruncateOutOfRange { truncate: usize, depth: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became NaN at step {step} (seed {seed})")]
    NanLoss { step: usize, seed: u64 },
    #[error("training diverged (non-finite loss) at step {step} (seed {seed})")]
    Diverged { step: usize, seed: u64 },
    #[error("continued bootstrap needs more tokens: {new} <= {old}")]
    TokenCountNotIncreased { new: usize, old: usize },
    #[error("zero-norm vector in cosine alignment")]
    ZeroNorm,
    #[error("source image {h}x{w} is degenerate or smaller than target {target}")]
    DegenerateImage { h: usize, w: usize, target: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("learning-rate step {step} out of range (total {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error("function is not deterministic across calls")]
    NonDeterministic,
    #[error("config error: {0}")]
    Config(String),
    #[error("image codec error: {0}")]
    Image(String),
    #[error(transparent)]
    Archive(#[from] io::ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
