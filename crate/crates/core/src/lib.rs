//! Pyramid graph attention networks for lifting 2D human keypoints to 3D.
//!
//! The crate is organised bottom-up: [`tensor`] provides the autodiff
//! substrate, [`skeleton`] the joint graph and its pooling pyramid, [`gcn`]
//! and [`pga`] the layers, [`model`] the assembled lifter, and [`diffusion`]
//! the denoising variant. [`training`], [`eval`] and [`data`] cover the rest
//! of the experiment loop.

// Negated float comparisons are deliberate: they reject NaN along with the
// out-of-range values. Index loops mirror the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pga;
pub mod skeleton;
pub mod tensor;
pub mod training;

pub use data::{Dataset, PoseRecord, SynthConfig};
pub use diffusion::{DiffusionConfig, DiffusionModel};
pub use error::{Error, Result};
pub use model::{PgFormer, PgFormerConfig};
pub use skeleton::{PoolingScheme, Skeleton, SkeletonGraph};
pub use tensor::{Tape, Tensor, Var};
pub use training::TrainConfig;
