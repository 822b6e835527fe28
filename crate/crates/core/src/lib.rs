//! Calibrated self-rewarding preference optimization over toy multimodal
//! policies, with a linear-Gaussian testbed for the calibration argument.
//!
//! - [`reward`]: per-sentence instruction-following and image-relevance scores.
//! - [`decode`]: sentence-level beam search guided by the calibrated reward.
//! - [`prefopt`]: DPO loss, gradients and the iterative generate-then-train loop.
//! - [`toyworld`]: seeded objects, images, captions, embedders and a tabular policy.
//! - [`theory`]: closed-form calibrated responses and regression-probe losses.
//! - [`eval`]: CHAIR, relevance statistics and reward tracking.

pub mod decode;
pub mod error;
pub mod eval;
pub mod policy;
pub mod prefopt;
pub mod reward;
pub mod theory;
pub mod toyworld;

pub use error::{Error, Result};
pub use policy::{Policy, Prompt, TokenId, Vocabulary};
