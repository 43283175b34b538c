//! Two-frame video object detection.
//!
//! An anchor-free center-point detector is extended with exactly one
//! adjacent reference frame:
//!
//! * [`temporal`] re-weights anchor channels by the reference foreground
//!   channel pattern, scaled by the exponential cosine similarity of the two
//!   frames' patterns, and is gated by validated reference boxes.
//! * [`background`] derives a dynamic field from the inter-frame feature
//!   difference and uses it as the offset field of a deformable 3×3
//!   convolution.
//! * [`contrastive`] adds a box-masked InfoNCE loss over foreground and
//!   background channel patterns of both frames during training.
//!
//! [`pipeline`] ties these to the base detector in [`detection`], while
//! [`dataset`] and [`evaluation`] provide synthetic jittery video and
//! precision/recall/F1 scoring.

pub mod autograd;
pub mod background;
pub mod contrastive;
pub mod conv;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
