//! Unified target-query video segmentation.
//!
//! One model segments and tracks instances (VIS), panoptic video (VPS),
//! mask-guided objects (VOS) and point-guided objects (PET). The task is
//! selected purely by the target queries handed to the decoder.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod pca;
pub mod protocol;
pub mod queries;
pub mod results;
pub mod synthgen;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{Mask, Task, VideoClip};
