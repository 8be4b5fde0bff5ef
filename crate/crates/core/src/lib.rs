//! Open-vocabulary BEV detection pipeline on LIDAR point clouds: voxel
//! features gated and fused with text embeddings, a contrastive similarity
//! head and box regression, plus training, decoding and metrics.

pub mod backbone;
pub mod diff;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod text;

pub use diff::{BatchNormState, BnMode, Graph, Tensor, Var};
pub use error::{Error, Result};
