//! Sparse-view scene reconstruction with 3D Gaussian splatting.
//!
//! The pipeline takes a handful of posed input views, matches them with a
//! plane-sweep cost volume, sharpens the depth distribution with a
//! depth-aware deformable matching block, refines the depth with a small
//! U-Net conditioned on a monocular prior, predicts one 3D Gaussian per
//! pixel, and renders novel views with a tile-based CPU rasterizer. The
//! rasterizer ships with a brute-force per-pixel oracle and analytic
//! gradients so every stage can be verified numerically.

pub mod encoder;
pub mod error;
pub mod fit;
pub mod gaussians;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod pfm;
pub mod pipeline;
pub mod ply;
pub mod rasterizer;
pub mod refine;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use gaussians::{Gaussian, GaussianSet};
pub use geometry::{CameraView, DepthCandidates};
pub use pipeline::RunConfig;
pub use tensor::Tensor;
pub use weights::WeightStore;
