//! Volumetric neuron segmentation toolkit.
//!
//! The pipeline runs desk-scale: 3D microscope volumes are cut into
//! 100×100×5 blocks, a small 3D vision transformer predicts the center
//! slice of each block, predictions are stacked back into a volume, and a
//! skeleton tracer turns the segmentation into an SWC morphology that can
//! be scored against ground truth.
//!
//! The transformer's patch embedding can be seeded from 2D pre-trained
//! weights three ways: average inflation, center inflation, or flattening
//! each 16×16 kernel into a 256-long tubular kernel that samples the
//! volume along deformable curved paths in three axis-aligned views.

pub mod data;
pub mod metrics;
pub mod model;
pub mod morpho;
pub mod tensor;
pub mod transfer;
pub mod tubular;

mod edt;

pub use tensor::{DType, Element, Tensor, TensorError};
