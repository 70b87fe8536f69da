//! Land-cover mapping pipeline: rasters, atmospheric correction, label
//! rasterization, chipping, semi-supervised losses, training and post-processing.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod atmocorrect;
pub mod chipper;
pub mod maskgen;
pub mod postproc;
pub mod raster_store;
pub mod ssl;
pub mod synth;
pub mod trainer;

pub use chipper::{ChipFilterPolicy, Patch, PatchGrid};
pub use maskgen::{BinaryMask, ClassEncoding, VectorLayer};
pub use postproc::{ChangeReport, EvalReport, ProbabilityRaster};
pub use raster_store::{BandStack, GeoTransform, LabelRaster};
pub use trainer::{Checkpoint, TrainConfig};
