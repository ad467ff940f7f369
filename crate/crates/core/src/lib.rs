//! Coronary artery segmentation with multi-directional snake convolutions,
//! selective state-space decoding and a two-stage coarse/fine pipeline.
//!
//! Everything runs on CPU in `f64` through a small tape-based autodiff
//! ([`autodiff::Graph`]).

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod snake;
pub mod ssm;
pub mod tensor;
pub mod verify;
pub mod volume;

pub use autodiff::{Activation, Combine, Conv3dOptions, CustomOp, Graph, Norm, Var};
pub use error::{Error, Result};
pub use metrics::{average_hausdorff, dice_coefficient, extract_surface, hausdorff, SurfacePointSet};
pub use network::{Network, NetworkConfig};
pub use params::{Bound, ParamStore};
pub use pipeline::{BlockIndex, InferConfig, Segmenter, SynthSpec, TrainConfig};
pub use snake::{Axis, MdsConvBlock, SnakeKernelOffsets, SnakeKernelSpec};
pub use ssm::{RvmLayer, ScanStrategy, SsmParams, VssmBlock};
pub use tensor::Tensor;
pub use volume::{LabelVolume, MdsvFile, Volume};
