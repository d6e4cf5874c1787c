//! LiDAR frame interpolation: midpoint flows, flow-guided warping of sparse
//! depth, a coarse/refine depth completion network and pseudo-LiDAR
//! back-projection.

pub mod dataset;
pub mod depth_io;
pub mod eval;
pub mod flow;
pub mod grid;
pub mod nn;
pub mod pseudo_lidar;
pub mod synth;
pub mod warp;

pub use eval::{evaluate, traditional_interpolate, MetricReport};
pub use depth_io::{ColorImage, CropAnchor, DepthKind, DepthMap};
pub use flow::FlowField;
pub use grid::{Grid2D, ValidityMask};
pub use pseudo_lidar::{CameraIntrinsics, PointCloud};
pub use warp::WarpedPair;
