//! Raw forward/backward kernels used by the [`crate::graph::Graph`] tape.

pub mod conv;
pub mod norm;

pub use conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvKernel3D, TemporalPad};
pub use norm::{group_norm_backward, group_norm_forward, GroupStats};
