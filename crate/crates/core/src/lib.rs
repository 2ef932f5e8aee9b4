//! Neuron reconstruction from 3D microscopy volumes via point clouds.
//!
//! Foreground voxels become a point cloud; a dynamic-graph EdgeConv encoder
//! and proposal head move points toward neurite centers and predict
//! objectness and radius; spherical non-maximum suppression selects
//! skeletal points; a graph auto-encoder predicts their connectivity; and a
//! refinement pass emits an SWC tree.

pub mod connectivity;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod par;
pub mod refine;
pub mod selfcheck;
pub mod skeleton;
pub mod swc;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
