//! Deformable anatomical-prior fitting.
//!
//! A multi-channel prior volume is normalized with a channel softmax, shifted
//! per class, then warped by a 3D thin-plate spline shared by all channels.
//! Shifts, control-point displacements and the prior itself are fitted by
//! gradient descent on Soft-Dice and centroid losses.
//!
//! Coordinates are voxel indices throughout: integer coordinates are voxel
//! centers and spacing only enters the surface metrics.

pub mod affine;
pub mod config;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod prior;
pub mod tps;
pub mod volume;

pub use affine::ClassShifts;
pub use error::{Error, Result};
pub use losses::{Gradients, LossBreakdown, LossWeights};
pub use metrics::MetricReport;
pub use optimizer::{FitConfig, FitReport};
pub use params::DeformParams;
pub use prior::AnatomicalPrior;
pub use tps::{ControlGrid, Displacements, TpsCoefficients, TpsSystem};
pub use volume::{Coord, Dims, LabelMap, Volume};

/// On-disk volume format identifier.
pub const VOLUME_FORMAT_VERSION: &str = "PWV1";
/// Parameter-file format identifier.
pub const PARAMS_FORMAT_VERSION: &str = "params v1";
