//! Three-dimensional penalized-spline smoothing of spatio-temporal count
//! data, with anisotropic or locally adaptive difference penalties and
//! smoothing weights estimated by an effective-dimension REML fixed point.
//!
//! Module map:
//!
//! * [`splinekit`]: marginal B-spline bases and difference matrices.
//! * [`arraykit`]: tensor-product products on three-way arrays.
//! * [`penaltykit`]: penalty blocks, precision assembly, null space.
//! * [`estimator`]: penalized IRLS, weight updates, REML, `fit`.
//! * [`rfdata`]: dataset I/O, simulation, export bundles.
//! * [`exec`]: sequential or rayon-backed execution of the parallel loops.

pub mod arraykit;
pub mod estimator;
pub mod exec;
pub mod penaltykit;
pub mod rfdata;
pub mod splinekit;

pub use arraykit::Cube;
pub use estimator::{fit, fit_batch, FitError, FitResult, OuterMethod, SmootherConfig};
pub use exec::Execution;
pub use rfdata::{CountCube, GridSpec, OffsetGrid, RfDataset, TruthSpec};
