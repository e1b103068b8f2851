//! Point-cloud single-object tracking with a decoupled spatio-temporal
//! graph-convolution backbone, a bi-directional cross-frame memory, and
//! Gaussian-mask distractor filtering, plus the synthetic benchmark,
//! trainer, and one-pass evaluation that exercise it.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmloc;
pub mod memory;
pub mod model;
pub mod nn;
pub mod real;
pub mod tape;
pub mod train;

pub use data::{Box3D, PointFrame, ScenarioConfig, SequenceSample, TrackerConfig};
pub use error::{CoreError, Result};
pub use eval::{run_ope, TrackResult, Tracker};
pub use model::{StmdModel, StmdTracker};
pub use real::Real;
