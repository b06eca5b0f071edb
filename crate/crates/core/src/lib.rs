//! Wide-angle portrait correction by per-image variational optimization of
//! dense correction flows.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar for application code.

pub mod config;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod solver;
pub mod synthgen;
pub mod warp;

pub use config::{Annotations, PipelineConfig};
pub use error::{Error, Result};
pub use flow::FlowField;
pub use fusion::{FaceBox, Mask};
pub use geometry::{FlipAxis, LensParams};
pub use metrics::{LandmarkSet, Polyline};
pub use objectives::{ObjectiveKind, ObjectiveWeights};
pub use raster::Image;
pub use scalar::Scalar;
pub use solver::{Solution, SolveMode, SolverConfig};
pub use synthgen::SynthPair;
pub use warp::Boundary;

pub type Image64 = Image<f64>;
pub type Image32 = Image<f32>;
pub type Flow64 = FlowField<f64>;
pub type Flow32 = FlowField<f32>;
pub type Lens64 = LensParams<f64>;
pub type Lens32 = LensParams<f32>;
