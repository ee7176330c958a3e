//! Optimize-and-estimate sampling: choose which observations to sample each
//! period so that collected reward is high while the population total stays
//! estimable.
//!
//! The pipeline per period is
//! predictions -> [`design`] plan -> [`sampler`] draw -> [`estimators`].
//! [`env`] supplies periods, [`model`] supplies predictions, and [`oracle`]
//! holds brute-force references used to check the rest.

pub mod design;
pub mod env;
pub mod error;
pub mod estimators;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    BiasReport, EstimateReport, IdMap, InclusionPlan, JointInclusion, NoiseSpec, ObsId, Observation,
    Period, SampleDraw, StrategyTag,
};
