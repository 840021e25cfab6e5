//! Weakly supervised disaggregation of regional crop yields.
//!
//! A two-level statistical geography (parent regions with child sub-regions)
//! carries yield and crop-area labels only at the parent level. The model in
//! [`weaksup`] predicts per-child yields and crop-area fractions from
//! child-level inputs, aggregates them through a differentiable crop-area
//! weighting to the parent level, and is trained against the parent labels
//! alone. [`baselines`] provides the trend and gradient-boosting comparison
//! models, [`eval`] the residual statistics, and [`synth`] a generator for
//! synthetic worlds with known child-level truth so that disaggregation
//! quality is measurable.
//!
//! The [`pipeline`] module wires everything into the three reproducible
//! stages exposed by the `disagg` binary: `synth`, `train`, `evaluate`.

pub mod baselines;
pub mod dataio;
pub mod diffcore;
pub mod encoders;
pub mod eval;
pub mod hierarchy;
pub mod pipeline;
pub mod records;
pub mod synth;
pub mod weaksup;

pub use hierarchy::{Region, RegionHierarchy, RegionLevel};
pub use records::ForecastRecord;
