//! Hierarchical cross-view geo-localization engine.
//!
//! A ground-level query is localised against a geo-tagged aerial database in
//! three steps: global-descriptor retrieval, re-ranking of the top candidates by
//! detailed feature matching, and dense metric localisation inside the winning
//! tile.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod gradsuite;
pub mod ingest;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod param;
pub mod pipeline;
pub mod representation;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod workers;

pub use error::{Error, Result};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Adjoints, Tape, Var};
pub use tensor::Tensor;
pub use decoder::{AerialPyramid, DecoderParams, LevelSchedule, LocalizationDistribution, RerankEntry};
pub use losses::{LossBreakdown, LossWeights, Temperature};
pub use metrics::{EvalReport, GeoTag, GroundTruthLabel};
pub use representation::{AggregatorParams, GlobalDescriptor, Pooling, ProjectorParams};
pub use retrieval::{Candidate, CandidateSet, Index, IndexEntry};
pub use config::{FixtureSpec, PipelineConfig, RunConfig, TrainConfig};
pub use fixtures::{Dataset, Split};
pub use model::Model;
pub use pipeline::{Bundle, Engine, FeatureSet, QueryResult};
pub use train::{Objective, TrainOptions, TrainState};
