//! Truth discovery for mobile crowdsensing with reputation tracking,
//! predicted ground truth and implication between sensing reports.
//!
//! The crate covers the data model, ground-truth predictors, data features,
//! the truth discovery engine, three comparison evaluators, a seeded
//! scenario simulator, evaluation metrics and the experiment pipeline that
//! ties them together behind the `crowdtruth` command line tool.

pub mod baselines;
pub mod cli;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod simulator;

pub use baselines::{BaselineKind, BaselineRunner, DistanceQualityMap};
pub use engine::{ReputationLedger, SlotOutcome, TdConfig, TruthDiscovery, UserLabel};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Method};
pub use features::{implication, DataFeature};
pub use metrics::RunMetrics;
pub use model::{MeanVector, RegionGrid, SensingReport, SlotBatch};
pub use predictor::{Predictor, PredictorConfig, PredictorKind};
pub use simulator::{simulate, GroundTruthSeries, ScenarioConfig, World};
