//! Training, evaluation metrics and the experiment runners.

pub mod data;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod reference;
pub mod runners;
pub mod trainer;

pub use data::{perturb_gaze, prepare_examples, Example, GazeNoise};
pub use eval::{evaluate, scenario_breakdown, Evaluation, Prediction, ScenarioBreakdown};
pub use metrics::{Confusion, MetricsReport};
pub use runners::Experiment;
pub use trainer::{train, EpochRecord, TrainConfig, TrainOutcome};
