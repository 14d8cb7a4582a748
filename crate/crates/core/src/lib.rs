//! Incremental learning against a fixed neural-collapse terminus.
//!
//! The crate builds a simplex-ETF prototype matrix for the whole label space
//! up front and trains small dense networks so that every session's features
//! align with their pre-assigned prototypes. It covers normal, long-tailed,
//! few-shot and mixed incremental streams on synthetic Gaussian data, the
//! neural-collapse diagnostics used to inspect the learned geometry, and a
//! backbone-free optimizer that checks the terminus is the global optimum.

pub mod etf;
pub mod experiment;
pub mod flight;
pub mod linalg;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod seed;
pub mod stream;
pub mod trainer;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult};
pub use etf::{EtfTerminus, FrameKind, GeometryReport};
pub use flight::{FlightMode, PrototypeState};
pub use losses::LossValueAndGrad;
pub use memory::{ExemplarStore, FeatureMeanMemory};
pub use metrics::RunReport;
pub use net::{Mlp, MlpBackbone, ProjectionHead, SgdConfig, Snapshot};
pub use stream::{SessionMode, SessionPlan, SyntheticTaskSpec};
pub use trainer::{Learner, Model, Regime, TrainerConfig};
