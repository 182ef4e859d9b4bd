//! Configuration, dataset files, synthetic scenarios and evaluation.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod synth;

pub use config::Config;
pub use dataset::{load_dataset, write_dataset, Dataset, LoadWarnings, PoseSample};
pub use eval::{evaluate_ape, EvalReport, SolverSummary};
