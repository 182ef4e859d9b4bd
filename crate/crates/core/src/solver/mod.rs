//! Damped Gauss–Newton machinery for the windowed least-squares problem.

pub mod assemble;
pub mod layout;
pub mod lm;
pub mod normal;

pub use assemble::{assemble, linearize_all, residual_vector, FusionProblem, WindowData};
pub use layout::{KnotBlocks, ParameterLayout, CALIB_DIM};
pub use lm::{solve, Problem, SolveStats, SolverConfig, Termination};
pub use normal::{BandMatrix, NormalSystem};
