// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bspline;
pub mod error;
pub mod estimator;
pub mod fit;
pub mod gradcheck;
pub mod io;
pub mod quat;
pub mod residuals;
pub mod solver;
pub mod trajectory;

pub use error::{Error, Result};
pub use quat::{UnitQuat, Vec3};
pub use trajectory::{KnotState, StateSample, Trajectory, Vec6};
