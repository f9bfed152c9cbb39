//! Disturbance-aware whole-body MPC with sampled pose optimization for a
//! differential-drive mobile manipulator.

pub mod config;
pub mod error;
pub mod harness;
pub mod kinematics;

pub use error::{Error, Result};
pub mod planner;
pub mod riccati;
pub mod trajectory;
