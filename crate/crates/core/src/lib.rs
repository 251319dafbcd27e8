//! Conservative value-ensemble MPC for non-prehensile tray transport.
//!
//! The pipeline learns an ensemble of cost-to-go estimates from end-effector
//! demonstrations of a tray-carrying arm and plugs a log-sum-exp pessimistic
//! aggregate of those estimates into a sampling-based model predictive
//! controller.

pub mod conservative;
pub mod contact;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kinematics;
pub mod mpc;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
pub use exec::Exec;
