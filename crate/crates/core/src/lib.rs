//! Networked control loops with delayed state updates: LQG control with a
//! certainty-equivalent estimator, delay-aware value-of-information event
//! triggering, baseline schedulers, an exact DP oracle, and a Monte Carlo
//! harness for the control-cost versus transmission-rate trade-off.

pub mod channel;
pub mod config;
pub mod dp;
pub mod error;
pub mod estimator;
pub mod lqg;
pub mod plant;
pub mod scheduler;
pub mod sim;
pub mod sweep;

pub use error::{Error, Result};
