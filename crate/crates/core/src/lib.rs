//! Calibrated aggregation of answers from independently queried agents.

pub mod agents;
pub mod belief;
pub mod calibration;
pub mod clustering;
pub mod coordination;
pub mod disclosure;
pub mod harness;
pub mod parsing;
