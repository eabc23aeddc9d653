//! Hierarchical hurdle regression for sparse spatio-temporal fatality counts.

pub mod calibration;
pub mod eval;
pub mod glm;
pub mod hurdle;
pub mod panel;
pub mod smooth;
