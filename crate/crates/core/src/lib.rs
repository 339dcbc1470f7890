//! Targeted maximum likelihood estimation of longitudinal natural direct
//! and indirect effects under random mediator interventions.
//!
//! Conditional densities are held as exact probability tables, so plug-in
//! parameters, efficient influence curves and TMLE updates are computed by
//! exact summation rather than by sampling.

pub mod data;
pub mod eic;
pub mod error;
pub mod gcomp;
pub mod haleic;
pub mod inference;
pub mod lasso;
pub mod likelihood;
mod logistic;
pub mod schema;
pub mod simstudy;
pub mod tmle;

pub use error::{Error, Result};
