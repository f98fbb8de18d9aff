//! Modelling networked dynamical systems from irregularly sampled, partially
//! observed time series with graph neural ODEs.

pub mod autodiff;
pub mod baselines;
pub mod dynamics;
mod error;
pub mod ggru;
pub mod gnode;
pub mod graph;
pub mod harness;
pub mod impute;
pub mod io;
pub mod nn;
pub mod methods;
pub mod pipeline;
pub mod predict;

pub use error::{Error, Result};
