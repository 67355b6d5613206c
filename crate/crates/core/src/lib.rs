//! Physics-informed neural network estimation of biophysical parameters and
//! hidden states in fast–slow conductance-based neuron models, with
//! bifurcation-diagram validation.

pub mod bifurcation;
pub mod dual;
pub mod error;
pub mod models;
pub mod net;
pub mod train;

pub use error::{Error, Result};
pub use models::{ModelId, ModelParams, ModelSpec, Regime, Role, RoleFilter, Sign};
pub mod sim;
pub mod spectral;
