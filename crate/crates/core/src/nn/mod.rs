//! Minimal CPU neural-network toolkit: parameter storage, layers with
//! analytic gradients, and the Adam optimizer.

mod adam;
mod layers;
mod params;

pub use adam::Adam;
pub use layers::*;
pub use params::{Grads, ParamId, ParamStore};
