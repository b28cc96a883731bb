//! Numerical laboratory for age-of-information aware grant-free random
//! access.
//!
//! - [`model`]: system configuration, pilots, channel draws and the encoder.
//! - [`access`]: closed-form average AoI and the `(delta, p)` grid search.
//! - [`solvers`]: ISTA and the age-gated unfolded decoder.
//! - [`trainer`]: backpropagation, ADAM and the stage-wise schedule.
//! - [`theory`]: coherence constants and certification of the error bound.
//! - [`sim`]: closed-loop slotted simulation of access, decoding and ages.
//! - [`harness`]: experiment configuration, commands and CSV output.

pub mod access;
pub mod error;
pub mod harness;
pub mod model;
pub mod sim;
pub mod solvers;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
