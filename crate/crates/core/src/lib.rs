//! Consistent recalibration models for equity implied-volatility surfaces.
//!
//! A Hull-White extended Bates model is priced from its affine
//! characteristic function; neural networks learn the map from model
//! parameters to the implied-volatility surface and its partial inverse; the
//! simulator moves the surface through time while recalibrating the jump
//! extension so that the surface stays consistent with the model.

pub mod affine;
pub mod datagen;
pub mod error;
pub mod neural;
pub mod pricing;
pub mod sim;
pub mod surface;

pub use error::{Error, Result};
