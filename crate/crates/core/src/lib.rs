//! Hierarchical variational autoencoder for expression trees and
//! evolutionary symbolic regression in its latent space.

pub mod bench;
pub mod error;
pub mod expr;
pub mod grammar;
pub mod hvae;
pub mod latent;
pub mod nnmath;
pub mod sr;
pub mod train;

pub use error::{Error, Result};
