//! Gas source term estimation on a grid.
//!
//! An agent samples Poisson hit counts from a steady advection-diffusion plume,
//! keeps a discrete posterior over source location and flux, and chooses moves
//! either greedily by expected information gain ([`infotaxis`]) or from a
//! learned value function trained on Bellman targets computed by exact
//! enumeration of observation outcomes ([`training`]).

pub mod belief;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod infotaxis;
pub mod net;
pub mod plume;
pub mod policy;
pub mod training;

pub use error::{Error, Result};
