//! Physics-informed flood depth inference with calibrated uncertainty.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod model;
pub mod physics;
pub mod scene;
pub mod spectral;
pub mod special;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use grid::{BitMask2D, Field2D};
