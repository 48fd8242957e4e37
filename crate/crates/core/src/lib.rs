//! Balanced partition learning plus meta-learned causal features for
//! out-of-distribution classification, at desk scale.

pub mod autodiff;
pub mod btg;
pub mod error;
pub mod harness;
pub mod io;
pub mod mcfl;
pub mod model;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
