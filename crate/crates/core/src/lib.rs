pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod gradcheck;
pub mod hat;
pub mod lattice;
pub mod lm;
pub mod model;
pub mod mwer;
pub mod numerics;
pub mod selfcheck;

pub use error::{Error, Result};
