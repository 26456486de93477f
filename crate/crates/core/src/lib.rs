pub mod artifact;
pub mod cli;
pub mod criterion;
pub mod decompose;
pub mod efcore;
pub mod error;
pub mod inference;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
