pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod losses;
pub mod nn;
pub mod rhs;
pub mod saliency_prior;
pub mod training;

pub use error::{Result, RsadError};
