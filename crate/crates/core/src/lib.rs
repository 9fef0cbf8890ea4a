pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pretrain;
pub mod prune;

pub use error::{MapexError, Result};
