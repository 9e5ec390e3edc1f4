pub mod attacks;
pub mod cli;
pub mod error;
pub mod gridnav;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod train;
pub mod vector;

pub use error::{Error, Result};
