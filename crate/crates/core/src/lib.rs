pub mod auction;
pub mod checkpoint;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod networks;
pub mod preference;
pub mod trainer;

pub use error::{Error, Result};
