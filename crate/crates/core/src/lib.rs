pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod seed;
pub mod train;

pub use error::{EmpoError, Result};
