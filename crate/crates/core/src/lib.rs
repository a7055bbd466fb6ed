pub mod budget;
pub mod buffer;
pub mod corpus;
pub mod error;
pub mod math;
pub mod model;
pub mod nn;
pub mod stream;
pub mod util;

pub use error::{Error, Result};
pub use math::{parallelism_enabled, set_parallelism};
