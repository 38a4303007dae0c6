pub mod alignment;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod params;
pub mod plot;
pub mod tracker;
pub mod train;
pub mod types;

pub use error::{Error, Result};
