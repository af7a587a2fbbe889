pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod gsp;
pub mod kan;
pub mod mixer;
pub mod model;
pub mod params;
pub mod rmm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
