pub mod benchmark;
pub mod clustering;
pub mod em;
pub mod error;
pub mod geometry;
pub mod icp;
pub mod kent;
pub mod manifold_opt;
pub mod normals;
pub mod synthetic;

pub use error::{Error, Result};
