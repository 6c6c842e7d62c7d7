pub mod archive;
pub mod datagen;
mod delaunay;
pub mod error;
pub mod eval;
pub mod grid;
pub mod inn;
pub mod model;
pub mod seed;
pub mod spectral;
pub mod train;

pub use error::{IknoError, Result};
