//! Diagonal-dimension laboratory: finite metric spaces, band operators,
//! completely positive maps, cover-to-witness construction and
//! witness-to-cover extraction.

pub mod dsu;
pub mod cover;
pub mod cpmaps;
pub mod error;
pub mod extract;
pub mod operator;
pub mod space;
pub mod witness;

pub use error::{Error, Result};
