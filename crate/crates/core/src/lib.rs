pub mod cef;
pub mod codebook;
pub mod error;
pub mod favr;
pub mod gradcheck;
pub mod io;
pub mod lab;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod text;
pub mod tsl;
pub mod view_repair;

pub use error::{Error, Result};
