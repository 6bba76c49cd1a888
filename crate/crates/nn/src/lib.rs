pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{NnError, Result};
