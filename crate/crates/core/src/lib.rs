pub mod bemd;
pub mod bench;
pub mod bias;
pub mod error;
pub mod ffd;
pub mod image;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod similarity;

pub use error::{Error, Result};
pub use image::ImageGrid;
