//! Files: images, checkpoints and configuration.

mod checkpoint;
mod config;
mod pad;
mod ppm;
mod restore;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::Config;
pub use pad::{crop_to, pad_reflect_to_multiple};
pub use ppm::{decode as decode_ppm, encode as encode_ppm, read_ppm, write_ppm, Image};
pub use restore::restore_image;
