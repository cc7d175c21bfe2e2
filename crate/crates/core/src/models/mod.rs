//! Segmentor and discriminator networks plus their on-disk checkpoints.

mod checkpoint;
mod config;
mod networks;

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, MAGIC};
pub use config::{ModelConfig, DECODER_WIDTHS, DISCRIMINATOR_WIDTHS, ENCODER_WIDTHS};
pub use networks::{Discriminator, ParamStore, Segmentor};
