//! Run configuration files and model checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use config::RunConfig;
