//! Series, prompt and memory encoders, the two-way state decoder, and
//! checkpoints.

mod checkpoint;
mod config;
mod network;
mod patch;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use network::{extract_context, Context, Model};
pub use patch::{depatchify, patch_starts, patchify, PatchLayout, Prediction};
