//! Decoder-only transformer: embeddings, pre-norm causal attention blocks and
//! swappable output heads.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TensorEntry};
pub use config::{is_no_decay, HeadKind, ModelConfig};
pub use forward::{sigmoid, AttentionRecord, Bound, Model, TapeForward};
pub use params::{finetune_trainable, ParamStore, INIT_STD};
