//! Toy decoder-only transformer trained under a gist layout.

mod checkpoint;
mod loss;
mod network;
mod ops;
mod params;
mod train;


pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry};
pub use loss::{lm_loss, LossReport};
pub use network::{argmax, AttentionMode, AttentionPlan, ForwardTrace, Model};
pub use params::{LayerParams, ModelConfig, Params, TensorMut, TensorRef};
pub use train::{boundary_loss_profile, evaluate, AdamW, BoundaryBucket, TrainConfig, TrainLayout, Trainer};

pub(crate) use ops::rmsnorm;
