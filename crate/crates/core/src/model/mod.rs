//! The masked variable-length ECG CNN.
//!
//! Pipeline: stem stage, `num_blocks` doubling stages (conv, group norm,
//! ReLU, max-pool), mask-weighted averaging over time and a linear head.

mod batch;
mod checkpoint;
mod config;
mod net;

pub use batch::MaskedBatch;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{EcgNetConfig, CONV_STRIDE, POOL_SIZE, STAGE_DOWNSAMPLE};
pub use net::{
    argmax_rows, downsample_mask, masked_mean, Classifier, EcgNet, LinearClassifier, Param,
};

/// Seeded network for `cfg`.
pub fn build_ecgnet(cfg: EcgNetConfig, seed: u64) -> crate::Result<EcgNet> {
    EcgNet::new(cfg, seed)
}
