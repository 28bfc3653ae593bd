//! Contrastive alignment of trajectory embeddings with road and POI views.

pub mod loss;
pub mod trainer;

pub use loss::{info_nce, info_nce_loss, row_max_alignment, similarity, similarity_matrix};
pub use trainer::{
    examples, load_config, load_encoder, read_loss_curve, write_loss_curve, EpochStats, Example, PretrainConfig,
    PretrainModel, SemanticContext, StepLoss, Trainer, CONFIG_FILE, LOG_TAU,
};
