//! Stage one: surrogate feature stack, the embedding MLP and its contrastive objective.

pub mod features;
pub mod loss;
pub mod model;
pub mod train;

pub use features::{extract_features, ExtractorSpec, FeatureStack};
pub use loss::{infonce_loss, logits_matrix, positive_mask, scaled_cosine, InfoNceOutcome, LabeledBatch};
pub use model::{EncoderConfig, StyleEmbedding, StyleEncoder};
pub use train::{train_encoder, EncoderTrainConfig, LabeledCorpus, TrainedEncoder};
