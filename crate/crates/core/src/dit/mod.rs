//! Toy diffusion transformer over `[c, z_t, z_c]` tokens.

pub mod attention;
pub mod flow;
pub mod model;
pub mod tokens;
pub mod train;

pub use attention::{attend, mm_attention, mm_attention_with_weights, AttentionBlock};
pub use flow::{flow_loss, sample, FlowExample, FlowState, DEFAULT_SAMPLER_STEPS};
pub use model::{attach_moe, timestep_features, DitConfig, DitInput, StyleCondition, StyleDit};
pub use tokens::{assemble_tokens, PatchGeometry, TokenSequence};
pub use train::{pretrain_base, train_stylizer, BaseTrainConfig, EncoderMode, StylizerExample, StylizerRun, StylizerTrainConfig};
