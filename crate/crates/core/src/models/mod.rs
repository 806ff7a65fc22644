//! Decoder-only transformer LMs (dense and mixture-of-experts), the
//! next-token objective, evaluation metrics and the checkpoint container.

mod batch;
pub mod checkpoint;
mod config;
mod metrics;
mod params;
mod train;
mod transformer;

pub use batch::{epoch_batches, epoch_order, eval_windows, training_windows, Token, TokenBatch};
pub use checkpoint::{AnyModel, Checkpoint};
pub use config::{LmConfig, MoeSpec, FAMILIES};
pub use metrics::{argmax, evaluate_lm, loss_ce, perplexity, token_accuracy, LmEval};
pub use params::{init_params, is_expert_param, param_layout, zero_params, Bound, ParamSet};
pub(crate) use train::diverged;
pub use train::{train_lm, train_local, LossCurve, TrainConfig};
pub use transformer::{
    ffn_forward, forward, forward_values, moe_block_forward, top_k_experts, DenseLm, FfnVars, ForwardValues,
    LanguageModel, LmOutput, MoeLm,
};
