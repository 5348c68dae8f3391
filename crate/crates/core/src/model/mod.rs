//! Small vision-language decoder over the synthetic patch grid.
//!
//! The response decoder reads `[BOS, y_0 .. y_{n-2}]`, each input embedding
//! shifted by the mean instruction embedding. Each block applies
//! causal self-attention over the response prefix, then one cross-attention
//! over the context `[patch embeddings ; instruction embeddings]`, both with
//! residual connections. Logits are the final hidden states times the
//! unembedding.

mod forward;
mod params;

pub use forward::{
    answer_yes_no, export_attention, forward, greedy_decode, sequence_log_prob, sequence_log_prob_in, AttentionRecord,
    Forward, SequenceLogProb,
};
pub use params::{BlockParams, ModelConfig, ModelParams, ParamVars};
