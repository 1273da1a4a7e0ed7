#![allow(dead_code)]

use lora_nas::data::{Batch, Example};
use lora_nas::model::{AdaptedModel, FrozenTransformer, ModelConfig};
use lora_nas::search::SearchState;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        mlp_dim: 12,
        max_seq_len: 24,
        seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> AdaptedModel {
    AdaptedModel::new(FrozenTransformer::init(tiny_config(seed)).unwrap())
}

pub fn batch_of(examples: &[Example]) -> Batch {
    Batch::from_examples(examples.iter()).unwrap()
}

/// Serialized form with shortest round-trip floats; equal strings mean
/// bit-identical tensors (including the sign of zero).
pub fn bits<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap()
}

/// Search state with wall-clock readings removed.
pub fn timeless(state: &SearchState) -> SearchState {
    let mut s = state.clone();
    for m in &mut s.metrics {
        m.wall_seconds = 0.0;
    }
    s
}
