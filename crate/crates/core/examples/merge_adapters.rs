//! Folding trained adapters into the base weights gives the same logits
//! as running the adapter path.

use lora_nas::data::{gen_task, TaskKind};
use lora_nas::model::{AdaptedModel, FrozenTransformer, ModelConfig};
use lora_nas::search::{run_baseline, SearchConfig};
use lora_nas::Result;

/// Largest absolute logit difference between the adapter path and the
/// merged model, after a short fine-tune.
pub fn merge_gap(seed: u64) -> Result<f64> {
    let splits = gen_task(TaskKind::Copy, 60, seed)?;
    let mut model = AdaptedModel::new(FrozenTransformer::init(ModelConfig {
        seed,
        n_layers: 2,
        ..ModelConfig::default()
    })?);
    let config = SearchConfig {
        finetune_epochs: 2,
        seed,
        ..SearchConfig::default()
    };
    run_baseline(&mut model, 8, &splits, &config)?;

    let merged = AdaptedModel::new(model.merged()?);
    let batch = splits.eval.batch(&(0..splits.eval.len()).collect::<Vec<_>>())?;
    Ok(model.logits(&batch)?.max_abs_diff(&merged.logits(&batch)?))
}

pub fn run_example() -> Result<()> {
    println!("max |adapter - merged| logit gap: {:.2e}", merge_gap(3)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
