//! The `patchcount` task puts a grid of patch embeddings in front of the
//! text. Blocking text-to-prefix attention removes the only route to the
//! answer, which shows up as a perplexity gap.

use lora_nas::data::{gen_task, TaskKind, TaskParams};
use lora_nas::model::{eval_perplexity, AdaptedModel, FrozenTransformer, ModelConfig, PatchConfig};
use lora_nas::search::{run_baseline, SearchConfig};
use lora_nas::optim::OptimizerConfig;
use lora_nas::Result;

/// Eval perplexity after fine-tuning with and without prefix attention.
pub fn prefix_ablation(seed: u64) -> Result<(f64, f64)> {
    let params = TaskParams::default();
    let splits = gen_task(TaskKind::Patchcount, 400, seed)?;
    let config = ModelConfig {
        seed,
        n_layers: 2,
        patch: Some(PatchConfig {
            count: params.grid_cells,
            input_dim: params.patch_dim(),
        }),
        ..ModelConfig::default()
    };
    let search = SearchConfig {
        finetune_epochs: 8,
        weight_optimizer: OptimizerConfig::adam(3e-3),
        seed,
        ..SearchConfig::default()
    };
    let mut out = [0.0; 2];
    for (i, sees) in [true, false].into_iter().enumerate() {
        let mut model = AdaptedModel::new(FrozenTransformer::init(config.clone())?);
        model.text_sees_prefix = sees;
        run_baseline(&mut model, 8, &splits, &search)?;
        out[i] = eval_perplexity(&model, &splits.eval, 64)?;
    }
    Ok((out[0], out[1]))
}

pub fn run_example() -> Result<()> {
    let (with, without) = prefix_ablation(5)?;
    println!("eval perplexity with prefix attention    {with:.4}");
    println!("eval perplexity without prefix attention {without:.4}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
