//! Rank search on the `copy` task, then a paired comparison against plain
//! uniform rank-16 LoRA trained from the same seed.

use std::collections::BTreeMap;

use lora_nas::data::{gen_task, TaskKind};
use lora_nas::model::{AdaptedModel, FrozenTransformer, ModelConfig};
use lora_nas::search::{prepare_search, run_baseline, run_finetune, run_search, SearchConfig};
use lora_nas::optim::OptimizerConfig;
use lora_nas::{RankMap, RankSearchSpace, Result};

pub struct Comparison {
    pub rank_map: RankMap,
    pub searched_perplexity: f64,
    pub searched_params: usize,
    pub baseline_perplexity: f64,
    pub baseline_params: usize,
}

pub fn search_config(seed: u64) -> SearchConfig {
    SearchConfig {
        search_epochs: 20,
        finetune_epochs: 60,
        weight_optimizer: OptimizerConfig::adam(3e-3),
        space: RankSearchSpace::new(vec![4, 8, 16]).expect("valid space"),
        seed,
        ..SearchConfig::default()
    }
}

pub fn compare(seed: u64) -> Result<Comparison> {
    let splits = gen_task(TaskKind::Copy, 120, seed)?;
    let base = FrozenTransformer::init(ModelConfig {
        seed,
        ..ModelConfig::default()
    })?;
    let config = search_config(seed);

    let mut model = AdaptedModel::new(base.clone());
    prepare_search(&mut model, &config)?;
    let (rank_map, _) = run_search(&mut model, &splits, &config)?;
    let searched = run_finetune(&mut model, &rank_map, &splits, &config)?;

    let mut plain = AdaptedModel::new(base);
    let baseline = run_baseline(&mut plain, 16, &splits, &config)?;

    Ok(Comparison {
        rank_map,
        searched_perplexity: searched.eval_perplexity,
        searched_params: searched.adapter_params,
        baseline_perplexity: baseline.eval_perplexity,
        baseline_params: baseline.adapter_params,
    })
}

pub fn run_example() -> Result<Comparison> {
    let c = compare(7)?;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for choice in c.rank_map.modules.values() {
        *hist.entry(choice.rank).or_default() += 1;
    }
    println!("modules per rank: {hist:?}");
    println!("searched : ppl {:.4}, {} adapter params", c.searched_perplexity, c.searched_params);
    println!("uniform16: ppl {:.4}, {} adapter params", c.baseline_perplexity, c.baseline_params);
    Ok(c)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
