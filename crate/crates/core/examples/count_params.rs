//! LoRA parameter counts for Llama-3.2-11B-Vision at uniform rank 64.

use std::path::Path;

use lora_nas::accounting::{format_ratio, load_descriptor, lora_param_count, parse_count, ratio_of_totals, Group, Ranks};
use lora_nas::Result;

pub fn run_example() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/llama32-11b-vision.json");
    let descriptor = load_descriptor(&path)?;
    for groups in ["q,k", "g,u,d", "all"] {
        let report = lora_param_count(&descriptor, Ranks::Uniform(64), Some(&Group::parse_list(groups)?))?;
        println!("{groups:<6} {}", report.summary());
        for (tower, n) in &report.towers {
            println!("    {tower:<15} {n}");
        }
    }
    let full = parse_count("268.7M")?;
    let searched = parse_count("103.3M")?;
    println!("reduction {}x", format_ratio(ratio_of_totals(full, searched)?));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
