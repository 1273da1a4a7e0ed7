//! Centered rank windows, superweights, and the one-hot reduction of a
//! supernet module to a plain LoRA adapter.

use lora_nas::rng::stream;
use lora_nas::{slice_window, superweight_a, RankSearchSpace, Result, SuperLoraModule, Tensor};

pub fn run_example() -> Result<()> {
    for r in [8, 16, 32] {
        let (s, e) = slice_window(32, r)?;
        println!("rank {r:>2} of 32 -> columns {s}..{e}");
    }

    let space = RankSearchSpace::new(vec![4, 8, 16, 32])?;
    let mut rng = stream(1, "example");
    let mut module = SuperLoraModule::init("demo", 32, 48, space.clone(), 32.0, &mut rng)?;
    module.w_b = Tensor::randn(&[32, 48], 0.1, &mut rng);

    // With uniform alphas every window gets weight 1/4, so the inner
    // columns (shared by all ranks) keep their full value.
    let wa = superweight_a(&module)?;
    let centre = 15;
    let edge = 0;
    println!(
        "column scale: centre {:.3}, edge {:.3}",
        wa.get(0, centre) / module.w_a.get(0, centre),
        wa.get(0, edge) / module.w_a.get(0, edge)
    );

    let x = Tensor::randn(&[5, 32], 1.0, &mut rng);
    let base = Tensor::randn(&[32, 48], 0.2, &mut rng);
    for (i, &r) in space.ranks().iter().enumerate() {
        let mut onehot = vec![0.0; space.len()];
        onehot[i] = 1.0;
        let super_out = module.forward_with_probabilities(&x, &base, &onehot)?;
        let plain_out = module.extract_adapter(r)?.apply(&x, &base)?;
        println!("rank {r:>2}: |supernet - adapter| = {:.1e}", super_out.max_abs_diff(&plain_out));
    }

    module.alphas = Tensor::row_vector(&[0.1, 0.9, 0.3, 0.2])?;
    println!("probabilities {:?} -> sampled rank {}", module.probabilities(), module.sample_rank());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
