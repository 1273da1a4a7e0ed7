//! Finite-difference check of the supernet gradients with respect to
//! `W_A`, `W_B` and the alphas, through a projection and cross-entropy.

use lora_nas::rng::stream;
use lora_nas::{finite_diff_check, supernet_forward, RankSearchSpace, Result, SuperLoraModule, Tape, Tensor, Var};

#[derive(Clone, Copy)]
enum Wrt {
    A,
    B,
    Alphas,
}

pub fn max_relative_error(in_dim: usize, out_dim: usize, ranks: &[usize], seed: u64) -> Result<f64> {
    let mut rng = stream(seed, "gradient-check");
    let mut m = SuperLoraModule::init("m", in_dim, out_dim, RankSearchSpace::new(ranks.to_vec())?, 2.0, &mut rng)?;
    m.w_b = Tensor::randn(m.w_b.shape(), 0.5, &mut rng);
    m.alphas = Tensor::randn(m.alphas.shape(), 0.5, &mut rng);
    let x = Tensor::randn(&[3, in_dim], 1.0, &mut rng);
    let base = Tensor::randn(&[in_dim, out_dim], 0.3, &mut rng);
    let targets: Vec<usize> = (0..3).map(|i| (i * 7 + seed as usize) % out_dim).collect();

    let mut worst: f64 = 0.0;
    for wrt in [Wrt::A, Wrt::B, Wrt::Alphas] {
        let point = match wrt {
            Wrt::A => m.w_a.clone(),
            Wrt::B => m.w_b.clone(),
            Wrt::Alphas => m.alphas.clone(),
        };
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let mut vars = m.bind(tape, false, false);
            match wrt {
                Wrt::A => vars.w_a = v,
                Wrt::B => vars.w_b = v,
                Wrt::Alphas => vars.alphas = v,
            }
            let xv = tape.constant(x.clone());
            let bv = tape.constant(base.clone());
            let logits = supernet_forward(tape, xv, bv, &m, vars)?;
            tape.cross_entropy(logits, &targets)
        };
        worst = worst.max(finite_diff_check(f, &point, 1e-5)?);
    }
    Ok(worst)
}

pub fn run_example() -> Result<()> {
    for (i, (n_in, n_out, ranks)) in [(6, 5, vec![2, 4]), (8, 11, vec![2, 4, 8]), (12, 7, vec![4, 8, 12])]
        .into_iter()
        .enumerate()
    {
        let err = max_relative_error(n_in, n_out, &ranks, i as u64)?;
        println!("{n_in}x{n_out} space {ranks:?}: max relative error {err:.2e}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
