mod common;

use common::{batch_of, tiny_config, tiny_model};
use lora_nas::data::{copy_example, patchcount_example, Batch, Example};
use lora_nas::model::{AdaptedModel, Attachment, BoundAttachment, FrozenTransformer, ModelConfig, PatchConfig, TargetModule, TrainMode};
use lora_nas::rng::stream;
use lora_nas::{
    finite_diff_check, superweight_a, superweight_b, AttentionLayout, RankSearchSpace, SuperLoraModule, Tape, Tensor, Var,
};
use proptest::prelude::*;

const ALL_RANKS: [usize; 5] = [4, 8, 16, 32, 64];

fn space_strategy() -> impl Strategy<Value = Vec<usize>> {
    proptest::sample::subsequence(ALL_RANKS.to_vec(), 1..=5)
}

/// Column scale by direct summation over windows, no mask matrix.
fn window_sum_scale(ranks: &[usize], p: &[f64]) -> Vec<f64> {
    let r_max = *ranks.iter().max().unwrap();
    let mut scale = vec![0.0; r_max];
    for (&r, &pi) in ranks.iter().zip(p) {
        let start = (r_max - r) / 2;
        for s in scale.iter_mut().skip(start).take(r) {
            *s += pi;
        }
    }
    scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn superweights_match_window_sum(ranks in space_strategy(), seed in 0u64..1000) {
        let space = RankSearchSpace::new(ranks.clone()).unwrap();
        let mut rng = stream(seed, "prop");
        let mut m = SuperLoraModule::init("m", 5, 3, space, 1.0, &mut rng).unwrap();
        m.w_b = Tensor::randn(m.w_b.shape(), 1.0, &mut rng);
        m.alphas = Tensor::randn(m.alphas.shape(), 1.0, &mut rng);
        let scale = window_sum_scale(&ranks, &m.probabilities());
        let a = superweight_a(&m).unwrap();
        let b = superweight_b(&m).unwrap();
        let r_max = scale.len();
        for i in 0..5 {
            for j in 0..r_max {
                prop_assert!((a.get(i, j) - scale[j] * m.w_a.get(i, j)).abs() < 1e-14);
            }
        }
        for j in 0..r_max {
            for o in 0..3 {
                prop_assert!((b.get(j, o) - scale[j] * m.w_b.get(j, o)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sampled_rank_is_argmax_and_shift_invariant(alphas in proptest::collection::vec(-3.0f64..3.0, 4), shift in -5.0f64..5.0) {
        let space = RankSearchSpace::new(vec![4, 8, 16, 32]).unwrap();
        let mut m = SuperLoraModule::init("m", 4, 4, space.clone(), 1.0, &mut stream(0, "p")).unwrap();
        m.alphas = Tensor::row_vector(&alphas).unwrap();
        let r = m.sample_rank();
        let i = space.index_of(r).unwrap();
        prop_assert!(alphas.iter().all(|&a| a <= alphas[i]));
        prop_assert!(alphas[..i].iter().all(|&a| a < alphas[i]));
        let shifted: Vec<f64> = alphas.iter().map(|a| a + shift).collect();
        m.alphas = Tensor::row_vector(&shifted).unwrap();
        prop_assert_eq!(m.sample_rank(), r);
    }

    #[test]
    fn probabilities_on_simplex(alphas in proptest::collection::vec(-50.0f64..50.0, 1..6)) {
        let p = lora_nas::softmax_alphas(&alphas).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn two_token_attention_matches_hand_computation() {
    let (q, k, v) = ([0.5, -1.0], [2.0, 0.25], [3.0, -1.0]);
    let mut tape = Tape::new();
    let qv = tape.param(Tensor::new(vec![2, 1], q.to_vec()).unwrap());
    let kv = tape.param(Tensor::new(vec![2, 1], k.to_vec()).unwrap());
    let vv = tape.param(Tensor::new(vec![2, 1], v.to_vec()).unwrap());
    let out = tape.attention(qv, kv, vv, AttentionLayout::causal(1, 2, 1)).unwrap();
    let o = tape.value(out).data().to_vec();

    let (s0, s1) = (q[1] * k[0], q[1] * k[1]);
    let p1 = s1.exp() / (s0.exp() + s1.exp());
    let expected1 = (1.0 - p1) * v[0] + p1 * v[1];
    assert_eq!(o[0], v[0]);
    assert!((o[1] - expected1).abs() < 1e-15);

    let pick = tape.slice_rows(out, 1, 2).unwrap();
    let loss = tape.sum(pick);
    let g = tape.backward(loss).unwrap();
    let gv = g.get(vv).unwrap().data().to_vec();
    assert!((gv[0] - (1.0 - p1)).abs() < 1e-15);
    assert!((gv[1] - p1).abs() < 1e-15);
    let gq = g.get(qv).unwrap().data().to_vec();
    let dq1 = p1 * (1.0 - p1) * (k[1] - k[0]) * (v[1] - v[0]);
    assert_eq!(gq[0], 0.0);
    assert!((gq[1] - dq1).abs() < 1e-14);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = stream(4, "attn");
    let k = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let layout = AttentionLayout {
        batch: 2,
        seq_len: 3,
        heads: 2,
        prefix_len: 1,
        text_sees_prefix: true,
    };
    let f = |tape: &mut Tape, q: Var| {
        let kv = tape.constant(k.clone());
        let vv = tape.constant(v.clone());
        let wv = tape.constant(w.clone());
        let o = tape.attention(q, kv, vv, layout)?;
        let o = tape.mul(o, wv)?;
        Ok(tape.sum(o))
    };
    let q = Tensor::randn(&[6, 4], 1.0, &mut rng);
    assert!(finite_diff_check(f, &q, 1e-6).unwrap() < 1e-6);
}

fn scalar_model(g: f64, u: f64, d: f64) -> AdaptedModel {
    let mut base = FrozenTransformer::init(ModelConfig {
        vocab_size: 4,
        d_model: 1,
        n_layers: 1,
        n_heads: 1,
        head_dim: 1,
        mlp_dim: 1,
        max_seq_len: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    *base.layers[0].proj_mut(TargetModule::Gate) = Tensor::scalar(g);
    *base.layers[0].proj_mut(TargetModule::Up) = Tensor::scalar(u);
    *base.layers[0].proj_mut(TargetModule::Down) = Tensor::scalar(d);
    AdaptedModel::new(base)
}

#[test]
fn gated_mlp_scalar_oracle() {
    let (g, u, d, x) = (0.7, -1.3, 0.4, 1.5);
    let model = scalar_model(g, u, d);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, TrainMode::FROZEN);
    let xv = tape.constant(Tensor::scalar(x));
    let y = model.mlp_forward(&mut tape, &bound, xv, 0).unwrap();
    let a = x * g;
    let silu = a / (1.0 + (-a).exp());
    assert!((tape.value(y).item() - silu * (x * u) * d).abs() < 1e-15);
}

fn randomize_supernets(model: &mut AdaptedModel, seed: u64) {
    let mut rng = stream(seed, "randomize");
    for att in model.attachments.values_mut() {
        if let Attachment::Super(m) = att {
            m.w_b = Tensor::randn(m.w_b.shape(), 0.3, &mut rng);
            m.alphas = Tensor::randn(m.alphas.shape(), 0.5, &mut rng);
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Wrt {
    A,
    B,
    Alphas,
}

fn model_fd(model: &AdaptedModel, batch: &Batch, name: &str, wrt: Wrt) -> f64 {
    let Some(Attachment::Super(m)) = model.attachments.get(name) else { panic!("{name} is not a supernet") };
    let point = match wrt {
        Wrt::A => m.w_a.clone(),
        Wrt::B => m.w_b.clone(),
        Wrt::Alphas => m.alphas.clone(),
    };
    let f = |tape: &mut Tape, v: Var| {
        let mut bound = model.bind(tape, TrainMode::FROZEN);
        if let Some(BoundAttachment::Super(s)) = bound.attachments.get_mut(name) {
            match wrt {
                Wrt::A => s.w_a = v,
                Wrt::B => s.w_b = v,
                Wrt::Alphas => s.alphas = v,
            }
        }
        model.loss(tape, &bound, batch)
    };
    finite_diff_check(f, &point, 1e-5).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let shapes = [(8, 2, 12, vec![2, 4]), (12, 3, 10, vec![2, 4, 6]), (16, 4, 20, vec![4, 8])];
    for (i, (d, heads, mlp, ranks)) in shapes.into_iter().enumerate() {
        let cfg = ModelConfig {
            d_model: d,
            n_heads: heads,
            head_dim: d / heads,
            mlp_dim: mlp,
            n_layers: 1,
            seed: i as u64,
            ..tiny_config(0)
        };
        let mut model = AdaptedModel::new(FrozenTransformer::init(cfg).unwrap());
        model.attach_supernets(&RankSearchSpace::new(ranks).unwrap(), 2.0, i as u64).unwrap();
        randomize_supernets(&mut model, i as u64);
        let batch = batch_of(&[copy_example(&[1, 2, 3]), copy_example(&[4, 5])]);
        for name in ["layers.0.q_proj", "layers.0.down_proj"] {
            for wrt in [Wrt::A, Wrt::B, Wrt::Alphas] {
                let err = model_fd(&model, &batch, name, wrt);
                assert!(err < 1e-4, "shape {i} {name} {wrt:?}: {err}");
            }
        }
    }
}

#[test]
fn masked_positions_contribute_zero_gradient() {
    let mut rng = stream(6, "mask");
    let logits = Tensor::randn(&[4, 7], 1.0, &mut rng);
    let targets = [Some(2), None, Some(5), None];
    let mut tape = Tape::new();
    let lv = tape.param(logits.clone());
    let loss = tape.cross_entropy_masked(lv, &targets).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(lv).unwrap();
    for row in [1, 3] {
        assert!(g.row(row).iter().all(|&x| x == 0.0));
        for col in 0..7 {
            let mut bumped = logits.clone();
            bumped.set(row, col, logits.get(row, col) + 1e-3);
            let mut t = Tape::new();
            let v = t.constant(bumped);
            let l = t.cross_entropy_masked(v, &targets).unwrap();
            assert_eq!(t.value(l).item(), tape.value(loss).item());
        }
    }

    // At model level, rewriting a masked target leaves the loss untouched.
    let model = tiny_model(2);
    let loss_of = |tokens: Vec<usize>| {
        let ex = Example {
            tokens,
            loss_mask: vec![false, true, false, false],
            patches: None,
        };
        let b = batch_of(&[ex]);
        model.batch_nll(&b).unwrap().0
    };
    assert_eq!(loss_of(vec![5, 6, 7, 8]), loss_of(vec![5, 6, 7, 30]));
    assert_ne!(loss_of(vec![5, 6, 7, 8]), loss_of(vec![5, 9, 7, 8]));
}

#[test]
fn blocking_prefix_attention_hides_patch_contents() {
    let cfg = ModelConfig {
        patch: Some(PatchConfig { count: 4, input_dim: 5 }),
        ..tiny_config(3)
    };
    let mut model = AdaptedModel::new(FrozenTransformer::init(cfg).unwrap());
    let a = batch_of(&[patchcount_example(&[true, false, true, true])]);
    let b = batch_of(&[patchcount_example(&[false, false, false, true])]);
    let text_rows = |m: &AdaptedModel, batch: &Batch| {
        let l = m.logits(batch).unwrap();
        l.data()[4 * l.cols()..].to_vec()
    };
    assert_ne!(text_rows(&model, &a), text_rows(&model, &b));
    model.text_sees_prefix = false;
    assert_eq!(text_rows(&model, &a), text_rows(&model, &b));
}

#[test]
fn frozen_leaves_get_no_gradient_in_any_mode() {
    let mut model = tiny_model(5);
    model.attach_supernets(&RankSearchSpace::new(vec![2, 4]).unwrap(), 4.0, 5).unwrap();
    randomize_supernets(&mut model, 5);
    let batch = batch_of(&[copy_example(&[9, 8, 7])]);
    for mode in [TrainMode::WEIGHTS, TrainMode::ALPHAS] {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, mode);
        let loss = model.loss(&mut tape, &bound, &batch).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(bound.frozen.iter().all(|&v| g.get(v).is_none()));
    }
}
