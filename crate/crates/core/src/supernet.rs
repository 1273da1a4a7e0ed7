//! LoRA adapters and the weight-sharing rank supernetwork.
//!
//! A [`SuperLoraModule`] holds one pair of maximal-rank factors `W_A`
//! (`in × r_max`) and `W_B` (`r_max × out`). Every candidate rank `r` owns the
//! centered window `[(r_max − r)/2, (r_max + r)/2)` of the rank axis, so
//! smaller candidates are nested inside larger ones. The superweights are
//!
//! ```text
//! W*_A = Σ_i p_i · embed(W_A[:, window(r_i)])
//! W*_B = Σ_i p_i · embed(W_B[window(r_i), :])
//! ```
//!
//! with `p = softmax(alphas)` shared by both factors. Because the windows are
//! nested, the sum collapses to a per-index scale: index `j` of the rank axis
//! is multiplied by the total probability of all windows covering `j`. That
//! scale vector is `p · M` for the constant window-indicator matrix `M`, and
//! the adapted layer is a single chain `x·W_base + s·(x·W*_A)·W*_B`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Centered window `(start, end)` of rank `r` inside `r_max`.
pub fn slice_window(r_max: usize, r: usize) -> Result<(usize, usize)> {
    if r == 0 || r > r_max {
        return Err(Error::SearchSpace(format!(
            "rank {r} must lie in 1..={r_max}"
        )));
    }
    if (r_max - r) % 2 != 0 {
        return Err(Error::SearchSpace(format!(
            "rank {r} is an odd offset from {r_max}; use ranks whose difference from the largest is even"
        )));
    }
    Ok(((r_max - r) / 2, (r_max + r) / 2))
}

/// Ordered candidate ranks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RankSearchSpace {
    ranks: Vec<usize>,
}

impl RankSearchSpace {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let Some(&r_max) = ranks.last() else {
            return Err(Error::SearchSpace("empty rank list".into()));
        };
        if ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::SearchSpace(format!(
                "ranks must be strictly ascending, got {ranks:?}"
            )));
        }
        for &r in &ranks {
            slice_window(r_max, r)?;
        }
        if ranks.len() == 1 {
            log::warn!("singleton rank space {ranks:?}: search reduces to plain LoRA");
        }
        Ok(Self { ranks })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn r_max(&self) -> usize {
        *self.ranks.last().expect("validated non-empty")
    }

    pub fn min_rank(&self) -> usize {
        self.ranks[0]
    }

    pub fn contains(&self, r: usize) -> bool {
        self.ranks.binary_search(&r).is_ok()
    }

    pub fn index_of(&self, r: usize) -> Option<usize> {
        self.ranks.binary_search(&r).ok()
    }

    pub fn window(&self, r: usize) -> Result<(usize, usize)> {
        if !self.contains(r) {
            return Err(Error::arg(format!(
                "rank {r} is not in the search space {:?}",
                self.ranks
            )));
        }
        slice_window(self.r_max(), r)
    }

    /// `|ranks| × r_max` indicator: row `i` is one inside window `i`.
    pub fn window_masks(&self) -> Tensor {
        let r_max = self.r_max();
        let mut m = Tensor::zeros(&[self.len(), r_max]);
        for (i, &r) in self.ranks.iter().enumerate() {
            let (s, e) = slice_window(r_max, r).expect("validated");
            for j in s..e {
                m.set(i, j, 1.0);
            }
        }
        m
    }
}

impl TryFrom<Vec<usize>> for RankSearchSpace {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RankSearchSpace> for Vec<usize> {
    fn from(s: RankSearchSpace) -> Self {
        s.ranks
    }
}

/// Numerically stable softmax of the architecture logits.
pub fn softmax_alphas(alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::dim("softmax of an empty alpha vector"));
    }
    if let Some(bad) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(Error::Numeric(format!("non-finite alpha {bad}")));
    }
    let mut p = alphas.to_vec();
    crate::autodiff::softmax_in_place(&mut p);
    Ok(p)
}

/// A fixed-rank LoRA adapter; the adapted output is `x·W_base + s·(x·W_A)·W_B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub scaling: f64,
    pub w_a: Tensor,
    pub w_b: Tensor,
}

/// Tape handles of an adapter's factors.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub w_a: Var,
    pub w_b: Var,
}

impl LoraAdapter {
    /// Standard LoRA start: Gaussian `W_A` with std `1/√in_dim`, zero `W_B`.
    pub fn init<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        scaling: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::arg("LoRA rank must be at least 1"));
        }
        check_scaling(scaling)?;
        Ok(Self {
            name: name.to_string(),
            rank,
            scaling,
            w_a: Tensor::randn(&[in_dim, rank], 1.0 / (in_dim as f64).sqrt(), rng),
            w_b: Tensor::zeros(&[rank, out_dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_b.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_a.numel() + self.w_b.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        AdapterVars {
            w_a: tape.leaf(self.w_a.clone(), trainable),
            w_b: tape.leaf(self.w_b.clone(), trainable),
        }
    }

    /// `s·(x·W_A)·W_B` on the tape.
    pub fn delta(&self, tape: &mut Tape, x: Var, vars: AdapterVars) -> Result<Var> {
        let h = tape.matmul(x, vars.w_a)?;
        let h = tape.matmul(h, vars.w_b)?;
        Ok(tape.scale(h, self.scaling))
    }

    /// Adapter-path output `x·W_base + s·(x·W_A)·W_B` without a tape.
    pub fn apply(&self, x: &Tensor, base: &Tensor) -> Result<Tensor> {
        check_base(base, self.in_dim(), self.out_dim(), &self.name)?;
        let delta = x.matmul(&self.w_a)?.matmul(&self.w_b)?.scale(self.scaling);
        x.matmul(base)?.add(&delta)
    }
}

/// `W_base + s·W_A·W_B`.
pub fn merge_adapter(base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    check_base(base, adapter.in_dim(), adapter.out_dim(), &adapter.name)?;
    let delta = adapter.w_a.matmul(&adapter.w_b)?.scale(adapter.scaling);
    base.add(&delta)
}

fn check_base(base: &Tensor, in_dim: usize, out_dim: usize, name: &str) -> Result<()> {
    if base.shape() != [in_dim, out_dim] {
        return Err(Error::dim(format!(
            "base weight {:?} does not match adapter `{name}` ({in_dim}x{out_dim})",
            base.shape()
        )));
    }
    Ok(())
}

fn check_scaling(s: f64) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::arg(format!("LoRA scaling must be positive, got {s}")));
    }
    Ok(())
}

/// Maximal-rank LoRA factors plus one shared alpha vector over a rank space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperLoraModule {
    pub name: String,
    pub space: RankSearchSpace,
    pub scaling: f64,
    pub w_a: Tensor,
    pub w_b: Tensor,
    /// Architecture logits, `1 × |ranks|`.
    pub alphas: Tensor,
}

/// Tape handles of a supernet module's trainable tensors.
#[derive(Clone, Copy, Debug)]
pub struct SuperVars {
    pub w_a: Var,
    pub w_b: Var,
    pub alphas: Var,
}

impl SuperLoraModule {
    /// Scaling is `lora_alpha / r_max`; alphas start at zero (uniform).
    pub fn init<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        space: RankSearchSpace,
        lora_alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let r_max = space.r_max();
        let scaling = lora_alpha / r_max as f64;
        check_scaling(scaling)?;
        let n = space.len();
        Ok(Self {
            name: name.to_string(),
            scaling,
            w_a: Tensor::randn(&[in_dim, r_max], 1.0 / (in_dim as f64).sqrt(), rng),
            w_b: Tensor::zeros(&[r_max, out_dim]),
            alphas: Tensor::zeros(&[1, n]),
            space,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_b.cols()
    }

    pub fn r_max(&self) -> usize {
        self.space.r_max()
    }

    /// Checks the shape invariants tying factors, alphas and space together.
    pub fn validate(&self) -> Result<()> {
        let r = self.r_max();
        if self.w_a.dims2()?.1 != r || self.w_b.dims2()?.0 != r {
            return Err(Error::dim(format!(
                "module `{}`: factors {:?}/{:?} do not match r_max {r}",
                self.name,
                self.w_a.shape(),
                self.w_b.shape()
            )));
        }
        if self.alphas.shape() != [1, self.space.len()] {
            return Err(Error::dim(format!(
                "module `{}`: alphas {:?} but {} ranks",
                self.name,
                self.alphas.shape(),
                self.space.len()
            )));
        }
        check_scaling(self.scaling)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax_alphas(self.alphas.data()).expect("alphas stay finite")
    }

    pub fn param_count(&self) -> usize {
        self.w_a.numel() + self.w_b.numel() + self.alphas.numel()
    }

    pub fn bind(&self, tape: &mut Tape, train_weights: bool, train_alphas: bool) -> SuperVars {
        SuperVars {
            w_a: tape.leaf(self.w_a.clone(), train_weights),
            w_b: tape.leaf(self.w_b.clone(), train_weights),
            alphas: tape.leaf(self.alphas.clone(), train_alphas),
        }
    }

    /// Per-index scale of the rank axis as a `1 × r_max` tape value.
    pub fn rank_scale(&self, tape: &mut Tape, vars: SuperVars) -> Result<Var> {
        let p = tape.softmax_rows(vars.alphas)?;
        let masks = tape.constant(self.space.window_masks());
        tape.matmul(p, masks)
    }

    /// `(W*_A, W*_B)` on the tape.
    pub fn superweights(&self, tape: &mut Tape, vars: SuperVars) -> Result<(Var, Var)> {
        let scale = self.rank_scale(tape, vars)?;
        let d = tape.diag(scale)?;
        let a = tape.matmul(vars.w_a, d)?;
        let b = tape.matmul(d, vars.w_b)?;
        Ok((a, b))
    }

    /// `s·(x·W*_A)·W*_B` on the tape.
    pub fn delta(&self, tape: &mut Tape, x: Var, vars: SuperVars) -> Result<Var> {
        let (a, b) = self.superweights(tape, vars)?;
        let h = tape.matmul(x, a)?;
        let h = tape.matmul(h, b)?;
        Ok(tape.scale(h, self.scaling))
    }

    /// Rank with the largest alpha; ties go to the smallest rank.
    pub fn sample_rank(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.alphas.data().iter().enumerate() {
            if a > self.alphas.data()[best] {
                best = i;
            }
        }
        self.space.ranks()[best]
    }

    /// Warm-start adapter from the rank's centered window.
    pub fn extract_adapter(&self, rank: usize) -> Result<LoraAdapter> {
        let (s, e) = self.space.window(rank)?;
        let (in_dim, r_max) = self.w_a.dims2()?;
        let out_dim = self.out_dim();
        let mut a = Vec::with_capacity(in_dim * rank);
        for i in 0..in_dim {
            a.extend_from_slice(&self.w_a.data()[i * r_max + s..i * r_max + e]);
        }
        let b = self.w_b.data()[s * out_dim..e * out_dim].to_vec();
        Ok(LoraAdapter {
            name: self.name.clone(),
            rank,
            scaling: self.scaling,
            w_a: Tensor::new(vec![in_dim, rank], a)?,
            w_b: Tensor::new(vec![rank, out_dim], b)?,
        })
    }

    /// Supernet output at explicit rank probabilities `p` instead of
    /// `softmax(alphas)`. Exact one-hot vectors are not reachable through a
    /// softmax of finite logits, so one-hot evaluation goes through here.
    pub fn forward_with_probabilities(&self, x: &Tensor, base: &Tensor, p: &[f64]) -> Result<Tensor> {
        check_base(base, self.in_dim(), self.out_dim(), &self.name)?;
        if p.len() != self.space.len() {
            return Err(Error::dim(format!(
                "{} probabilities for {} ranks",
                p.len(),
                self.space.len()
            )));
        }
        let scale = Tensor::row_vector(p)?.matmul(&self.space.window_masks())?;
        let (wa, wb) = self.scaled_factors(scale.data())?;
        let delta = x.matmul(&wa)?.matmul(&wb)?.scale(self.scaling);
        x.matmul(base)?.add(&delta)
    }

    fn scaled_factors(&self, scale: &[f64]) -> Result<(Tensor, Tensor)> {
        let (in_dim, r) = self.w_a.dims2()?;
        let out_dim = self.out_dim();
        let mut a = self.w_a.clone();
        for i in 0..in_dim {
            for j in 0..r {
                a.data_mut()[i * r + j] *= scale[j];
            }
        }
        let mut b = self.w_b.clone();
        for j in 0..r {
            for v in &mut b.data_mut()[j * out_dim..(j + 1) * out_dim] {
                *v *= scale[j];
            }
        }
        Ok((a, b))
    }
}

/// `W*_A` evaluated at the module's current alphas.
pub fn superweight_a(module: &SuperLoraModule) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = module.bind(&mut tape, false, false);
    let (a, _) = module.superweights(&mut tape, vars)?;
    Ok(tape.value(a).clone())
}

/// `W*_B` evaluated at the module's current alphas.
pub fn superweight_b(module: &SuperLoraModule) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = module.bind(&mut tape, false, false);
    let (_, b) = module.superweights(&mut tape, vars)?;
    Ok(tape.value(b).clone())
}

/// `x·W_base + s·(x·W*_A)·W*_B` on the tape.
pub fn supernet_forward(
    tape: &mut Tape,
    x: Var,
    base: Var,
    module: &SuperLoraModule,
    vars: SuperVars,
) -> Result<Var> {
    let (in_dim, out_dim) = tape.value(base).dims2()?;
    if in_dim != module.in_dim() || out_dim != module.out_dim() {
        return Err(Error::dim(format!(
            "base weight {in_dim}x{out_dim} does not match module `{}` ({}x{})",
            module.name,
            module.in_dim(),
            module.out_dim()
        )));
    }
    let y = tape.matmul(x, base)?;
    let d = module.delta(tape, x, vars)?;
    tape.add(y, d)
}

/// Chosen rank for one module, with the search evidence behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankChoice {
    /// Final alpha distribution (post-softmax), in search-space order.
    #[serde(default)]
    pub alphas: Vec<f64>,
    pub rank: usize,
    pub search_space: Vec<usize>,
}

/// Module name → chosen rank. Serialized with sorted keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankMap {
    pub modules: BTreeMap<String, RankChoice>,
    pub schema_version: u32,
}

pub const RANK_MAP_SCHEMA_VERSION: u32 = 1;

impl RankMap {
    pub fn new() -> Self {
        Self {
            modules: BTreeMap::new(),
            schema_version: RANK_MAP_SCHEMA_VERSION,
        }
    }

    /// Same rank for every named module.
    pub fn uniform<'a>(names: impl IntoIterator<Item = &'a str>, rank: usize) -> Self {
        let mut map = Self::new();
        for n in names {
            map.insert(
                n,
                RankChoice {
                    alphas: Vec::new(),
                    rank,
                    search_space: vec![rank],
                },
            );
        }
        map
    }

    pub fn from_modules<'a>(modules: impl IntoIterator<Item = &'a SuperLoraModule>) -> Self {
        let mut map = Self::new();
        for m in modules {
            map.insert(
                &m.name,
                RankChoice {
                    alphas: m.probabilities(),
                    rank: m.sample_rank(),
                    search_space: m.space.ranks().to_vec(),
                },
            );
        }
        map
    }

    pub fn insert(&mut self, name: &str, choice: RankChoice) {
        self.modules.insert(name.to_string(), choice);
    }

    pub fn rank(&self, name: &str) -> Option<usize> {
        self.modules.get(name).map(|c| c.rank)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RANK_MAP_SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        for (name, c) in &self.modules {
            if !c.search_space.contains(&c.rank) {
                return Err(Error::validation(
                    format!("modules.{name}.rank"),
                    format!("rank {} not in search space {:?}", c.rank, c.search_space),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("rank map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }
}
