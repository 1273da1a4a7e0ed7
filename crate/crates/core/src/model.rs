//! Small frozen pre-norm transformer whose linear projections host adapters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::supernet::{
    merge_adapter, supernet_forward, AdapterVars, LoraAdapter, RankMap, RankSearchSpace,
    SuperLoraModule, SuperVars,
};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Adapter-eligible projections of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetModule {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "o")]
    Out,
    #[serde(rename = "gate")]
    Gate,
    #[serde(rename = "up")]
    Up,
    #[serde(rename = "down")]
    Down,
}

impl TargetModule {
    pub const ALL: [TargetModule; 7] = [
        TargetModule::Query,
        TargetModule::Key,
        TargetModule::Value,
        TargetModule::Out,
        TargetModule::Gate,
        TargetModule::Up,
        TargetModule::Down,
    ];

    pub fn proj_name(self) -> &'static str {
        match self {
            TargetModule::Query => "q_proj",
            TargetModule::Key => "k_proj",
            TargetModule::Value => "v_proj",
            TargetModule::Out => "o_proj",
            TargetModule::Gate => "gate_proj",
            TargetModule::Up => "up_proj",
            TargetModule::Down => "down_proj",
        }
    }

    pub fn group_label(self) -> &'static str {
        match self {
            TargetModule::Query => "Q",
            TargetModule::Key => "K",
            TargetModule::Value => "V",
            TargetModule::Out => "O",
            TargetModule::Gate => "G",
            TargetModule::Up => "U",
            TargetModule::Down => "D",
        }
    }

    /// Parses a comma-separated list such as `q,k,v` or `Q,G,FC1`.
    pub fn parse_list(s: &str) -> Result<Vec<TargetModule>> {
        let mut out: Vec<TargetModule> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let t: TargetModule = part.parse()?;
            if !out.contains(&t) {
                out.push(t);
            }
        }
        if out.is_empty() {
            return Err(Error::arg("empty target module list"));
        }
        out.sort();
        Ok(out)
    }
}

impl FromStr for TargetModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // FC1/FC2 name the vision MLP; the toy model has only the gated MLP.
        Ok(match s.to_ascii_lowercase().as_str() {
            "q" | "q_proj" => TargetModule::Query,
            "k" | "k_proj" => TargetModule::Key,
            "v" | "v_proj" => TargetModule::Value,
            "o" | "o_proj" => TargetModule::Out,
            "g" | "gate" | "gate_proj" => TargetModule::Gate,
            "u" | "up" | "up_proj" | "fc1" => TargetModule::Up,
            "d" | "down" | "down_proj" | "fc2" => TargetModule::Down,
            other => return Err(Error::arg(format!("unknown target module `{other}`"))),
        })
    }
}

impl fmt::Display for TargetModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.group_label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub count: usize,
    pub input_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub patch: Option<PatchConfig>,
    pub targets: Vec<TargetModule>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            mlp_dim: 128,
            max_seq_len: 64,
            patch: None,
            targets: TargetModule::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::validation(
                "head_dim",
                format!(
                    "{} heads x {} != d_model {}",
                    self.n_heads, self.head_dim, self.d_model
                ),
            ));
        }
        if let Some(p) = self.patch {
            if p.count == 0 || p.input_dim == 0 {
                return Err(Error::validation("patch", "count and input_dim must be positive"));
            }
            if p.count >= self.max_seq_len {
                return Err(Error::validation("patch.count", "prefix leaves no room for text"));
            }
        }
        if self.targets.is_empty() {
            return Err(Error::validation("targets", "at least one target module"));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` of a block projection.
    pub fn proj_dims(&self, t: TargetModule) -> (usize, usize) {
        match t {
            TargetModule::Query | TargetModule::Key | TargetModule::Value | TargetModule::Out => {
                (self.d_model, self.d_model)
            }
            TargetModule::Gate | TargetModule::Up => (self.d_model, self.mlp_dim),
            TargetModule::Down => (self.mlp_dim, self.d_model),
        }
    }

    /// Qualified names of all adapted modules, `layers.{l}.{proj}`.
    pub fn adapted_modules(&self) -> Vec<(String, TargetModule)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for &t in &self.targets {
                out.push((module_name(l, t), t));
            }
        }
        out
    }
}

pub fn module_name(layer: usize, t: TargetModule) -> String {
    format!("layers.{layer}.{}", t.proj_name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    pub fn proj(&self, t: TargetModule) -> &Tensor {
        match t {
            TargetModule::Query => &self.w_q,
            TargetModule::Key => &self.w_k,
            TargetModule::Value => &self.w_v,
            TargetModule::Out => &self.w_o,
            TargetModule::Gate => &self.w_gate,
            TargetModule::Up => &self.w_up,
            TargetModule::Down => &self.w_down,
        }
    }

    pub fn proj_mut(&mut self, t: TargetModule) -> &mut Tensor {
        match t {
            TargetModule::Query => &mut self.w_q,
            TargetModule::Key => &mut self.w_k,
            TargetModule::Value => &mut self.w_v,
            TargetModule::Out => &mut self.w_o,
            TargetModule::Gate => &mut self.w_gate,
            TargetModule::Up => &mut self.w_up,
            TargetModule::Down => &mut self.w_down,
        }
    }
}

/// The frozen base model. Nothing in here is ever updated by training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenTransformer {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    #[serde(default)]
    pub patch_proj: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub head: Tensor,
}

impl FrozenTransformer {
    /// Random initialization from the config's `model-init` stream.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "model-init");
        let d = config.d_model;
        let lin = |i: usize, o: usize, r: &mut rng::StreamRng| {
            Tensor::randn(&[i, o], 1.0 / (i as f64).sqrt(), r)
        };
        let tok_emb = Tensor::randn(&[config.vocab_size, d], 1.0, &mut r);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], 1.0, &mut r);
        let patch_proj = config.patch.map(|p| lin(p.input_dim, d, &mut r));
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: Tensor::ones(&[1, d]),
                ln1_beta: Tensor::zeros(&[1, d]),
                w_q: lin(d, d, &mut r),
                w_k: lin(d, d, &mut r),
                w_v: lin(d, d, &mut r),
                w_o: lin(d, d, &mut r),
                ln2_gamma: Tensor::ones(&[1, d]),
                ln2_beta: Tensor::zeros(&[1, d]),
                w_gate: lin(d, config.mlp_dim, &mut r),
                w_up: lin(d, config.mlp_dim, &mut r),
                w_down: lin(config.mlp_dim, d, &mut r),
            });
        }
        let head = lin(d, config.vocab_size, &mut r);
        Ok(Self {
            tok_emb,
            pos_emb,
            patch_proj,
            layers,
            lnf_gamma: Tensor::ones(&[1, d]),
            lnf_beta: Tensor::zeros(&[1, d]),
            head,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        let per_layer: usize = self.layers.iter().map(|l| {
            l.ln1_gamma.numel() * 4
                + TargetModule::ALL.iter().map(|&t| l.proj(t).numel()).sum::<usize>()
        }).sum();
        self.tok_emb.numel()
            + self.pos_emb.numel()
            + self.patch_proj.as_ref().map_or(0, Tensor::numel)
            + per_layer
            + self.lnf_gamma.numel() * 2
            + self.head.numel()
    }
}

/// An adapter hosted on one projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attachment {
    Super(SuperLoraModule),
    Fixed(LoraAdapter),
}

impl Attachment {
    pub fn trainable_params(&self) -> usize {
        match self {
            Attachment::Super(m) => m.param_count(),
            Attachment::Fixed(a) => a.param_count(),
        }
    }
}

/// Which tensor groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainMode {
    pub weights: bool,
    pub alphas: bool,
}

impl TrainMode {
    pub const FROZEN: TrainMode = TrainMode {
        weights: false,
        alphas: false,
    };
    pub const WEIGHTS: TrainMode = TrainMode {
        weights: true,
        alphas: false,
    };
    pub const ALPHAS: TrainMode = TrainMode {
        weights: false,
        alphas: true,
    };
}

#[derive(Clone, Copy, Debug)]
pub enum BoundAttachment {
    Super(SuperVars),
    Fixed(AdapterVars),
}

struct BoundLayer {
    ln1_gamma: Var,
    ln1_beta: Var,
    proj: [Var; 7],
    ln2_gamma: Var,
    ln2_beta: Var,
}

/// Every tensor of an [`AdaptedModel`] registered on one tape.
pub struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    patch_proj: Option<Var>,
    layers: Vec<BoundLayer>,
    lnf_gamma: Var,
    lnf_beta: Var,
    head: Var,
    pub attachments: BTreeMap<String, BoundAttachment>,
    /// Frozen leaves; tests use these to confirm no gradient reaches them.
    pub frozen: Vec<Var>,
}

fn proj_index(t: TargetModule) -> usize {
    TargetModule::ALL.iter().position(|&x| x == t).expect("listed")
}

/// Frozen base plus per-module adapter attachments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedModel {
    pub base: FrozenTransformer,
    pub attachments: BTreeMap<String, Attachment>,
    /// When false, text positions cannot attend to the patch prefix.
    #[serde(default = "default_true")]
    pub text_sees_prefix: bool,
}

fn default_true() -> bool {
    true
}

impl AdaptedModel {
    pub fn new(base: FrozenTransformer) -> Self {
        Self {
            base,
            attachments: BTreeMap::new(),
            text_sees_prefix: true,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    /// Attaches a fresh supernet module to every target projection. Each
    /// module draws from its own `adapter-init/{name}` stream.
    pub fn attach_supernets(&mut self, space: &RankSearchSpace, lora_alpha: f64, seed: u64) -> Result<()> {
        self.attachments.clear();
        for (name, t) in self.config().adapted_modules() {
            let (i, o) = self.config().proj_dims(t);
            let mut r = rng::stream(seed, &format!("adapter-init/{name}"));
            let m = SuperLoraModule::init(&name, i, o, space.clone(), lora_alpha, &mut r)?;
            self.attachments.insert(name, Attachment::Super(m));
        }
        Ok(())
    }

    /// Attaches freshly initialized fixed-rank adapters following `ranks`.
    pub fn attach_adapters(&mut self, ranks: &RankMap, scaling: f64, seed: u64) -> Result<()> {
        let mut fresh = BTreeMap::new();
        for (name, t) in self.config().adapted_modules() {
            let rank = ranks
                .rank(&name)
                .ok_or_else(|| Error::arg(format!("rank map has no entry for `{name}`")))?;
            let (i, o) = self.config().proj_dims(t);
            let mut r = rng::stream(seed, &format!("adapter-init/{name}"));
            fresh.insert(
                name.clone(),
                Attachment::Fixed(LoraAdapter::init(&name, i, o, rank, scaling, &mut r)?),
            );
        }
        self.attachments = fresh;
        Ok(())
    }

    pub fn supernets(&self) -> impl Iterator<Item = &SuperLoraModule> {
        self.attachments.values().filter_map(|a| match a {
            Attachment::Super(m) => Some(m),
            Attachment::Fixed(_) => None,
        })
    }

    pub fn trainable_params(&self) -> usize {
        self.attachments.values().map(Attachment::trainable_params).sum()
    }

    /// Adapter parameters excluding architecture weights.
    pub fn adapter_params(&self) -> usize {
        self.attachments
            .values()
            .map(|a| match a {
                Attachment::Super(m) => m.w_a.numel() + m.w_b.numel(),
                Attachment::Fixed(a) => a.param_count(),
            })
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape, mode: TrainMode) -> Bound {
        let mut frozen = Vec::new();
        let mut c = |tape: &mut Tape, t: &Tensor| {
            let v = tape.constant(t.clone());
            frozen.push(v);
            v
        };
        let b = &self.base;
        let tok_emb = c(tape, &b.tok_emb);
        let pos_emb = c(tape, &b.pos_emb);
        let patch_proj = b.patch_proj.as_ref().map(|p| c(tape, p));
        let mut layers = Vec::with_capacity(b.layers.len());
        for l in &b.layers {
            layers.push(BoundLayer {
                ln1_gamma: c(tape, &l.ln1_gamma),
                ln1_beta: c(tape, &l.ln1_beta),
                proj: TargetModule::ALL.map(|t| c(tape, l.proj(t))),
                ln2_gamma: c(tape, &l.ln2_gamma),
                ln2_beta: c(tape, &l.ln2_beta),
            });
        }
        let lnf_gamma = c(tape, &b.lnf_gamma);
        let lnf_beta = c(tape, &b.lnf_beta);
        let head = c(tape, &b.head);
        let attachments = self
            .attachments
            .iter()
            .map(|(name, a)| {
                let bound = match a {
                    Attachment::Super(m) => {
                        BoundAttachment::Super(m.bind(tape, mode.weights, mode.alphas))
                    }
                    Attachment::Fixed(ad) => BoundAttachment::Fixed(ad.bind(tape, mode.weights)),
                };
                (name.clone(), bound)
            })
            .collect();
        Bound {
            tok_emb,
            pos_emb,
            patch_proj,
            layers,
            lnf_gamma,
            lnf_beta,
            head,
            attachments,
            frozen,
        }
    }

    /// A projection with whatever adapter is attached to it.
    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, layer: usize, t: TargetModule) -> Result<Var> {
        let base = bound.layers[layer].proj[proj_index(t)];
        let name = module_name(layer, t);
        match (self.attachments.get(&name), bound.attachments.get(&name)) {
            (Some(Attachment::Super(m)), Some(BoundAttachment::Super(v))) => {
                supernet_forward(tape, x, base, m, *v)
            }
            (Some(Attachment::Fixed(a)), Some(BoundAttachment::Fixed(v))) => {
                let y = tape.matmul(x, base)?;
                let d = a.delta(tape, x, *v)?;
                tape.add(y, d)
            }
            (None, None) => tape.matmul(x, base),
            _ => Err(Error::State(format!("binding for `{name}` is stale"))),
        }
    }

    /// Masked multi-head self-attention of block `layer` on normalized input
    /// `x` (`[batch·seq × d]`), followed by the output projection.
    pub fn attention_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        layer: usize,
        layout: AttentionLayout,
    ) -> Result<Var> {
        if layout.seq_len > self.config().max_seq_len {
            return Err(Error::arg(format!(
                "sequence of {} exceeds max_seq_len {}",
                layout.seq_len,
                self.config().max_seq_len
            )));
        }
        let q = self.linear(tape, bound, x, layer, TargetModule::Query)?;
        let k = self.linear(tape, bound, x, layer, TargetModule::Key)?;
        let v = self.linear(tape, bound, x, layer, TargetModule::Value)?;
        let a = tape.attention(q, k, v, layout)?;
        self.linear(tape, bound, a, layer, TargetModule::Out)
    }

    /// Gated MLP, `(SiLU(x·W_G) ⊙ (x·W_U))·W_D`.
    pub fn mlp_forward(&self, tape: &mut Tape, bound: &Bound, x: Var, layer: usize) -> Result<Var> {
        let g = self.linear(tape, bound, x, layer, TargetModule::Gate)?;
        let u = self.linear(tape, bound, x, layer, TargetModule::Up)?;
        let g = tape.silu(g);
        let h = tape.mul(g, u)?;
        self.linear(tape, bound, h, layer, TargetModule::Down)
    }

    /// Logits `[batch·(prefix+text) × vocab]`, one row per position.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let cfg = self.config();
        let b = batch.len();
        let t_len = batch.text_len();
        let p_len = batch.prefix_len();
        let s = p_len + t_len;
        if s > cfg.max_seq_len {
            return Err(Error::arg(format!(
                "sequence of {s} positions exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let ids: Vec<usize> = batch.inputs.iter().flatten().copied().collect();
        if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let text = tape.gather_rows(bound.tok_emb, &ids)?;
        let mut x = match (&batch.patches, bound.patch_proj) {
            (Some(patches), Some(proj)) => {
                let pd = cfg.patch.expect("projection implies config").input_dim;
                let mut flat = Vec::with_capacity(b * p_len * pd);
                for p in patches {
                    if p.shape() != [p_len, pd] {
                        return Err(Error::dim(format!(
                            "patch grid {:?}, expected [{p_len}, {pd}]",
                            p.shape()
                        )));
                    }
                    flat.extend_from_slice(p.data());
                }
                let pv = tape.constant(Tensor::new(vec![b * p_len, pd], flat)?);
                let prefix = tape.matmul(pv, proj)?;
                let all = tape.concat_rows(&[prefix, text])?;
                // interleave to [prefix_0, text_0, prefix_1, text_1, ...]
                let mut order = Vec::with_capacity(b * s);
                for i in 0..b {
                    order.extend((i * p_len)..((i + 1) * p_len));
                    order.extend((b * p_len + i * t_len)..(b * p_len + (i + 1) * t_len));
                }
                tape.gather_rows(all, &order)?
            }
            (None, _) => text,
            (Some(_), None) => {
                return Err(Error::arg("batch carries patches but the model has no patch projection"))
            }
        };
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = tape.gather_rows(bound.pos_emb, &positions)?;
        x = tape.add(x, pos)?;

        let layout = AttentionLayout {
            batch: b,
            seq_len: s,
            heads: cfg.n_heads,
            prefix_len: p_len,
            text_sees_prefix: self.text_sees_prefix,
        };
        for (l, bl) in bound.layers.iter().enumerate() {
            let h = tape.layer_norm(x, bl.ln1_gamma, bl.ln1_beta, LAYER_NORM_EPS)?;
            let a = self.attention_forward(tape, bound, h, l, layout)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bl.ln2_gamma, bl.ln2_beta, LAYER_NORM_EPS)?;
            let m = self.mlp_forward(tape, bound, h, l)?;
            x = tape.add(x, m)?;
        }
        let h = tape.layer_norm(x, bound.lnf_gamma, bound.lnf_beta, LAYER_NORM_EPS)?;
        tape.matmul(h, bound.head)
    }

    /// Masked mean next-token cross-entropy of a batch.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let logits = self.forward(tape, bound, batch)?;
        tape.cross_entropy_masked(logits, &batch.position_targets())
    }

    /// Logits without any gradient tracking.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, TrainMode::FROZEN);
        let out = self.forward(&mut tape, &bound, batch)?;
        Ok(tape.value(out).clone())
    }

    /// `(summed cross-entropy, scored tokens)` over a batch.
    pub fn batch_nll(&self, batch: &Batch) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, TrainMode::FROZEN);
        let loss = self.loss(&mut tape, &bound, batch)?;
        let n = batch.scored_tokens();
        Ok((tape.value(loss).item() * n as f64, n))
    }

    /// Base model with every adapter folded into its projection. Supernet
    /// modules fold in `s·W*_A·W*_B` at their current alphas.
    pub fn merged(&self) -> Result<FrozenTransformer> {
        let mut base = self.base.clone();
        for (name, t) in self.config().adapted_modules() {
            let Some(att) = self.attachments.get(&name) else { continue };
            let layer: usize = name
                .split('.')
                .nth(1)
                .and_then(|s| s.parse().ok())
                .expect("module names are layers.{l}.{proj}");
            let w = base.layers[layer].proj_mut(t);
            *w = match att {
                Attachment::Fixed(a) => merge_adapter(w, a)?,
                Attachment::Super(m) => {
                    let a = crate::supernet::superweight_a(m)?;
                    let b = crate::supernet::superweight_b(m)?;
                    w.add(&a.matmul(&b)?.scale(m.scaling))?
                }
            };
        }
        Ok(base)
    }
}

/// `exp` of the token-level mean cross-entropy over a split.
pub fn eval_perplexity(model: &AdaptedModel, split: &Dataset, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::arg(format!("cannot evaluate the empty {} split", split.split)));
    }
    let batch_size = batch_size.max(1);
    let mut total = 0.0;
    let mut count = 0;
    for chunk in split.examples.chunks(batch_size) {
        let batch = Batch::from_examples(chunk.iter())?;
        let (nll, n) = model.batch_nll(&batch)?;
        total += nll;
        count += n;
    }
    Ok((total / count as f64).exp())
}
