//! Deterministic synthetic tasks and split/batch plumbing.
//!
//! Token ids below [`SEP`] are task symbols (digits for `modsum` and
//! `patchcount`). Every example is a token sequence with a loss mask marking
//! the answer tokens; the model sees `tokens[..n-1]` and predicts
//! `tokens[i+1]` wherever `loss_mask[i+1]` is set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SEP: usize = 60;
/// Fill value for ragged batches; padded positions are never scored.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// `[patch_count × patch_dim]` prefix inputs, if the task is multimodal.
    #[serde(default)]
    pub patches: Option<Tensor>,
}

impl Example {
    /// Answer tokens in order.
    pub fn answer(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.loss_mask)
            .filter_map(|(&t, &m)| m.then_some(t))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Examples at `indices` as one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::from_examples(indices.iter().map(|&i| &self.examples[i]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub eval: Dataset,
}

/// Model-ready batch: inputs and per-position targets, padded to one length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
    pub patches: Option<Vec<Tensor>>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut patches = Vec::new();
        let mut with_patches = None;
        for e in examples {
            if e.tokens.len() < 2 || e.tokens.len() != e.loss_mask.len() {
                return Err(Error::arg(format!(
                    "example needs >= 2 tokens and a matching mask, got {} / {}",
                    e.tokens.len(),
                    e.loss_mask.len()
                )));
            }
            let n = e.tokens.len();
            inputs.push(e.tokens[..n - 1].to_vec());
            targets.push(
                (1..n)
                    .map(|i| e.loss_mask[i].then_some(e.tokens[i]))
                    .collect::<Vec<_>>(),
            );
            match (with_patches, &e.patches) {
                (None, p) => with_patches = Some(p.is_some()),
                (Some(true), Some(_)) | (Some(false), None) => {}
                _ => return Err(Error::arg("batch mixes examples with and without patches")),
            }
            if let Some(p) = &e.patches {
                patches.push(p.clone());
            }
        }
        if inputs.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let width = inputs.iter().map(Vec::len).max().unwrap_or(0);
        for (i, t) in inputs.iter_mut().zip(targets.iter_mut()) {
            i.resize(width, PAD);
            t.resize(width, None);
        }
        let patches = if with_patches == Some(true) {
            let shape = patches[0].shape().to_vec();
            if patches.iter().any(|p| p.shape() != shape.as_slice()) {
                return Err(Error::dim("patch grids differ in shape within a batch"));
            }
            Some(patches)
        } else {
            None
        };
        Ok(Self {
            inputs,
            targets,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn prefix_len(&self) -> usize {
        self.patches.as_ref().map_or(0, |p| p[0].rows())
    }

    /// Targets for every position of the packed sequence, prefix included.
    pub fn position_targets(&self) -> Vec<Option<usize>> {
        let p = self.prefix_len();
        let mut out = Vec::with_capacity(self.len() * (p + self.text_len()));
        for t in &self.targets {
            out.extend(std::iter::repeat(None).take(p));
            out.extend_from_slice(t);
        }
        out
    }

    pub fn scored_tokens(&self) -> usize {
        self.targets.iter().flatten().flatten().count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    /// Echo a random prefix after a separator.
    Copy,
    /// Running sum of the inputs mod `k`.
    Modsum,
    /// Count the set cells of a patch grid shown as a prefix.
    Patchcount,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "modsum" => Ok(TaskKind::Modsum),
            "patchcount" => Ok(TaskKind::Patchcount),
            other => Err(Error::arg(format!(
                "unknown task `{other}` (expected copy, modsum or patchcount)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Modsum => "modsum",
            TaskKind::Patchcount => "patchcount",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    /// Symbols drawn for `copy`.
    pub alphabet: usize,
    pub copy_len: usize,
    pub modulus: usize,
    pub modsum_len: usize,
    pub grid_cells: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            alphabet: 8,
            copy_len: 4,
            modulus: 5,
            modsum_len: 6,
            grid_cells: 9,
        }
    }
}

impl TaskParams {
    /// Patch input width for `patchcount`: set flag plus one-hot cell index.
    pub fn patch_dim(&self) -> usize {
        self.grid_cells + 1
    }

    fn validate(&self) -> Result<()> {
        if self.alphabet == 0 || self.alphabet > SEP {
            return Err(Error::validation("alphabet", format!("must be in 1..={SEP}")));
        }
        if self.modulus < 2 || self.modulus > SEP {
            return Err(Error::validation("modulus", format!("must be in 2..={SEP}")));
        }
        if self.grid_cells == 0 || self.grid_cells >= SEP {
            return Err(Error::validation("grid_cells", format!("must be in 1..{SEP}")));
        }
        if self.copy_len == 0 || self.modsum_len == 0 {
            return Err(Error::validation("copy_len/modsum_len", "must be positive"));
        }
        Ok(())
    }
}

/// `prefix SEP prefix`, answer on the echoed half.
pub fn copy_example(prefix: &[usize]) -> Example {
    let mut tokens = prefix.to_vec();
    tokens.push(SEP);
    tokens.extend_from_slice(prefix);
    let mut loss_mask = vec![false; prefix.len() + 1];
    loss_mask.extend(std::iter::repeat(true).take(prefix.len()));
    Example {
        tokens,
        loss_mask,
        patches: None,
    }
}

/// `x_1..x_n SEP s_1..s_n` with `s_i = (x_1 + … + x_i) mod k`.
pub fn modsum_example(values: &[usize], k: usize) -> Example {
    let mut tokens = values.to_vec();
    tokens.push(SEP);
    let mut acc = 0;
    for &v in values {
        acc = (acc + v) % k;
        tokens.push(acc);
    }
    let mut loss_mask = vec![false; values.len() + 1];
    loss_mask.extend(std::iter::repeat(true).take(values.len()));
    Example {
        tokens,
        loss_mask,
        patches: None,
    }
}

/// Patch prefix encoding `grid`, then `SEP count`.
pub fn patchcount_example(grid: &[bool]) -> Example {
    let cells = grid.len();
    let mut patches = Tensor::zeros(&[cells, cells + 1]);
    for (i, &set) in grid.iter().enumerate() {
        patches.set(i, 0, if set { 1.0 } else { 0.0 });
        patches.set(i, i + 1, 1.0);
    }
    let count = grid.iter().filter(|&&g| g).count();
    Example {
        tokens: vec![SEP, count],
        loss_mask: vec![false, true],
        patches: Some(patches),
    }
}

/// Where a run's examples come from: a generated task or a token corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: TaskKind,
    pub size: usize,
    pub params: TaskParams,
    /// Newline-delimited token ids; replaces the generated task when set.
    pub corpus: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Copy,
            size: 120,
            params: TaskParams::default(),
            corpus: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, seed: u64) -> Result<Splits> {
        match &self.corpus {
            Some(path) => split_train_val(load_corpus(path)?, DEFAULT_RATIOS, seed),
            None => gen_task_with(self.task, self.size, seed, &self.params),
        }
    }

    /// Patch prefix shape the task needs, if any.
    pub fn patch_shape(&self) -> Option<(usize, usize)> {
        match (self.task, &self.corpus) {
            (TaskKind::Patchcount, None) => Some((self.params.grid_cells, self.params.patch_dim())),
            _ => None,
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// `size` examples of `kind` with default parameters, split 80/10/10.
pub fn gen_task(kind: TaskKind, size: usize, seed: u64) -> Result<Splits> {
    gen_task_with(kind, size, seed, &TaskParams::default())
}

pub fn gen_task_with(kind: TaskKind, size: usize, seed: u64, params: &TaskParams) -> Result<Splits> {
    if size < 30 {
        return Err(Error::arg(format!("task size {size} is below the minimum of 30")));
    }
    params.validate()?;
    let mut r = rng::stream(seed, &format!("data/{kind}"));
    let examples = (0..size)
        .map(|_| match kind {
            TaskKind::Copy => {
                let p: Vec<usize> = (0..params.copy_len)
                    .map(|_| r.gen_range(0..params.alphabet))
                    .collect();
                copy_example(&p)
            }
            TaskKind::Modsum => {
                let v: Vec<usize> = (0..params.modsum_len)
                    .map(|_| r.gen_range(0..params.modulus))
                    .collect();
                modsum_example(&v, params.modulus)
            }
            TaskKind::Patchcount => {
                let g: Vec<bool> = (0..params.grid_cells).map(|_| r.gen_bool(0.5)).collect();
                patchcount_example(&g)
            }
        })
        .collect();
    split_train_val(examples, DEFAULT_RATIOS, seed)
}

/// Shuffles deterministically and cuts into train/val/eval by `ratios`.
pub fn split_train_val(examples: Vec<Example>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = examples.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_eval = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_eval == 0 {
        return Err(Error::arg(format!(
            "ratios {ratios:?} over {n} examples leave an empty split ({n_train}/{n_val}/{n_eval})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Example> {
        idx.iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let eval = take(&order[n_train + n_val..]);
    let mk = |split, examples| Dataset {
        split,
        seed,
        examples,
    };
    Ok(Splits {
        train: mk(Split::Train, train),
        val: mk(Split::Val, val),
        eval: mk(Split::Eval, eval),
    })
}

/// Index batches over a split, shuffled by `(seed, epoch)`. The last batch
/// may be short.
pub fn batch_iter(split: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng::indexed_stream(seed, "batching", epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Reads newline-delimited token-id sequences. Each non-empty line is one
/// example scored on every token after the first.
pub fn load_corpus(path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("line {}: bad token id `{t}`", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() < 2 {
            return Err(Error::Parse(format!("line {}: need at least 2 tokens", lineno + 1)));
        }
        let mut loss_mask = vec![true; tokens.len()];
        loss_mask[0] = false;
        out.push(Example {
            tokens,
            loss_mask,
            patches: None,
        });
    }
    Ok(out)
}
