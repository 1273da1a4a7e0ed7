//! The `lora-nas` command line.
//!
//! Machine-readable artifacts go to files under the output directory
//! (`--out-dir`, else `$LORA_NAS_OUT_DIR`, else `./lora-nas-out`); a short
//! human summary goes to stdout and errors to stderr. Exit status is 0 on
//! success, 1 on a usage error and 2 on a runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::accounting::{
    format_millions, format_ratio, load_descriptor, lora_param_count, parse_count, ratio_of_totals, Group, Ranks,
};
use crate::checkpoint::Checkpoint;
use crate::data::{DataConfig, Splits, TaskKind};
use crate::error::{Error, Result};
use crate::model::{eval_perplexity, AdaptedModel, Attachment, FrozenTransformer, ModelConfig, PatchConfig, TargetModule};
use crate::optim::OptimizerKind;
use crate::report::{export_metrics_csv, export_rank_map, load_rank_map, RunManifest, OUT_DIR_ENV};
use crate::search::{prepare_search, resume_search, run_baseline, run_finetune, SearchConfig, SearchState};
use crate::supernet::{RankChoice, RankMap, RankSearchSpace};

/// Everything a training run depends on. Written verbatim into the run
/// manifest; passing that file back through `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub search: SearchConfig,
    pub text_sees_prefix: bool,
    pub wall_clock_metrics: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            search: SearchConfig::default(),
            text_sees_prefix: true,
            wall_clock_metrics: false,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the `config` member of a run manifest.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Propagates the run seed and task shape into the sub-configs.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.search.seed = self.seed;
        if let Some((count, input_dim)) = self.data.patch_shape() {
            self.model.patch.get_or_insert(PatchConfig { count, input_dim });
        }
        self.model.validate()?;
        self.search.validate()?;
        Ok(self)
    }

    pub fn splits(&self) -> Result<Splits> {
        self.data.load(self.seed)
    }

    pub fn base_model(&self) -> Result<AdaptedModel> {
        let mut m = AdaptedModel::new(FrozenTransformer::init(self.model.clone())?);
        m.text_sees_prefix = self.text_sees_prefix;
        Ok(m)
    }
}

#[derive(Parser, Debug)]
#[command(name = "lora-nas", version, about = "Rank search for LoRA adapters and LoRA parameter accounting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a rank supernet, pick one rank per module, then fine-tune.
    Search(SearchArgs),
    /// Fine-tune fixed-rank adapters from a rank map or a uniform rank.
    Finetune(FinetuneArgs),
    /// Perplexity of a checkpoint on one data split.
    Eval(EvalArgs),
    /// Count LoRA parameters for an architecture descriptor.
    CountParams(CountArgs),
    /// Write the rank map and/or metrics stored in a checkpoint.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptKind {
    fn kind(self) -> OptimizerKind {
        match self {
            OptKind::Sgd => OptimizerKind::Sgd,
            OptKind::Momentum => OptimizerKind::Momentum { beta: 0.9 },
            OptKind::Adam => OptimizerKind::ADAM,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// JSON run config (or a run manifest); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// copy, modsum or patchcount.
    #[arg(long)]
    pub task: Option<String>,
    /// Number of generated examples before the 80/10/10 split.
    #[arg(long)]
    pub size: Option<usize>,
    /// Newline-delimited token-id file used instead of a generated task.
    /// Each line is one sequence, scored on every token after the first.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated candidate ranks, e.g. `4,8,16`.
    #[arg(long)]
    pub space: Option<String>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_lr: Option<f64>,
    #[arg(long)]
    pub alpha_lr: Option<f64>,
    #[arg(long, value_enum)]
    pub weight_optimizer: Option<OptKind>,
    #[arg(long, value_enum)]
    pub alpha_optimizer: Option<OptKind>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Re-initialize adapters after the search instead of warm-starting.
    #[arg(long)]
    pub reinit: bool,
    /// Adapted projections, e.g. `q,k,v,o,gate,up,down`.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Block text positions from attending to the patch prefix.
    #[arg(long)]
    pub no_prefix_attention: bool,
    /// Add a wall-clock column to metrics.csv.
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = &self.task {
            c.data.task = t.parse::<TaskKind>()?;
        }
        if let Some(n) = self.size {
            c.data.size = n;
        }
        if let Some(p) = &self.corpus {
            c.data.corpus = Some(p.clone());
        }
        if let Some(s) = &self.space {
            c.search.space = parse_space(s)?;
        }
        if let Some(n) = self.search_epochs {
            c.search.search_epochs = n;
        }
        if let Some(n) = self.finetune_epochs {
            c.search.finetune_epochs = n;
        }
        if let Some(n) = self.batch_size {
            c.search.batch_size = n;
        }
        if let Some(k) = self.weight_optimizer {
            c.search.weight_optimizer.kind = k.kind();
        }
        if let Some(k) = self.alpha_optimizer {
            c.search.alpha_optimizer.kind = k.kind();
        }
        if let Some(lr) = self.weight_lr {
            c.search.weight_optimizer.lr = lr;
        }
        if let Some(lr) = self.alpha_lr {
            c.search.alpha_optimizer.lr = lr;
        }
        if self.grad_clip.is_some() {
            c.search.grad_clip = self.grad_clip;
        }
        if self.lora_alpha.is_some() {
            c.search.lora_alpha = self.lora_alpha;
        }
        if self.reinit {
            c.search.reinit_after_search = true;
        }
        if let Some(t) = &self.targets {
            c.model.targets = TargetModule::parse_list(t)?;
        }
        if let Some(n) = self.layers {
            c.model.n_layers = n;
        }
        if self.d_model.is_some() || self.heads.is_some() {
            let d = self.d_model.unwrap_or(c.model.d_model);
            let h = self.heads.unwrap_or(c.model.n_heads);
            if h == 0 || d % h != 0 {
                return Err(Error::validation("d_model", format!("{d} is not divisible by {h} heads")));
            }
            c.model.d_model = d;
            c.model.n_heads = h;
            c.model.head_dim = d / h;
        }
        if self.no_prefix_attention {
            c.text_sees_prefix = false;
        }
        if self.wall_clock {
            c.wall_clock_metrics = true;
        }
        c.resolve()
    }
}

fn parse_space(s: &str) -> Result<RankSearchSpace> {
    let ranks = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|_| Error::arg(format!("bad rank `{p}` in --space"))))
        .collect::<Result<Vec<_>>>()?;
    RankSearchSpace::new(ranks)
}

/// `--out-dir`, else the environment variable, else `./lora-nas-out`.
pub fn out_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lora-nas-out"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Stop after the search; skip fine-tuning.
    #[arg(long)]
    pub no_finetune: bool,
    /// Continue from a search checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Rank map produced by `search`.
    #[arg(long, conflicts_with = "uniform_rank", required_unless_present = "uniform_rank")]
    pub rank_map: Option<PathBuf>,
    /// Plain LoRA at one rank for every module.
    #[arg(long)]
    pub uniform_rank: Option<usize>,
    /// Search checkpoint to warm-start the adapters from.
    #[arg(long, requires = "rank_map")]
    pub from: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Eval,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitArg,
    /// Evaluate on this run config's data instead of the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Architecture descriptor JSON.
    #[arg(long)]
    pub descriptor: PathBuf,
    #[arg(long, conflicts_with = "rank_map", required_unless_present = "rank_map")]
    pub rank: Option<usize>,
    #[arg(long)]
    pub rank_map: Option<PathBuf>,
    /// Comma-separated groups (Q,K,V,O,G,U,D,FC1,FC2) or `all`.
    #[arg(long, default_value = "all")]
    pub groups: String,
    /// Second total to compare against: a count such as `103.3M`, or a rank map file.
    #[arg(long)]
    pub ratio_against: Option<String>,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "metrics")]
    pub rank_map: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub wall_clock: bool,
}

/// Parses `argv` (program name first) and runs the command, writing the
/// summary to `out` and diagnostics to `err`. Returns the exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Search(a) => cmd_search(a, out),
        Command::Finetune(a) => cmd_finetune(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::CountParams(a) => cmd_count(a, out),
        Command::Export(a) => cmd_export(a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

fn rank_histogram(map: &RankMap) -> String {
    let mut h: BTreeMap<usize, usize> = BTreeMap::new();
    for c in map.modules.values() {
        *h.entry(c.rank).or_default() += 1;
    }
    h.iter().map(|(r, n)| format!("r{r}x{n}")).collect::<Vec<_>>().join(" ")
}

fn cmd_search(a: SearchArgs, out: &mut dyn Write) -> Result<()> {
    let (config, mut model, state) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let progress = ck
                .search
                .ok_or_else(|| Error::State(format!("{} holds no search progress", path.display())))?;
            let mut config = RunConfig {
                seed: progress.config.seed,
                search: progress.config,
                model: ck.model.config().clone(),
                text_sees_prefix: ck.model.text_sees_prefix,
                ..a.run.resolve()?
            };
            if let Some(d) = ck.data {
                config.data = d;
            }
            (config, ck.model, progress.state)
        }
        None => {
            let config = a.run.resolve()?;
            let mut model = config.base_model()?;
            prepare_search(&mut model, &config.search)?;
            let state = SearchState::new(&config.search);
            (config, model, state)
        }
    };
    let dir = out_dir(a.run.out_dir.as_deref());
    ensure_dir(&dir)?;
    let mut manifest = RunManifest::begin("search", serde_json::to_value(&config).expect("config serializes"), config.seed);
    let splits = config.splits()?;
    let abort = dir.join("search-abort.ckpt.json");
    let (map, state) = resume_search(&mut model, &splits, &config.search, state, Some(&abort))?;

    let map_path = dir.join("rank_map.json");
    export_rank_map(&map, &map_path)?;
    let search_ck = dir.join("search.ckpt.json");
    Checkpoint::new(model.clone())
        .with_search(state.clone(), config.search.clone())
        .with_data(config.data.clone(), config.seed)
        .with_metrics(state.metrics.clone())
        .save(&search_ck)?;
    manifest.artifacts.extend([map_path, search_ck]);
    let mut metrics = state.metrics.clone();
    say(out, format!("searched ranks: {}", rank_histogram(&map)));

    if !a.no_finetune && config.search.finetune_epochs > 0 {
        let report = run_finetune(&mut model, &map, &splits, &config.search)?;
        metrics.extend(report.metrics);
        let ck = dir.join("model.ckpt.json");
        Checkpoint::new(model)
            .with_data(config.data.clone(), config.seed)
            .with_metrics(metrics.clone())
            .save(&ck)?;
        manifest.artifacts.push(ck);
        say(out, format!("adapter params: {}", report.adapter_params));
        say(out, format!("eval perplexity: {:.6}", report.eval_perplexity));
    } else if let Some(last) = metrics.last() {
        say(out, format!("supernet eval perplexity: {:.6}", last.eval_perplexity));
    }

    let csv = dir.join("metrics.csv");
    export_metrics_csv(&metrics, &csv, config.wall_clock_metrics)?;
    manifest.artifacts.push(csv);
    finish_manifest(manifest, &metrics, &dir, out)
}

fn finish_manifest(
    mut manifest: RunManifest,
    metrics: &[crate::search::EpochMetrics],
    dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    manifest.epoch_seconds = metrics.iter().map(|m| m.wall_seconds).collect();
    manifest.finish();
    let path = dir.join("manifest.json");
    manifest.artifacts.push(path.clone());
    manifest.save(&path)?;
    say(out, format!("artifacts in {}", dir.display()));
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.run.resolve()?;
    let dir = out_dir(a.run.out_dir.as_deref());
    ensure_dir(&dir)?;
    let mut manifest = RunManifest::begin("finetune", serde_json::to_value(&config).expect("config serializes"), config.seed);
    let splits = config.splits()?;
    let (model, report) = match (&a.rank_map, a.uniform_rank) {
        (Some(map_path), _) => {
            let map = load_rank_map(map_path)?;
            let mut model = match &a.from {
                Some(ck) => Checkpoint::load(ck)?.model,
                None => config.base_model()?,
            };
            let report = run_finetune(&mut model, &map, &splits, &config.search)?;
            (model, report)
        }
        (None, Some(rank)) => {
            let mut model = config.base_model()?;
            let report = run_baseline(&mut model, rank, &splits, &config.search)?;
            (model, report)
        }
        (None, None) => unreachable!("clap requires one of --rank-map/--uniform-rank"),
    };
    let ck = dir.join("model.ckpt.json");
    Checkpoint::new(model)
        .with_data(config.data.clone(), config.seed)
        .with_metrics(report.metrics.clone())
        .save(&ck)?;
    manifest.artifacts.push(ck);
    if !report.metrics.is_empty() {
        let csv = dir.join("metrics.csv");
        export_metrics_csv(&report.metrics, &csv, config.wall_clock_metrics)?;
        manifest.artifacts.push(csv);
    }
    say(out, format!("adapter params: {}", report.adapter_params));
    say(out, format!("eval perplexity: {:.6}", report.eval_perplexity));
    finish_manifest(manifest, &report.metrics, &dir, out)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (data, seed) = match &a.config {
        Some(p) => {
            let c = RunConfig::from_file(p)?;
            (c.data, c.seed)
        }
        None => match ck.data.clone() {
            Some(d) => (d, ck.seed),
            None => {
                return Err(Error::arg(
                    "checkpoint records no data source; pass --config",
                ))
            }
        },
    };
    let splits = data.load(seed)?;
    let split = match a.split {
        SplitArg::Train => &splits.train,
        SplitArg::Val => &splits.val,
        SplitArg::Eval => &splits.eval,
    };
    let ppl = eval_perplexity(&ck.model, split, a.batch_size)?;
    say(out, format!("perplexity: {ppl:.6}"));
    Ok(())
}

fn cmd_count(a: CountArgs, out: &mut dyn Write) -> Result<()> {
    let descriptor = load_descriptor(&a.descriptor)?;
    let groups = Group::parse_list(&a.groups)?;
    let map = a.rank_map.as_deref().map(load_rank_map).transpose()?;
    let ranks = match (&map, a.rank) {
        (Some(m), _) => Ranks::Map(m),
        (None, Some(r)) => Ranks::Uniform(r),
        (None, None) => unreachable!("clap requires one of --rank/--rank-map"),
    };
    let mut report = lora_param_count(&descriptor, ranks, Some(&groups))?;
    if let Some(against) = &a.ratio_against {
        let other = if Path::new(against).is_file() {
            let m = load_rank_map(Path::new(against))?;
            lora_param_count(&descriptor, Ranks::Map(&m), Some(&groups))?.total
        } else {
            parse_count(against)?
        };
        report.ratio_against = Some(ratio_of_totals(report.total, other)?);
    }
    say(out, format!("model: {}", report.model_name));
    say(out, format!("total {}", report.summary()));
    for (g, n) in &report.groups {
        say(out, format!("  {g:<4}{}", format_millions(*n)));
    }
    for (t, n) in &report.towers {
        say(out, format!("  {t:<16}{}", format_millions(*n)));
    }
    if let Some(r) = report.ratio_against {
        say(out, format!("ratio {}x", format_ratio(r)));
    }
    if let Some(path) = &a.out {
        crate::report::write_atomic(path, report.to_json().as_bytes())?;
    }
    Ok(())
}

/// Rank map of a checkpoint: sampled from its supernets, or read off its
/// fixed adapters.
pub fn checkpoint_rank_map(model: &AdaptedModel) -> Result<RankMap> {
    if model.attachments.is_empty() {
        return Err(Error::State("checkpoint carries no adapters".into()));
    }
    let mut map = RankMap::new();
    for (name, att) in &model.attachments {
        let choice = match att {
            Attachment::Super(m) => RankChoice {
                alphas: m.probabilities(),
                rank: m.sample_rank(),
                search_space: m.space.ranks().to_vec(),
            },
            Attachment::Fixed(a) => RankChoice {
                alphas: Vec::new(),
                rank: a.rank,
                search_space: vec![a.rank],
            },
        };
        map.insert(name, choice);
    }
    Ok(map)
}

fn cmd_export(a: ExportArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(p) = &a.rank_map {
        let map = checkpoint_rank_map(&ck.model)?;
        export_rank_map(&map, p)?;
        say(out, format!("rank map ({}) -> {}", rank_histogram(&map), p.display()));
    }
    if let Some(p) = &a.metrics {
        export_metrics_csv(&ck.metrics, p, a.wall_clock)?;
        say(out, format!("{} metric rows -> {}", ck.metrics.len(), p.display()));
    }
    Ok(())
}
