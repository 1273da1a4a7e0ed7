//! LoRA parameter counting over architecture descriptors.
//!
//! A rank-`r` adapter on an `in × out` projection trains `r·(in + out)`
//! parameters. Descriptors list every adaptable projection with its tower
//! and group, so counts can be filtered and subtotaled either way.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrozenTransformer, TargetModule};
use crate::supernet::RankMap;

pub const DESCRIPTOR_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tower {
    VisionLocal,
    VisionGlobal,
    LanguageSelf,
    LanguageCross,
}

impl Tower {
    pub const ALL: [Tower; 4] = [
        Tower::VisionLocal,
        Tower::VisionGlobal,
        Tower::LanguageSelf,
        Tower::LanguageCross,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tower::VisionLocal => "vision-local",
            Tower::VisionGlobal => "vision-global",
            Tower::LanguageSelf => "language-self",
            Tower::LanguageCross => "language-cross",
        }
    }
}

impl fmt::Display for Tower {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Group {
    Q,
    K,
    V,
    O,
    G,
    U,
    D,
    Fc1,
    Fc2,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Q,
        Group::K,
        Group::V,
        Group::O,
        Group::G,
        Group::U,
        Group::D,
        Group::Fc1,
        Group::Fc2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Q => "Q",
            Group::K => "K",
            Group::V => "V",
            Group::O => "O",
            Group::G => "G",
            Group::U => "U",
            Group::D => "D",
            Group::Fc1 => "FC1",
            Group::Fc2 => "FC2",
        }
    }

    /// Comma-separated labels, case-insensitive; `all` selects every group.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Group>> {
        let mut out = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("all") {
                out.extend(Group::ALL);
            } else {
                out.insert(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::arg("empty group list"));
        }
        Ok(out)
    }
}

impl From<TargetModule> for Group {
    fn from(t: TargetModule) -> Self {
        match t {
            TargetModule::Query => Group::Q,
            TargetModule::Key => Group::K,
            TargetModule::Value => Group::V,
            TargetModule::Out => Group::O,
            TargetModule::Gate => Group::G,
            TargetModule::Up => Group::U,
            TargetModule::Down => Group::D,
        }
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "q" | "q_proj" => Group::Q,
            "k" | "k_proj" => Group::K,
            "v" | "v_proj" => Group::V,
            "o" | "o_proj" => Group::O,
            "g" | "gate" | "gate_proj" => Group::G,
            "u" | "up" | "up_proj" => Group::U,
            "d" | "down" | "down_proj" => Group::D,
            "fc1" => Group::Fc1,
            "fc2" => Group::Fc2,
            other => return Err(Error::arg(format!("unknown adapter group `{other}`"))),
        })
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub tower: Tower,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub schema_version: u32,
    pub model_name: String,
    pub total_base_params: u64,
    pub modules: Vec<ModuleSpec>,
}

impl ArchitectureDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DESCRIPTOR_SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("unsupported descriptor version {}", self.schema_version),
            ));
        }
        if self.total_base_params == 0 {
            return Err(Error::validation("total_base_params", "must be positive"));
        }
        if self.modules.is_empty() {
            return Err(Error::validation("modules", "module list is empty"));
        }
        let mut seen = HashSet::new();
        for (i, m) in self.modules.iter().enumerate() {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::validation(
                    format!("modules[{i}].name"),
                    format!("duplicate module name `{}`", m.name),
                ));
            }
            if m.in_dim == 0 || m.out_dim == 0 {
                return Err(Error::validation(format!("modules[{i}]"), "dims must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("descriptor serializes");
        s.push('\n');
        s
    }

    pub fn towers(&self) -> BTreeSet<Tower> {
        self.modules.iter().map(|m| m.tower).collect()
    }

    /// Descriptor for the adapted projections of a toy model.
    pub fn for_model(model: &FrozenTransformer) -> Self {
        let cfg = &model.config;
        let modules = cfg
            .adapted_modules()
            .into_iter()
            .map(|(name, t)| {
                let (in_dim, out_dim) = cfg.proj_dims(t);
                ModuleSpec {
                    name,
                    in_dim,
                    out_dim,
                    tower: Tower::LanguageSelf,
                    group: t.into(),
                }
            })
            .collect();
        Self {
            schema_version: DESCRIPTOR_SCHEMA_VERSION,
            model_name: "toy-transformer".into(),
            total_base_params: model.param_count() as u64,
            modules,
        }
    }
}

pub fn load_descriptor(path: &Path) -> Result<ArchitectureDescriptor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ArchitectureDescriptor::from_json(&text)
}

/// Language-model layers that carry cross-attention instead of self-attention.
pub const LLAMA32_11B_CROSS_LAYERS: [usize; 8] = [3, 8, 13, 18, 23, 28, 33, 38];

/// Enumerates every q/k/v/o/gate/up/down/fc1/fc2 linear layer of
/// Llama-3.2-11B-Vision(-Instruct) from its published configuration.
pub fn llama32_11b_vision() -> ArchitectureDescriptor {
    const HIDDEN: usize = 4096;
    const KV: usize = 8 * 128;
    const FFN: usize = 14336;
    const V_HIDDEN: usize = 1280;
    const V_FFN: usize = 5120;
    let mut modules = Vec::new();
    let mut push = |name: String, in_dim, out_dim, tower, group| {
        modules.push(ModuleSpec {
            name,
            in_dim,
            out_dim,
            tower,
            group,
        })
    };

    for (prefix, layers, tower) in [
        ("vision_model.transformer", 32, Tower::VisionLocal),
        ("vision_model.global_transformer", 8, Tower::VisionGlobal),
    ] {
        for l in 0..layers {
            let p = format!("{prefix}.layers.{l}");
            for (proj, group) in [("q_proj", Group::Q), ("k_proj", Group::K), ("v_proj", Group::V), ("o_proj", Group::O)] {
                push(format!("{p}.self_attn.{proj}"), V_HIDDEN, V_HIDDEN, tower, group);
            }
            push(format!("{p}.mlp.fc1"), V_HIDDEN, V_FFN, tower, Group::Fc1);
            push(format!("{p}.mlp.fc2"), V_FFN, V_HIDDEN, tower, Group::Fc2);
        }
    }

    for l in 0..40 {
        let p = format!("language_model.model.layers.{l}");
        let (attn, tower) = if LLAMA32_11B_CROSS_LAYERS.contains(&l) {
            ("cross_attn", Tower::LanguageCross)
        } else {
            ("self_attn", Tower::LanguageSelf)
        };
        push(format!("{p}.{attn}.q_proj"), HIDDEN, HIDDEN, tower, Group::Q);
        push(format!("{p}.{attn}.k_proj"), HIDDEN, KV, tower, Group::K);
        push(format!("{p}.{attn}.v_proj"), HIDDEN, KV, tower, Group::V);
        push(format!("{p}.{attn}.o_proj"), HIDDEN, HIDDEN, tower, Group::O);
        push(format!("{p}.mlp.gate_proj"), HIDDEN, FFN, tower, Group::G);
        push(format!("{p}.mlp.up_proj"), HIDDEN, FFN, tower, Group::U);
        push(format!("{p}.mlp.down_proj"), FFN, HIDDEN, tower, Group::D);
    }

    ArchitectureDescriptor {
        schema_version: DESCRIPTOR_SCHEMA_VERSION,
        model_name: "meta-llama/Llama-3.2-11B-Vision-Instruct".into(),
        total_base_params: 10_670_220_835,
        modules,
    }
}

/// Where each module's rank comes from.
#[derive(Clone, Copy, Debug)]
pub enum Ranks<'a> {
    Uniform(usize),
    Map(&'a RankMap),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub name: String,
    pub tower: Tower,
    pub group: Group,
    pub rank: usize,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub model_name: String,
    pub modules: Vec<ModuleCount>,
    pub groups: BTreeMap<Group, u64>,
    pub towers: BTreeMap<Tower, u64>,
    pub total: u64,
    pub base_params: u64,
    pub fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_against: Option<f64>,
}

impl CountReport {
    /// Table-style summary, e.g. `268.7M (2.5%)`.
    pub fn summary(&self) -> String {
        format!("{} ({:.1}%)", format_millions(self.total), self.fraction * 100.0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Counts `r·(in + out)` per module for the modules whose group is in
/// `groups` (all modules when `None`).
pub fn lora_param_count(
    descriptor: &ArchitectureDescriptor,
    ranks: Ranks<'_>,
    groups: Option<&BTreeSet<Group>>,
) -> Result<CountReport> {
    descriptor.validate()?;
    let selected: Vec<&ModuleSpec> = descriptor
        .modules
        .iter()
        .filter(|m| groups.map_or(true, |g| g.contains(&m.group)))
        .collect();
    let mut missing = Vec::new();
    let mut modules = Vec::with_capacity(selected.len());
    for m in selected {
        let rank = match ranks {
            Ranks::Uniform(r) => r,
            Ranks::Map(map) => match map.rank(&m.name) {
                Some(r) => r,
                None => {
                    missing.push(m.name.clone());
                    continue;
                }
            },
        };
        if rank == 0 {
            return Err(Error::arg(format!("rank 0 for `{}`; ranks must be >= 1", m.name)));
        }
        modules.push(ModuleCount {
            name: m.name.clone(),
            tower: m.tower,
            group: m.group,
            rank,
            count: (rank * (m.in_dim + m.out_dim)) as u64,
        });
    }
    if !missing.is_empty() {
        return Err(Error::arg(format!(
            "rank map is missing {} module(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut group_totals = BTreeMap::new();
    let mut tower_totals = BTreeMap::new();
    for m in &modules {
        *group_totals.entry(m.group).or_insert(0) += m.count;
        *tower_totals.entry(m.tower).or_insert(0) += m.count;
    }
    let total = modules.iter().map(|m| m.count).sum::<u64>();
    Ok(CountReport {
        model_name: descriptor.model_name.clone(),
        modules,
        groups: group_totals,
        towers: tower_totals,
        total,
        base_params: descriptor.total_base_params,
        fraction: total as f64 / descriptor.total_base_params as f64,
        ratio_against: None,
    })
}

/// `a / b` over raw parameter totals.
pub fn ratio_of_totals(a: u64, b: u64) -> Result<f64> {
    if b == 0 {
        return Err(Error::arg("compression ratio against a zero total"));
    }
    Ok(a as f64 / b as f64)
}

pub fn compression_ratio(a: &CountReport, b: &CountReport) -> Result<f64> {
    ratio_of_totals(a.total, b.total)
}

pub fn format_ratio(r: f64) -> String {
    format!("{r:.1}")
}

/// `268_697_600` → `268.7M`.
pub fn format_millions(n: u64) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

/// Parses `103300000`, `103.3M`, `850K` or `1.2B`.
pub fn parse_count(s: &str) -> Result<u64> {
    let t = s.trim();
    let (num, mult) = match t.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&t[..t.len() - 1], 1e3),
        Some('M') => (&t[..t.len() - 1], 1e6),
        Some('B') => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    let v: f64 = num
        .replace('_', "")
        .parse()
        .map_err(|_| Error::arg(format!("cannot parse parameter count `{s}`")))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::arg(format!("invalid parameter count `{s}`")));
    }
    Ok((v * mult).round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(in_dim: usize, out_dim: usize) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            schema_version: 1,
            model_name: "one".into(),
            total_base_params: 1_000_000,
            modules: vec![ModuleSpec {
                name: "m".into(),
                in_dim,
                out_dim,
                tower: Tower::LanguageSelf,
                group: Group::Q,
            }],
        }
    }

    #[test]
    fn square_module_rank_64() {
        let r = lora_param_count(&single(4096, 4096), Ranks::Uniform(64), None).unwrap();
        assert_eq!(r.total, 524_288);
    }

    #[test]
    fn rank_one_and_zero() {
        assert_eq!(lora_param_count(&single(2, 3), Ranks::Uniform(1), None).unwrap().total, 5);
        assert!(matches!(
            lora_param_count(&single(2, 3), Ranks::Uniform(0), None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn table_totals_exact() {
        let d = llama32_11b_vision();
        d.validate().unwrap();
        assert_eq!(d.modules.len(), 520);
        let count = |g: &str| {
            lora_param_count(&d, Ranks::Uniform(64), Some(&Group::parse_list(g).unwrap()))
                .unwrap()
        };
        assert_eq!(count("q,k").total, 47_185_920);
        assert_eq!(count("g,u,d").total, 141_557_760);
        let all = count("all");
        assert_eq!(all.total, 268_697_600);
        assert_eq!(all.summary(), "268.7M (2.5%)");
        assert_eq!(count("q,k").summary(), "47.2M (0.4%)");
        assert_eq!(count("g,u,d").summary(), "141.6M (1.3%)");
    }

    #[test]
    fn ratio_formatting() {
        let r = ratio_of_totals(parse_count("268.7M").unwrap(), parse_count("103.3M").unwrap()).unwrap();
        assert_eq!(format_ratio(r), "2.6");
        assert!(matches!(ratio_of_totals(1, 0), Err(Error::Argument(_))));
        let a = lora_param_count(&single(4, 4), Ranks::Uniform(8), None).unwrap();
        let b = lora_param_count(&single(4, 4), Ranks::Uniform(4), None).unwrap();
        assert_eq!(compression_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(compression_ratio(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn missing_modules_listed() {
        let d = llama32_11b_vision();
        let mut map = RankMap::new();
        map.insert(
            &d.modules[0].name,
            crate::supernet::RankChoice {
                alphas: vec![],
                rank: 8,
                search_space: vec![8],
            },
        );
        let err = lora_param_count(&d, Ranks::Map(&map), None).unwrap_err().to_string();
        assert!(err.contains("missing 519"));
        assert!(err.contains(&d.modules[1].name));
    }

    #[test]
    fn descriptor_validation() {
        let mut d = single(2, 2);
        d.modules.push(d.modules[0].clone());
        assert!(matches!(d.validate(), Err(Error::Validation { .. })));
        d.modules.clear();
        assert!(matches!(d.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn parse_counts() {
        assert_eq!(parse_count("103.3M").unwrap(), 103_300_000);
        assert_eq!(parse_count("1_000").unwrap(), 1000);
        assert!(parse_count("abc").is_err());
    }
}
