//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Top-level keys select the backend, variant and schedule; the `[data]`,
//! `[cf]`, `[lm]`, `[fusion]` and `[train]` tables configure each stage.
//!
//! ```toml
//! backend = "lightgcn"
//! variant = "ccf"
//! seed = 1
//!
//! [data]
//! dir = "data/ml-100k"
//! train_limit = 4000
//!
//! [train]
//! k = 2.0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cf::{CfBackend, CfConfig};
use crate::dataset::MovieLensFormat;
use crate::error::{CcfError, Result};
use crate::fusion::{FusionConfig, GateMode, Injection};
use crate::lm::LmConfig;
use crate::trainer::{Schedule, TrainConfig};

/// Environment variable consulted when `data.dir` is unset.
pub const DATA_DIR_ENV: &str = "CCF_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ccf,
    /// Aligned CF vectors as separate positions, no gate.
    CollmStyle,
    TextOnly,
    /// Text-only prompt naming CF-recommended similar items.
    PilotNlCf,
    Alpha1,
    AlphaScalar,
    Dual(CfBackend, CfBackend),
}

impl Variant {
    pub fn uses_cf_slots(&self) -> bool {
        !matches!(self, Variant::TextOnly | Variant::PilotNlCf)
    }

    /// Backends whose embeddings enter the sequence.
    pub fn backends(&self, primary: CfBackend) -> Vec<CfBackend> {
        match self {
            Variant::TextOnly | Variant::PilotNlCf => vec![],
            Variant::Dual(a, b) => vec![*a, *b],
            _ => vec![primary],
        }
    }

    pub fn apply(&self, base: &FusionConfig) -> FusionConfig {
        let mut c = base.clone();
        match self {
            Variant::Alpha1 => c.gate_mode = GateMode::Fixed(1.0),
            Variant::AlphaScalar => c.scalar_gate = true,
            Variant::CollmStyle => c.injection = Injection::Appended,
            _ => {}
        }
        c
    }

    /// Splits a comma-separated list, keeping `dual(a,b)` whole.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        let mut depth = 0;
        let mut cur = String::new();
        for ch in s.chars() {
            match ch {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' if depth == 0 => {
                    out.push(cur.trim().parse()?);
                    cur.clear();
                    continue;
                }
                _ => {}
            }
            cur.push(ch);
        }
        if !cur.trim().is_empty() {
            out.push(cur.trim().parse()?);
        }
        Ok(out)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Ccf => f.write_str("ccf"),
            Variant::CollmStyle => f.write_str("collm-style"),
            Variant::TextOnly => f.write_str("text-only"),
            Variant::PilotNlCf => f.write_str("pilot-nl-cf"),
            Variant::Alpha1 => f.write_str("alpha1"),
            Variant::AlphaScalar => f.write_str("alpha-scalar"),
            Variant::Dual(a, b) => write!(f, "dual({},{})", a.as_str(), b.as_str()),
        }
    }
}

impl FromStr for Variant {
    type Err = CcfError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "ccf" => Variant::Ccf,
            "collm-style" | "collm" => Variant::CollmStyle,
            "text-only" => Variant::TextOnly,
            "pilot-nl-cf" => Variant::PilotNlCf,
            "alpha1" => Variant::Alpha1,
            "alpha-scalar" => Variant::AlphaScalar,
            other => {
                let inner = other
                    .strip_prefix("dual(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| CcfError::Config(format!("unknown variant {other:?}")))?;
                let (a, b) = inner
                    .split_once([',', '+'])
                    .ok_or_else(|| CcfError::Config(format!("dual variant needs two backends: {other:?}")))?;
                let (a, b): (CfBackend, CfBackend) = (a.trim().parse()?, b.trim().parse()?);
                if a == b {
                    return Err(CcfError::Config(format!("dual variant needs two distinct backends: {other:?}")));
                }
                Variant::Dual(a, b)
            }
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub format: MovieLensFormat,
    /// Ratings strictly above this are positive.
    pub threshold: u8,
    pub ratios: (f64, f64, f64),
    /// Keep only the most recent months before splitting.
    pub window_months: Option<u32>,
    /// History items rendered into a prompt.
    pub max_history: usize,
    /// Random subsample sizes per split; 0 keeps everything.
    pub train_limit: usize,
    pub val_limit: usize,
    pub test_limit: usize,
    pub sample_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            format: MovieLensFormat::Ml100k,
            threshold: 3,
            ratios: (0.5, 0.25, 0.25),
            window_months: None,
            max_history: 10,
            train_limit: 4000,
            val_limit: 1500,
            test_limit: 1500,
            sample_seed: 7,
        }
    }
}

impl DataConfig {
    /// `dir`, else `$CCF_DATA_DIR`, else `data/<format>`.
    pub fn resolve_dir(&self) -> PathBuf {
        if let Some(d) = &self.dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(DATA_DIR_ENV) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        PathBuf::from("data").join(match self.format {
            MovieLensFormat::Ml1m => "ml-1m",
            MovieLensFormat::Ml100k => "ml-100k",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backend: CfBackend,
    pub variant: Variant,
    pub schedule: Schedule,
    pub output_dir: PathBuf,
    /// Copied into every sub-config seed by [`ExperimentConfig::with_seed`].
    pub seed: u64,
    /// Similar items listed by the pilot prompt.
    pub topk: usize,
    /// Prompt length cap (also bounded by `lm.max_len`).
    pub max_prompt_tokens: usize,
    pub data: DataConfig,
    pub cf: CfConfig,
    pub lm: LmConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backend: CfBackend::Mf,
            variant: Variant::Ccf,
            schedule: Schedule::TwoStage,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            topk: 10,
            max_prompt_tokens: 700,
            data: DataConfig::default(),
            cf: CfConfig::default(),
            lm: LmConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| CcfError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CcfError::Config(e.to_string()))
    }

    /// Reads a TOML file, or the `config` entry of a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CcfError::Config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CcfError::Config(format!("{}: {e}", path.display())))?;
            let cfg = v
                .get("config")
                .ok_or_else(|| CcfError::Config(format!("{} has no config entry", path.display())))?;
            let c: ExperimentConfig =
                serde_json::from_value(cfg.clone()).map_err(|e| CcfError::Config(e.to_string()))?;
            c.validate()?;
            return Ok(c);
        }
        Self::from_toml(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cf.seed = seed;
        self.lm.seed = seed;
        self.fusion.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let (a, b, c) = self.data.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(CcfError::Config(format!("data.ratios must be positive and sum to 1, got {:?}", self.data.ratios)));
        }
        if !(1..=5).contains(&self.data.threshold) {
            return Err(CcfError::Config(format!("data.threshold must be in 1..=5, got {}", self.data.threshold)));
        }
        if self.cf.dim == 0 {
            return Err(CcfError::Config("cf.dim must be positive".into()));
        }
        Ok(())
    }

    /// Effective prompt length limit.
    pub fn prompt_limit(&self) -> usize {
        self.max_prompt_tokens.min(self.lm.max_len)
    }
}
