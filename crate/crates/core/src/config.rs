//! Run configuration: TOML with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GfefError, Result};

/// Length of the encoder output before patching.
pub const ENCODER_WIDTH: usize = 128;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub service: ServiceConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Ucr,
    StrainCsv,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Training split (UCR / CSV formats).
    pub path: Option<PathBuf>,
    /// Held-out split used for per-epoch validation.
    pub test_path: Option<PathBuf>,
    pub format: DatasetFormat,
    pub normalize: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            test_path: None,
            format: DatasetFormat::Synthetic,
            normalize: true,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub seed: u64,
    /// Seed of the validation split.
    pub test_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_per_class: 200,
            seed: 1,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub patch_len: usize,
    pub nodes_per_type: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub walk_steps: usize,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 128,
            layers: 1,
            patch_len: 8,
            nodes_per_type: 16,
            top_k: 12,
            alpha: 0.5,
            walk_steps: 1,
            tau: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Rwhc,
    Knn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Hypergraph,
    #[serde(rename = "self")]
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub use_image: bool,
    pub use_expert: bool,
    pub use_frf: bool,
    pub use_dra: bool,
    pub dynamic_hyperedges: bool,
    pub construction: Construction,
    pub attention: AttentionKind,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            use_image: true,
            use_expert: true,
            use_frf: true,
            use_dra: true,
            dynamic_hyperedges: true,
            construction: Construction::Rwhc,
            attention: AttentionKind::Hypergraph,
        }
    }
}

impl FeatureConfig {
    /// Number of input types feeding the fusion stage.
    pub fn active_types(&self) -> usize {
        1 + usize::from(self.use_image) + usize::from(self.use_expert)
    }

    /// The "only TS" configuration: one input type, no reliability weighting.
    pub fn ts_only() -> Self {
        FeatureConfig {
            use_image: false,
            use_expert: false,
            ..FeatureConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    /// Validate every this many epochs (0 disables validation).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 500,
            batch: 64,
            seeds: vec![7],
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub port: u16,
    pub max_body: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            max_body: 1 << 20,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides on top, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| GfefError::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| GfefError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GfefError::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(GfefError::Config(msg));
        if m.patch_len * m.nodes_per_type != ENCODER_WIDTH {
            return bad(format!(
                "model.patch_len * model.nodes_per_type must be {ENCODER_WIDTH}, got {} * {}",
                m.patch_len, m.nodes_per_type
            ));
        }
        if m.hidden_size == 0 || m.layers == 0 {
            return bad("model.hidden_size and model.layers must be positive".into());
        }
        let nodes = self.features.active_types() * m.nodes_per_type;
        if m.top_k == 0 || m.top_k > nodes - 1 {
            return bad(format!(
                "model.top_k must be in 1..={} for {nodes} nodes, got {}",
                nodes - 1,
                m.top_k
            ));
        }
        if !(0.0..=1.0).contains(&m.alpha) {
            return bad(format!("model.alpha must lie in [0, 1], got {}", m.alpha));
        }
        if !(m.tau > 0.0 && m.tau.is_finite()) {
            return bad(format!("model.tau must be positive, got {}", m.tau));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if t.batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if t.seeds.is_empty() {
            return bad("train.seeds must list at least one seed".into());
        }
        if self.service.max_body == 0 {
            return bad("service.max_body must be positive".into());
        }
        Ok(())
    }
}

/// Sets a dotted key.  The value is read as a TOML literal when it parses as
/// one and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| GfefError::Config(format!("override `{ov}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GfefError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| GfefError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
