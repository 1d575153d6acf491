//! Run configuration: parsing, defaulting and validation.
//!
//! A configuration document is overlaid on the defaults key by key, so any
//! subset of fields may be given. Keys absent from the defaults are rejected
//! with their dotted path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::{Variant, DEFAULT_K_SHOTS};
use crate::error::{Error, Result};
use crate::evalharness::{AblationPlan, EpisodeSettings};
use crate::shallownet::{TrainConfig, DEFAULT_HIDDEN};
use crate::splengine::SplConfig;
use crate::synthworld::{GenConfig, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: DEFAULT_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeDefaults {
    pub variants: Vec<Variant>,
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub metric_ks: Vec<usize>,
}

impl Default for EpisodeDefaults {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            k_list: DEFAULT_K_SHOTS.to_vec(),
            seeds: (0..5).collect(),
            metric_ks: vec![1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every phase seed is derived from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub gen: GenConfig,
    pub spl: SplConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub head_init: TrainConfig,
    pub episodes: EpisodeDefaults,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            gen: GenConfig::default(),
            spl: SplConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::with_epochs(600),
            head_init: TrainConfig::with_epochs(20),
            episodes: EpisodeDefaults::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| match e {
            Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                field: format!("world.{field}"),
                reason,
            },
            other => other,
        })?;
        self.gen.validate()?;
        self.spl.validate()?;
        self.pretrain.validate("pretrain")?;
        self.head_init.validate("head_init")?;
        if self.model.hidden_dim < 1 {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        self.plan().validate()?;
        let n_novel = self.world.n_novel_classes;
        if let Some(bad) = self
            .episodes
            .metric_ks
            .iter()
            .find(|&&k| k == 0 || k > n_novel)
        {
            return Err(Error::config(
                "episodes.metric_ks",
                format!("top-{bad} is outside 1..={n_novel}"),
            ));
        }
        let per_class = self.world.train_per_class();
        if let Some(bad) = self.episodes.k_list.iter().find(|&&k| k > per_class) {
            return Err(Error::config(
                "episodes.k_list",
                format!("{bad}-shot exceeds the {per_class} training samples per class"),
            ));
        }
        let base_train = self.world.n_base_classes * per_class;
        if self.gen.n_poses > base_train {
            return Err(Error::config(
                "gen.n_poses",
                format!(
                    "needs {} distinct base donors, the world has {base_train}",
                    self.gen.n_poses
                ),
            ));
        }
        Ok(())
    }

    pub fn settings(&self) -> EpisodeSettings {
        EpisodeSettings {
            gen: self.gen,
            spl: self.spl.clone(),
            head_init: self.head_init.clone(),
        }
    }

    pub fn plan(&self) -> AblationPlan {
        AblationPlan {
            variants: self.episodes.variants.clone(),
            k_list: self.episodes.k_list.clone(),
            seeds: self.episodes.seeds.clone(),
            metric_ks: self.episodes.metric_ks.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn overlay(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, value) in patch {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match base.get_mut(&key) {
                    Some(slot) => overlay(slot, value, &child)?,
                    None => return Err(Error::UnknownKey(child)),
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value;
            Ok(())
        }
    }
}

/// Parses a JSON configuration document, filling unspecified keys with defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let patch: Value = serde_json::from_str(text).map_err(|e| {
        Error::config(
            format!("line {} column {}", e.line(), e.column()),
            format!("syntax error: {e}"),
        )
    })?;
    if !patch.is_object() {
        return Err(Error::config(
            "<root>",
            "configuration must be a JSON object",
        ));
    }
    let mut merged = serde_json::to_value(RunConfig::default())?;
    overlay(&mut merged, patch, "")?;
    let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let field = e.path().to_string();
        Error::config(field, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}
