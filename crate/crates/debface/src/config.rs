//! Layered TOML experiment configuration.
//!
//! Values resolve in three layers: built-in desk defaults, then the
//! optional config file, then `--set key=value` overrides with dotted
//! paths (e.g. `--set train.debface.learning_rate=0.01`).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{DebfaceError, Result};
use crate::netcore::NetConfig;
use crate::synthgen::DatasetSpec;
use crate::trainloop::{Mode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub baseface: TrainConfig,
    pub debface: TrainConfig,
    pub aggregator: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Fraction of identities (per cohort) placed in the train split.
    pub train_fraction: f64,
    pub genuine_cap: usize,
    pub imposter_ratio: usize,
    pub min_support: usize,
    pub intra_cohort_imposters: bool,
    pub far: f64,
    pub percentile: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            genuine_cap: 5000,
            imposter_ratio: 10,
            min_support: 10,
            intra_cohort_imposters: true,
            far: 0.01,
            percentile: 90.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn pair_policy(&self) -> crate::evalkit::PairPolicy {
        crate::evalkit::PairPolicy {
            genuine_cap: self.genuine_cap,
            imposter_ratio: self.imposter_ratio,
            min_support: self.min_support,
            intra_cohort_imposters: self.intra_cohort_imposters,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(DebfaceError::Config(
                "eval.train_fraction must be in (0,1)".into(),
            ));
        }
        if !(0.0 < self.far && self.far < 1.0) {
            return Err(DebfaceError::Config("eval.far must be in (0,1)".into()));
        }
        if !(0.0 < self.percentile && self.percentile <= 100.0) {
            return Err(DebfaceError::Config(
                "eval.percentile must be in (0,100]".into(),
            ));
        }
        if self.imposter_ratio == 0 {
            return Err(DebfaceError::Config(
                "eval.imposter_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub net: NetConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut aggregator = TrainConfig::desk_default(Mode::Aggregator, 0);
        aggregator.learning_rate = 0.01;
        Self {
            dataset: DatasetSpec::desk_default(0),
            net: NetConfig::desk_default(2, 3, 3, 200),
            train: TrainSection {
                baseface: TrainConfig::desk_default(Mode::Baseface, 0),
                debface: TrainConfig::desk_default(Mode::Debface, 0),
                aggregator,
            },
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.baseface.validate()?;
        self.train.debface.validate()?;
        self.train.aggregator.validate()?;
        self.eval.validate()?;
        if self.net.block_dim % 4 != 0 && self.net.block_dim == 0 {
            return Err(DebfaceError::Config(
                "net.block_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn train_for(&self, mode: Mode) -> &TrainConfig {
        match mode {
            Mode::Baseface => &self.train.baseface,
            Mode::Debface => &self.train.debface,
            Mode::Aggregator => &self.train.aggregator,
        }
    }

    pub fn train_for_mut(&mut self, mode: Mode) -> &mut TrainConfig {
        match mode {
            Mode::Baseface => &mut self.train.baseface,
            Mode::Debface => &mut self.train.debface,
            Mode::Aggregator => &mut self.train.aggregator,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DebfaceError::Config(e.to_string()))
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_set_value(raw: &str) -> toml::Value {
    // Parse through a one-entry TOML document so numbers, booleans,
    // arrays and quoted strings all work; bare words fall back to
    // strings.
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| DebfaceError::Config(format!("--set expects key=value, got `{spec}`")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(DebfaceError::Config(format!("bad --set path `{path}`")));
    }
    let mut cursor = root;
    for key in &keys[..keys.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| {
            DebfaceError::Config(format!("--set path `{path}` crosses a non-table value"))
        })?;
        cursor = table
            .entry(key.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| {
        DebfaceError::Config(format!("--set path `{path}` crosses a non-table value"))
    })?;
    table.insert(
        keys[keys.len() - 1].to_string(),
        parse_set_value(raw.trim()),
    );
    Ok(())
}

/// Resolve a config: defaults, then the optional file, then overrides.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let mut value = toml::Value::try_from(ExperimentConfig::default())
        .map_err(|e| DebfaceError::Config(e.to_string()))?;
    if let Some(p) = path {
        if !p.exists() {
            return Err(DebfaceError::MissingArtifact(p.to_path_buf()));
        }
        let text = std::fs::read_to_string(p).map_err(|e| DebfaceError::io(p, e))?;
        let overlay: toml::Table = text.parse().map_err(|e| DebfaceError::Malformed {
            path: p.to_path_buf(),
            reason: format!("{e}"),
        })?;
        merge_toml(&mut value, toml::Value::Table(overlay));
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e| DebfaceError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_the_config() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn file_layer_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(
            &p,
            "[dataset]\nnum_identities = 50\n[train.debface]\nepochs = 3\n",
        )
        .unwrap();
        let c = load_config(Some(&p), &[]).unwrap();
        assert_eq!(c.dataset.num_identities, 50);
        assert_eq!(c.train.debface.epochs, 3);
        // Untouched values keep their defaults.
        assert_eq!(c.dataset.images_per_identity, 20);
        assert_eq!(c.train.baseface.epochs, 15);
    }

    #[test]
    fn set_overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(&p, "[train.debface]\nlearning_rate = 0.2\n").unwrap();
        let sets = vec![
            "train.debface.learning_rate=0.01".to_string(),
            "eval.far=0.05".to_string(),
            "net.conv_channels=[4, 8]".to_string(),
            "eval.intra_cohort_imposters=false".to_string(),
        ];
        let c = load_config(Some(&p), &sets).unwrap();
        assert_eq!(c.train.debface.learning_rate, 0.01);
        assert_eq!(c.eval.far, 0.05);
        assert_eq!(c.net.conv_channels, vec![4, 8]);
        assert!(!c.eval.intra_cohort_imposters);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        assert!(matches!(
            load_config(None, &["no_equals_sign".into()]),
            Err(DebfaceError::Config(_))
        ));
        assert!(matches!(
            load_config(None, &["eval.far=7.0".into()]),
            Err(DebfaceError::Config(_))
        ));
        assert!(matches!(
            load_config(Some(Path::new("/nonexistent/x.toml")), &[]),
            Err(DebfaceError::MissingArtifact(_))
        ));
    }
}
