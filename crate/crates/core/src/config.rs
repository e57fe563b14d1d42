//! Config-driven experiment description.
//!
//! The config is a TOML file with fixed key names; unknown keys are
//! rejected so typos cannot silently fall back to defaults. Every knob has
//! a default, and the resolved ("effective") config serializes back to TOML
//! so a run can be reproduced from its emitted artifact byte-for-byte.
//!
//! Environment variables prefixed `FRAUG_` override keys: the prefix is
//! stripped, the rest is lowercased and matched as `section_key` (e.g.
//! `FRAUG_OPTIM_LR=0.1`, `FRAUG_STRATEGY=fedavg`, `FRAUG_SEEDS=1,2,3`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{FraugKnobs, NoiseDistribution};
use crate::data::{ShiftSpec, TabularSchema};
use crate::error::{Error, Result};
use crate::federation::Strategy;
use crate::nets::{ClassifierSpec, GeneratorSpec, RtNetSpec};
use crate::optim::OptKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FraugSection {
    pub alpha: f64,
    pub beta: f64,
    pub synthetic_weight_max: f64,
    /// Ramp lengths in local steps; 0 means "25% of rounds * local_steps".
    pub synthetic_ramp_steps: u64,
    pub prototype_ramp_steps: u64,
    pub prototype_epsilon: f64,
}

impl Default for FraugSection {
    fn default() -> Self {
        FraugSection {
            alpha: 1.0,
            beta: 1.0,
            synthetic_weight_max: 1.0,
            synthetic_ramp_steps: 0,
            prototype_ramp_steps: 0,
            prototype_epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FedProxSection {
    pub mu: f64,
}

impl Default for FedProxSection {
    fn default() -> Self {
        FedProxSection { mu: 0.01 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Standard deviation of the augmentation noise.
    pub gamma: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { gamma: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: String,
    /// Optimizer for the generator and residual net.
    pub aux_kind: String,
    pub lr: f64,
    pub momentum: f64,
    pub lr_generator: f64,
    pub lr_rtnet: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            kind: "sgd-momentum".into(),
            aux_kind: "adam".into(),
            lr: 0.05,
            momentum: 0.9,
            lr_generator: 1e-3,
            lr_rtnet: 1e-3,
        }
    }
}

impl OptimSection {
    fn parse_kind(&self, name: &str, key: &str) -> Result<OptKind> {
        match name {
            "sgd" => Ok(OptKind::Sgd),
            "sgd-momentum" => Ok(OptKind::SgdMomentum { momentum: self.momentum }),
            "adam" => Ok(OptKind::adam()),
            other => Err(Error::config(format!(
                "{key}: unknown optimizer '{other}' (expected sgd, sgd-momentum, adam)"
            ))),
        }
    }

    pub fn kind(&self) -> Result<OptKind> {
        self.parse_kind(&self.kind, "optim.kind")
    }

    pub fn aux_kind(&self) -> Result<OptKind> {
        self.parse_kind(&self.aux_kind, "optim.aux_kind")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "synthetic" or "tabular".
    pub source: String,
    pub shift: ShiftSpec,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    /// Class-stratified train-split fraction kept per client.
    pub scarcity_fraction: f64,
    /// One file per domain when `source = "tabular"`.
    pub paths: Vec<String>,
    pub tabular: TabularSchema,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            shift: ShiftSpec::default(),
            train_per_domain: 200,
            test_per_domain: 500,
            scarcity_fraction: 1.0,
            paths: Vec::new(),
            tabular: TabularSchema::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub batchnorm: bool,
    pub generator: GeneratorSpec,
    pub rtnet: RtNetSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ClassifierSpec::default();
        ModelSection {
            hidden: c.hidden,
            embedding_dim: c.embedding_dim,
            batchnorm: c.batchnorm,
            generator: GeneratorSpec::default(),
            rtnet: RtNetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TogglesSection {
    /// Head trains on raw generated embeddings.
    pub use_vhat: bool,
    /// Head trains on residual-personalized batch embeddings (enables the
    /// residual net).
    pub use_uhat: bool,
    /// Head trains on prototype-anchored synthetic embeddings.
    pub use_uhat_c: bool,
    /// Keep batch-normalization parameters local (no aggregation).
    pub use_localbn: bool,
    /// Run the generator / residual-net optimization stage.
    pub stage2: bool,
    pub literal_absent_update: bool,
    pub sequential_stage1: bool,
    /// Generator repulsion measured against personalized rather than raw
    /// generated embeddings.
    pub mmd_prose_variant: bool,
}

impl Default for TogglesSection {
    fn default() -> Self {
        TogglesSection {
            use_vhat: false,
            use_uhat: true,
            use_uhat_c: true,
            use_localbn: true,
            stage2: true,
            literal_absent_update: false,
            sequential_stage1: false,
            mmd_prose_variant: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExecSection {
    pub parallel: bool,
}

impl Default for ExecSection {
    fn default() -> Self {
        ExecSection { parallel: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub rounds: u64,
    pub local_steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub precision: Precision,
    pub out_dir: String,
    pub fraug: FraugSection,
    pub fedprox: FedProxSection,
    pub noise: NoiseSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub toggles: TogglesSection,
    pub exec: ExecSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: "fraug".into(),
            seeds: vec![1, 2, 3],
            rounds: 100,
            local_steps: 5,
            batch_size: 32,
            eval_every: 1,
            precision: Precision::F32,
            out_dir: "runs/out".into(),
            fraug: FraugSection::default(),
            fedprox: FedProxSection::default(),
            noise: NoiseSection::default(),
            optim: OptimSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            toggles: TogglesSection::default(),
            exec: ExecSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config serialize: {e}")))
    }

    /// Ramp lengths resolved against the training length: an explicit value
    /// wins, 0 means a quarter of all local steps.
    fn resolved_ramp(&self, configured: u64) -> u64 {
        if configured > 0 {
            configured
        } else {
            ((self.rounds * self.local_steps) / 4).max(1)
        }
    }

    pub fn fraug_knobs(&self) -> FraugKnobs {
        FraugKnobs {
            alpha: self.fraug.alpha,
            beta: self.fraug.beta,
            synthetic_weight_max: self.fraug.synthetic_weight_max,
            synthetic_ramp_steps: self.resolved_ramp(self.fraug.synthetic_ramp_steps),
            prototype_ramp_steps: self.resolved_ramp(self.fraug.prototype_ramp_steps),
            prototype_epsilon: self.fraug.prototype_epsilon,
            use_vhat: self.toggles.use_vhat,
            use_uhat: self.toggles.use_uhat,
            use_uhat_c: self.toggles.use_uhat_c,
            stage2: self.toggles.stage2,
            literal_absent_update: self.toggles.literal_absent_update,
            sequential_stage1: self.toggles.sequential_stage1,
            gen_mmd_on_personalized: self.toggles.mmd_prose_variant,
            real_weight: 1.0,
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        let strategy = match self.strategy.as_str() {
            "fraug" => Strategy::Fraug(self.fraug_knobs()),
            "fedavg" => Strategy::FedAvg,
            "fedbn" => Strategy::FedBn,
            "fedprox" => Strategy::FedProx { mu: self.fedprox.mu },
            "single" => Strategy::Single,
            "all" => Strategy::All,
            "noise-uniform" => Strategy::Noise {
                dist: NoiseDistribution::Uniform,
                gamma: self.noise.gamma,
            },
            "noise-laplace" => Strategy::Noise {
                dist: NoiseDistribution::Laplace,
                gamma: self.noise.gamma,
            },
            "noise-gauss" => Strategy::Noise {
                dist: NoiseDistribution::Gauss,
                gamma: self.noise.gamma,
            },
            other => {
                return Err(Error::config(format!(
                    "strategy: unknown strategy '{other}'"
                )))
            }
        };
        if matches!(strategy, Strategy::FedBn | Strategy::Fraug(_)) && !self.toggles.use_localbn {
            return Err(Error::config(
                "toggles.use_localbn = false contradicts a local-batchnorm strategy",
            ));
        }
        Ok(strategy)
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec {
            input_dim: self.data.shift.dim,
            hidden: self.model.hidden.clone(),
            embedding_dim: self.model.embedding_dim,
            num_classes: self.data.shift.num_classes,
            batchnorm: self.model.batchnorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be non-empty"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("local_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.data.scarcity_fraction > 0.0 && self.data.scarcity_fraction <= 1.0) {
            return Err(Error::config("data.scarcity_fraction must be in (0, 1]"));
        }
        match self.data.source.as_str() {
            "synthetic" => self.data.shift.validate()?,
            "tabular" => {
                if self.data.paths.is_empty() {
                    return Err(Error::config("data.paths required for tabular source"));
                }
            }
            other => {
                return Err(Error::config(format!(
                    "data.source: unknown source '{other}'"
                )))
            }
        }
        self.strategy()?;
        self.optim.kind()?;
        self.optim.aux_kind()?;
        self.classifier_spec().validate()?;
        self.model.generator.validate()?;
        self.model.rtnet.validate()?;
        Ok(())
    }

    /// Apply `FRAUG_*` environment-variable overrides. Returns the number
    /// of applied overrides.
    pub fn apply_env_overrides(&mut self, vars: &[(String, String)]) -> Result<usize> {
        let mut value = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("config reserialize: {e}")))?;
        let mut applied = 0;
        let mut sorted: Vec<&(String, String)> = vars.iter().collect();
        sorted.sort();
        for (key, raw) in sorted {
            let Some(stripped) = key.strip_prefix("FRAUG_") else {
                continue;
            };
            let path = stripped.to_ascii_lowercase();
            if !apply_override(&mut value, &path, raw)? {
                return Err(Error::config(format!(
                    "environment override {key} does not match any config key"
                )));
            }
            applied += 1;
        }
        *self = value
            .try_into()
            .map_err(|e| Error::config(format!("config after env overrides: {e}")))?;
        Ok(applied)
    }
}

/// Match `section_key` (or a bare top-level `key`) against the config tree
/// and set it from the string value.
fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<bool> {
    let table = root.as_table_mut().expect("config root is a table");
    if let Some(slot) = table.get_mut(path) {
        *slot = parse_like(slot, raw, path)?;
        return Ok(true);
    }
    // Longest-prefix section match: section names contain no underscore.
    if let Some((section, rest)) = path.split_once('_') {
        if let Some(toml::Value::Table(inner)) = table.get_mut(section) {
            if let Some(slot) = inner.get_mut(rest) {
                *slot = parse_like(slot, raw, path)?;
                return Ok(true);
            }
            // One more level (e.g. data_shift_dim).
            if let Some((sub, leaf)) = rest.split_once('_') {
                if let Some(toml::Value::Table(sub_table)) = inner.get_mut(sub) {
                    if let Some(slot) = sub_table.get_mut(leaf) {
                        *slot = parse_like(slot, raw, path)?;
                        return Ok(true);
                    }
                }
            }
        }
    }
    Ok(false)
}

fn parse_like(current: &toml::Value, raw: &str, path: &str) -> Result<toml::Value> {
    let parsed = match current {
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| {
            Error::config(format!("override {path}: '{raw}' is not an integer"))
        })?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| {
            Error::config(format!("override {path}: '{raw}' is not a number"))
        })?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| {
            Error::config(format!("override {path}: '{raw}' is not a boolean"))
        })?),
        toml::Value::Array(items) => {
            let elem = items.first();
            let parts: Vec<&str> = raw.split(',').filter(|s| !s.trim().is_empty()).collect();
            let mut array = Vec::with_capacity(parts.len());
            for part in parts {
                let part = part.trim();
                let value = match elem {
                    Some(toml::Value::Integer(_)) | None => {
                        toml::Value::Integer(part.parse().map_err(|_| {
                            Error::config(format!("override {path}: '{part}' is not an integer"))
                        })?)
                    }
                    Some(toml::Value::Float(_)) => toml::Value::Float(part.parse().map_err(|_| {
                        Error::config(format!("override {path}: '{part}' is not a number"))
                    })?),
                    _ => toml::Value::String(part.to_string()),
                };
                array.push(value);
            }
            toml::Value::Array(array)
        }
        _ => {
            return Err(Error::config(format!(
                "override {path}: unsupported target type"
            )))
        }
    };
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults_and_validates() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("roundz = 5").is_err());
        assert!(ExperimentConfig::from_toml_str("[fraug]\nalpa = 1.0").is_err());
    }

    #[test]
    fn toml_roundtrip_is_stable() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        let text2 = back.to_toml_string().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn ramp_default_resolves_to_quarter_of_steps() {
        let cfg = ExperimentConfig::default();
        let knobs = cfg.fraug_knobs();
        assert_eq!(knobs.synthetic_ramp_steps, cfg.rounds * cfg.local_steps / 4);
        let mut explicit = cfg.clone();
        explicit.fraug.synthetic_ramp_steps = 7;
        assert_eq!(explicit.fraug_knobs().synthetic_ramp_steps, 7);
    }

    #[test]
    fn env_overrides_apply_and_reject_unknown() {
        let mut cfg = ExperimentConfig::default();
        let vars = vec![
            ("FRAUG_STRATEGY".to_string(), "fedavg".to_string()),
            ("FRAUG_OPTIM_LR".to_string(), "0.25".to_string()),
            ("FRAUG_SEEDS".to_string(), "7,8".to_string()),
            ("FRAUG_TOGGLES_USE_UHAT".to_string(), "false".to_string()),
            ("FRAUG_DATA_SHIFT_DIM".to_string(), "12".to_string()),
            ("OTHER_VAR".to_string(), "ignored".to_string()),
        ];
        let applied = cfg.apply_env_overrides(&vars).unwrap();
        assert_eq!(applied, 5);
        assert_eq!(cfg.strategy, "fedavg");
        assert_eq!(cfg.optim.lr, 0.25);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert!(!cfg.toggles.use_uhat);
        assert_eq!(cfg.data.shift.dim, 12);

        let mut cfg = ExperimentConfig::default();
        let bad = vec![("FRAUG_NO_SUCH_KEY".to_string(), "1".to_string())];
        assert!(cfg.apply_env_overrides(&bad).is_err());
    }

    #[test]
    fn strategy_parsing_covers_all_names() {
        for name in [
            "fraug", "fedavg", "fedbn", "fedprox", "single", "all", "noise-uniform",
            "noise-laplace", "noise-gauss",
        ] {
            let mut cfg = ExperimentConfig::default();
            cfg.strategy = name.into();
            let strategy = cfg.strategy().unwrap();
            assert_eq!(strategy.name(), name);
        }
        let mut cfg = ExperimentConfig::default();
        cfg.strategy = "mystery".into();
        assert!(cfg.strategy().is_err());
    }
}
