//! Experiment configuration: one TOML file, dotted `key=value` overrides
//! applied on top, and a content hash recorded in every checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PriorMode;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, Variant};
use crate::synthdata::DatasetConfig;
use crate::trainer::{MixupConfig, TrainConfig};

/// The configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

/// File name of the resolved configuration inside a run directory.
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub shots: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            base: ["box", "table", "cylinder_stack", "chair"].map(String::from).to_vec(),
            novel: ["lamp", "l_beam"].map(String::from).to_vec(),
            shots: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Binarization threshold of the class average.
    pub t: f64,
    /// Prior fed during training; `none` selects the no-prior network.
    pub mode: PriorMode,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            t: 0.5,
            mode: PriorMode::Correct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Prediction binarization threshold for IoU.
    pub threshold: f64,
    /// Prior fed at evaluation; defaults to the training mode.
    pub prior_mode: Option<PriorMode>,
    /// Mixup concentrations of the alpha sweep.
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.3,
            prior_mode: None,
            alphas: vec![0.2, 0.4, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub run_name: String,
    pub data: DatasetConfig,
    pub split: SplitConfig,
    pub prior: PriorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub mixup: MixupConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            run_name: "default".into(),
            data: DatasetConfig::default(),
            split: SplitConfig::default(),
            prior: PriorConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            mixup: MixupConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text and applies `key=value` overrides before
    /// deserializing, so overridden keys are checked like file keys.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.split.shots == 0 {
            return Err(Error::Config("split.shots must be positive".into()));
        }
        for c in self.split.base.iter().chain(&self.split.novel) {
            if !self.data.classes.contains(c) {
                return Err(Error::Config(format!("split class {c} is not in data.classes")));
            }
        }
        if !(0.0..1.0).contains(&self.prior.t) {
            return Err(Error::Config(format!("prior.t must lie in [0,1), got {}", self.prior.t)));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold must lie in (0,1), got {}", self.eval.threshold)));
        }
        if self.eval.alphas.is_empty() || self.eval.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Config("eval.alphas must be non-empty and positive".into()));
        }
        for a in [self.mixup.input_alpha, self.mixup.latent_alpha] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("mixup alpha must be positive, got {a}")));
            }
        }
        if (self.eval_prior_mode() == PriorMode::None) != (self.prior.mode == PriorMode::None) {
            return Err(Error::Config(
                "eval.prior_mode 'none' requires prior.mode 'none' and vice versa".into(),
            ));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        match self.prior.mode {
            PriorMode::None => Variant::NoPrior,
            _ => Variant::Prior,
        }
    }

    pub fn eval_prior_mode(&self) -> PriorMode {
        self.eval.prior_mode.unwrap_or(self.prior.mode)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Sets `a.b.c = value` inside `root`. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}' passes through a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_matches_defaults() {
        let cfg = ExperimentConfig::parse(DEFAULT_CONFIG, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.loss.mu, 0.1);
        assert_eq!(cfg.mixup.input_alpha, 0.2);
        assert_eq!(cfg.loss.w_bce, 10.0);
        assert_eq!(cfg.loss.w_adp, 0.5);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.gt_lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = ExperimentConfig::parse(
            "seed = 3\n[loss]\nw_adp = 0.5\n",
            &["loss.w_adp=0".into(), "run_name=abl".into(), "prior.mode=none".into(),
              "train.pipelines=[\"WithoutMix\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.w_adp, 0.0);
        assert_eq!(cfg.run_name, "abl");
        assert_eq!(cfg.variant(), Variant::NoPrior);
        assert_eq!(cfg.train.pipelines.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("bogus = 1", &[]), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse("", &["loss.wbce=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::parse("", &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
