//! Run configuration: one TOML file with `data`, `network`, `gva`, `lsa` and
//! `train` sections, plus `section.key=value` overrides applied after
//! parsing. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment_gva::GvaConfig;
use crate::data::{default_domains, DomainStyle};
use crate::error::{Error, Result};
use crate::network::{LsaConfig, NetworkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Square input size in pixels.
    pub size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    /// Index of the held-out domain for `train`.
    pub held_out: usize,
    /// Random resized crop and flip on training samples.
    pub augment: bool,
    pub seed: u64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub domains: Vec<DomainStyle>,
    /// Folder mode: `<folder_root>/<domain>/{train,test}/…`.
    pub folder_root: String,
    pub folder_domains: Vec<String>,
    /// Folder mode: score predictions against the full-resolution masks.
    pub eval_original_resolution: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            size: 64,
            channels: 3,
            class_names: vec!["disc".into(), "cup".into()],
            held_out: 0,
            augment: true,
            seed: 0,
            train_per_domain: 40,
            test_per_domain: 10,
            domains: default_domains(),
            folder_root: String::new(),
            folder_domains: Vec::new(),
            eval_original_resolution: false,
        }
    }
}

impl DataConfig {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain_names(&self) -> Vec<String> {
        match self.source {
            DataSource::Synthetic => self.domains.iter().map(|d| d.name.clone()).collect(),
            DataSource::Folder => self.folder_domains.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub lambda_consist: f64,
    pub grad_clip: f64,
    pub enable_gva: bool,
    pub enable_lsa: bool,
    pub enable_consistency: bool,
    pub seed: u64,
    /// Seeds repeated by `sweep`.
    pub sweep_seeds: Vec<u64>,
    /// Periodic checkpoints and source-domain validation every this
    /// fraction of the run; 0 disables both.
    pub checkpoint_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            base_lr: 3e-4,
            lr_power: 0.9,
            weight_decay: 0.01,
            lambda_consist: crate::losses::DEFAULT_LAMBDA,
            grad_clip: 5.0,
            enable_gva: true,
            enable_lsa: true,
            enable_consistency: true,
            seed: 0,
            sweep_seeds: vec![0, 1, 2],
            checkpoint_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub gva: GvaConfig,
    pub lsa: LsaConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.gva.validate()?;
        self.lsa.validate()?;
        let d = &self.data;
        let bad = |m: String| Err(Error::Config(m));
        if d.n_classes() != self.network.n_classes {
            return bad(format!(
                "data.class_names has {} entries, network.n_classes is {}",
                d.n_classes(),
                self.network.n_classes
            ));
        }
        if d.channels != self.network.in_channels || d.channels != self.gva.image_channels {
            return bad(format!(
                "data.channels = {} must equal network.in_channels ({}) and gva.image_channels ({})",
                d.channels, self.network.in_channels, self.gva.image_channels
            ));
        }
        if d.size == 0 || d.size % self.network.size_multiple() != 0 {
            return bad(format!("data.size = {} must be a multiple of {}", d.size, self.network.size_multiple()));
        }
        let names = d.domain_names();
        if names.len() < 2 {
            return bad("at least two domains are required".into());
        }
        if d.held_out >= names.len() {
            return bad(format!("data.held_out = {} but there are {} domains", d.held_out, names.len()));
        }
        if d.source == DataSource::Synthetic {
            for s in &d.domains {
                s.validate(d.channels)?;
            }
        } else if d.folder_root.is_empty() {
            return bad("data.folder_root is required for folder data".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(t.base_lr >= 0.0 && t.lr_power >= 0.0 && t.weight_decay >= 0.0 && t.grad_clip > 0.0 && t.lambda_consist >= 0.0) {
            return bad("train rates, decay, clip and λ must be non-negative (clip positive)".into());
        }
        if !(0.0..=1.0).contains(&t.checkpoint_fraction) {
            return bad("train.checkpoint_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults), applies `overrides`, validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_over(&Self::default(), path, overrides)
    }

    /// As [`RunConfig::load`], with keys absent from the file taken from `base`.
    pub fn load_over(base: &RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file = toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            // Reject unknown file keys before merging so the message names them.
            Self::from_table(file.clone()).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn default_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string. The key path must exist in the default configuration.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let mut probe = &default_table();
    for (i, k) in keys.iter().enumerate() {
        match probe.get(*k) {
            Some(toml::Value::Table(t)) if i + 1 < keys.len() => probe = t,
            Some(_) if i + 1 == keys.len() => {}
            _ => return Err(Error::Config(format!("unknown config key `{path}`"))),
        }
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.lsa.p, 0.75);
        assert_eq!(cfg.train.lambda_consist, 0.1);
        assert_eq!(cfg.train.base_lr, 3e-4);
        assert_eq!(cfg.gva.tau, 0.4);
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\niterations = 10\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["train.batch_size=2".into(), "gva.tau=0.03".into()]).unwrap();
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.gva.tau, 0.03);
        let cfg = RunConfig::load(None, &["train.enable_gva=false".into(), "data.folder_root=/tmp/x y".into()]).unwrap();
        assert!(!cfg.train.enable_gva);
        assert_eq!(cfg.data.folder_root, "/tmp/x y");
        for bad in ["train.iteratons=5", "nope.x=1", "train=3", "train.iterations"] {
            assert!(RunConfig::load(None, &[bad.into()]).is_err(), "{bad}");
        }
        std::fs::write(&p, "[train]\nmystery = 1\n").unwrap();
        let err = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(err.contains("mystery"), "{err}");
    }

    #[test]
    fn cross_section_checks() {
        assert!(RunConfig::load(None, &["data.size=30".into()]).is_err());
        assert!(RunConfig::load(None, &["data.held_out=4".into()]).is_err());
        assert!(RunConfig::load(None, &["lsa.p=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["network.n_classes=3".into()]).is_err());
    }
}
