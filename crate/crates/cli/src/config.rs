//! Run configuration: a TOML file with one table per concern, overridden by
//! `--set key=value` flags. Every field has a default, and the merged result
//! is written back out as a snapshot that fully determines the run.

use std::path::{Path, PathBuf};

use kws_core::audio::PcenParams;
use kws_core::data::synth::SynthConfig;
use kws_core::data::{AugmentationBank, AugmentationSpec};
use kws_core::eval::StreamConfig;
use kws_core::train::TrainConfig;
use kws_core::Architecture;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV manifest with `path,label,split[,speaker]`.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Newline-delimited list of noise WAVs.
    pub noise_list: Option<PathBuf>,
    /// Newline-delimited list of impulse-response WAVs.
    pub rir_list: Option<PathBuf>,
    pub snr_choices_db: Vec<f64>,
    pub augment_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let spec = AugmentationSpec::default();
        AugmentConfig {
            noise_list: None,
            rir_list: None,
            snr_choices_db: spec.snr_choices_db,
            augment_probability: spec.augment_probability,
        }
    }
}

impl AugmentConfig {
    pub fn bank(&self) -> CliResult<AugmentationBank> {
        let spec = AugmentationSpec {
            snr_choices_db: self.snr_choices_db.clone(),
            augment_probability: self.augment_probability,
            ..AugmentationSpec::default()
        }
        .with_lists(self.noise_list.as_deref(), self.rir_list.as_deref())?;
        Ok(AugmentationBank::load(&spec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: Architecture,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub frontend: PcenParams,
    pub stream: StreamConfig,
    pub corpus: SynthConfig,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(config_err)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.manifest, &mut self.augment.noise_list, &mut self.augment.rir_list]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Applies `key=value` overrides. A bare key must name a field of
    /// exactly one table; `table.key` is always accepted. Values use TOML
    /// syntax, with unparseable values taken as strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> CliResult<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self).map_err(config_err)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = parse_value(raw);
            let (table, field) = match key.split_once('.') {
                Some((t, f)) => (t.to_string(), f.to_string()),
                None => {
                    let owners: Vec<String> = Self::field_owners(key);
                    match owners.len() {
                        1 => (owners[0].clone(), key.to_string()),
                        0 => return Err(CliError::Config(format!("unknown key `{key}`"))),
                        _ => {
                            return Err(CliError::Config(format!(
                                "key `{key}` is ambiguous; use one of {}",
                                owners.iter().map(|t| format!("{t}.{key}")).collect::<Vec<_>>().join(", ")
                            )))
                        }
                    }
                }
            };
            if !Self::field_owners(&field).contains(&table) {
                return Err(CliError::Config(format!("unknown key `{table}.{field}`")));
            }
            let t = root
                .get_mut(&table)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| CliError::Config(format!("unknown table `{table}`")))?;
            t.insert(field, value);
        }
        *self = root.try_into().map_err(config_err)?;
        Ok(())
    }

    /// Tables having a field named `key`, judged from the full default
    /// config plus the optional path fields.
    fn field_owners(key: &str) -> Vec<String> {
        let optional: &[(&str, &str)] = &[("data", "manifest"), ("augment", "noise_list"), ("augment", "rir_list")];
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut owners: Vec<String> = defaults
            .iter()
            .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
            .map(|(k, _)| k.clone())
            .collect();
        owners.extend(optional.iter().filter(|(_, f)| *f == key).map(|(t, _)| t.to_string()));
        owners.sort();
        owners.dedup();
        owners
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.corpus.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.frontend.validate().map_err(config_err)?;
        if !(0.0..=1.0).contains(&self.augment.augment_probability) {
            return Err(CliError::Config(format!(
                "augment.augment_probability {} outside [0, 1]",
                self.augment.augment_probability
            )));
        }
        if !(self.stream.hop_s > 0.0) || !(self.stream.refractory_s >= 0.0) {
            return Err(CliError::Config("stream.hop_s must be positive and stream.refractory_s non-negative".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> CliResult<&Path> {
        self.data
            .manifest
            .as_deref()
            .ok_or_else(|| CliError::Config("missing required key `data.manifest`".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
