//! Run configuration: one TOML (or JSON) document with the sections
//! `dataset`, `flow`, `sampling`, `augment`, `arch`, `train` and `eval`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset_io::GlyphConfig;
use crate::error::{MffError, Result};
use crate::network::{ArchConfig, ConvBlock};
use crate::optical_flow::FlowParams;
use crate::trainer::{EvalConfig, Experiment, SamplingConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// JSONL manifest. Relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Root of the per-video flow caches; defaults to `flow_cache/` next to
    /// the manifest.
    pub cache_dir: Option<PathBuf>,
    /// Generator settings for `synth`.
    pub glyph: GlyphConfig,
}

/// Architecture overrides. Omitted fields follow the other sections:
/// `in_channels = 3 + 2n`, `segments = N`, `input_size = augment.final_size`,
/// `num_classes` from the dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub input_size: Option<usize>,
    pub in_channels: Option<usize>,
    pub conv_blocks: Option<Vec<ConvBlock>>,
    pub segments: Option<usize>,
    pub fc6_units: Option<usize>,
    pub fc7_units: Option<usize>,
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub flow: FlowParams,
    pub sampling: SamplingConfig,
    pub augment: AugmentConfig,
    pub arch: ArchSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Splits a serde path such as `train.lr_steps[0].factor` into section and key.
fn split_path(path: &str) -> (String, String) {
    match path.split_once('.') {
        Some((section, key)) => (section.to_string(), key.to_string()),
        None if path == "." || path.is_empty() => ("root".into(), "-".into()),
        None => (path.to_string(), "-".into()),
    }
}

fn path_error<E: std::fmt::Display>(err: serde_path_to_error::Error<E>, msg: impl Fn(&E) -> String) -> MffError {
    let (section, key) = split_path(&err.path().to_string());
    MffError::config(section, key, msg(err.inner()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| MffError::config("root", "-", e.message().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| path_error(e, |inner| inner.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| path_error(e, |inner| inner.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` or TOML file; relative dataset paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MffError::io(path, e))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset.manifest, &mut cfg.dataset.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Section-local checks plus cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.dataset.glyph.validate()?;
        self.resolve_arch(self.arch.num_classes.unwrap_or(2)).validate()?;
        self.experiment(self.arch.num_classes.unwrap_or(2)).validate()
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.dataset.cache_dir.clone().or_else(|| {
            self.dataset
                .manifest
                .as_ref()
                .map(|m| m.parent().unwrap_or(Path::new("")).join("flow_cache"))
        })
    }

    fn resolve_arch(&self, num_classes: usize) -> ArchConfig {
        let d = ArchConfig::default();
        let a = &self.arch;
        ArchConfig {
            input_size: a.input_size.unwrap_or(self.augment.final_size),
            in_channels: a.in_channels.unwrap_or(3 + 2 * self.sampling.flow_frames),
            conv_blocks: a.conv_blocks.clone().unwrap_or(d.conv_blocks),
            segments: a.segments.unwrap_or(self.sampling.segments),
            fc6_units: a.fc6_units.unwrap_or(d.fc6_units),
            fc7_units: a.fc7_units.unwrap_or(d.fc7_units),
            num_classes: a.num_classes.unwrap_or(num_classes),
        }
    }

    /// The training experiment for a dataset with `num_classes` classes.
    pub fn experiment(&self, num_classes: usize) -> Experiment {
        Experiment {
            sampling: self.sampling.clone(),
            arch: self.resolve_arch(num_classes),
            augment: self.augment.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }
}

/// Reads a bare table of flow parameters (the keys of the `[flow]` section).
pub fn load_flow_params(path: &Path) -> Result<FlowParams> {
    let text = std::fs::read_to_string(path).map_err(|e| MffError::io(path, e))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| MffError::config("flow", "-", e.message().to_string()))?;
    let params: FlowParams = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        MffError::config("flow", if key == "." { "-".to_string() } else { key }, e.inner().message().to_string())
    })?;
    params.validate()?;
    Ok(params)
}
