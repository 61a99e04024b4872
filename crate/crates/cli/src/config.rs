use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use omrd_core::data::{synth_dataset, Dataset, SynthConfig};
use omrd_core::model::ModelConfig;
use omrd_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synth,
    Dir,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: Source,
    /// Dataset directory when `source` is `dir`.
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("omrd_out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::usage(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::usage(format!("train: {e}")))?;
        match self.dataset.source {
            Source::Synth => {
                self.dataset
                    .synth
                    .validate()
                    .map_err(|e| CliError::usage(format!("dataset.synth: {e}")))?;
                if self.dataset.synth.image_hw != self.model.backbone.input_hw {
                    return Err(CliError::usage(format!(
                        "dataset.synth.image_hw {:?} differs from model.backbone.input_hw {:?}",
                        self.dataset.synth.image_hw, self.model.backbone.input_hw
                    )));
                }
            }
            Source::Dir => {
                if self.dataset.path.is_none() {
                    return Err(CliError::usage("dataset.path: required when dataset.source is \"dir\""));
                }
            }
        }
        Ok(())
    }

    /// Copy with every implicit default spelled out.
    pub fn resolved(&self) -> Self {
        Self {
            train: self.train.resolved(),
            dataset: DatasetConfig {
                synth: SynthConfig {
                    heldout_ids: Some(self.dataset.synth.num_heldout()),
                    ..self.dataset.synth.clone()
                },
                ..self.dataset.clone()
            },
            ..self.clone()
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        match self.dataset.source {
            Source::Synth => synth_dataset(&self.dataset.synth).map_err(CliError::from_core),
            Source::Dir => {
                let dir = self.dataset.path.as_deref().expect("validated");
                let (ds, stats) = Dataset::load(dir, self.model.backbone.input_hw).map_err(CliError::input)?;
                if stats.skipped_names + stats.skipped_unreadable > 0 {
                    log::warn!(
                        "skipped {} unparsable names and {} unreadable images under {}",
                        stats.skipped_names,
                        stats.skipped_unreadable,
                        dir.display()
                    );
                }
                Ok(ds)
            }
        }
    }
}

/// Parses a JSON file; errors name the offending key path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let at = if at == "." { String::new() } else { format!(" at `{at}`") };
        CliError::usage(format!("{}{at}: {}", path.display(), e.inner()))
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("config types serialise");
    std::fs::write(path, text + "\n").map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        RunConfig::load(&p)
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_nested_key_is_named() {
        let e = parse(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("train.epochz") || e.message.contains("epochz"), "{}", e.message);
        assert!(e.message.contains("`train"), "{}", e.message);
    }

    #[test]
    fn dir_source_needs_path() {
        assert_eq!(parse(r#"{"dataset": {"source": "dir"}}"#).unwrap_err().code, 2);
    }

    #[test]
    fn resolved_spells_out_schedule_and_holdout() {
        let r = RunConfig::default().resolved();
        assert!(r.train.lr.is_some());
        assert!(r.dataset.synth.heldout_ids.is_some());
        assert_eq!(r.resolved(), r);
    }
}
