//! Run configuration for `train` and `eval`.
//!
//! ```toml
//! seed = 3
//!
//! [model]
//! preset = "desk-d64-l4"   # optional; explicit keys below override it
//! mixer = "mlp"
//!
//! [optimizer]
//! epochs = 20
//! lr = 2e-3
//!
//! [dataset]
//! kind = "blobs"
//! samples = 1000
//!
//! [output]
//! dir = "runs/blobs"
//! ```
//!
//! Unknown keys anywhere are rejected. [`RunConfig::to_toml`] writes every
//! field with its resolved value and loads back to the same config.

use std::path::{Path, PathBuf};

use grkan::data::{self, BlobSpec, CsvTarget};
use grkan::model::{Dataset, Preset, Targets, Task, TrainConfig};
use grkan::{KatConfig, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetColumn {
    Class,
    Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian-blob images, one prototype per class.
    Blobs {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_patch")]
        patch: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// `sin(2πx) + 0.5·sin(6πx)` on `x ~ U(0, 1)`, one token of one feature.
    Periodic {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    /// Rows of `target,features…` without a header.
    Csv {
        path: PathBuf,
        target: TargetColumn,
        tokens: usize,
    },
    /// IDX image and label files (the MNIST container format).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_patch")]
        patch: usize,
    },
}

fn default_samples() -> usize {
    1000
}
fn default_classes() -> usize {
    10
}
fn default_side() -> usize {
    8
}
fn default_patch() -> usize {
    4
}
fn default_noise() -> f64 {
    1.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            samples: default_samples(),
            classes: default_classes(),
            side: default_side(),
            patch: default_patch(),
            noise: default_noise(),
        }
    }
}

impl DatasetSpec {
    /// Relative paths resolve against `base` (the config file's directory).
    pub fn load<T: Scalar>(&self, seed: u64, base: &Path) -> Result<Dataset<T>> {
        let at = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        Ok(match self {
            DatasetSpec::Blobs {
                samples,
                classes,
                side,
                patch,
                noise,
            } => data::gaussian_blobs(
                *samples,
                BlobSpec {
                    classes: *classes,
                    side: *side,
                    patch: *patch,
                    noise: *noise,
                },
                seed,
            )?,
            DatasetSpec::Periodic { samples } => data::periodic_regression(*samples, seed)?,
            DatasetSpec::Csv {
                path,
                target,
                tokens,
            } => {
                let target = match target {
                    TargetColumn::Class => CsvTarget::Class,
                    TargetColumn::Value => CsvTarget::Value,
                };
                data::load_csv(at(path), *tokens, target)?
            }
            DatasetSpec::Idx {
                images,
                labels,
                patch,
            } => data::load_idx(at(images), at(labels), *patch)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub trace: String,
    pub checkpoint: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("runs/latest"),
            trace: "trace.csv".into(),
            checkpoint: "model.grkn".into(),
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: KatConfig,
    pub optimizer: TrainConfig,
    pub dataset: DatasetSpec,
    pub output: OutputSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    precision: Precision,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    optimizer: toml::Table,
    #[serde(default)]
    dataset: DatasetSpec,
    #[serde(default)]
    output: OutputSpec,
}

/// Dataset shape the model has to agree with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub tokens: usize,
    pub features: usize,
    pub outputs: usize,
    pub task: Task,
}

impl DataShape {
    pub fn of<T: Scalar>(data: &Dataset<T>) -> Self {
        DataShape {
            tokens: data.tokens(),
            features: data.features(),
            outputs: data.outputs(),
            task: match data.targets {
                Targets::Labels(_) => Task::Classification,
                Targets::Values(_) => Task::Regression,
            },
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Overlays `overrides` on the serialized `base`. Unknown keys are left for
/// the target's `deny_unknown_fields` to reject.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(
    base: &T,
    overrides: toml::Table,
    block: &str,
) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| usage(format!("[{block}]: {e}")))?;
    table.extend(overrides);
    table
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("[{block}]: {}", e.message())))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| usage(format!("config: {}", e.message())))?;
        Self::resolve(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    fn resolve(mut raw: RawConfig) -> Result<RunConfig> {
        // The echoed config repeats the seed here; anything else is a conflict.
        if let Some(s) = raw.optimizer.get("seed") {
            if s.as_integer() != i64::try_from(raw.seed).ok() {
                return Err(usage("[optimizer]: set 'seed' at the top level"));
            }
        }
        let optimizer = overlay(
            &TrainConfig {
                seed: raw.seed,
                ..TrainConfig::default()
            },
            raw.optimizer,
            "optimizer",
        )?;

        let base = match raw.model.remove("preset") {
            None => KatConfig::default(),
            Some(toml::Value::String(s)) => s.parse::<Preset>()?.config(),
            Some(v) => return Err(usage(format!("[model]: preset must be a string, got {v}"))),
        };
        let model = overlay(&base, raw.model, "model")?;
        Ok(RunConfig {
            seed: raw.seed,
            precision: raw.precision,
            model,
            optimizer,
            dataset: raw.dataset,
            output: raw.output,
        })
    }

    /// Same as [`from_toml`](Self::from_toml), but model keys that describe
    /// the data (`tokens`, `token_features`, `outputs`, `task`) are taken
    /// from `shape` unless the file sets them.
    pub fn from_toml_for_data(text: &str, shape: DataShape) -> Result<RunConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| usage(format!("config: {}", e.message())))?;
        let explicit: Vec<String> = raw.model.keys().cloned().collect();
        let mut cfg = Self::resolve(raw)?;
        let has = |k: &str| explicit.iter().any(|e| e == k);
        let m = &mut cfg.model;
        if !has("tokens") {
            m.tokens = shape.tokens;
        }
        if !has("token_features") {
            m.token_features = shape.features;
        }
        if !has("outputs") {
            m.outputs = shape.outputs;
        }
        if !has("task") {
            m.task = shape.task;
        }
        Ok(cfg)
    }

    /// Errors when the model cannot consume `shape`.
    pub fn check_data(&self, shape: DataShape) -> Result<()> {
        let m = &self.model;
        let want = DataShape {
            tokens: m.tokens,
            features: m.token_features,
            outputs: m.outputs,
            task: m.task,
        };
        if want != shape {
            return Err(usage(format!(
                "model expects {want:?} but the dataset provides {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use grkan::model::MixerKind;

    #[test]
    fn preset_with_overrides() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 4
            [model]
            preset = "desk-d128-l2"
            mixer = "mlp"
            [optimizer]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.dim, 128);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.model.mixer, MixerKind::Mlp);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.optimizer.seed, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "colour = 1",
            "[model]\nwidth = 3",
            "[optimizer]\nmomentum = 0.9",
            "[dataset]\nkind = \"blobs\"\nsize = 3",
            "[output]\nfolder = \"x\"",
            "[optimizer]\nseed = 2",
            "[model]\npreset = \"huge\"",
        ] {
            assert!(
                matches!(
                    RunConfig::from_toml(text),
                    Err(CliError::Usage(_)) | Err(CliError::Core(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn echoed_config_round_trips() {
        let cfg = RunConfig::from_toml(
            "[model]\npreset = \"desk-d64-l2\"\n[dataset]\nkind = \"periodic\"",
        )
        .unwrap();
        let text = cfg.to_toml();
        assert!(text.contains("mixer_hidden = 256"));
        assert!(text.contains("weight_decay"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn data_keys_follow_dataset_unless_set() {
        let shape = DataShape {
            tokens: 1,
            features: 1,
            outputs: 1,
            task: Task::Regression,
        };
        let cfg = RunConfig::from_toml_for_data("[model]\noutputs = 7", shape).unwrap();
        assert_eq!(
            (cfg.model.tokens, cfg.model.outputs, cfg.model.task),
            (1, 7, Task::Regression)
        );
        assert!(cfg.check_data(shape).is_err());
    }
}
