//! The run-config file: one JSON document mirroring the model spec,
//! the training hyperparameters, the plan parameters, and the data
//! source. Unknown keys are rejected everywhere; command-line flags
//! override file values field by field.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rbdc_core::coupling::PaddingMode;
use rbdc_core::data::{parse_idx, Dataset, IdxContent, Split, TaskData};
use rbdc_core::error::{Error, Result};
use rbdc_core::protocol::{SplitMode, TrainConfig};
use rbdc_core::tensor::Tensor;
use rbdc_core::zoo::ModelSpec;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Optional so pure cost planning (explicit forward costs) needs
    /// no model section; commands that build models require it.
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub data: DataSection,
}

/// Plan parameters: the training ratio, the recursion depth (as steps
/// or as a minimum width), the split mode, padding, the budget (one of
/// `epochs`, `alpha`, `budget_flops`), and the seeds to run.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub ratio: f64,
    pub steps: Option<usize>,
    pub min_size: Option<usize>,
    pub mode: SplitMode,
    pub padding: PaddingMode,
    pub epochs: Option<f64>,
    pub alpha: Option<f64>,
    pub budget_flops: Option<f64>,
    pub baseline_epochs: f64,
    pub seeds: Vec<u64>,
    /// Explicit per-level forward costs (level 0 first), for planning
    /// against published numbers instead of a zoo model.
    pub forward_costs: Option<Vec<f64>>,
    /// Dataset size for cost accounting when it differs from the data
    /// section (or when no data is loaded at all).
    pub dataset_size: Option<u64>,
}

impl Default for PlanSection {
    fn default() -> PlanSection {
        PlanSection {
            ratio: 2.0,
            steps: None,
            min_size: None,
            mode: SplitMode::EpochSplit,
            padding: PaddingMode::Zero,
            epochs: None,
            alpha: None,
            budget_flops: None,
            baseline_epochs: 10.0,
            seeds: vec![0],
            forward_costs: None,
            dataset_size: None,
        }
    }
}

/// Where task data comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Deterministic class-mean Gaussian task; shape and class count
    /// come from the model section.
    Synthetic {
        #[serde(default = "default_per_class_train")]
        per_class_train: usize,
        #[serde(default = "default_per_class_eval")]
        per_class_eval: usize,
        #[serde(default)]
        seed: u64,
    },
    /// MNIST-style IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
    /// A task cache previously written by this crate.
    Cache { path: PathBuf },
}

fn default_per_class_train() -> usize {
    16
}

fn default_per_class_eval() -> usize {
    4
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection::Synthetic {
            per_class_train: default_per_class_train(),
            per_class_eval: default_per_class_eval(),
            seed: 0,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            detail: format!("reading config {}: {e}", path.display()),
        })?;
        let config: RunConfigFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            record: None,
            detail: format!("config {}: {e}", path.display()),
        })?;
        if let Some(model) = &config.model {
            model.validate()?;
        }
        config.train.validate_rates()?;
        if !(config.plan.ratio > 0.0) || !config.plan.ratio.is_finite() {
            return Err(Error::Domain {
                detail: format!("plan.ratio must be positive and finite, got {}", config.plan.ratio),
            });
        }
        if !(config.plan.baseline_epochs > 0.0) {
            return Err(Error::Domain { detail: "plan.baseline_epochs must be positive".into() });
        }
        if config.plan.seeds.is_empty() {
            return Err(Error::Domain { detail: "plan.seeds must not be empty".into() });
        }
        Ok(config)
    }

    pub fn require_model(&self) -> Result<&ModelSpec> {
        self.model.as_ref().ok_or_else(|| Error::Domain {
            detail: "this command needs a `model` section in the config".into(),
        })
    }

    /// Materialize the task data the config describes.
    pub fn load_data(&self) -> Result<TaskData> {
        match &self.data {
            DataSection::Synthetic { per_class_train, per_class_eval, seed } => {
                let model = self.require_model()?;
                rbdc_core::data::gen_synthetic(
                    model.num_classes,
                    *per_class_train,
                    *per_class_eval,
                    &model.input_shape,
                    *seed,
                )
            }
            DataSection::Idx { train_images, train_labels, eval_images, eval_labels } => {
                let model = self.require_model()?;
                let train = load_idx_split(Split::Train, train_images, train_labels, model)?;
                let eval = load_idx_split(Split::Eval, eval_images, eval_labels, model)?;
                Ok(TaskData { train, eval })
            }
            DataSection::Cache { path } => TaskData::load(path),
        }
    }
}

fn load_idx_split(
    split: Split,
    images_path: &Path,
    labels_path: &Path,
    model: &ModelSpec,
) -> Result<Dataset> {
    let images_bytes = std::fs::read(images_path).map_err(|e| Error::Io {
        detail: format!("reading {}: {e}", images_path.display()),
    })?;
    let labels_bytes = std::fs::read(labels_path).map_err(|e| Error::Io {
        detail: format!("reading {}: {e}", labels_path.display()),
    })?;
    let images = match parse_idx(&images_bytes)?.content {
        IdxContent::Images(t) => t,
        IdxContent::Labels(_) => {
            return Err(Error::Format {
                record: None,
                detail: format!("{} holds labels, expected images", images_path.display()),
            })
        }
    };
    let labels = match parse_idx(&labels_bytes)?.content {
        IdxContent::Labels(l) => l,
        IdxContent::Images(_) => {
            return Err(Error::Format {
                record: None,
                detail: format!("{} holds images, expected labels", labels_path.display()),
            })
        }
    };
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::Format {
            record: None,
            detail: format!("{n} images but {} labels", labels.len()),
        });
    }
    // IDX image files carry no channel axis; reshape each sample to the
    // model's input shape when the element counts agree.
    let per_sample: usize = images.shape()[1..].iter().product();
    let want: usize = model.input_shape.iter().product();
    if per_sample != want {
        return Err(Error::ShapeMismatch {
            op: "idx_load",
            detail: format!(
                "file samples have {per_sample} values, model expects {want} ({:?})",
                model.input_shape
            ),
        });
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&model.input_shape);
    let samples = Tensor::new(shape, images.data().to_vec(), images.precision())?;
    Dataset::new(split, model.input_shape.clone(), model.num_classes, samples, labels)
}
