//! Experiment configuration: one JSON document describes one run.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rls_core::data::synthetic_blobs;
use rls_core::{Architecture, AttackConfig, Dataset, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, AtStage, HarnessError, Result, Stage};

/// Standard MNIST file names inside a directory.
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const OPTDIGITS_IMAGES: &str = "optdigits-images-idx3-ubyte";
pub const OPTDIGITS_LABELS: &str = "optdigits-labels-idx1-ubyte";

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
    /// Directory holding the 8×8 handwritten-digit IDX pair.
    Optdigits { dir: PathBuf },
    /// Explicit IDX files. Without a test pair the train pair is split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default = "ten")]
        class_count: usize,
    },
    /// Gaussian clusters, images shaped `1×1×dim`.
    Blobs {
        n_per_class: usize,
        class_count: usize,
        dim: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed for subsetting and synthetic generation.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ArchitectureSpec {
    /// Flatten, hidden dense+ReLU layers, dense classifier.
    Mlp {
        hidden: Vec<usize>,
    },
    SmallCnn,
    /// Explicit layers with optional `placement` tags.
    Inline(Architecture),
}

impl ArchitectureSpec {
    /// Concrete architecture for samples of `sample_shape` and `classes` labels.
    pub fn resolve(&self, sample_shape: &[usize], classes: usize) -> rls_core::Result<Architecture> {
        let arch = match self {
            ArchitectureSpec::Mlp { hidden } => Architecture::mlp(sample_shape.to_vec(), hidden, classes),
            ArchitectureSpec::SmallCnn => Architecture::small_cnn(sample_shape.to_vec(), classes)?,
            ArchitectureSpec::Inline(arch) => {
                if arch.input_shape != sample_shape {
                    return Err(rls_core::Error::config(
                        "architecture.input_shape",
                        format!(
                            "{:?} does not match data samples {sample_shape:?}",
                            arch.input_shape
                        ),
                    ));
                }
                arch.clone()
            }
        };
        let out = arch.output_classes()?;
        if out != classes {
            return Err(rls_core::Error::config(
                "architecture",
                format!("produces {out} class scores for a {classes}-class dataset"),
            ));
        }
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Vote counts evaluated for defended inference.
    pub n_votes: Vec<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { n_votes: vec![1] }
    }
}

fn default_m() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub architecture: ArchitectureSpec,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub defense: DefenseConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(json_err(Stage::Config, "<config>"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(Stage::Config, path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(json_err(Stage::Config, path))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field that can be judged without touching data.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.n_train == 0 {
            return Err(HarnessError::config("dataset.n_train", "must be at least 1"));
        }
        if d.n_test == 0 {
            return Err(HarnessError::config("dataset.n_test", "must be at least 1"));
        }
        match &d.source {
            DataSource::Idx {
                test_images,
                test_labels,
                class_count,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(HarnessError::config(
                        "dataset.source.test_labels",
                        "test_images and test_labels must be given together",
                    ));
                }
                if *class_count < 2 {
                    return Err(HarnessError::config(
                        "dataset.source.class_count",
                        "must be at least 2",
                    ));
                }
            }
            DataSource::Blobs {
                n_per_class,
                class_count,
                dim,
                spread,
            } => {
                if *class_count < 2 {
                    return Err(HarnessError::config(
                        "dataset.source.class_count",
                        "must be at least 2",
                    ));
                }
                if *dim == 0 {
                    return Err(HarnessError::config("dataset.source.dim", "must be at least 1"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(HarnessError::config(
                        "dataset.source.spread",
                        format!("must be finite and ≥ 0, got {spread}"),
                    ));
                }
                if d.n_train + d.n_test > n_per_class * class_count {
                    return Err(HarnessError::config(
                        "dataset.n_train",
                        format!(
                            "n_train + n_test = {} exceeds the {} generated points",
                            d.n_train + d.n_test,
                            n_per_class * class_count
                        ),
                    ));
                }
            }
            DataSource::Mnist { .. } | DataSource::Optdigits { .. } => {}
        }
        if let ArchitectureSpec::Mlp { hidden } = &self.architecture {
            if hidden.contains(&0) {
                return Err(HarnessError::config(
                    "architecture.hidden",
                    "widths must be positive",
                ));
            }
        }
        if self.m == 0 {
            return Err(HarnessError::config("m", "must be at least 1"));
        }
        self.train.validate().at(Stage::Config)?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| match e {
                rls_core::Error::Config { field, reason } => {
                    HarnessError::config(format!("attacks[{i}].{field}"), reason)
                }
                other => HarnessError::config(format!("attacks[{i}]"), other.to_string()),
            })?;
        }
        if self.defense.n_votes.is_empty() {
            return Err(HarnessError::config(
                "defense.n_votes",
                "must list at least one vote count",
            ));
        }
        if let Some(i) = self.defense.n_votes.iter().position(|&v| v == 0) {
            return Err(HarnessError::config(
                format!("defense.n_votes[{i}]"),
                "must be at least 1",
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(HarnessError::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (sorted-key, defaults filled) JSON form,
    /// ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Train and test sets per the dataset spec.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        let pair = |images: &Path, labels: &Path, classes: usize| {
            Dataset::load_idx(images, labels, classes).at(Stage::Data)
        };
        let split_pool =
            |pool: Dataset, rng: &mut ChaCha8Rng| pool.split(d.n_train, d.n_test, rng).at(Stage::Data);
        let separate = |train: Dataset, test: Dataset, rng: &mut ChaCha8Rng| -> Result<(Dataset, Dataset)> {
            Ok((
                train.subset(d.n_train, rng).at(Stage::Data)?,
                test.subset(d.n_test, rng).at(Stage::Data)?,
            ))
        };
        match &d.source {
            DataSource::Mnist { dir } => separate(
                pair(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS), 10)?,
                pair(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS), 10)?,
                &mut rng,
            ),
            DataSource::Optdigits { dir } => split_pool(
                pair(&dir.join(OPTDIGITS_IMAGES), &dir.join(OPTDIGITS_LABELS), 10)?,
                &mut rng,
            ),
            DataSource::Idx {
                images,
                labels,
                test_images: Some(ti),
                test_labels: Some(tl),
                class_count,
            } => separate(
                pair(images, labels, *class_count)?,
                pair(ti, tl, *class_count)?,
                &mut rng,
            ),
            DataSource::Idx {
                images,
                labels,
                class_count,
                ..
            } => split_pool(pair(images, labels, *class_count)?, &mut rng),
            DataSource::Blobs {
                n_per_class,
                class_count,
                dim,
                spread,
            } => {
                let pool =
                    synthetic_blobs(d.seed, *n_per_class, *class_count, *dim, *spread).at(Stage::Data)?;
                split_pool(pool, &mut rng)
            }
        }
    }
}
