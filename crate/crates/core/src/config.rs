//! Declarative experiment configuration: strict TOML parsing, unknown keys
//! rejected, defaults matching the reference training setup (lr 0.001,
//! batch size 10, one local epoch, 20 clients).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{AlgorithmKind, CwMode};

/// Where the run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
    },
}

/// How the data is spread across clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionConfig {
    Pathological { classes_per_client: usize },
    Dirichlet { beta: f64 },
}

/// A fully validated description of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub algorithm: AlgorithmKind,
    pub clients: usize,
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Hidden layer widths; input and output sizes come from the dataset.
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Export per-mini-batch WDR distances for round 1.
    pub trace_batches: bool,
    /// Fraction of clients participating each round; 1.0 = everyone.
    pub participation_rate: f64,
    /// Initialize every class-specific global model from the same tensor.
    pub shared_global_init: bool,
}

impl ExperimentConfig {
    /// Layer sizes for this run's classifier.
    pub fn architecture(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut arch = Vec::with_capacity(self.hidden_layers.len() + 2);
        arch.push(input_dim);
        arch.extend_from_slice(&self.hidden_layers);
        arch.push(classes);
        arch
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: RawDataset,
    algorithm: RawAlgorithm,
    partition: Option<RawPartition>,
    clients: Option<usize>,
    rounds: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    local_epochs: Option<usize>,
    hidden_layers: Option<Vec<usize>>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    trace_batches: Option<bool>,
    participation_rate: Option<f64>,
    shared_global_init: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: String,
    classes: Option<usize>,
    dim: Option<usize>,
    per_class: Option<usize>,
    separation: Option<f64>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    limit: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    kind: String,
    classes_per_client: Option<usize>,
    beta: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithm {
    kind: String,
    mode: Option<String>,
    lambda: Option<f64>,
    mu: Option<f64>,
    finetune_epochs: Option<usize>,
}

fn err(field: &str, constraint: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {constraint}"))
}

fn reject_if_set<T>(value: &Option<T>, field: &str, context: &str) -> Result<()> {
    if value.is_some() {
        return Err(err(field, format!("not valid for {context}")));
    }
    Ok(())
}

fn validate_dataset(raw: RawDataset) -> Result<DatasetConfig> {
    match raw.kind.as_str() {
        "synthetic" => {
            reject_if_set(&raw.images, "dataset.images", "synthetic datasets")?;
            reject_if_set(&raw.labels, "dataset.labels", "synthetic datasets")?;
            reject_if_set(&raw.limit, "dataset.limit", "synthetic datasets")?;
            let classes = raw.classes.unwrap_or(10);
            let dim = raw.dim.unwrap_or(16);
            let per_class = raw.per_class.unwrap_or(160);
            let separation = raw.separation.unwrap_or(3.0);
            if classes < 2 {
                return Err(err("dataset.classes", "must be >= 2"));
            }
            if dim == 0 {
                return Err(err("dataset.dim", "must be >= 1"));
            }
            if per_class == 0 {
                return Err(err("dataset.per_class", "must be >= 1"));
            }
            if separation <= 0.0 {
                return Err(err("dataset.separation", "must be > 0"));
            }
            Ok(DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                separation,
            })
        }
        "mnist" => {
            reject_if_set(&raw.classes, "dataset.classes", "mnist (fixed at 10)")?;
            reject_if_set(&raw.dim, "dataset.dim", "mnist (from the files)")?;
            reject_if_set(&raw.per_class, "dataset.per_class", "mnist")?;
            reject_if_set(&raw.separation, "dataset.separation", "mnist")?;
            let images = raw
                .images
                .ok_or_else(|| err("dataset.images", "required for mnist"))?;
            let labels = raw
                .labels
                .ok_or_else(|| err("dataset.labels", "required for mnist"))?;
            if raw.limit == Some(0) {
                return Err(err("dataset.limit", "must be >= 1"));
            }
            Ok(DatasetConfig::Mnist {
                images,
                labels,
                limit: raw.limit,
            })
        }
        other => Err(err(
            "dataset.kind",
            format!("unknown kind {other:?}, expected synthetic or mnist"),
        )),
    }
}

fn validate_partition(raw: Option<RawPartition>) -> Result<PartitionConfig> {
    let Some(raw) = raw else {
        return Ok(PartitionConfig::Pathological {
            classes_per_client: 2,
        });
    };
    match raw.kind.as_str() {
        "pathological" => {
            reject_if_set(&raw.beta, "partition.beta", "pathological partitions")?;
            let classes_per_client = raw.classes_per_client.unwrap_or(2);
            if classes_per_client == 0 {
                return Err(err("partition.classes_per_client", "must be >= 1"));
            }
            Ok(PartitionConfig::Pathological { classes_per_client })
        }
        "dirichlet" => {
            reject_if_set(
                &raw.classes_per_client,
                "partition.classes_per_client",
                "dirichlet partitions",
            )?;
            let beta = raw.beta.unwrap_or(0.1);
            if beta <= 0.0 || !beta.is_finite() {
                return Err(err("partition.beta", "must be > 0 and finite"));
            }
            Ok(PartitionConfig::Dirichlet { beta })
        }
        other => Err(err(
            "partition.kind",
            format!("unknown kind {other:?}, expected pathological or dirichlet"),
        )),
    }
}

fn validate_algorithm(raw: RawAlgorithm) -> Result<AlgorithmKind> {
    match raw.kind.as_str() {
        "fedavg" => {
            reject_if_set(&raw.mode, "algorithm.mode", "fedavg")?;
            reject_if_set(&raw.lambda, "algorithm.lambda", "fedavg")?;
            reject_if_set(&raw.mu, "algorithm.mu", "fedavg")?;
            reject_if_set(&raw.finetune_epochs, "algorithm.finetune_epochs", "fedavg")?;
            Ok(AlgorithmKind::FedAvg)
        }
        "fedavg_finetune" => {
            reject_if_set(&raw.mode, "algorithm.mode", "fedavg_finetune")?;
            reject_if_set(&raw.lambda, "algorithm.lambda", "fedavg_finetune")?;
            reject_if_set(&raw.mu, "algorithm.mu", "fedavg_finetune")?;
            Ok(AlgorithmKind::FedAvgFinetune {
                finetune_epochs: raw.finetune_epochs.unwrap_or(5),
            })
        }
        "fedprox" => {
            reject_if_set(&raw.mode, "algorithm.mode", "fedprox")?;
            reject_if_set(&raw.lambda, "algorithm.lambda", "fedprox")?;
            reject_if_set(&raw.finetune_epochs, "algorithm.finetune_epochs", "fedprox")?;
            let mu = raw.mu.unwrap_or(0.001);
            if mu < 0.0 || !mu.is_finite() {
                return Err(err("algorithm.mu", "must be >= 0 and finite"));
            }
            Ok(AlgorithmKind::FedProx { mu })
        }
        "local_only" => {
            reject_if_set(&raw.mode, "algorithm.mode", "local_only")?;
            reject_if_set(&raw.lambda, "algorithm.lambda", "local_only")?;
            reject_if_set(&raw.mu, "algorithm.mu", "local_only")?;
            reject_if_set(&raw.finetune_epochs, "algorithm.finetune_epochs", "local_only")?;
            Ok(AlgorithmKind::LocalOnly)
        }
        "cwfedavg" => {
            reject_if_set(&raw.mu, "algorithm.mu", "cwfedavg")?;
            reject_if_set(&raw.finetune_epochs, "algorithm.finetune_epochs", "cwfedavg")?;
            let mode = raw.mode.as_deref().unwrap_or("estimated_wdr");
            let mode = match mode {
                "true_dist" => {
                    reject_if_set(&raw.lambda, "algorithm.lambda", "mode true_dist")?;
                    CwMode::TrueDist
                }
                "estimated_no_wdr" => {
                    reject_if_set(&raw.lambda, "algorithm.lambda", "mode estimated_no_wdr")?;
                    CwMode::EstimatedNoWdr
                }
                "estimated_wdr" => {
                    let lambda = raw.lambda.unwrap_or(1.0);
                    if lambda < 0.0 || !lambda.is_finite() {
                        return Err(err("algorithm.lambda", "must be >= 0 and finite"));
                    }
                    CwMode::EstimatedWdr { lambda }
                }
                other => {
                    return Err(err(
                        "algorithm.mode",
                        format!(
                            "unknown mode {other:?}, expected true_dist, estimated_no_wdr or estimated_wdr"
                        ),
                    ))
                }
            };
            Ok(AlgorithmKind::CwFedAvg { mode })
        }
        other => Err(err(
            "algorithm.kind",
            format!(
                "unknown kind {other:?}, expected fedavg, fedavg_finetune, fedprox, local_only or cwfedavg"
            ),
        )),
    }
}

/// Parses and validates a config from TOML text.
pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;

    let dataset = validate_dataset(raw.dataset)?;
    let partition = validate_partition(raw.partition)?;
    let algorithm = validate_algorithm(raw.algorithm)?;

    let clients = raw.clients.unwrap_or(20);
    if clients == 0 {
        return Err(err("clients", "must be >= 1"));
    }
    let rounds = raw.rounds.unwrap_or(100);
    if rounds == 0 {
        return Err(err("rounds", "must be >= 1"));
    }
    let lr = raw.lr.unwrap_or(0.001);
    if lr <= 0.0 || !lr.is_finite() {
        return Err(err("lr", "must be > 0 and finite"));
    }
    let batch_size = raw.batch_size.unwrap_or(10);
    if batch_size == 0 {
        return Err(err("batch_size", "must be >= 1"));
    }
    let local_epochs = raw.local_epochs.unwrap_or(1);
    if local_epochs == 0 {
        return Err(err("local_epochs", "must be >= 1"));
    }
    let hidden_layers = raw.hidden_layers.unwrap_or_else(|| vec![64]);
    if hidden_layers.contains(&0) {
        return Err(err("hidden_layers", "every width must be >= 1"));
    }
    let participation_rate = raw.participation_rate.unwrap_or(1.0);
    if !(participation_rate > 0.0 && participation_rate <= 1.0) {
        return Err(err("participation_rate", "must be in (0, 1]"));
    }

    Ok(ExperimentConfig {
        dataset,
        partition,
        algorithm,
        clients,
        rounds,
        lr,
        batch_size,
        local_epochs,
        hidden_layers,
        seed: raw.seed.unwrap_or(0),
        output_dir: raw.output_dir,
        trace_batches: raw.trace_batches.unwrap_or(false),
        participation_rate,
        shared_global_init: raw.shared_global_init.unwrap_or(false),
    })
}

/// Reads and validates a TOML config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    from_toml_str(&text)
}
