//! Experiment runner: dataset, partition, round loop, CSV artifacts, and a
//! deterministic run manifest.
//!
//! Everything a run writes is a pure function of the validated config, so
//! re-running a config reproduces every artifact byte for byte. Wall-clock
//! measurements stay in memory.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, ExperimentConfig, PartitionConfig};
use crate::data::{self, ClientDataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{
    self, AlgorithmKind, CwMode, LocalTrainCfg, RoundOptions, RoundReport, ServerState,
    SingleGlobalState,
};
use crate::metrics::{self, LambdaSweepRow, NormHeatmap};
use crate::nn::ModelParams;
use crate::seed::{derive_seed, rng_for};

/// What a finished run reports.
#[derive(Debug)]
pub struct RunSummary {
    pub best_mean_accuracy: f64,
    /// Position in the trace attaining the best mean accuracy (0-based).
    pub best_round: usize,
    pub trace: Vec<RoundReport>,
    pub final_mean_omega: f64,
    pub config_hash: String,
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct ManifestRound {
    round: usize,
    uploaded_params: usize,
    downloaded_params: usize,
}

#[derive(Serialize)]
struct ArtifactEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    config_hash: &'a str,
    seed: u64,
    clients: usize,
    classes: usize,
    input_dim: usize,
    parameters_per_model: usize,
    best_mean_accuracy: f64,
    best_round: usize,
    final_mean_omega: f64,
    communication: Vec<ManifestRound>,
    warnings: Vec<String>,
    artifacts: Vec<ArtifactEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Stable hash of the validated config (canonical JSON serialization).
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    sha256_hex(canonical.as_bytes())
}

/// Output directory for a run: the configured one, or
/// `$CWFED_OUTPUT_ROOT/run-<hash>` (root defaults to `runs/`).
pub fn resolve_output_dir(cfg: &ExperimentConfig, hash: &str) -> PathBuf {
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let root = std::env::var("CWFED_OUTPUT_ROOT").unwrap_or_else(|_| "runs".to_string());
    Path::new(&root).join(format!("run-{}", &hash[..12]))
}

/// Materializes the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            dim,
            per_class,
            separation,
        } => data::synth_gaussian_mixture(
            *classes,
            *dim,
            *per_class,
            *separation,
            derive_seed(cfg.seed, "dataset", 0, 0),
        ),
        DatasetConfig::Mnist {
            images,
            labels,
            limit,
        } => data::load_idx_mnist(images, labels, *limit),
    }
}

/// Splits the dataset across the configured clients.
pub fn build_partition(
    cfg: &ExperimentConfig,
    dataset: &LabeledDataset,
) -> Result<data::PartitionReport> {
    let seed = derive_seed(cfg.seed, "partition", 0, 0);
    match &cfg.partition {
        PartitionConfig::Pathological { classes_per_client } => {
            data::partition_pathological(dataset, cfg.clients, *classes_per_client, seed)
        }
        PartitionConfig::Dirichlet { beta } => {
            data::partition_dirichlet(dataset, cfg.clients, *beta, seed)
        }
    }
}

fn round_options(cfg: &ExperimentConfig, round: usize) -> RoundOptions {
    let train = LocalTrainCfg {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        local_epochs: cfg.local_epochs,
    };
    let participants = if cfg.participation_rate < 1.0 {
        let m = cfg.clients;
        let count = ((cfg.participation_rate * m as f64).ceil() as usize).clamp(1, m);
        let mut rng = rng_for(cfg.seed, "participation", round as u64, 0);
        let mut ids = rand::seq::index::sample(&mut rng, m, count).into_vec();
        ids.sort_unstable();
        Some(ids)
    } else {
        None
    };
    RoundOptions {
        train,
        root_seed: cfg.seed,
        participants,
        record_batch_omega: cfg.trace_batches && round == 1,
    }
}

struct EngineOutput {
    trace: Vec<RoundReport>,
    /// Class-specific globals for cwFedAVG, the single global otherwise;
    /// empty for local-only runs.
    global_models: Vec<ModelParams>,
    local_models: Vec<Option<ModelParams>>,
}

fn run_engine(
    cfg: &ExperimentConfig,
    clients: &[ClientDataset],
    architecture: &[usize],
) -> Result<EngineOutput> {
    let m = clients.len();
    let mut locals: Vec<Option<ModelParams>> = vec![None; m];
    let mut trace = Vec::with_capacity(cfg.rounds);

    match &cfg.algorithm {
        AlgorithmKind::CwFedAvg { mode } => {
            let mut server = ServerState::init(
                architecture,
                clients,
                mode,
                cfg.seed,
                cfg.shared_global_init,
            )?;
            for round in 1..=cfg.rounds {
                let opts = round_options(cfg, round);
                trace.push(federation::run_round_cwfedavg(
                    &mut server,
                    &mut locals,
                    clients,
                    mode,
                    &opts,
                )?);
            }
            Ok(EngineOutput {
                trace,
                global_models: server.global_models,
                local_models: locals,
            })
        }
        AlgorithmKind::FedAvg | AlgorithmKind::FedProx { .. } => {
            let prox_mu = match cfg.algorithm {
                AlgorithmKind::FedProx { mu } => Some(mu),
                _ => None,
            };
            let mut state = SingleGlobalState::init(architecture, cfg.seed)?;
            for round in 1..=cfg.rounds {
                let opts = round_options(cfg, round);
                trace.push(federation::run_round_fedavg(
                    &mut state,
                    &mut locals,
                    clients,
                    prox_mu,
                    &opts,
                )?);
            }
            Ok(EngineOutput {
                trace,
                global_models: vec![state.global],
                local_models: locals,
            })
        }
        AlgorithmKind::FedAvgFinetune { finetune_epochs } => {
            let mut state = SingleGlobalState::init(architecture, cfg.seed)?;
            for round in 1..=cfg.rounds {
                let opts = round_options(cfg, round);
                trace.push(federation::run_round_fedavg(
                    &mut state,
                    &mut locals,
                    clients,
                    None,
                    &opts,
                )?);
            }
            let train = LocalTrainCfg {
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                local_epochs: cfg.local_epochs,
            };
            let tuned = federation::run_finetune(
                &state.global,
                clients,
                *finetune_epochs,
                &train,
                cfg.seed,
            )?;
            let report = finetune_report(cfg.rounds + 1, clients, &tuned)?;
            trace.push(report);
            let local_models = tuned.into_iter().map(Some).collect();
            Ok(EngineOutput {
                trace,
                global_models: vec![state.global],
                local_models,
            })
        }
        AlgorithmKind::LocalOnly => {
            for round in 1..=cfg.rounds {
                let opts = round_options(cfg, round);
                trace.push(federation::run_round_local_only(
                    &mut locals,
                    clients,
                    architecture,
                    round,
                    &opts,
                )?);
            }
            Ok(EngineOutput {
                trace,
                global_models: Vec::new(),
                local_models: locals,
            })
        }
    }
}

/// Scores the fine-tuned personalized models as one extra trace entry;
/// communication is the final broadcast only.
fn finetune_report(
    round: usize,
    clients: &[ClientDataset],
    models: &[ModelParams],
) -> Result<RoundReport> {
    let mut warnings = Vec::new();
    let mut accuracy = Vec::with_capacity(clients.len());
    let mut omega = Vec::with_capacity(clients.len());
    for (client, model) in clients.iter().zip(models) {
        match federation::evaluate_accuracy(model, &client.test)? {
            Some(acc) => accuracy.push(acc),
            None => {
                warnings.push(format!(
                    "round {round}: client {} has no test samples, scored 0",
                    client.client_id
                ));
                accuracy.push(0.0);
            }
        }
        omega.push(federation::omega_of(
            model,
            &data::true_distribution(client)?,
        ));
    }
    let params = models.first().map_or(0, ModelParams::param_count);
    Ok(RoundReport {
        round,
        mean_accuracy: accuracy.iter().sum::<f64>() / accuracy.len() as f64,
        mean_omega: omega.iter().sum::<f64>() / omega.len() as f64,
        accuracy,
        omega,
        wall_secs: 0.0,
        uploaded_params: 0,
        downloaded_params: clients.len() * params,
        warnings,
        batch_omega: Vec::new(),
    })
}

fn local_heatmap(locals: &[Option<ModelParams>], architecture: &[usize]) -> Result<NormHeatmap> {
    let zero = ModelParams::zeros(architecture)?;
    let models: Vec<ModelParams> = locals
        .iter()
        .map(|m| m.clone().unwrap_or_else(|| zero.clone()))
        .collect();
    metrics::norm_heatmap(&models, "client")
}

/// Runs one experiment end to end and writes all artifacts plus
/// `manifest.json` into the run's output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let hash = config_hash(cfg);
    let out_dir = resolve_output_dir(cfg, &hash);
    std::fs::create_dir_all(&out_dir)?;

    let dataset = load_dataset(cfg)?;
    let partition = build_partition(cfg, &dataset)?;
    let clients = &partition.clients;
    let architecture = cfg.architecture(dataset.input_dim(), dataset.class_count);

    let output = run_engine(cfg, clients, &architecture)?;
    let (best_mean_accuracy, best_round) = metrics::best_mean_accuracy(&output.trace)?;
    let final_mean_omega = output.trace.last().expect("rounds >= 1").mean_omega;

    // artifacts, in a fixed order
    let mut artifacts: Vec<(String, PathBuf)> = Vec::new();
    let mut record = |name: &str| {
        let path = out_dir.join(name);
        artifacts.push((name.to_string(), path.clone()));
        path
    };

    metrics::write_data_distribution(&record("data_distribution.csv"), clients)?;
    metrics::write_accuracy_trace(&record("accuracy_trace.csv"), &output.trace)?;
    metrics::write_omega_trace(&record("omega_trace.csv"), &output.trace)?;
    metrics::write_norm_heatmap(
        &record("norm_heatmap_local.csv"),
        &local_heatmap(&output.local_models, &architecture)?,
    )?;
    if !output.global_models.is_empty() {
        metrics::write_norm_heatmap(
            &record("norm_heatmap_global.csv"),
            &metrics::norm_heatmap(&output.global_models, "model")?,
        )?;
    }
    if cfg.trace_batches {
        let first = output.trace.first().expect("rounds >= 1");
        metrics::write_batch_omega(&record("omega_batch_trace.csv"), &first.batch_omega)?;
    }

    let checksums: Vec<ArtifactEntry> = artifacts
        .iter()
        .map(|(name, path)| {
            Ok(ArtifactEntry {
                name: name.clone(),
                sha256: sha256_hex(&std::fs::read(path)?),
            })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        config: cfg,
        config_hash: &hash,
        seed: cfg.seed,
        clients: clients.len(),
        classes: dataset.class_count,
        input_dim: dataset.input_dim(),
        parameters_per_model: ModelParams::zeros(&architecture)?.param_count(),
        best_mean_accuracy,
        best_round,
        final_mean_omega,
        communication: output
            .trace
            .iter()
            .map(|r| ManifestRound {
                round: r.round,
                uploaded_params: r.uploaded_params,
                downloaded_params: r.downloaded_params,
            })
            .collect(),
        warnings: output
            .trace
            .iter()
            .flat_map(|r| r.warnings.clone())
            .collect(),
        artifacts: checksums,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(out_dir.join("manifest.json"), manifest_json)?;

    Ok(RunSummary {
        best_mean_accuracy,
        best_round,
        trace: output.trace,
        final_mean_omega,
        config_hash: hash,
        output_dir: out_dir,
    })
}

/// One full run per penalty weight (same seed throughout); returns the rows
/// sorted by lambda and writes `lambda_sweep.csv` at the sweep root.
pub fn lambda_sweep(base: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<LambdaSweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Argument(
            "lambda sweep needs at least one value".into(),
        ));
    }
    if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::Argument(
            "lambda values must be finite and nonnegative".into(),
        ));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    sorted.dedup();

    let sweep_root = resolve_output_dir(base, &config_hash(base));
    std::fs::create_dir_all(&sweep_root)?;

    let mut rows = Vec::with_capacity(sorted.len());
    for (i, &lambda) in sorted.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.algorithm = AlgorithmKind::CwFedAvg {
            mode: CwMode::EstimatedWdr { lambda },
        };
        cfg.output_dir = Some(sweep_root.join(format!("lambda-{i:03}")));
        let summary = run_experiment(&cfg)?;
        rows.push(LambdaSweepRow {
            lambda,
            best_mean_accuracy: summary.best_mean_accuracy,
            best_round: summary.best_round,
            mean_final_omega: summary.final_mean_omega,
        });
    }
    metrics::write_lambda_sweep(&sweep_root.join("lambda_sweep.csv"), &rows)?;
    Ok(rows)
}
