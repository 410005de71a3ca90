//! The simulated server and round loop: class-wise federated averaging with
//! optional WDR, plus FedAVG, fine-tuned FedAVG, FedProx, and local-only
//! baselines under one scheduler.
//!
//! Class-wise aggregation keeps one global model per class. Uploads fold into
//! the class models weighted by each client's (true or estimated) share of
//! that class's total mass; downloads are the distribution-weighted sum of
//! the class models.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{true_distribution, ClassDistribution, ClientDataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Batch, GradientSet, ModelParams, Regularizer};
use crate::seed::derive_seed;
use crate::wdr::{self, WdrConfig};

/// Which distribution drives the class-wise aggregations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwMode {
    /// Server uses each client's true class distribution.
    TrueDist,
    /// Server estimates distributions from weight norms; clients train plainly.
    EstimatedNoWdr,
    /// As above, but clients train with the WDR penalty at this weight.
    EstimatedWdr { lambda: f64 },
}

/// The algorithm a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    FedAvg,
    FedAvgFinetune { finetune_epochs: usize },
    FedProx { mu: f64 },
    LocalOnly,
    CwFedAvg { mode: CwMode },
}

/// Server-side state for class-wise federated averaging.
pub struct ServerState {
    /// One global model per class, architecture-identical.
    pub global_models: Vec<ModelParams>,
    /// Per-client class distributions used for aggregation (true or estimated).
    pub est_distributions: Vec<ClassDistribution>,
    /// Per-client training sample counts, known to the server as in FedAVG.
    pub sample_counts: Vec<usize>,
    pub round: usize,
}

impl ServerState {
    /// Fresh server per the protocol's initialization: random globals (shared
    /// or independent), estimates at uniform, true distributions when the
    /// mode aggregates with them.
    pub fn init(
        architecture: &[usize],
        clients: &[ClientDataset],
        mode: &CwMode,
        root_seed: u64,
        shared_global_init: bool,
    ) -> Result<Self> {
        let k = *architecture
            .last()
            .ok_or_else(|| Error::Config("empty architecture".into()))?;
        let global_models = if shared_global_init {
            let one = nn::init_params(architecture, derive_seed(root_seed, "global-init", 0, 0))?;
            vec![one; k]
        } else {
            (0..k)
                .map(|j| {
                    nn::init_params(
                        architecture,
                        derive_seed(root_seed, "global-init", j as u64, 0),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        let est_distributions = match mode {
            CwMode::TrueDist => clients
                .iter()
                .map(true_distribution)
                .collect::<Result<Vec<_>>>()?,
            _ => clients
                .iter()
                .map(|_| ClassDistribution::uniform(k))
                .collect(),
        };
        Ok(ServerState {
            global_models,
            est_distributions,
            sample_counts: clients.iter().map(|c| c.train_len()).collect(),
            round: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.global_models.len()
    }
}

/// State for the single-global baselines (FedAVG, FedProx).
pub struct SingleGlobalState {
    pub global: ModelParams,
    pub round: usize,
}

impl SingleGlobalState {
    pub fn init(architecture: &[usize], root_seed: u64) -> Result<Self> {
        Ok(SingleGlobalState {
            global: nn::init_params(architecture, derive_seed(root_seed, "global-init", 0, 0))?,
            round: 0,
        })
    }
}

/// Per-round local training settings.
#[derive(Debug, Clone, Copy)]
pub struct LocalTrainCfg {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

/// Options for one simulated round.
#[derive(Debug, Clone)]
pub struct RoundOptions {
    pub train: LocalTrainCfg,
    pub root_seed: u64,
    /// Participating client ids; `None` means full participation.
    pub participants: Option<Vec<usize>>,
    /// Record the WDR distance after every mini-batch.
    pub record_batch_omega: bool,
}

impl RoundOptions {
    pub fn full(train: LocalTrainCfg, root_seed: u64) -> Self {
        RoundOptions {
            train,
            root_seed,
            participants: None,
            record_batch_omega: false,
        }
    }
}

/// What one round produced. Wall time is an in-memory diagnostic; exports
/// never include it so artifacts stay bit-reproducible.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Per-client test accuracy of the post-local-training model.
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Per-client distance between the true distribution and the weight-norm
    /// estimate of the client's current local model.
    pub omega: Vec<f64>,
    pub mean_omega: f64,
    pub wall_secs: f64,
    pub uploaded_params: usize,
    pub downloaded_params: usize,
    pub warnings: Vec<String>,
    /// Per participant: the WDR distance after each mini-batch, when recorded.
    pub batch_omega: Vec<(usize, Vec<f64>)>,
}

/// Class-wise local aggregation: folds client uploads into the per-class
/// global models.
///
/// `weights_per_class[i][j]` is client `i`'s nonnegative mass for class `j`
/// (sample count times class share). Each class model is the mass-normalized
/// combination of the uploads; a class with zero total mass keeps its
/// previous model, since no upload carries information about it.
pub fn aggregate_class_wise_local(
    locals: &[ModelParams],
    weights_per_class: &[Vec<f64>],
    prev_globals: &[ModelParams],
) -> Result<Vec<ModelParams>> {
    if locals.is_empty() {
        return Err(Error::Argument("no local models to aggregate".into()));
    }
    if locals.len() != weights_per_class.len() {
        return Err(Error::Argument(format!(
            "{} locals but {} weight rows",
            locals.len(),
            weights_per_class.len()
        )));
    }
    let k = prev_globals.len();
    if weights_per_class.iter().any(|row| row.len() != k) {
        return Err(Error::Shape(format!("weight rows must have {k} classes")));
    }
    if weights_per_class
        .iter()
        .flatten()
        .any(|&w| w < 0.0 || !w.is_finite())
    {
        return Err(Error::Argument(
            "aggregation weights must be finite and nonnegative".into(),
        ));
    }
    if locals
        .iter()
        .chain(prev_globals)
        .any(|m| !m.same_architecture(&locals[0]))
    {
        return Err(Error::Shape(
            "all models must share one architecture".into(),
        ));
    }

    let mut globals = Vec::with_capacity(k);
    for j in 0..k {
        let denom: f64 = weights_per_class.iter().map(|row| row[j]).sum();
        if denom <= 0.0 {
            globals.push(prev_globals[j].clone());
            continue;
        }
        let coeffs: Vec<f64> = weights_per_class.iter().map(|row| row[j] / denom).collect();
        globals.push(nn::linear_combine(locals, &coeffs)?);
    }
    Ok(globals)
}

/// Class-wise global aggregation: the model a client downloads, i.e. the
/// class models combined with the client's distribution as coefficients.
pub fn aggregate_class_wise_global(server: &ServerState, client_id: usize) -> Result<ModelParams> {
    let dist = server
        .est_distributions
        .get(client_id)
        .ok_or_else(|| Error::Argument(format!("unknown client id {client_id}")))?;
    nn::linear_combine(&server.global_models, dist.probs())
}

fn batch_from_indices(data: &LabeledDataset, indices: &[usize]) -> Result<Batch> {
    let dim = data.input_dim();
    let mut inputs = Vec::with_capacity(indices.len() * dim);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        inputs.extend_from_slice(&data.features[i]);
        labels.push(data.labels[i]);
    }
    Batch::new(inputs, dim, labels)
}

/// Mini-batch SGD over the client's data; epoch order is reshuffled from the
/// given seed so runs are reproducible yet stochastic.
fn train_local(
    mut model: ModelParams,
    data: &LabeledDataset,
    cfg: &LocalTrainCfg,
    reg: Option<&dyn Regularizer>,
    seed: u64,
    record_omega_against: Option<&ClassDistribution>,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut omegas = Vec::new();
    for _ in 0..cfg.local_epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = batch_from_indices(data, chunk)?;
            let (_, grads) = nn::loss_and_grad(&model, &batch, reg)?;
            model = nn::sgd_step(&model, &grads, cfg.lr)?;
            if let Some(target) = record_omega_against {
                omegas.push(omega_of(&model, target));
            }
        }
    }
    Ok((model, omegas))
}

/// Distance between a target distribution and the model's weight-norm
/// estimate; an all-zero final layer falls back to the uniform estimate.
pub fn omega_of(model: &ModelParams, target: &ClassDistribution) -> f64 {
    let estimate = wdr::estimate_distribution(model)
        .unwrap_or_else(|_| ClassDistribution::uniform(target.len()));
    target.l2_distance(&estimate)
}

/// Fraction of the client's test set the model labels correctly.
/// `None` when the client has no test samples.
pub fn evaluate_accuracy(model: &ModelParams, test: &LabeledDataset) -> Result<Option<f64>> {
    if test.is_empty() {
        return Ok(None);
    }
    let batch = test.to_batch()?;
    let preds = nn::predict(model, &batch)?;
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(Some(correct as f64 / test.len() as f64))
}

struct TrainedClient {
    id: usize,
    model: ModelParams,
    batch_omegas: Vec<f64>,
}

/// Trains the given participants in parallel from their download models.
/// Results come back in participant order, so scheduling cannot leak into
/// any aggregate.
fn train_participants(
    downloads: Vec<(usize, ModelParams)>,
    clients: &[ClientDataset],
    opts: &RoundOptions,
    round: usize,
    wdr_lambda: Option<f64>,
) -> Result<Vec<TrainedClient>> {
    downloads
        .into_par_iter()
        .map(|(id, model)| {
            let client = &clients[id];
            let target = true_distribution(client)?;
            let hook = match wdr_lambda {
                Some(lambda) => Some(wdr::make_wdr_hook(
                    target.clone(),
                    WdrConfig::with_lambda(lambda)?,
                )),
                None => None,
            };
            let seed = derive_seed(opts.root_seed, "local-train", id as u64, round as u64);
            let record = if opts.record_batch_omega {
                Some(&target)
            } else {
                None
            };
            let (model, batch_omegas) = train_local(
                model,
                &client.train,
                &opts.train,
                hook.as_ref().map(|h| h as &dyn Regularizer),
                seed,
                record,
            )?;
            Ok(TrainedClient {
                id,
                model,
                batch_omegas,
            })
        })
        .collect()
}

/// Scores every client that has a current local model; clients whose test
/// split is empty score 0 and produce a warning.
fn score_clients(
    round: usize,
    clients: &[ClientDataset],
    local_models: &[Option<ModelParams>],
    warnings: &mut Vec<String>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut accuracy = Vec::with_capacity(clients.len());
    let mut omega = Vec::with_capacity(clients.len());
    for (client, model) in clients.iter().zip(local_models) {
        match model {
            Some(model) => {
                match evaluate_accuracy(model, &client.test)? {
                    Some(acc) => accuracy.push(acc),
                    None => {
                        warnings.push(format!(
                            "round {round}: client {} has no test samples, scored 0",
                            client.client_id
                        ));
                        accuracy.push(0.0);
                    }
                }
                omega.push(omega_of(model, &true_distribution(client)?));
            }
            None => {
                // not trained yet (partial participation warm-up)
                accuracy.push(0.0);
                let k = client.class_counts.len();
                omega.push(true_distribution(client)?.l2_distance(&ClassDistribution::uniform(k)));
            }
        }
    }
    Ok((accuracy, omega))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn participant_ids(participants: &Option<Vec<usize>>, m: usize) -> Result<Vec<usize>> {
    match participants {
        None => Ok((0..m).collect()),
        Some(ids) => {
            if ids.is_empty() || ids.iter().any(|&i| i >= m) {
                return Err(Error::Argument(
                    "participant ids must be nonempty and in range".into(),
                ));
            }
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            Ok(ids)
        }
    }
}

/// One class-wise round: download mixtures, train locally (with WDR when the
/// mode says so), re-estimate distributions from the uploads, and fold the
/// uploads into the class models. Evaluation sees the post-training models.
pub fn run_round_cwfedavg(
    server: &mut ServerState,
    local_models: &mut [Option<ModelParams>],
    clients: &[ClientDataset],
    mode: &CwMode,
    opts: &RoundOptions,
) -> Result<RoundReport> {
    let start = Instant::now();
    let round = server.round + 1;
    let m = clients.len();
    if server.est_distributions.len() != m || local_models.len() != m {
        return Err(Error::Argument(
            "server state does not match client count".into(),
        ));
    }
    let ids = participant_ids(&opts.participants, m)?;
    let mut warnings = Vec::new();

    // (a) global -> local aggregation with previous-round distributions
    let downloads: Vec<(usize, ModelParams)> = ids
        .iter()
        .map(|&i| Ok((i, aggregate_class_wise_global(server, i)?)))
        .collect::<Result<_>>()?;
    let param_count: usize = downloads
        .first()
        .map_or(0, |(_, model)| model.param_count());

    // (b) local training, (c) upload
    let wdr_lambda = match mode {
        CwMode::EstimatedWdr { lambda } => Some(*lambda),
        _ => None,
    };
    let trained = train_participants(downloads, clients, opts, round, wdr_lambda)?;

    // (d) the server re-estimates distributions from the uploads
    if !matches!(mode, CwMode::TrueDist) {
        for t in &trained {
            server.est_distributions[t.id] = match wdr::estimate_distribution(&t.model) {
                Ok(est) => est,
                Err(_) => {
                    warnings.push(format!(
                        "round {round}: client {} uploaded an all-zero final layer, estimate reset to uniform",
                        t.id
                    ));
                    ClassDistribution::uniform(server.num_classes())
                }
            };
        }
    }

    // (e) class-wise local aggregation over the participants
    let uploads: Vec<ModelParams> = trained.iter().map(|t| t.model.clone()).collect();
    let masses: Vec<Vec<f64>> = trained
        .iter()
        .map(|t| {
            let n_i = server.sample_counts[t.id] as f64;
            server.est_distributions[t.id]
                .probs()
                .iter()
                .map(|&p| n_i * p)
                .collect()
        })
        .collect();
    server.global_models = aggregate_class_wise_local(&uploads, &masses, &server.global_models)?;
    server.round = round;

    let mut batch_omega = Vec::new();
    for t in trained {
        if opts.record_batch_omega {
            batch_omega.push((t.id, t.batch_omegas));
        }
        local_models[t.id] = Some(t.model);
    }

    let (accuracy, omega) = score_clients(round, clients, local_models, &mut warnings)?;
    Ok(RoundReport {
        round,
        mean_accuracy: mean(&accuracy),
        mean_omega: mean(&omega),
        accuracy,
        omega,
        wall_secs: start.elapsed().as_secs_f64(),
        uploaded_params: ids.len() * param_count,
        downloaded_params: ids.len() * param_count,
        warnings,
        batch_omega,
    })
}

/// One FedAVG round (FedProx when `prox_mu` is set): broadcast the single
/// global, train locally, aggregate by sample share.
pub fn run_round_fedavg(
    state: &mut SingleGlobalState,
    local_models: &mut [Option<ModelParams>],
    clients: &[ClientDataset],
    prox_mu: Option<f64>,
    opts: &RoundOptions,
) -> Result<RoundReport> {
    let start = Instant::now();
    let round = state.round + 1;
    let m = clients.len();
    if local_models.len() != m {
        return Err(Error::Argument(
            "local model cache does not match client count".into(),
        ));
    }
    let ids = participant_ids(&opts.participants, m)?;
    let mut warnings = Vec::new();

    let hook = prox_mu.map(|mu| fedprox_loss_hook(state.global.clone(), mu));
    let param_count = state.global.param_count();

    let trained: Vec<TrainedClient> = ids
        .par_iter()
        .map(|&id| {
            let client = &clients[id];
            let seed = derive_seed(opts.root_seed, "local-train", id as u64, round as u64);
            let record = if opts.record_batch_omega {
                Some(true_distribution(client)?)
            } else {
                None
            };
            let (model, batch_omegas) = train_local(
                state.global.clone(),
                &client.train,
                &opts.train,
                hook.as_ref().map(|h| h as &dyn Regularizer),
                seed,
                record.as_ref(),
            )?;
            Ok(TrainedClient {
                id,
                model,
                batch_omegas,
            })
        })
        .collect::<Result<_>>()?;

    let total: usize = ids.iter().map(|&i| clients[i].train_len()).sum();
    let coeffs: Vec<f64> = trained
        .iter()
        .map(|t| clients[t.id].train_len() as f64 / total as f64)
        .collect();
    let uploads: Vec<ModelParams> = trained.iter().map(|t| t.model.clone()).collect();
    state.global = nn::linear_combine(&uploads, &coeffs)?;
    state.round = round;

    let mut batch_omega = Vec::new();
    for t in trained {
        if opts.record_batch_omega {
            batch_omega.push((t.id, t.batch_omegas));
        }
        local_models[t.id] = Some(t.model);
    }

    let (accuracy, omega) = score_clients(round, clients, local_models, &mut warnings)?;
    Ok(RoundReport {
        round,
        mean_accuracy: mean(&accuracy),
        mean_omega: mean(&omega),
        accuracy,
        omega,
        wall_secs: start.elapsed().as_secs_f64(),
        uploaded_params: ids.len() * param_count,
        downloaded_params: ids.len() * param_count,
        warnings,
        batch_omega,
    })
}

/// One round of isolated local training: no server, no communication.
pub fn run_round_local_only(
    local_models: &mut [Option<ModelParams>],
    clients: &[ClientDataset],
    architecture: &[usize],
    round: usize,
    opts: &RoundOptions,
) -> Result<RoundReport> {
    let start = Instant::now();
    let m = clients.len();
    let ids = participant_ids(&opts.participants, m)?;
    let mut warnings = Vec::new();

    let starts: Vec<(usize, ModelParams)> = ids
        .iter()
        .map(|&i| {
            let model = match &local_models[i] {
                Some(model) => model.clone(),
                None => nn::init_params(
                    architecture,
                    derive_seed(opts.root_seed, "local-init", i as u64, 0),
                )?,
            };
            Ok((i, model))
        })
        .collect::<Result<_>>()?;

    let trained: Vec<TrainedClient> = starts
        .into_par_iter()
        .map(|(id, model)| {
            let seed = derive_seed(opts.root_seed, "local-train", id as u64, round as u64);
            let (model, _) = train_local(model, &clients[id].train, &opts.train, None, seed, None)?;
            Ok(TrainedClient {
                id,
                model,
                batch_omegas: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;

    for t in trained {
        local_models[t.id] = Some(t.model);
    }
    let (accuracy, omega) = score_clients(round, clients, local_models, &mut warnings)?;
    Ok(RoundReport {
        round,
        mean_accuracy: mean(&accuracy),
        mean_omega: mean(&omega),
        accuracy,
        omega,
        wall_secs: start.elapsed().as_secs_f64(),
        uploaded_params: 0,
        downloaded_params: 0,
        warnings,
        batch_omega: Vec::new(),
    })
}

/// Copies a trained global to every client and adapts it locally for
/// `finetune_epochs`; returns the per-client personalized models.
pub fn run_finetune(
    global: &ModelParams,
    clients: &[ClientDataset],
    finetune_epochs: usize,
    train: &LocalTrainCfg,
    root_seed: u64,
) -> Result<Vec<ModelParams>> {
    clients
        .par_iter()
        .enumerate()
        .map(|(i, client)| {
            let cfg = LocalTrainCfg {
                local_epochs: finetune_epochs,
                ..*train
            };
            let seed = derive_seed(root_seed, "finetune", i as u64, 0);
            let (model, _) = train_local(global.clone(), &client.train, &cfg, None, seed, None)?;
            Ok(model)
        })
        .collect()
}

/// Proximal-term hook: adds `(mu/2) * ||w - w_global||^2` to the local loss,
/// with gradient `mu * (w - w_global)` on every parameter.
pub struct FedProxHook {
    anchor: ModelParams,
    mu: f64,
}

pub fn fedprox_loss_hook(global_snapshot: ModelParams, mu: f64) -> FedProxHook {
    assert!(mu >= 0.0, "proximal weight must be nonnegative");
    FedProxHook {
        anchor: global_snapshot,
        mu,
    }
}

impl Regularizer for FedProxHook {
    fn penalty_and_grad(&self, params: &ModelParams) -> (f64, GradientSet) {
        assert!(
            params.same_architecture(&self.anchor),
            "proximal anchor must match the trained architecture"
        );
        let mut grads = GradientSet::zeros_like(params);
        let mut sq_norm = 0.0;
        for ((layer, anchor), g) in params
            .layers
            .iter()
            .zip(&self.anchor.layers)
            .zip(grads.layers.iter_mut())
        {
            for ((w, a), gw) in layer
                .weights
                .iter()
                .zip(&anchor.weights)
                .zip(g.weights.iter_mut())
            {
                let d = w - a;
                sq_norm += d * d;
                *gw = self.mu * d;
            }
            for ((b, a), gb) in layer.bias.iter().zip(&anchor.bias).zip(g.bias.iter_mut()) {
                let d = b - a;
                sq_norm += d * d;
                *gb = self.mu * d;
            }
        }
        (0.5 * self.mu * sq_norm, grads)
    }
}
