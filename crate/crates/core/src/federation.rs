//! Federated training loop and per-client finalization.
//!
//! The server holds a factorized Gaussian over the shared representation in
//! which zero variances mark deterministic entries. Each round it broadcasts
//! that distribution as a prior (zero variances become `α`), sampled clients
//! return their MAP point and subnetwork marginal variances, and the server
//! averages both elementwise.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Algorithm, ConfigError, ExperimentConfig, TrainingConfig};
use crate::data::{ClientData, DataError, FederatedDataset, LabeledSet};
use crate::laplace::{
    assemble_ggn, assemble_ggn_diagonal, epoch_batches, map_train, predictive_classify_batch, scatter,
    select_subnetwork, subnet_marginal_variances, subnet_posterior, subnet_posterior_diagonal, CovarianceKind,
    GaussianPrior, LaplaceError, SubnetPosterior, SubnetworkMask, TrainOptions,
};
use crate::metrics::{MetricSummary, MetricsError, PredictionRecord};
use crate::model::{adam_step, init_model, AdamHyper, AdamState, ClientModel, LayerLayout, Likelihood, ModelError, RepresentationModel, Sample};
use crate::scalar::softmax;
use crate::seed::{derive_seed, Stream};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Laplace(#[from] LaplaceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no client updates to aggregate")]
    EmptyUpdateSet,
    #[error("client {id} has no training examples")]
    EmptyClientData { id: usize },
    #[error("every sampled client failed in round {round}")]
    AllClientsFailed { round: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, FedError>;

const LIKELIHOOD: Likelihood<f64> = Likelihood::Categorical;

/// Server-side factorized Gaussian over the representation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDistribution {
    pub mu: Vec<f64>,
    /// Zero marks a deterministic entry.
    pub sigma2: Vec<f64>,
    pub round: usize,
}

impl GlobalDistribution {
    /// Fully deterministic distribution at `mu`.
    pub fn new(mu: Vec<f64>) -> Self {
        let n = mu.len();
        Self { mu, sigma2: vec![0.0; n], round: 0 }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Prior sent to clients: mean `μ`, variance `σ²_r` where positive and `α`
/// elsewhere.
pub fn broadcast_prior(g: &GlobalDistribution, alpha: f64) -> Result<GaussianPrior<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ConfigError::Invalid { field: "training.prior_variance", message: format!("must be positive, got {alpha}") }.into());
    }
    let variance = g.sigma2.iter().map(|&s| if s > 0.0 { s } else { alpha }).collect();
    Ok(GaussianPrior::new(g.mu.clone(), variance)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub id: usize,
    pub mu: Vec<f64>,
    /// Marginal posterior variances on the mask, zero elsewhere.
    pub sigma2: Vec<f64>,
    pub mask: SubnetworkMask,
    pub train_loss: f64,
}

/// Elementwise mean, summed in the given order.
pub fn federated_average(vectors: &[&[f64]]) -> Vec<f64> {
    let Some(first) = vectors.first() else { return Vec::new() };
    let mut out = first.to_vec();
    for v in &vectors[1..] {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Averages client means and variances in ascending client-id order.
pub fn aggregate(updates: &[ClientUpdate], round: usize) -> Result<GlobalDistribution> {
    let Some(first) = updates.first() else { return Err(FedError::EmptyUpdateSet) };
    let len = first.mu.len();
    if let Some(u) = updates.iter().find(|u| u.mu.len() != len || u.sigma2.len() != len) {
        return Err(FedError::LayoutMismatch(format!("client {} sent {} parameters, expected {len}", u.id, u.mu.len())));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.id);
    let mus: Vec<&[f64]> = sorted.iter().map(|u| u.mu.as_slice()).collect();
    let vars: Vec<&[f64]> = sorted.iter().map(|u| u.sigma2.as_slice()).collect();
    Ok(GlobalDistribution { mu: federated_average(&mus), sigma2: federated_average(&vars), round })
}

/// Which parameter blocks a plain (prior-free) training pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Theta,
    Phi,
    Both,
}

/// Mini-batch Adam on the mean cross-entropy. Returns the mean loss over
/// `data` afterwards.
pub fn train_plain(
    model: &mut ClientModel<f64>,
    data: &[Sample<'_, f64>],
    which: Trainable,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let hyper = AdamHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st_theta = AdamState::new(model.theta.len());
    let mut st_phi = AdamState::new(model.phi.len());
    let train_theta = matches!(which, Trainable::Theta | Trainable::Both);
    let train_phi = matches!(which, Trainable::Phi | Trainable::Both);
    for _ in 0..epochs {
        for idx in epoch_batches(data.len(), batch_size, &mut rng) {
            let w = 1.0 / idx.len() as f64;
            let mut gt = if train_theta { vec![0.0; model.theta.len()] } else { Vec::new() };
            let mut gp = if train_phi { vec![0.0; model.phi.len()] } else { Vec::new() };
            for &i in &idx {
                model.accumulate_grads(
                    &data[i],
                    &LIKELIHOOD,
                    w,
                    train_theta.then_some(gt.as_mut_slice()),
                    train_phi.then_some(gp.as_mut_slice()),
                )?;
            }
            if train_theta {
                adam_step(&mut st_theta, &mut model.theta, &gt, lr, &hyper);
            }
            if train_phi {
                adam_step(&mut st_phi, &mut model.phi, &gp, lr, &hyper);
            }
        }
    }
    let loss = mean_loss(model, data)?;
    if !loss.is_finite() || !model.is_finite() {
        return Err(ModelError::NonFiniteLoss.into());
    }
    Ok(loss)
}

fn mean_loss(model: &ClientModel<f64>, data: &[Sample<'_, f64>]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        total += LIKELIHOOD.nll(&model.forward(s.x)?, &s.target)?;
    }
    Ok(total / data.len() as f64)
}

/// Seeded initial global model; its `θ` is the round-0 mean.
pub fn initial_model(layout: LayerLayout, seed: u64) -> ClientModel<f64> {
    init_model(layout, derive_seed(seed, Stream::ModelInit, u64::MAX, 0))
}

/// Per-client initial model; its `φ` is the client's fixed decision layer.
pub fn client_init(layout: LayerLayout, seed: u64, id: usize) -> ClientModel<f64> {
    init_model(layout, derive_seed(seed, Stream::ModelInit, id as u64, 0))
}

fn covariance_kind(algorithm: Algorithm) -> CovarianceKind {
    if algorithm == Algorithm::FedsiFac {
        CovarianceKind::Diagonal
    } else {
        CovarianceKind::Full
    }
}

fn check_client(id: usize, data: &LabeledSet) -> Result<()> {
    if data.is_empty() {
        Err(FedError::EmptyClientData { id })
    } else {
        Ok(())
    }
}

/// One client's round: MAP training of `θ` from `μ` under the broadcast
/// prior with `φ` fixed, subnetwork selection on the broadcast variances,
/// and GGN-Laplace marginal variances on the subnetwork at `θ_MAP`.
pub fn client_update(
    id: usize,
    round: usize,
    g: &GlobalDistribution,
    phi0: &[f64],
    data: &LabeledSet,
    layout: LayerLayout,
    tc: &TrainingConfig,
) -> Result<ClientUpdate> {
    check_client(id, data)?;
    let prior = broadcast_prior(g, tc.prior_variance)?;
    let mut model = ClientModel::new(layout, g.mu.clone(), phi0.to_vec())?;
    let samples = data.samples();
    let opts = TrainOptions::new(
        tc.local_epochs,
        tc.batch_size,
        tc.lr(),
        derive_seed(tc.seed, Stream::LocalTraining, id as u64, round as u64),
    );
    let train_loss = map_train(&mut model, &samples, &prior, &LIKELIHOOD, &opts)?;
    if !model.is_finite() {
        return Err(ModelError::NonFiniteLoss.into());
    }
    let mask = select_subnetwork(prior.variance(), tc.subnet_len(g.len()))?;
    let vars = subnet_marginal_variances(&model, &samples, &mask, &prior, &LIKELIHOOD, covariance_kind(tc.algorithm))?;
    let sigma2 = scatter(&mask, &vars);
    Ok(ClientUpdate { id, mu: model.theta, sigma2, mask, train_loss })
}

/// Uniform sample of `count` ids without replacement, ascending.
pub fn sample_clients(pool: &[usize], count: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::ClientSampling, round as u64, 0));
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Worker pool sized by `FEDSI_THREADS` (default: available cores).
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("FEDSI_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

/// What the server holds between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: GlobalDistribution,
    /// Shared decision layer for the point-estimate baselines.
    pub phi: Option<Vec<f64>>,
}

impl ServerState {
    pub fn initial(cfg: &ExperimentConfig) -> Self {
        let init = initial_model(cfg.layout(), cfg.training.seed);
        let phi = (!cfg.training.algorithm.is_bayesian()).then_some(init.phi);
        Self { global: GlobalDistribution::new(init.theta), phi }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub client_id: usize,
    pub train_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientFailure {
    pub round: usize,
    pub client_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundHistory {
    pub sampled: Vec<Vec<usize>>,
    pub records: Vec<RoundRecord>,
    pub failures: Vec<ClientFailure>,
    /// `(round, reference)` for every checkpoint written.
    pub checkpoints: Vec<(usize, String)>,
    pub round_seconds: Vec<f64>,
}

impl RoundHistory {
    /// Hash of everything except wall-clock times.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (t, s) in self.sampled.iter().enumerate() {
            h.update((t as u64).to_le_bytes());
            for &c in s {
                h.update((c as u64).to_le_bytes());
            }
        }
        for r in &self.records {
            h.update((r.round as u64).to_le_bytes());
            h.update((r.client_id as u64).to_le_bytes());
            h.update(r.train_loss.to_bits().to_le_bytes());
        }
        for f in &self.failures {
            h.update((f.round as u64).to_le_bytes());
            h.update((f.client_id as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "client_id", "train_loss", "seconds"])?;
        for r in &self.records {
            w.write_record([r.round.to_string(), r.client_id.to_string(), format!("{:?}", r.train_loss), format!("{:.6}", r.seconds)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_dataset(cfg: &ExperimentConfig, fed: &FederatedDataset) -> Result<()> {
    let layout = cfg.layout();
    if fed.clients.len() != cfg.partition.clients {
        return Err(FedError::LayoutMismatch(format!(
            "dataset has {} clients, config expects {}",
            fed.clients.len(),
            cfg.partition.clients
        )));
    }
    for (pos, c) in fed.clients.iter().enumerate() {
        if c.id != pos {
            return Err(FedError::LayoutMismatch(format!("client at position {pos} has id {}", c.id)));
        }
        if c.train.dim() != layout.input_dim || c.train.num_classes() != layout.output_dim {
            return Err(FedError::LayoutMismatch(format!(
                "client {} data is {}-dimensional with {} classes, model expects {} and {}",
                c.id,
                c.train.dim(),
                c.train.num_classes(),
                layout.input_dim,
                layout.output_dim
            )));
        }
    }
    Ok(())
}

fn client_phi0(cfg: &ExperimentConfig, id: usize) -> Vec<f64> {
    client_init(cfg.layout(), cfg.training.seed, id).phi
}

enum LocalResult {
    Distribution(ClientUpdate),
    Point { id: usize, theta: Vec<f64>, phi: Vec<f64>, train_loss: f64 },
}

impl LocalResult {
    fn train_loss(&self) -> f64 {
        match self {
            LocalResult::Distribution(u) => u.train_loss,
            LocalResult::Point { train_loss, .. } => *train_loss,
        }
    }
}

fn local_round(cfg: &ExperimentConfig, fed: &FederatedDataset, state: &ServerState, phi0: &[Vec<f64>], id: usize, round: usize) -> Result<LocalResult> {
    let tc = &cfg.training;
    let layout = cfg.layout();
    let data = &fed.clients[id].train;
    if tc.algorithm.is_bayesian() {
        return client_update(id, round, &state.global, &phi0[id], data, layout, tc).map(LocalResult::Distribution);
    }
    check_client(id, data)?;
    let phi = state.phi.clone().ok_or_else(|| FedError::Checkpoint("point-estimate state lacks a decision layer".into()))?;
    let mut model = ClientModel::new(layout, state.global.mu.clone(), phi)?;
    let seed = derive_seed(tc.seed, Stream::LocalTraining, id as u64, round as u64);
    let train_loss = train_plain(&mut model, &data.samples(), Trainable::Both, tc.local_epochs, tc.batch_size, tc.lr(), seed)?;
    Ok(LocalResult::Point { id, theta: model.theta, phi: model.phi, train_loss })
}

/// Runs `cfg.training.rounds` rounds of the configured algorithm over the
/// training clients. `on_round` sees the state after every round and may
/// return a checkpoint reference to record.
pub fn run_rounds(
    cfg: &ExperimentConfig,
    fed: &FederatedDataset,
    on_round: &mut dyn FnMut(&ServerState) -> Result<Option<String>>,
) -> Result<(ServerState, RoundHistory)> {
    cfg.validate()?;
    check_dataset(cfg, fed)?;
    let tc = &cfg.training;
    let mut state = ServerState::initial(cfg);
    let mut history = RoundHistory::default();
    if tc.algorithm == Algorithm::LocalOnly {
        return Ok((state, history));
    }
    let pool = cfg.training_clients();
    let phi0: Vec<Vec<f64>> = (0..cfg.partition.clients).map(|id| client_phi0(cfg, id)).collect();
    let workers = thread_pool();
    for t in 0..tc.rounds {
        let started = Instant::now();
        let sampled = sample_clients(&pool, tc.clients_per_round, tc.seed, t);
        let results: Vec<(usize, Result<LocalResult>, f64)> = workers.install(|| {
            sampled
                .par_iter()
                .map(|&id| {
                    let clock = Instant::now();
                    let r = local_round(cfg, fed, &state, &phi0, id, t);
                    (id, r, clock.elapsed().as_secs_f64())
                })
                .collect()
        });
        let mut ok = Vec::with_capacity(results.len());
        for (id, r, seconds) in results {
            match r {
                Ok(res) => {
                    history.records.push(RoundRecord { round: t, client_id: id, train_loss: res.train_loss(), seconds });
                    ok.push(res);
                }
                Err(e @ (FedError::Model(_) | FedError::Laplace(_))) => {
                    history.failures.push(ClientFailure { round: t, client_id: id, reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
        }
        if ok.is_empty() {
            return Err(FedError::AllClientsFailed { round: t });
        }
        state = match ok[0] {
            LocalResult::Distribution(_) => {
                let updates: Vec<ClientUpdate> = ok
                    .into_iter()
                    .filter_map(|r| if let LocalResult::Distribution(u) = r { Some(u) } else { None })
                    .collect();
                ServerState { global: aggregate(&updates, t + 1)?, phi: None }
            }
            LocalResult::Point { .. } => {
                let mut pts: Vec<(usize, Vec<f64>, Vec<f64>)> = ok
                    .into_iter()
                    .filter_map(|r| if let LocalResult::Point { id, theta, phi, .. } = r { Some((id, theta, phi)) } else { None })
                    .collect();
                pts.sort_by_key(|p| p.0);
                let thetas: Vec<&[f64]> = pts.iter().map(|p| p.1.as_slice()).collect();
                let phis: Vec<&[f64]> = pts.iter().map(|p| p.2.as_slice()).collect();
                let mut global = GlobalDistribution::new(federated_average(&thetas));
                global.round = t + 1;
                ServerState { global, phi: Some(federated_average(&phis)) }
            }
        };
        history.sampled.push(sampled);
        history.round_seconds.push(started.elapsed().as_secs_f64());
        if let Some(reference) = on_round(&state)? {
            history.checkpoints.push((t + 1, reference));
        }
    }
    Ok((state, history))
}

/// A client's personalized predictor after training: `θ` at the global mean
/// `h`, fine-tuned `φ`, and the subnetwork posterior around `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedClient {
    pub id: usize,
    pub model: ClientModel<f64>,
    pub posterior: SubnetPosterior<f64>,
}

/// Fine-tunes `φ` with `θ` frozen at `g.mu`, then builds the subnetwork
/// posterior on the top broadcast variances with the GGN at `(g.mu, φ_fin)`.
pub fn finalize_client(
    id: usize,
    g: &GlobalDistribution,
    phi0: &[f64],
    train: &LabeledSet,
    layout: LayerLayout,
    tc: &TrainingConfig,
) -> Result<FinalizedClient> {
    check_client(id, train)?;
    let prior = broadcast_prior(g, tc.prior_variance)?;
    let mask = select_subnetwork(prior.variance(), tc.subnet_len(g.len()))?;
    let mut model = ClientModel::new(layout, g.mu.clone(), phi0.to_vec())?;
    let samples = train.samples();
    if tc.fine_tune_epochs > 0 {
        let seed = derive_seed(tc.seed, Stream::FineTune, id as u64, 0);
        train_plain(&mut model, &samples, Trainable::Phi, tc.fine_tune_epochs, tc.batch_size, tc.lr(), seed)?;
    }
    let posterior = match covariance_kind(tc.algorithm) {
        CovarianceKind::Full => {
            let h = assemble_ggn(&model, &samples, &mask, &prior, &LIKELIHOOD)?;
            subnet_posterior(&g.mu, &mask, &h)?
        }
        CovarianceKind::Diagonal => {
            let d = assemble_ggn_diagonal(&model, &samples, &mask, &prior, &LIKELIHOOD)?;
            subnet_posterior_diagonal(&g.mu, &mask, d)?
        }
    };
    Ok(FinalizedClient { id, model, posterior })
}

/// Linearized-Laplace predictions on `test`.
pub fn predict_bayesian(fin: &FinalizedClient, test: &LabeledSet) -> Result<Vec<PredictionRecord>> {
    let probs = predictive_classify_batch(&fin.model, &test.inputs(), &fin.posterior)?;
    Ok(probs.into_iter().zip(test.labels()).map(|(p, &y)| PredictionRecord::new(p, y)).collect())
}

/// Plain softmax predictions of a point-estimate model.
pub fn predict_point(model: &ClientModel<f64>, test: &LabeledSet) -> Result<Vec<PredictionRecord>> {
    (0..test.len()).map(|i| Ok(PredictionRecord::new(softmax(&model.forward(test.x(i))?), test.label(i)))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientEvaluation {
    pub id: usize,
    pub records: Vec<PredictionRecord>,
    pub metrics: MetricSummary,
}

fn summarize(id: usize, records: Vec<PredictionRecord>, bins: usize) -> Result<ClientEvaluation> {
    let metrics = MetricSummary::compute(&records, bins)?;
    Ok(ClientEvaluation { id, records, metrics })
}

/// Trains a fresh client model on its own data only.
pub fn local_only_model(cfg: &ExperimentConfig, client: &ClientData, epochs: usize) -> Result<ClientModel<f64>> {
    check_client(client.id, &client.train)?;
    let tc = &cfg.training;
    let mut model = client_init(cfg.layout(), tc.seed, client.id);
    let seed = derive_seed(tc.seed, Stream::LocalTraining, client.id as u64, u64::MAX);
    train_plain(&mut model, &client.train.samples(), Trainable::Both, epochs, tc.batch_size, tc.lr(), seed)?;
    Ok(model)
}

/// Fine-tunes the global point model on the client's data (all parameters).
pub fn fine_tuned_point_model(cfg: &ExperimentConfig, state: &ServerState, client: &ClientData) -> Result<ClientModel<f64>> {
    let tc = &cfg.training;
    let phi = state.phi.clone().ok_or_else(|| FedError::Checkpoint("point-estimate state lacks a decision layer".into()))?;
    let mut model = ClientModel::new(cfg.layout(), state.global.mu.clone(), phi)?;
    if tc.fine_tune_epochs > 0 {
        check_client(client.id, &client.train)?;
        let seed = derive_seed(tc.seed, Stream::FineTune, client.id as u64, 0);
        train_plain(&mut model, &client.train.samples(), Trainable::Both, tc.fine_tune_epochs, tc.batch_size, tc.lr(), seed)?;
    }
    Ok(model)
}

fn evaluate_one(cfg: &ExperimentConfig, fed: &FederatedDataset, state: &ServerState, id: usize, novel: bool) -> Result<ClientEvaluation> {
    let tc = &cfg.training;
    let client = &fed.clients[id];
    let bins = cfg.evaluation.ece_bins;
    let records = match tc.algorithm {
        Algorithm::Fedsi | Algorithm::FedsiFac => {
            let fin = finalize_client(id, &state.global, &client_phi0(cfg, id), &client.train, cfg.layout(), tc)?;
            predict_bayesian(&fin, &client.test)?
        }
        Algorithm::Fedavg => {
            let phi = state.phi.clone().ok_or_else(|| FedError::Checkpoint("point-estimate state lacks a decision layer".into()))?;
            predict_point(&ClientModel::new(cfg.layout(), state.global.mu.clone(), phi)?, &client.test)?
        }
        Algorithm::FedavgFt => predict_point(&fine_tuned_point_model(cfg, state, client)?, &client.test)?,
        Algorithm::LocalOnly => {
            let epochs = if novel { tc.fine_tune_epochs } else { tc.rounds * tc.local_epochs };
            predict_point(&local_only_model(cfg, client, epochs)?, &client.test)?
        }
    };
    summarize(id, records, bins)
}

/// Evaluates every client (or only the held-out novel client) on its test
/// split, in ascending id order.
pub fn evaluate(cfg: &ExperimentConfig, fed: &FederatedDataset, state: &ServerState) -> Result<Vec<ClientEvaluation>> {
    cfg.validate()?;
    check_dataset(cfg, fed)?;
    check_state(cfg, state)?;
    let novel = cfg.evaluation.novel_client;
    let ids: Vec<usize> = match novel {
        Some(n) => vec![n],
        None => (0..cfg.partition.clients).collect(),
    };
    thread_pool().install(|| ids.par_iter().map(|&id| evaluate_one(cfg, fed, state, id, novel.is_some())).collect())
}

/// Newcomer evaluation under the Bayesian algorithms: only `φ` is fit, the
/// representation comes from the global distribution.
pub fn evaluate_novel_client(
    g: &GlobalDistribution,
    phi0: &[f64],
    client: &ClientData,
    layout: LayerLayout,
    tc: &TrainingConfig,
    bins: usize,
) -> Result<ClientEvaluation> {
    let fin = finalize_client(client.id, g, phi0, &client.train, layout, tc)?;
    summarize(client.id, predict_bayesian(&fin, &client.test)?, bins)
}

fn check_state(cfg: &ExperimentConfig, state: &ServerState) -> Result<()> {
    let layout = cfg.layout();
    if state.global.len() != layout.repr_len() || state.global.sigma2.len() != layout.repr_len() {
        return Err(FedError::LayoutMismatch(format!(
            "state has {} representation parameters, config expects {}",
            state.global.len(),
            layout.repr_len()
        )));
    }
    if !cfg.training.algorithm.is_bayesian() {
        match &state.phi {
            Some(p) if p.len() == layout.decision_len() => {}
            _ => return Err(FedError::LayoutMismatch("decision layer missing or of the wrong size".into())),
        }
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized server state.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub round: usize,
    pub layout: LayerLayout,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
    pub config_hash: String,
}

fn push_array(out: &mut String, name: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(FedError::Checkpoint(format!("{name} holds non-finite value {v}")));
    }
    out.push_str(&format!(",\n  \"{name}\": ["));
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits round-trip every f64
        out.push_str(&format!("{v:.16e}"));
    }
    out.push(']');
    Ok(())
}

impl Checkpoint {
    pub fn from_state(state: &ServerState, layout: LayerLayout, config_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            round: state.global.round,
            layout,
            mu: state.global.mu.clone(),
            sigma2: state.global.sigma2.clone(),
            phi: state.phi.clone(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_state(&self) -> ServerState {
        ServerState {
            global: GlobalDistribution { mu: self.mu.clone(), sigma2: self.sigma2.clone(), round: self.round },
            phi: self.phi.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let l = &self.layout;
        let mut out = format!(
            "{{\n  \"version\": {},\n  \"round\": {},\n  \"layout\": {{\"input_dim\": {}, \"hidden_dim\": {}, \"output_dim\": {}}},\n  \"config_hash\": {}",
            self.version,
            self.round,
            l.input_dim,
            l.hidden_dim,
            l.output_dim,
            serde_json::to_string(&self.config_hash).expect("string serializes")
        );
        push_array(&mut out, "mu", &self.mu)?;
        push_array(&mut out, "sigma2", &self.sigma2)?;
        if let Some(phi) = &self.phi {
            push_array(&mut out, "phi", phi)?;
        }
        out.push_str("\n}\n");
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| FedError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(FedError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        if ck.mu.len() != ck.layout.repr_len() || ck.sigma2.len() != ck.layout.repr_len() {
            return Err(FedError::Checkpoint("parameter count disagrees with the layout".into()));
        }
        if ck.sigma2.iter().any(|&s| s < 0.0) {
            return Err(FedError::Checkpoint("negative variance".into()));
        }
        if let Some(phi) = &ck.phi {
            if phi.len() != ck.layout.decision_len() {
                return Err(FedError::Checkpoint("decision layer size disagrees with the layout".into()));
            }
        }
        Ok(ck)
    }
}
