//! FedAvg simulation over per-client conversation graphs: stratified
//! splits, train caps, round sampling, weighted aggregation, and pooled
//! evaluation. Clients exchange nothing but parameter vectors and scalar
//! weights; raw features, labels, and graphs never cross the boundary.

use crate::convgraph::ConversationGraph;
use crate::features::{apply_normalizer, fit_normalizer, FeatureError, Normalizer};
use crate::graphsage::{
    fedavg_weighted, new_model, predict, train_local, SageError, SageModel, TrainConfig,
};
use crate::labeling::Label;
use crate::metrics::{compute_metrics, ClassifierMetrics, MetricsError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("client ineligible: {0}")]
    ClientIneligible(String),
    #[error("no eligible clients")]
    NoEligibleClients,
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("all sampled clients diverged in round {0}")]
    AllClientsDiverged(usize),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sage(#[from] SageError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Train/test node masks for one client.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
    /// False when a class was too small and the split fell back to plain
    /// random sampling.
    pub stratified: bool,
}

fn take_split(
    nodes: &mut Vec<usize>,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    nodes.shuffle(rng);
    let n_train = ((nodes.len() as f64 * ratio).round() as usize).min(nodes.len());
    let test = nodes.split_off(n_train);
    (std::mem::take(nodes), test)
}

/// 80/20-style split of the labeled nodes. Stratified per class when both
/// classes have at least 2 labeled nodes; plain random otherwise. With a
/// train cap, the train side is subsampled to exactly `cap` nodes keeping
/// class proportions by largest remainder.
pub fn split_client(
    labels: &BTreeMap<usize, Label>,
    ratio: f64,
    train_cap: Option<usize>,
    seed: u64,
) -> Result<Split, FederationError> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(FederationError::InvalidConfig(format!(
            "split ratio {ratio} out of (0,1)"
        )));
    }
    if labels.len() < 2 {
        return Err(FederationError::ClientIneligible(format!(
            "{} labeled nodes cannot fill both split sides",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut toxic: Vec<usize> = labels
        .iter()
        .filter(|(_, l)| **l == Label::Toxic)
        .map(|(n, _)| *n)
        .collect();
    let mut nontoxic: Vec<usize> = labels
        .iter()
        .filter(|(_, l)| **l == Label::NonToxic)
        .map(|(n, _)| *n)
        .collect();

    let stratified = toxic.len() >= 2 && nontoxic.len() >= 2;
    let (mut train, mut test) = if stratified {
        let (mut train, mut test) = take_split(&mut toxic, ratio, &mut rng);
        let (t2, e2) = take_split(&mut nontoxic, ratio, &mut rng);
        train.extend(t2);
        test.extend(e2);
        (train, test)
    } else {
        let mut all: Vec<usize> = labels.keys().copied().collect();
        take_split(&mut all, ratio, &mut rng)
    };
    // rounding may empty one side; both must stay nonempty
    if test.is_empty() {
        test.push(train.pop().expect("≥2 labeled nodes"));
    }
    if train.is_empty() {
        train.push(test.pop().expect("≥2 labeled nodes"));
    }

    if let Some(cap) = train_cap {
        if train.len() < cap {
            return Err(FederationError::ClientIneligible(format!(
                "train side has {} nodes, cap needs {cap}",
                train.len()
            )));
        }
        if train.len() > cap {
            train = subsample_preserving_classes(&train, labels, cap, &mut rng);
        }
    }

    Ok(Split {
        train: train.into_iter().collect(),
        test: test.into_iter().collect(),
        stratified,
    })
}

/// Largest-remainder subsample of `nodes` down to `cap`, keeping the class
/// mix as close to the original as integer counts allow.
fn subsample_preserving_classes(
    nodes: &[usize],
    labels: &BTreeMap<usize, Label>,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &n in nodes {
        by_class[labels[&n].class_index()].push(n);
    }
    let total = nodes.len() as f64;
    let shares: Vec<f64> = by_class
        .iter()
        .map(|c| cap as f64 * c.len() as f64 / total)
        .collect();
    let mut quotas: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut leftover = cap - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..2).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &c in &order {
        if leftover == 0 {
            break;
        }
        if quotas[c] < by_class[c].len() {
            quotas[c] += 1;
            leftover -= 1;
        }
    }

    let mut kept = Vec::with_capacity(cap);
    for c in 0..2 {
        by_class[c].shuffle(rng);
        let quota = quotas[c].min(by_class[c].len());
        kept.extend(by_class[c].iter().take(quota).copied());
    }
    // class exhaustion can leave a shortfall; fill from whatever remains
    if kept.len() < cap {
        let mut rest: Vec<usize> = nodes
            .iter()
            .filter(|n| !kept.contains(n))
            .copied()
            .collect();
        rest.shuffle(rng);
        kept.extend(rest.into_iter().take(cap - kept.len()));
    }
    kept
}

/// Everything a client needs before splitting.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: String,
    pub graph: ConversationGraph,
    /// Raw (unnormalized) feature rows aligned with graph nodes.
    pub features: Vec<Vec<f64>>,
    pub labels: BTreeMap<usize, Label>,
}

/// A prepared federated client: split done, normalizer fitted on the train
/// rows only, features normalized locally.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: String,
    pub graph: ConversationGraph,
    pub labels: BTreeMap<usize, Label>,
    pub train_mask: BTreeSet<usize>,
    pub test_mask: BTreeSet<usize>,
    pub normalizer: Normalizer,
    pub stratified: bool,
    normalized: Vec<Vec<f64>>,
}

impl ClientState {
    pub fn prepare(
        data: ClientData,
        ratio: f64,
        train_cap: Option<usize>,
        seed: u64,
    ) -> Result<Self, FederationError> {
        let split = split_client(&data.labels, ratio, train_cap, seed)?;
        if split.test.is_empty() {
            return Err(FederationError::ClientIneligible(
                "empty test side".to_owned(),
            ));
        }
        let train_rows: Vec<&[f64]> = split
            .train
            .iter()
            .map(|&n| data.features[n].as_slice())
            .collect();
        let normalizer = fit_normalizer(&train_rows)?;
        let normalized = data
            .features
            .iter()
            .map(|row| apply_normalizer(&normalizer, row))
            .collect();
        Ok(Self {
            client_id: data.client_id,
            graph: data.graph,
            labels: data.labels,
            train_mask: split.train,
            test_mask: split.test,
            normalizer,
            stratified: split.stratified,
            normalized,
        })
    }

    pub fn normalized_features(&self) -> &[Vec<f64>] {
        &self.normalized
    }

    pub fn train_size(&self) -> usize {
        self.train_mask.len()
    }
}

fn client_seed(seed: u64, client_id: &str) -> u64 {
    seed ^ crate::features::deepwalk::fnv1a(client_id)
}

/// Prepare every candidate, keeping the eligible ones. A client is eligible
/// iff it can supply the full train cap (or ≥1 train node without a cap)
/// and a nonempty test set. Returns the rejects with reasons.
pub fn eligible_clients(
    candidates: Vec<ClientData>,
    ratio: f64,
    train_cap: Option<usize>,
    seed: u64,
) -> (Vec<ClientState>, Vec<(String, String)>) {
    let mut eligible = Vec::new();
    let mut rejected = Vec::new();
    for data in candidates {
        let id = data.client_id.clone();
        match ClientState::prepare(data, ratio, train_cap, client_seed(seed, &id)) {
            Ok(state) => eligible.push(state),
            Err(e) => rejected.push((id, e.to_string())),
        }
    }
    (eligible, rejected)
}

/// Uniform without-replacement sample of `k` client indices, deterministic
/// from (seed, round_index). Oversized `k` clamps to everyone with a
/// warning.
pub fn sample_round_clients(
    n_eligible: usize,
    k: usize,
    round_index: usize,
    seed: u64,
) -> Vec<usize> {
    let k = if k > n_eligible {
        log::warn!("clients_per_round {k} exceeds {n_eligible} eligible; using all");
        n_eligible
    } else {
        k
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (round_index as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let mut indices: Vec<usize> = (0..n_eligible).collect();
    indices.shuffle(&mut rng);
    indices.truncate(k);
    indices.sort_unstable();
    indices
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub train_cap: Option<usize>,
    pub split_ratio: f64,
    pub train_config: TrainConfig,
    pub model_hidden: usize,
    pub model_depth: usize,
    pub seed: u64,
    /// Evaluate every this many rounds in addition to the final round.
    pub eval_every: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 300,
            clients_per_round: 50,
            train_cap: None,
            split_ratio: 0.8,
            train_config: TrainConfig::default(),
            model_hidden: 64,
            model_depth: 2,
            seed: 1,
            eval_every: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.rounds == 0 {
            return Err(FederationError::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.clients_per_round == 0 {
            return Err(FederationError::InvalidConfig(
                "clients_per_round must be >= 1".into(),
            ));
        }
        if self.model_hidden == 0 || self.model_depth == 0 {
            return Err(FederationError::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        self.train_config
            .validate()
            .map_err(FederationError::InvalidConfig)?;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let encoded = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(encoded.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub macro_f1: f64,
    pub toxic_precision: f64,
    pub toxic_recall: f64,
    pub pooled: ClassifierMetrics,
    pub per_client: BTreeMap<String, ClassifierMetrics>,
    /// Mean of per-client macro-F1; pooled numbers are the headline.
    pub client_averaged_macro_f1: f64,
    pub metadata: RunMetadata,
}

/// Pool every eligible client's test predictions and score the model.
pub fn evaluate(
    model: &SageModel,
    clients: &[ClientState],
    metadata: RunMetadata,
) -> Result<EvaluationReport, FederationError> {
    let mut pooled_pairs = Vec::new();
    let mut per_client = BTreeMap::new();
    for client in clients {
        let preds = predict(
            &client.graph,
            client.normalized_features(),
            model,
            &client.test_mask,
        )?;
        let pairs: Vec<(Label, Label)> = preds
            .iter()
            .map(|&(node, pred)| (client.labels[&node], pred))
            .collect();
        per_client.insert(client.client_id.clone(), compute_metrics(&pairs)?);
        pooled_pairs.extend(pairs);
    }
    let pooled = compute_metrics(&pooled_pairs)?;
    let client_averaged_macro_f1 =
        per_client.values().map(|m| m.macro_f1).sum::<f64>() / per_client.len().max(1) as f64;
    Ok(EvaluationReport {
        macro_f1: pooled.macro_f1,
        toxic_precision: pooled.toxic_precision,
        toxic_recall: pooled.toxic_recall,
        pooled,
        per_client,
        client_averaged_macro_f1,
        metadata,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<String>,
    pub skipped: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvaluationReport>,
}

pub struct FederationRun {
    pub final_model: SageModel,
    pub history: Vec<RoundRecord>,
    pub final_report: EvaluationReport,
}

/// FedAvg main loop: broadcast, local training on sampled clients,
/// weighted averaging, evaluation on all eligible clients at the end (and
/// periodically when configured). Deterministic given the config seed.
pub fn run_federation(
    clients: &[ClientState],
    config: &FederationConfig,
) -> Result<FederationRun, FederationError> {
    config.validate()?;
    if clients.is_empty() {
        return Err(FederationError::NoEligibleClients);
    }
    let input_dim = clients[0].normalized_features()[0].len();
    for c in clients {
        if c.normalized_features().first().map_or(0, Vec::len) != input_dim {
            return Err(FederationError::InvalidConfig(format!(
                "client {} feature width differs from {input_dim}",
                c.client_id
            )));
        }
    }

    let mut global = new_model(
        input_dim,
        config.model_hidden,
        config.model_depth,
        config.seed,
    );
    let metadata = || RunMetadata {
        seed: config.seed,
        config_hash: config.config_hash(),
    };
    let mut history = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let sampled =
            sample_round_clients(clients.len(), config.clients_per_round, round, config.seed);
        let mut updates: Vec<(SageModel, f64)> = Vec::new();
        let mut participants = Vec::new();
        let mut skipped = Vec::new();
        for &idx in &sampled {
            let client = &clients[idx];
            let result = train_local(
                &client.graph,
                client.normalized_features(),
                &client.labels,
                &client.train_mask,
                &global,
                &config.train_config,
                client_seed(config.seed, &client.client_id) ^ round as u64,
            );
            match result {
                Ok(model) => {
                    updates.push((model, client.train_size() as f64));
                    participants.push(client.client_id.clone());
                }
                Err(SageError::TrainingDiverged { epoch, loss }) => {
                    log::warn!(
                        "client {} diverged in round {round} (epoch {epoch}, loss {loss}); skipping",
                        client.client_id
                    );
                    skipped.push(client.client_id.clone());
                }
                Err(e) => return Err(e.into()),
            }
        }
        if updates.is_empty() {
            return Err(FederationError::AllClientsDiverged(round));
        }
        let (models, weights): (Vec<SageModel>, Vec<f64>) = updates.into_iter().unzip();
        global = fedavg_aggregate(&models, &weights)?;

        let eval_now = round + 1 == config.rounds
            || config
                .eval_every
                .is_some_and(|e| e > 0 && (round + 1) % e == 0);
        let report = if eval_now {
            Some(evaluate(&global, clients, metadata())?)
        } else {
            None
        };
        history.push(RoundRecord {
            round,
            participants,
            skipped,
            report,
        });
    }

    let final_report = match history.last().and_then(|r| r.report.clone()) {
        Some(r) => r,
        None => evaluate(&global, clients, metadata())?,
    };
    Ok(FederationRun {
        final_model: global,
        history,
        final_report,
    })
}

/// Parameter-wise weighted mean of the client models. The interface only
/// accepts models and scalar weights, which is what keeps client data
/// local.
pub fn fedavg_aggregate(
    models: &[SageModel],
    weights: &[f64],
) -> Result<SageModel, FederationError> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(FederationError::InvalidConfig(format!(
            "{} models with {} weights",
            models.len(),
            weights.len()
        )));
    }
    for &w in weights {
        if !w.is_finite() || w <= 0.0 {
            return Err(FederationError::InvalidConfig(format!(
                "non-positive aggregation weight {w}"
            )));
        }
    }
    fedavg_weighted(models, weights).map_err(FederationError::from)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridAxis {
    TrainSize,
    ConvLength,
    ClientsPerRound,
    ToxicityThreshold,
    FeatureAblation,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub value: String,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub toxic_precision_mean: f64,
    pub toxic_precision_std: f64,
    pub toxic_recall_mean: f64,
    pub toxic_recall_std: f64,
    pub seeds_used: usize,
    pub errors: Vec<String>,
    pub failed: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Outcome of one grid cell run under one seed.
pub struct CellOutcome {
    pub report: EvaluationReport,
    pub n_clients: usize,
    pub clients_per_round: usize,
}

/// Drive a one-axis experiment sweep. The runner re-runs the full pipeline
/// for (value, seed); this function only aggregates mean ± std across seeds
/// and keeps going when a cell fails.
pub fn run_experiment_grid<V: std::fmt::Display, F>(
    values: &[V],
    seeds: &[u64],
    mut run_cell: F,
) -> Vec<GridCell>
where
    F: FnMut(&V, u64) -> Result<CellOutcome, String>,
{
    let mut table = Vec::with_capacity(values.len());
    for value in values {
        let mut f1 = Vec::new();
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut errors = Vec::new();
        let mut n_clients = 0;
        let mut clients_per_round = 0;
        for &seed in seeds {
            match run_cell(value, seed) {
                Ok(outcome) => {
                    f1.push(outcome.report.macro_f1);
                    precision.push(outcome.report.toxic_precision);
                    recall.push(outcome.report.toxic_recall);
                    n_clients = outcome.n_clients;
                    clients_per_round = outcome.clients_per_round;
                }
                Err(e) => errors.push(format!("seed {seed}: {e}")),
            }
        }
        let (f1_mean, f1_std) = mean_std(&f1);
        let (p_mean, p_std) = mean_std(&precision);
        let (r_mean, r_std) = mean_std(&recall);
        table.push(GridCell {
            value: value.to_string(),
            n_clients,
            clients_per_round,
            macro_f1_mean: f1_mean,
            macro_f1_std: f1_std,
            toxic_precision_mean: p_mean,
            toxic_precision_std: p_std,
            toxic_recall_mean: r_mean,
            toxic_recall_std: r_std,
            seeds_used: f1.len(),
            failed: f1.is_empty(),
            errors,
        });
    }
    table
}

/// Grid table as CSV, one row per axis value.
pub fn write_grid_csv<W: std::io::Write>(
    axis: &GridAxis,
    table: &[GridCell],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "axis",
        "value",
        "n_clients",
        "clients_per_round",
        "macro_f1_mean",
        "macro_f1_std",
        "toxic_precision_mean",
        "toxic_precision_std",
        "toxic_recall_mean",
        "toxic_recall_std",
        "seeds_used",
        "failed",
    ])?;
    for cell in table {
        w.write_record([
            format!("{axis:?}"),
            cell.value.clone(),
            cell.n_clients.to_string(),
            cell.clients_per_round.to_string(),
            cell.macro_f1_mean.to_string(),
            cell.macro_f1_std.to_string(),
            cell.toxic_precision_mean.to_string(),
            cell.toxic_precision_std.to_string(),
            cell.toxic_recall_mean.to_string(),
            cell.toxic_recall_std.to_string(),
            cell.seeds_used.to_string(),
            cell.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
