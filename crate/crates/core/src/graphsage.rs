//! From-scratch GraphSAGE node classifier: mean-aggregator forward pass,
//! reverse-mode gradients, and Adam-based local training on one client
//! graph. Class order is fixed everywhere: index 0 = Toxic, 1 = NonToxic.

// Index loops keep the kernels aligned with the written update rules.
#![allow(clippy::needless_range_loop)]

use crate::convgraph::ConversationGraph;
use crate::labeling::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use thiserror::Error;

pub const N_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum SageError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("empty training mask")]
    EmptyMask,
    #[error("node {0} is masked but unlabeled")]
    MissingLabel(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// One GraphSAGE layer: separate weights for the node's own state and the
/// mean-aggregated neighborhood, plus a bias. Row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    pub w_self: Vec<f64>,
    pub w_neigh: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageModel {
    pub layers: Vec<SageLayer>,
    /// Classifier head, `N_CLASSES x hidden`.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Graphs per optimization step; full-graph training uses 1.
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            learning_rate: 1e-4,
            batch_size: 1,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.local_epochs == 0 {
            return Err("local_epochs must be >= 1".to_owned());
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(format!("bad learning_rate {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".to_owned());
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Vec<f64> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Fresh model with Glorot-uniform weights and zero biases.
pub fn new_model(input_dim: usize, hidden: usize, depth: usize, seed: u64) -> SageModel {
    assert!(depth >= 1, "at least one layer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(depth);
    for layer in 0..depth {
        let in_dim = if layer == 0 { input_dim } else { hidden };
        layers.push(SageLayer {
            w_self: glorot(&mut rng, hidden, in_dim),
            w_neigh: glorot(&mut rng, hidden, in_dim),
            bias: vec![0.0; hidden],
            in_dim,
            out_dim: hidden,
        });
    }
    let w_out = glorot(&mut rng, N_CLASSES, hidden);
    SageModel {
        layers,
        w_out,
        b_out: vec![0.0; N_CLASSES],
        input_dim,
        hidden,
    }
}

impl SageModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w_self.len() + l.w_neigh.len() + l.bias.len())
            .sum::<usize>()
            + self.w_out.len()
            + self.b_out.len()
    }

    /// All parameters as one flat vector: per layer w_self, w_neigh, bias,
    /// then the head. The layout is the contract for checkpoints and
    /// federated averaging.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.w_self);
            flat.extend_from_slice(&l.w_neigh);
            flat.extend_from_slice(&l.bias);
        }
        flat.extend_from_slice(&self.w_out);
        flat.extend_from_slice(&self.b_out);
        flat
    }

    /// Rebuild a model of this shape from a flat parameter vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<SageModel, SageError> {
        if flat.len() != self.param_count() {
            return Err(SageError::ShapeError(format!(
                "flat vector has {} params, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut model = self.clone();
        let mut at = 0;
        let mut take = |n: usize| {
            let slice = flat[at..at + n].to_vec();
            at += n;
            slice
        };
        for l in &mut model.layers {
            l.w_self = take(l.w_self.len());
            l.w_neigh = take(l.w_neigh.len());
            l.bias = take(l.bias.len());
        }
        model.w_out = take(model.w_out.len());
        model.b_out = take(model.b_out.len());
        Ok(model)
    }

    pub fn zeros_like(&self) -> SageModel {
        self.with_flat(&vec![0.0; self.param_count()])
            .expect("same shape")
    }

    fn check_chain(&self) -> Result<(), SageError> {
        let mut dim = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim != dim {
                return Err(SageError::ShapeError(format!(
                    "layer {i} expects input {} but gets {dim}",
                    l.in_dim
                )));
            }
            dim = l.out_dim;
        }
        if dim != self.hidden || self.w_out.len() != N_CLASSES * self.hidden {
            return Err(SageError::ShapeError("head dimensions".to_owned()));
        }
        Ok(())
    }
}

fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        out[o] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

struct ForwardCache {
    /// h[0] = input features; h[l] = post-ReLU activations of layer l.
    h: Vec<Vec<Vec<f64>>>,
    /// a[l-1] = neighbor mean feeding layer l.
    a: Vec<Vec<Vec<f64>>>,
    logits: Vec<Vec<f64>>,
}

fn forward_cached(
    graph: &ConversationGraph,
    features: &[Vec<f64>],
    model: &SageModel,
) -> Result<ForwardCache, SageError> {
    model.check_chain()?;
    let n = graph.node_count();
    if features.len() != n {
        return Err(SageError::ShapeError(format!(
            "{} feature rows for {n} nodes",
            features.len()
        )));
    }
    for (i, row) in features.iter().enumerate() {
        if row.len() != model.input_dim {
            return Err(SageError::ShapeError(format!(
                "feature row {i} has {} dims, model expects {}",
                row.len(),
                model.input_dim
            )));
        }
    }

    let mut h: Vec<Vec<Vec<f64>>> = vec![features.to_vec()];
    let mut a = Vec::with_capacity(model.depth());
    for layer in &model.layers {
        let prev = h.last().expect("at least input");
        let mut agg = vec![vec![0.0; layer.in_dim]; n];
        for v in 0..n {
            let neighbors = graph.neighbors(v);
            if neighbors.is_empty() {
                continue; // isolated node keeps a zero aggregate
            }
            for &(u, _) in neighbors {
                for d in 0..layer.in_dim {
                    agg[v][d] += prev[u][d];
                }
            }
            let inv = 1.0 / neighbors.len() as f64;
            for d in 0..layer.in_dim {
                agg[v][d] *= inv;
            }
        }
        let mut next = vec![vec![0.0; layer.out_dim]; n];
        for v in 0..n {
            let own = matvec(&layer.w_self, &prev[v], layer.out_dim, layer.in_dim);
            let nbr = matvec(&layer.w_neigh, &agg[v], layer.out_dim, layer.in_dim);
            for o in 0..layer.out_dim {
                next[v][o] = (own[o] + nbr[o] + layer.bias[o]).max(0.0);
            }
        }
        a.push(agg);
        h.push(next);
    }

    let last = h.last().expect("layers ran");
    let logits = (0..n)
        .map(|v| {
            let mut out = matvec(&model.w_out, &last[v], N_CLASSES, model.hidden);
            for (o, b) in out.iter_mut().zip(&model.b_out) {
                *o += b;
            }
            out
        })
        .collect();
    Ok(ForwardCache { h, a, logits })
}

/// Per-node logits, `n_nodes x 2`.
pub fn forward(
    graph: &ConversationGraph,
    features: &[Vec<f64>],
    model: &SageModel,
) -> Result<Vec<Vec<f64>>, SageError> {
    Ok(forward_cached(graph, features, model)?.logits)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|x| x - log_norm).collect()
}

/// Mean softmax cross-entropy over the masked nodes plus gradients for every
/// parameter, via reverse-mode differentiation of the cached forward pass.
pub fn loss_and_grads(
    graph: &ConversationGraph,
    features: &[Vec<f64>],
    labels: &BTreeMap<usize, Label>,
    mask: &BTreeSet<usize>,
    model: &SageModel,
) -> Result<(f64, SageModel), SageError> {
    if mask.is_empty() {
        return Err(SageError::EmptyMask);
    }
    let cache = forward_cached(graph, features, model)?;
    let n = graph.node_count();
    let m = mask.len() as f64;

    let mut loss = 0.0;
    let mut dlogits = vec![vec![0.0; N_CLASSES]; n];
    for &v in mask {
        let label = labels.get(&v).ok_or(SageError::MissingLabel(v))?;
        let y = label.class_index();
        let log_p = log_softmax(&cache.logits[v]);
        loss -= log_p[y] / m;
        for c in 0..N_CLASSES {
            let p = log_p[c].exp();
            dlogits[v][c] = (p - if c == y { 1.0 } else { 0.0 }) / m;
        }
    }

    let mut grads = model.zeros_like();
    let last = cache.h.last().expect("forward ran");
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; model.hidden]; n];
    for v in 0..n {
        for c in 0..N_CLASSES {
            let g = dlogits[v][c];
            if g == 0.0 {
                continue;
            }
            grads.b_out[c] += g;
            for d in 0..model.hidden {
                grads.w_out[c * model.hidden + d] += g * last[v][d];
                dh[v][d] += g * model.w_out[c * model.hidden + d];
            }
        }
    }

    for l in (0..model.depth()).rev() {
        let layer = &model.layers[l];
        let prev = &cache.h[l];
        let act = &cache.h[l + 1];
        let agg = &cache.a[l];
        let mut dprev = vec![vec![0.0; layer.in_dim]; n];
        for v in 0..n {
            // ReLU gate: only active units pass gradient
            let dz: Vec<f64> = (0..layer.out_dim)
                .map(|o| if act[v][o] > 0.0 { dh[v][o] } else { 0.0 })
                .collect();
            let neighbors = graph.neighbors(v);
            let inv = if neighbors.is_empty() {
                0.0
            } else {
                1.0 / neighbors.len() as f64
            };
            for o in 0..layer.out_dim {
                let g = dz[o];
                if g == 0.0 {
                    continue;
                }
                grads.layers[l].bias[o] += g;
                let row = o * layer.in_dim;
                for d in 0..layer.in_dim {
                    grads.layers[l].w_self[row + d] += g * prev[v][d];
                    grads.layers[l].w_neigh[row + d] += g * agg[v][d];
                    dprev[v][d] += g * layer.w_self[row + d];
                }
                if inv > 0.0 {
                    for &(u, _) in neighbors {
                        for d in 0..layer.in_dim {
                            dprev[u][d] += g * inv * layer.w_neigh[row + d];
                        }
                    }
                }
            }
        }
        dh = dprev;
    }

    Ok((loss, grads))
}

/// Run `local_epochs` full-graph optimization steps. Optimizer state starts
/// fresh every call: clients are stateless between federated rounds. The
/// seed is part of the client contract but full-graph training is already
/// deterministic, so it goes unused here.
pub fn train_local(
    graph: &ConversationGraph,
    features: &[Vec<f64>],
    labels: &BTreeMap<usize, Label>,
    train_mask: &BTreeSet<usize>,
    model: &SageModel,
    config: &TrainConfig,
    _seed: u64,
) -> Result<SageModel, SageError> {
    let mut params = model.to_flat();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);

    for epoch in 0..config.local_epochs {
        let current = model.with_flat(&params)?;
        let (loss, grads) = loss_and_grads(graph, features, labels, train_mask, &current)?;
        if !loss.is_finite() {
            return Err(SageError::TrainingDiverged { epoch, loss });
        }
        let g = grads.to_flat();
        match config.optimizer {
            Optimizer::Adam => {
                let t = (epoch + 1) as i32;
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / (1.0 - beta1.powi(t));
                    let v_hat = v[i] / (1.0 - beta2.powi(t));
                    params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
            Optimizer::Sgd => {
                for i in 0..params.len() {
                    params[i] -= config.learning_rate * g[i];
                }
            }
        }
    }
    model.with_flat(&params)
}

/// Argmax labels for the masked nodes; exact ties go to NonToxic.
pub fn predict(
    graph: &ConversationGraph,
    features: &[Vec<f64>],
    model: &SageModel,
    mask: &BTreeSet<usize>,
) -> Result<Vec<(usize, Label)>, SageError> {
    let logits = forward(graph, features, model)?;
    Ok(mask
        .iter()
        .map(|&v| {
            let label = if logits[v][0] > logits[v][1] {
                Label::Toxic
            } else {
                Label::NonToxic
            };
            (v, label)
        })
        .collect())
}

/// Parameter-wise weighted mean over same-shaped models.
pub fn fedavg_weighted(models: &[SageModel], weights: &[f64]) -> Result<SageModel, SageError> {
    let first = models
        .first()
        .ok_or_else(|| SageError::ShapeError("no models to average".to_owned()))?;
    if models.len() != weights.len() {
        return Err(SageError::ShapeError(format!(
            "{} models with {} weights",
            models.len(),
            weights.len()
        )));
    }
    let n_params = first.param_count();
    for m in models.iter().skip(1) {
        if m.input_dim != first.input_dim || m.hidden != first.hidden || m.depth() != first.depth()
        {
            return Err(SageError::ShapeError(
                "model architectures differ".to_owned(),
            ));
        }
    }
    let total: f64 = weights.iter().sum();
    let mut avg = vec![0.0; n_params];
    for (m, &w) in models.iter().zip(weights) {
        let share = w / total;
        for (acc, p) in avg.iter_mut().zip(m.to_flat()) {
            *acc += share * p;
        }
    }
    first.with_flat(&avg)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FTXM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned binary checkpoint: dims header then the flat parameter vector.
pub fn write_checkpoint<W: Write>(model: &SageModel, mut writer: W) -> Result<(), SageError> {
    writer.write_all(&CHECKPOINT_MAGIC)?;
    writer.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    writer.write_all(&(model.depth() as u32).to_le_bytes())?;
    writer.write_all(&(model.input_dim as u32).to_le_bytes())?;
    writer.write_all(&(model.hidden as u32).to_le_bytes())?;
    for p in model.to_flat() {
        writer.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut reader: R) -> Result<SageModel, SageError> {
    let mut header = [0u8; 20];
    reader.read_exact(&mut header)?;
    if header[0..4] != CHECKPOINT_MAGIC {
        return Err(SageError::Malformed("bad magic".to_owned()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(SageError::Malformed(format!("version {version}")));
    }
    let depth = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let input_dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    if depth == 0 || input_dim == 0 || hidden == 0 {
        return Err(SageError::Malformed("zero dimension".to_owned()));
    }

    let template = new_model(input_dim, hidden, depth, 0);
    let mut flat = Vec::with_capacity(template.param_count());
    let mut buf = [0u8; 8];
    for _ in 0..template.param_count() {
        reader.read_exact(&mut buf)?;
        flat.push(f64::from_le_bytes(buf));
    }
    template.with_flat(&flat)
}

/// Hyperparameter sidecar for a checkpoint.
pub fn model_meta(model: &SageModel) -> serde_json::Value {
    serde_json::json!({
        "depth": model.depth(),
        "input_dim": model.input_dim,
        "hidden": model.hidden,
        "aggregator": "mean",
        "activation": "relu",
        "class_order": ["Toxic", "NonToxic"],
        "params": model.param_count(),
    })
}
