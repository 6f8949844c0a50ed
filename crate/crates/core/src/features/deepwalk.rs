//! DeepWalk over the per-instance conversation forest: truncated random
//! walks on reply edges feed a from-scratch skip-gram with negative
//! sampling. Single-threaded on purpose: embeddings must be bit-reproducible
//! for a given seed, and concurrent SGNS updates would race.

// Window loops index into the walk on purpose; the center/context split
// reads clearer positionally.
#![allow(clippy::needless_range_loop)]

use crate::corpus::InstanceCorpus;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct TootEmbedding {
    pub toot_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepWalkParams {
    pub dims: usize,
    pub n_walks: usize,
    pub walk_len: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub min_lr: f64,
}

impl Default for DeepWalkParams {
    fn default() -> Self {
        Self {
            dims: 128,
            n_walks: 10,
            walk_len: 40,
            window: 5,
            negatives: 5,
            epochs: 5,
            initial_lr: 0.025,
            min_lr: 1e-4,
        }
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Distinct deterministic streams for walking and training, both keyed by
/// (seed, instance) so instances never share randomness.
fn stream_rng(seed: u64, instance: &str, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(instance).rotate_left(17) ^ stream)
}

struct Forest {
    vocab: Vec<String>,
    adjacency: Vec<Vec<usize>>,
}

/// All trees of the instance as one graph; reply edges are undirected and
/// trees stay disjoint components.
fn build_forest(corpus: &InstanceCorpus) -> Forest {
    let mut vocab: Vec<String> = corpus
        .trees
        .iter()
        .flat_map(|t| t.toots.iter().map(|x| x.toot_id.clone()))
        .collect();
    vocab.sort_unstable();
    let index: BTreeMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut adjacency = vec![Vec::new(); vocab.len()];
    for tree in &corpus.trees {
        for (child, parent) in &tree.parent_index {
            let c = index[child.as_str()];
            let p = index[parent.as_str()];
            adjacency[c].push(p);
            adjacency[p].push(c);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Forest { vocab, adjacency }
}

/// Generate the walk corpus: `n_walks` shuffled passes over all nodes, one
/// truncated walk per start node. A node without neighbors repeats itself,
/// so every walk has exactly `walk_len` entries.
pub fn generate_walks(
    corpus: &InstanceCorpus,
    params: &DeepWalkParams,
    seed: u64,
) -> (Vec<String>, Vec<Vec<usize>>) {
    let forest = build_forest(corpus);
    let mut rng = stream_rng(seed, &corpus.instance, 0x77a1);
    let mut walks = Vec::with_capacity(forest.vocab.len() * params.n_walks);
    let mut order: Vec<usize> = (0..forest.vocab.len()).collect();
    for _ in 0..params.n_walks {
        order.shuffle(&mut rng);
        for &start in &order {
            let mut walk = Vec::with_capacity(params.walk_len);
            let mut node = start;
            for _ in 0..params.walk_len {
                walk.push(node);
                let neighbors = &forest.adjacency[node];
                if !neighbors.is_empty() {
                    node = neighbors[rng.gen_range(0..neighbors.len())];
                }
            }
            walks.push(walk);
        }
    }
    (forest.vocab, walks)
}

/// Symmetric context window around `center`; the exact pair stream the
/// trainer consumes, factored out so tests can enumerate it independently.
pub fn window_pairs(walk: &[usize], window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &center) in walk.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(walk.len() - 1);
        for j in lo..=hi {
            if j != i {
                pairs.push((center, walk[j]));
            }
        }
    }
    pairs
}

/// Unigram^0.75 sampling table over walk-corpus token counts.
struct NegativeTable {
    cumulative: Vec<f64>,
}

impl NegativeTable {
    fn new(counts: &[u64]) -> Self {
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut acc = 0.0;
        for &c in counts {
            acc += (c as f64).powf(0.75);
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("empty table");
        let x = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= x)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Embed every toot of the instance. Deterministic: same (corpus, params,
/// seed) gives bit-identical vectors.
pub fn deepwalk_embed(
    corpus: &InstanceCorpus,
    params: &DeepWalkParams,
    seed: u64,
) -> BTreeMap<String, TootEmbedding> {
    let (vocab, walks) = generate_walks(corpus, params, seed);
    if vocab.is_empty() {
        return BTreeMap::new();
    }
    let dims = params.dims;
    let mut rng = stream_rng(seed, &corpus.instance, 0x5e55);

    let mut counts = vec![0u64; vocab.len()];
    for walk in &walks {
        for &node in walk {
            counts[node] += 1;
        }
    }
    let table = NegativeTable::new(&counts);

    let mut input: Vec<f64> = (0..vocab.len() * dims)
        .map(|_| (rng.gen::<f64>() - 0.5) / dims as f64)
        .collect();
    let mut output = vec![0.0f64; vocab.len() * dims];
    let mut accum = vec![0.0f64; dims];

    let total_centers = (params.epochs * walks.iter().map(Vec::len).sum::<usize>()).max(1) as f64;
    let mut processed = 0.0f64;

    for _ in 0..params.epochs {
        for walk in &walks {
            for (i, &center) in walk.iter().enumerate() {
                let lr = (params.initial_lr * (1.0 - processed / total_centers)).max(params.min_lr);
                processed += 1.0;
                let lo = i.saturating_sub(params.window);
                let hi = (i + params.window).min(walk.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let context = walk[j];
                    accum.fill(0.0);
                    for k in 0..=params.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = table.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let h = &input[center * dims..(center + 1) * dims];
                        let o = &output[target * dims..(target + 1) * dims];
                        let score = sigmoid(h.iter().zip(o).map(|(a, b)| a * b).sum());
                        let g = (score - label) * lr;
                        for d in 0..dims {
                            accum[d] += g * output[target * dims + d];
                            output[target * dims + d] -= g * input[center * dims + d];
                        }
                    }
                    for d in 0..dims {
                        input[center * dims + d] -= accum[d];
                    }
                }
            }
        }
    }

    vocab
        .into_iter()
        .enumerate()
        .map(|(i, toot_id)| {
            let vector = input[i * dims..(i + 1) * dims].to_vec();
            (toot_id.clone(), TootEmbedding { toot_id, vector })
        })
        .collect()
}
