//! Fixed-layout feature vectors per conversation node.
//!
//! Full layout (401 dims): 3x128 pooled toot embeddings, 9 pooled user
//! features, 5 sentiment features, 3 conversation statistics. Blocks can be
//! toggled off for ablations; the remaining blocks keep their relative
//! order.

pub mod deepwalk;

pub use deepwalk::{deepwalk_embed, generate_walks, DeepWalkParams, TootEmbedding};

use crate::corpus::{ConversationTree, InstanceCorpus};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

pub const USER_BLOCK_DIMS: usize = 9;
pub const SENTIMENT_DIMS: usize = 5;
pub const STATS_DIMS: usize = 3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("toot {0} has no embedding")]
    MissingEmbedding(String),
    #[error("no training data to fit normalizer")]
    NoTrainingData,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature io: {0}")]
    Io(#[from] std::io::Error),
    #[error("feature csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed feature file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub conversation_id: String,
    pub values: Vec<f64>,
}

/// Which feature blocks participate in the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureToggles {
    pub embeddings: bool,
    pub user_block: bool,
    pub sentiment: bool,
    pub statistics: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        Self {
            embeddings: true,
            user_block: true,
            sentiment: true,
            statistics: true,
        }
    }
}

impl FeatureToggles {
    pub fn dimension(&self, embedding_dims: usize) -> usize {
        let mut d = 0;
        if self.embeddings {
            d += 3 * embedding_dims;
        }
        if self.user_block {
            d += USER_BLOCK_DIMS;
        }
        if self.sentiment {
            d += SENTIMENT_DIMS;
        }
        if self.statistics {
            d += STATS_DIMS;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub toggles: FeatureToggles,
    /// Whether a reply to one's own toot counts as a reply received.
    pub include_self_replies: bool,
}

/// Element-wise mean, sum, and max over the tree's toot embeddings,
/// concatenated in that order.
pub fn pool_embeddings(
    tree: &ConversationTree,
    embeddings: &BTreeMap<String, TootEmbedding>,
) -> Result<Vec<f64>, FeatureError> {
    let first = embeddings
        .get(&tree.toots[0].toot_id)
        .ok_or_else(|| FeatureError::MissingEmbedding(tree.toots[0].toot_id.clone()))?;
    let dims = first.vector.len();
    let mut mean = vec![0.0; dims];
    let mut sum = vec![0.0; dims];
    let mut max = vec![f64::NEG_INFINITY; dims];
    for toot in &tree.toots {
        let emb = embeddings
            .get(&toot.toot_id)
            .ok_or_else(|| FeatureError::MissingEmbedding(toot.toot_id.clone()))?;
        if emb.vector.len() != dims {
            return Err(FeatureError::DimensionMismatch {
                expected: dims,
                got: emb.vector.len(),
            });
        }
        for d in 0..dims {
            sum[d] += emb.vector[d];
            max[d] = max[d].max(emb.vector[d]);
        }
    }
    let n = tree.len() as f64;
    for d in 0..dims {
        mean[d] = sum[d] / n;
    }
    mean.extend(sum);
    mean.extend(max);
    Ok(mean)
}

/// Instance-wide per-user counters: replies made, replies received,
/// statuses authored. Returns the triple and whether the user was found.
pub fn user_features(
    corpus: &InstanceCorpus,
    user_id: &str,
    include_self_replies: bool,
) -> ([f64; 3], bool) {
    let mut replies_made = 0.0;
    let mut replies_received = 0.0;
    let mut statuses = 0.0;
    let mut known = false;
    for tree in &corpus.trees {
        let authors: BTreeMap<&str, &str> = tree
            .toots
            .iter()
            .map(|t| (t.toot_id.as_str(), t.author_id.as_str()))
            .collect();
        for toot in &tree.toots {
            if toot.author_id == user_id {
                known = true;
                statuses += 1.0;
                if toot.parent_id.is_some() {
                    replies_made += 1.0;
                }
            }
            if let Some(parent_id) = &toot.parent_id {
                if authors.get(parent_id.as_str()) == Some(&user_id)
                    && (include_self_replies || toot.author_id != user_id)
                {
                    replies_received += 1.0;
                }
            }
        }
    }
    ([replies_made, replies_received, statuses], known)
}

fn pool_triples(triples: &[[f64; 3]]) -> [f64; USER_BLOCK_DIMS] {
    let mut out = [0.0; USER_BLOCK_DIMS];
    if triples.is_empty() {
        return out;
    }
    let mut max = [f64::NEG_INFINITY; 3];
    for t in triples {
        for k in 0..3 {
            out[3 + k] += t[k];
            max[k] = max[k].max(t[k]);
        }
    }
    for k in 0..3 {
        out[k] = out[3 + k] / triples.len() as f64;
        out[6 + k] = max[k];
    }
    out
}

/// Mean/sum/max pooling of the participants' user-feature triples.
pub fn conversation_user_block(
    tree: &ConversationTree,
    corpus: &InstanceCorpus,
    include_self_replies: bool,
) -> [f64; USER_BLOCK_DIMS] {
    let triples: Vec<[f64; 3]> = tree
        .participants
        .iter()
        .map(|u| user_features(corpus, u, include_self_replies).0)
        .collect();
    pool_triples(&triples)
}

/// (mean, last, min, drift, volatility) over the tree's ordered sentiment
/// scores. Drift sums only the decreases; volatility is the population
/// standard deviation.
pub fn sentiment_features(tree: &ConversationTree) -> [f64; SENTIMENT_DIMS] {
    let scores: Vec<f64> = tree.toots.iter().map(|t| t.sentiment).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let last = *scores.last().expect("tree nonempty");
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let drift = scores
        .windows(2)
        .map(|w| (w[0] - w[1]).max(0.0))
        .sum::<f64>();
    let variance = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    [mean, last, min, drift, variance.sqrt()]
}

/// (length, unique users, median reaction time). The median is over gaps
/// between consecutive toots in temporal order; zero gaps count.
pub fn conversation_statistics(tree: &ConversationTree) -> [f64; STATS_DIMS] {
    let length = tree.len() as f64;
    let users = tree.participants.len() as f64;
    let gaps: Vec<f64> = tree
        .toots
        .windows(2)
        .map(|w| (w[1].created_at - w[0].created_at) as f64)
        .collect();
    let median = if gaps.is_empty() {
        0.0
    } else {
        let mut sorted = gaps;
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
        let mid = sorted.len() / 2;
        if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        }
    };
    [length, users, median]
}

/// Concatenate the enabled blocks in fixed order.
pub fn assemble(
    tree: &ConversationTree,
    corpus: &InstanceCorpus,
    embeddings: &BTreeMap<String, TootEmbedding>,
    options: &FeatureOptions,
) -> Result<FeatureVector, FeatureError> {
    let mut values = Vec::new();
    if options.toggles.embeddings {
        values.extend(pool_embeddings(tree, embeddings)?);
    }
    if options.toggles.user_block {
        values.extend(conversation_user_block(
            tree,
            corpus,
            options.include_self_replies,
        ));
    }
    if options.toggles.sentiment {
        values.extend(sentiment_features(tree));
    }
    if options.toggles.statistics {
        values.extend(conversation_statistics(tree));
    }
    Ok(FeatureVector {
        conversation_id: tree.conversation_id.clone(),
        values,
    })
}

/// Feature vectors for every tree of the corpus, in tree order.
pub fn assemble_corpus(
    corpus: &InstanceCorpus,
    embeddings: &BTreeMap<String, TootEmbedding>,
    options: &FeatureOptions,
) -> Result<Vec<FeatureVector>, FeatureError> {
    corpus
        .trees
        .iter()
        .map(|t| assemble(t, corpus, embeddings, options))
        .collect()
}

const STD_FLOOR: f64 = 1e-8;

/// Per-dimension z-score statistics, fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_normalizer(rows: &[&[f64]]) -> Result<Normalizer, FeatureError> {
    let first = rows.first().ok_or(FeatureError::NoTrainingData)?;
    let dims = first.len();
    for row in rows {
        if row.len() != dims {
            return Err(FeatureError::DimensionMismatch {
                expected: dims,
                got: row.len(),
            });
        }
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dims];
    let mut std = vec![0.0; dims];
    for d in 0..dims {
        let lo = rows.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            // Constant dimension: store the constant itself so subtraction
            // is exact and every output lands on 0.
            mean[d] = lo;
            std[d] = STD_FLOOR;
            continue;
        }
        let m = rows.iter().map(|r| r[d]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n;
        mean[d] = m;
        std[d] = var.sqrt().max(STD_FLOOR);
    }
    Ok(Normalizer { mean, std })
}

pub fn apply_normalizer(normalizer: &Normalizer, row: &[f64]) -> Vec<f64> {
    assert_eq!(row.len(), normalizer.mean.len(), "dimension mismatch");
    row.iter()
        .zip(normalizer.mean.iter().zip(&normalizer.std))
        .map(|(x, (m, s))| (x - m) / s)
        .collect()
}

pub const MATRIX_MAGIC: [u8; 4] = *b"FTXF";
pub const MATRIX_VERSION: u32 = 1;

/// Row-major little-endian f64 matrix with a 16-byte header.
pub fn write_matrix_bin<W: Write>(
    rows: &[FeatureVector],
    mut writer: W,
) -> Result<(), FeatureError> {
    let cols = rows.first().map_or(0, |r| r.values.len());
    for r in rows {
        if r.values.len() != cols {
            return Err(FeatureError::DimensionMismatch {
                expected: cols,
                got: r.values.len(),
            });
        }
    }
    writer.write_all(&MATRIX_MAGIC)?;
    writer.write_all(&MATRIX_VERSION.to_le_bytes())?;
    writer.write_all(&(rows.len() as u32).to_le_bytes())?;
    writer.write_all(&(cols as u32).to_le_bytes())?;
    for r in rows {
        for v in &r.values {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix_bin<R: Read>(mut reader: R) -> Result<Vec<Vec<f64>>, FeatureError> {
    let mut header = [0u8; 16];
    reader.read_exact(&mut header)?;
    if header[0..4] != MATRIX_MAGIC {
        return Err(FeatureError::Malformed("bad magic".to_owned()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(FeatureError::Malformed(format!("version {version}")));
    }
    let n_rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut rows = Vec::with_capacity(n_rows);
    let mut buf = [0u8; 8];
    for _ in 0..n_rows {
        let mut row = Vec::with_capacity(n_cols);
        for _ in 0..n_cols {
            reader.read_exact(&mut buf)?;
            row.push(f64::from_le_bytes(buf));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// CSV export: conversation_id column plus one column per dimension.
pub fn write_features_csv<W: Write>(rows: &[FeatureVector], writer: W) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(writer);
    let cols = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["conversation_id".to_owned()];
    header.extend((0..cols).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut record = vec![r.conversation_id.clone()];
        record.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
