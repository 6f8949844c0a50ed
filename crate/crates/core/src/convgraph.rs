//! Per-instance conversation graphs from shared participation, plus the
//! noise-corrected backbone that strips edges explainable by chance.

use crate::corpus::InstanceCorpus;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

/// Undirected weighted edge between node indices, stored once with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: u32,
}

/// Conversation graph of one instance: nodes are conversation ids, an edge's
/// weight counts the users two conversations share.
#[derive(Debug, Clone)]
pub struct ConversationGraph {
    pub instance: String,
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, u32)>>,
}

impl ConversationGraph {
    pub fn new(instance: String, nodes: Vec<String>, edges: Vec<Edge>) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &edges {
            adjacency[e.u].push((e.v, e.weight));
            adjacency[e.v].push((e.u, e.weight));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            instance,
            nodes,
            edges,
            adjacency,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, u32)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Sum of incident edge weights (the node's marginal in the null model).
    pub fn strength(&self, node: usize) -> u64 {
        self.adjacency[node].iter().map(|&(_, w)| w as u64).sum()
    }

    pub fn node_index(&self, conversation_id: &str) -> Option<usize> {
        self.nodes
            .binary_search_by(|n| n.as_str().cmp(conversation_id))
            .ok()
    }
}

/// NC score and its uncertainty for one edge; indices match the graph.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EdgeScore {
    pub u: usize,
    pub v: usize,
    pub nc_score: f64,
    pub sdev: f64,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),
    #[error("malformed graph csv: {0}")]
    MalformedCsv(String),
    #[error("graph csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Build the conversation graph through the user -> conversations inverted
/// index: each user contributes 1 to the weight of every pair of
/// conversations they took part in. Never compares trees all-pairs.
pub fn build_graph(corpus: &InstanceCorpus) -> ConversationGraph {
    let mut nodes: Vec<String> = corpus
        .trees
        .iter()
        .map(|t| t.conversation_id.clone())
        .collect();
    nodes.sort_unstable();
    let index: BTreeMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut weights: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for conversations in corpus.user_index.values() {
        let ids: Vec<usize> = conversations
            .iter()
            .filter_map(|c| index.get(c.as_str()).copied())
            .collect();
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                let key = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                *weights.entry(key).or_insert(0) += 1;
            }
        }
    }

    let edges = weights
        .into_iter()
        .map(|((u, v), weight)| Edge { u, v, weight })
        .collect();
    ConversationGraph::new(corpus.instance.clone(), nodes, edges)
}

/// Noise-corrected score for one edge given its weight, the endpoint
/// strengths, and the grand total of directed weights.
fn nc_edge(n_ij: f64, s_i: f64, s_j: f64, n_tot: f64) -> Result<(f64, f64), GraphError> {
    let kappa = n_tot / (s_i * s_j);
    let score = (kappa * n_ij - 1.0) / (kappa * n_ij + 1.0);

    let p_bar = s_i * s_j / (n_tot * n_tot);
    let v = s_i * s_j * (n_tot - s_i) * (n_tot - s_j) / (n_tot.powi(4) * (n_tot - 1.0));
    if v <= 0.0 {
        return Err(GraphError::DegenerateGraph(format!(
            "null-model variance {v} not positive"
        )));
    }
    let alpha0 = (p_bar * p_bar / v) * (1.0 - p_bar) - p_bar;
    let beta0 = (p_bar / v) * (1.0 - p_bar * p_bar) - (1.0 - p_bar);
    let alpha = alpha0 + n_ij;
    let beta = beta0 + n_tot - n_ij;
    let p_hat = alpha / (alpha + beta);
    let var_weight = p_hat * (1.0 - p_hat) * n_tot;

    let d = 1.0 / (s_i * s_j) - n_tot * (s_i + s_j) / (s_i * s_j).powi(2);
    let scale = 2.0 * (kappa + n_ij * d) / (kappa * n_ij + 1.0).powi(2);
    let var_score = (var_weight * scale * scale).max(0.0);
    Ok((score, var_score.sqrt()))
}

/// Score every edge against the null model of random edge formation
/// conditioned on node strengths.
pub fn nc_scores(graph: &ConversationGraph) -> Result<Vec<EdgeScore>, GraphError> {
    let n_tot: f64 = 2.0 * graph.edges.iter().map(|e| e.weight as f64).sum::<f64>();
    if n_tot <= 1.0 {
        return Err(GraphError::DegenerateGraph(format!(
            "total directed weight {n_tot} too small"
        )));
    }
    graph
        .edges
        .iter()
        .map(|e| {
            let (nc_score, sdev) = nc_edge(
                e.weight as f64,
                graph.strength(e.u) as f64,
                graph.strength(e.v) as f64,
                n_tot,
            )?;
            Ok(EdgeScore {
                u: e.u,
                v: e.v,
                nc_score,
                sdev,
            })
        })
        .collect()
}

/// Keep edges whose score clears `delta` standard deviations above zero.
/// Every node survives: isolated conversations still get classified.
pub fn extract_backbone(
    graph: &ConversationGraph,
    scores: &[EdgeScore],
    delta: f64,
) -> ConversationGraph {
    assert_eq!(
        scores.len(),
        graph.edges.len(),
        "scores must cover all edges"
    );
    let edges = graph
        .edges
        .iter()
        .zip(scores)
        .filter(|(_, s)| s.nc_score - delta * s.sdev > 0.0)
        .map(|(e, _)| *e)
        .collect();
    ConversationGraph::new(graph.instance.clone(), graph.nodes.clone(), edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetentionStats {
    pub node_retention: f64,
    pub edge_retention: f64,
    pub density_before: f64,
    pub density_after: f64,
}

fn density(graph: &ConversationGraph) -> f64 {
    let n = graph.node_count();
    if n < 2 {
        return 0.0;
    }
    2.0 * graph.edge_count() as f64 / (n as f64 * (n as f64 - 1.0))
}

fn connected_fraction(graph: &ConversationGraph) -> f64 {
    if graph.node_count() == 0 {
        return 0.0;
    }
    let connected = (0..graph.node_count())
        .filter(|&i| graph.degree(i) >= 1)
        .count();
    connected as f64 / graph.node_count() as f64
}

/// Connected-node and edge retention of a backbone relative to its source.
pub fn retention(before: &ConversationGraph, after: &ConversationGraph) -> RetentionStats {
    let before_frac = connected_fraction(before);
    let after_frac = connected_fraction(after);
    let node_retention = if before_frac == 0.0 {
        1.0
    } else {
        after_frac / before_frac
    };
    let edge_retention = if before.edge_count() == 0 {
        1.0
    } else {
        after.edge_count() as f64 / before.edge_count() as f64
    };
    RetentionStats {
        node_retention,
        edge_retention,
        density_before: density(before),
        density_after: density(after),
    }
}

/// Edge list as CSV; pass scores to append the backbone columns.
pub fn write_edges_csv<W: std::io::Write>(
    graph: &ConversationGraph,
    scores: Option<&[EdgeScore]>,
    writer: W,
) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_writer(writer);
    match scores {
        None => {
            w.write_record(["u", "v", "weight"])?;
            for e in &graph.edges {
                w.write_record([
                    graph.nodes[e.u].as_str(),
                    graph.nodes[e.v].as_str(),
                    &e.weight.to_string(),
                ])?;
            }
        }
        Some(scores) => {
            assert_eq!(scores.len(), graph.edges.len());
            w.write_record(["u", "v", "weight", "nc_score", "sdev"])?;
            for (e, s) in graph.edges.iter().zip(scores) {
                w.write_record([
                    graph.nodes[e.u].as_str(),
                    graph.nodes[e.v].as_str(),
                    &e.weight.to_string(),
                    &s.nc_score.to_string(),
                    &s.sdev.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_nodes_csv<W: std::io::Write>(
    graph: &ConversationGraph,
    writer: W,
) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["node"])?;
    for n in &graph.nodes {
        w.write_record([n.as_str()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Rebuild a graph from its node and edge CSVs.
pub fn read_graph_csv<R1: std::io::Read, R2: std::io::Read>(
    instance: String,
    nodes_reader: R1,
    edges_reader: R2,
) -> Result<ConversationGraph, GraphError> {
    let mut nodes = Vec::new();
    let mut r = csv::Reader::from_reader(nodes_reader);
    for record in r.records() {
        let record = record?;
        match record.get(0) {
            Some(n) if !n.is_empty() => nodes.push(n.to_owned()),
            _ => return Err(GraphError::MalformedCsv("empty node id".to_owned())),
        }
    }
    let index: BTreeMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut edges = Vec::new();
    let mut r = csv::Reader::from_reader(edges_reader);
    for record in r.records() {
        let record = record?;
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| GraphError::MalformedCsv(format!("missing column {i}")))
        };
        let u_id = field(0)?;
        let u = *index
            .get(u_id)
            .ok_or_else(|| GraphError::MalformedCsv(format!("unknown node {u_id}")))?;
        let v_id = field(1)?;
        let v = *index
            .get(v_id)
            .ok_or_else(|| GraphError::MalformedCsv(format!("unknown node {v_id}")))?;
        let weight: u32 = field(2)?
            .parse()
            .map_err(|e| GraphError::MalformedCsv(format!("bad weight: {e}")))?;
        if weight == 0 {
            return Err(GraphError::MalformedCsv("zero weight".to_owned()));
        }
        if u == v {
            return Err(GraphError::MalformedCsv("self-loop".to_owned()));
        }
        edges.push(Edge {
            u: u.min(v),
            v: u.max(v),
            weight,
        });
    }
    edges.sort_unstable_by_key(|e| (e.u, e.v));
    Ok(ConversationGraph::new(instance, nodes, edges))
}
