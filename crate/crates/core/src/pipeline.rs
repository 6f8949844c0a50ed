//! File-based pipeline stages behind the CLI.
//!
//! Every stage reads the previous stage's exported artifacts, writes its own
//! plus a `manifest_<stage>.json`, and refuses to mix artifacts produced
//! under different configs: each manifest records the config hash, and
//! downstream stages abort on a mismatch instead of silently combining
//! stale files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::convgraph::{
    build_graph, extract_backbone, nc_scores, read_graph_csv, retention, write_edges_csv,
    write_nodes_csv, ConversationGraph, EdgeScore, GraphError,
};
use crate::corpus::{
    corpus_stats, filter_corpus, parse_corpus, write_rejection_report, CorpusError, CorpusStats,
    InstanceCorpus,
};
use crate::features::deepwalk::{deepwalk_embed, TootEmbedding};
use crate::features::{
    assemble_corpus, read_matrix_bin, write_matrix_bin, FeatureError, FeatureToggles,
};
use crate::federation::{
    eligible_clients, run_experiment_grid, run_federation, write_grid_csv, CellOutcome, ClientData,
    EvaluationReport, FederationError, GridAxis, GridCell,
};
use crate::graphsage::{write_checkpoint, SageError};
use crate::labeling::{label_corpus, read_labels_csv, write_labels_csv, Label};
use crate::llm::{
    clean_text, run_baseline, write_baseline_csv, CompletionClient, HttpEndpoint, InstancePool,
    LabeledText, LlmError,
};
use crate::synth::{self, SynthError};

/// Stage failures carry the process exit code the CLI maps them to.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("endpoint error: {0}")]
    Endpoint(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Endpoint(_) => 4,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SageError> for PipelineError {
    fn from(e: SageError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigError(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<FederationError> for PipelineError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::InvalidConfig(_) | FederationError::NoEligibleClients => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<LlmError> for PipelineError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::EndpointUnavailable(_) => PipelineError::Endpoint(e.to_string()),
            LlmError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

/// Relative artifact paths under the run directory.
pub mod artifacts {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const PLANTED: &str = "planted.csv";
    pub const FILTERED: &str = "filtered.jsonl";
    pub const REJECTED: &str = "rejected.csv";
    pub const STATS: &str = "stats.json";
    pub const LABELS: &str = "labels.csv";
    pub const GRAPHS_DIR: &str = "graphs";
    pub const BACKBONE_DIR: &str = "backbone";
    pub const RETENTION: &str = "backbone/retention.csv";
    pub const FEATURES_DIR: &str = "features";
    pub const MODEL: &str = "model.bin";
    pub const TRAIN_REPORT: &str = "train_report.json";
    pub const ROUNDS: &str = "rounds.csv";
    pub const LLM_REPORT_JSON: &str = "llm_report.json";
    pub const LLM_REPORT_CSV: &str = "llm_report.csv";
    pub const SUMMARY: &str = "summary.md";
}

/// Provenance record written next to every stage's outputs. Contains no
/// timestamps so identical runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

/// A validated config bound to its run directory.
pub struct Workspace {
    pub config: RunConfig,
    pub hash: String,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let hash = config.config_hash();
        Ok(Self { config, hash })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    fn ensure_dir(&self, rel: &str) -> Result<PathBuf, PipelineError> {
        let dir = self.path(rel);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("manifest_{stage}.json"))
    }

    fn write_manifest(
        &self,
        stage: &str,
        seeds: &[u64],
        inputs: &[String],
        outputs: &[String],
    ) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.config.out_dir)?;
        let manifest = StageManifest {
            stage: stage.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: self.hash.clone(),
            seeds: seeds.to_vec(),
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            config: self.config.clone(),
        };
        let file = File::create(self.manifest_path(stage))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Verify a prerequisite stage ran here under the current config.
    pub fn check_stage(&self, stage: &str) -> Result<(), PipelineError> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Err(PipelineError::Data(format!(
                "stage '{stage}' has not run in {}; run `fedtox {stage}` first",
                self.config.out_dir.display()
            )));
        }
        let manifest: StageManifest = serde_json::from_reader(BufReader::new(File::open(&path)?))
            .map_err(|e| {
            PipelineError::Data(format!("unreadable manifest {}: {e}", path.display()))
        })?;
        if manifest.config_hash != self.hash {
            return Err(PipelineError::Data(format!(
                "artifacts of stage '{stage}' in {} were produced under config {}, but the \
                 current config hashes to {}; re-run the stage or restore the config",
                self.config.out_dir.display(),
                &manifest.config_hash[..12],
                &self.hash[..12]
            )));
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    let file = File::open(path)
        .map_err(|e| PipelineError::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(file))
}

/// Instance names become file names; refuse anything that would escape the
/// run directory.
fn check_instance_name(name: &str) -> Result<(), PipelineError> {
    let ok = !name.is_empty()
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'));
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Data(format!(
            "instance name '{name}' is not usable as a file name"
        )))
    }
}

pub fn stage_synth(ws: &Workspace) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&ws.config.out_dir)?;
    let corpus = synth::generate(&ws.config.synth)?;
    synth::write_corpus_jsonl(&corpus.toots, create(&ws.path(artifacts::CORPUS))?)?;
    synth::write_planted_csv(&corpus.planted, create(&ws.path(artifacts::PLANTED))?)?;
    log::info!(
        "synth: {} toots, {} conversations",
        corpus.toots.len(),
        corpus.planted.len()
    );
    ws.write_manifest(
        "synth",
        &[ws.config.synth.seed],
        &[],
        &[artifacts::CORPUS.to_owned(), artifacts::PLANTED.to_owned()],
    )
}

/// Resolve the raw corpus path: an explicit `ingest.input` wins, otherwise
/// the synth stage output in the run directory.
fn resolve_corpus_input(ws: &Workspace) -> Result<PathBuf, PipelineError> {
    match &ws.config.ingest.input {
        Some(path) => {
            if path.exists() {
                Ok(path.clone())
            } else {
                Err(PipelineError::Data(format!(
                    "ingest.input {} does not exist",
                    path.display()
                )))
            }
        }
        None => {
            let path = ws.path(artifacts::CORPUS);
            if !path.exists() {
                return Err(PipelineError::Data(format!(
                    "no corpus at {}; run `fedtox synth` or set ingest.input",
                    path.display()
                )));
            }
            ws.check_stage("synth")?;
            Ok(path)
        }
    }
}

#[derive(Debug, Serialize)]
struct IngestStats {
    parsed: CorpusStats,
    filtered: CorpusStats,
    rejected_lines: usize,
    dropped_conversations: usize,
    dropped_instances: Vec<String>,
}

pub fn stage_ingest(ws: &Workspace) -> Result<(), PipelineError> {
    let input = resolve_corpus_input(ws)?;
    let outcome = parse_corpus(open(&input)?)?;
    let parsed = corpus_stats(&outcome.corpora);

    let langs = ws.config.ingest.lang_set();
    let mut filtered = Vec::new();
    let mut dropped_instances = Vec::new();
    for corpus in &outcome.corpora {
        let kept = filter_corpus(corpus, &langs, ws.config.ingest.min_posts);
        if kept.trees.is_empty() {
            log::warn!(
                "ingest: instance {} has no conversations left",
                kept.instance
            );
            dropped_instances.push(kept.instance);
        } else {
            filtered.push(kept);
        }
    }
    filtered.sort_by(|a, b| a.instance.cmp(&b.instance));

    let toots: Vec<_> = filtered
        .iter()
        .flat_map(|c| c.trees.iter())
        .flat_map(|t| t.toots.iter().cloned())
        .collect();
    synth::write_corpus_jsonl(&toots, create(&ws.path(artifacts::FILTERED))?)?;
    write_rejection_report(&outcome, create(&ws.path(artifacts::REJECTED))?)?;

    let stats = IngestStats {
        parsed,
        filtered: corpus_stats(&filtered),
        rejected_lines: outcome.rejected_lines.len(),
        dropped_conversations: outcome.dropped_conversations.len(),
        dropped_instances,
    };
    let mut w = create(&ws.path(artifacts::STATS))?;
    serde_json::to_writer_pretty(&mut w, &stats)?;
    w.write_all(b"\n")?;
    w.flush()?;
    log::info!(
        "ingest: kept {} instances, {} conversations",
        stats.filtered.instances,
        stats.filtered.conversations
    );

    ws.write_manifest(
        "ingest",
        &[],
        &[input.display().to_string()],
        &[
            artifacts::FILTERED.to_owned(),
            artifacts::REJECTED.to_owned(),
            artifacts::STATS.to_owned(),
        ],
    )
}

/// Read back the ingest stage output, which must parse without a single
/// rejection.
fn load_filtered(ws: &Workspace) -> Result<Vec<InstanceCorpus>, PipelineError> {
    ws.check_stage("ingest")?;
    let path = ws.path(artifacts::FILTERED);
    let outcome = parse_corpus(open(&path)?)?;
    if outcome.rejection_count() > 0 {
        return Err(PipelineError::Data(format!(
            "{} is corrupted ({} rejections); re-run `fedtox ingest`",
            path.display(),
            outcome.rejection_count()
        )));
    }
    let mut corpora = outcome.corpora;
    corpora.sort_by(|a, b| a.instance.cmp(&b.instance));
    Ok(corpora)
}

pub fn stage_label(ws: &Workspace) -> Result<(), PipelineError> {
    let corpora = load_filtered(ws)?;
    let mut labels = Vec::new();
    let mut seen = BTreeMap::new();
    for corpus in &corpora {
        for label in label_corpus(corpus, &ws.config.labeling) {
            if let Some(other) = seen.insert(label.conversation_id.clone(), corpus.instance.clone())
            {
                return Err(PipelineError::Data(format!(
                    "conversation id {} appears in instances {} and {}; a shared labels file \
                     would be ambiguous",
                    label.conversation_id, other, corpus.instance
                )));
            }
            labels.push(label);
        }
    }
    write_labels_csv(&labels, create(&ws.path(artifacts::LABELS))?)?;
    let toxic = labels.iter().filter(|l| l.label == Label::Toxic).count();
    log::info!("label: {} conversations, {toxic} toxic", labels.len());
    ws.write_manifest(
        "label",
        &[],
        &[artifacts::FILTERED.to_owned()],
        &[artifacts::LABELS.to_owned()],
    )
}

fn nodes_file(instance: &str) -> String {
    format!("{instance}.nodes.csv")
}

fn edges_file(instance: &str) -> String {
    format!("{instance}.edges.csv")
}

pub fn stage_graph(ws: &Workspace) -> Result<(), PipelineError> {
    let corpora = load_filtered(ws)?;
    let dir = ws.ensure_dir(artifacts::GRAPHS_DIR)?;
    let mut outputs = Vec::new();
    for corpus in &corpora {
        check_instance_name(&corpus.instance)?;
        let graph = build_graph(corpus);
        write_nodes_csv(&graph, create(&dir.join(nodes_file(&corpus.instance)))?)?;
        write_edges_csv(
            &graph,
            None,
            create(&dir.join(edges_file(&corpus.instance)))?,
        )?;
        outputs.push(format!(
            "{}/{}",
            artifacts::GRAPHS_DIR,
            nodes_file(&corpus.instance)
        ));
        outputs.push(format!(
            "{}/{}",
            artifacts::GRAPHS_DIR,
            edges_file(&corpus.instance)
        ));
    }
    log::info!("graph: wrote {} instance graphs", corpora.len());
    ws.write_manifest("graph", &[], &[artifacts::FILTERED.to_owned()], &outputs)
}

/// Instances that have a graph on disk, in sorted order.
fn graph_instances(dir: &Path) -> Result<Vec<String>, PipelineError> {
    let mut instances = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".nodes.csv") {
            instances.push(stem.to_owned());
        }
    }
    instances.sort();
    Ok(instances)
}

fn read_graph_files(dir: &Path, instance: &str) -> Result<ConversationGraph, PipelineError> {
    let graph = read_graph_csv(
        instance.to_owned(),
        open(&dir.join(nodes_file(instance)))?,
        open(&dir.join(edges_file(instance)))?,
    )?;
    Ok(graph)
}

/// NC-score and filter one graph; single-node and edgeless graphs pass
/// through unchanged since there is no weight distribution to test against.
fn backbone_of(
    graph: &ConversationGraph,
    delta: f64,
) -> Result<(ConversationGraph, Option<Vec<EdgeScore>>), PipelineError> {
    match nc_scores(graph) {
        Ok(scores) => {
            let backbone = extract_backbone(graph, &scores, delta);
            let kept: Vec<EdgeScore> = {
                let mut by_pair = BTreeMap::new();
                for s in &scores {
                    by_pair.insert((s.u, s.v), *s);
                }
                backbone
                    .edges
                    .iter()
                    .map(|e| by_pair[&(e.u, e.v)])
                    .collect()
            };
            Ok((backbone, Some(kept)))
        }
        Err(GraphError::DegenerateGraph(reason)) => {
            log::warn!(
                "backbone: {} passes through unchanged ({reason})",
                graph.instance
            );
            Ok((graph.clone(), None))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn stage_backbone(ws: &Workspace) -> Result<(), PipelineError> {
    ws.check_stage("graph")?;
    let graphs_dir = ws.path(artifacts::GRAPHS_DIR);
    let out_dir = ws.ensure_dir(artifacts::BACKBONE_DIR)?;
    let instances = graph_instances(&graphs_dir)?;
    if instances.is_empty() {
        return Err(PipelineError::Data(format!(
            "no graphs found under {}",
            graphs_dir.display()
        )));
    }

    let mut outputs = Vec::new();
    let mut retention_rows = Vec::new();
    for instance in &instances {
        let graph = read_graph_files(&graphs_dir, instance)?;
        let (backbone, kept_scores) = backbone_of(&graph, ws.config.backbone.delta)?;
        write_nodes_csv(&backbone, create(&out_dir.join(nodes_file(instance)))?)?;
        let scores = if ws.config.backbone.write_scores {
            kept_scores.as_deref()
        } else {
            None
        };
        write_edges_csv(
            &backbone,
            scores,
            create(&out_dir.join(edges_file(instance)))?,
        )?;
        outputs.push(format!(
            "{}/{}",
            artifacts::BACKBONE_DIR,
            nodes_file(instance)
        ));
        outputs.push(format!(
            "{}/{}",
            artifacts::BACKBONE_DIR,
            edges_file(instance)
        ));
        retention_rows.push((instance.clone(), graph, backbone));
    }

    let mut w = csv::Writer::from_writer(create(&ws.path(artifacts::RETENTION))?);
    w.write_record([
        "instance",
        "nodes",
        "edges_before",
        "edges_after",
        "node_retention",
        "edge_retention",
        "density_before",
        "density_after",
    ])?;
    for (instance, before, after) in &retention_rows {
        let stats = retention(before, after);
        w.write_record([
            instance.as_str(),
            &before.nodes.len().to_string(),
            &before.edges.len().to_string(),
            &after.edges.len().to_string(),
            &stats.node_retention.to_string(),
            &stats.edge_retention.to_string(),
            &stats.density_before.to_string(),
            &stats.density_after.to_string(),
        ])?;
    }
    w.flush()?;
    outputs.push(artifacts::RETENTION.to_owned());
    log::info!(
        "backbone: processed {} graphs at delta {}",
        instances.len(),
        ws.config.backbone.delta
    );
    ws.write_manifest(
        "backbone",
        &[],
        &[artifacts::GRAPHS_DIR.to_owned()],
        &outputs,
    )
}

fn bin_file(instance: &str) -> String {
    format!("{instance}.bin")
}

fn ids_file(instance: &str) -> String {
    format!("{instance}.ids.csv")
}

fn write_ids_csv<W: std::io::Write>(ids: &[&str], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "conversation_id"])?;
    for (i, id) in ids.iter().enumerate() {
        w.write_record([i.to_string().as_str(), id])?;
    }
    w.flush()?;
    Ok(())
}

fn read_ids_csv<R: std::io::Read>(reader: R) -> Result<Vec<String>, PipelineError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut ids = Vec::new();
    for record in r.records() {
        let record = record?;
        match record.get(1) {
            Some(id) if !id.is_empty() => ids.push(id.to_owned()),
            _ => return Err(PipelineError::Data("ids csv row without an id".to_owned())),
        }
    }
    Ok(ids)
}

pub fn stage_features(ws: &Workspace) -> Result<(), PipelineError> {
    let corpora = load_filtered(ws)?;
    let dir = ws.ensure_dir(artifacts::FEATURES_DIR)?;
    let mut outputs = Vec::new();
    for corpus in &corpora {
        check_instance_name(&corpus.instance)?;
        let embeddings = deepwalk_embed(
            corpus,
            &ws.config.features.deepwalk,
            ws.config.features.seed,
        );
        let rows = assemble_corpus(corpus, &embeddings, &ws.config.features.options)?;
        write_matrix_bin(&rows, create(&dir.join(bin_file(&corpus.instance)))?)?;
        let ids: Vec<&str> = rows.iter().map(|r| r.conversation_id.as_str()).collect();
        write_ids_csv(&ids, create(&dir.join(ids_file(&corpus.instance)))?)?;
        outputs.push(format!(
            "{}/{}",
            artifacts::FEATURES_DIR,
            bin_file(&corpus.instance)
        ));
        outputs.push(format!(
            "{}/{}",
            artifacts::FEATURES_DIR,
            ids_file(&corpus.instance)
        ));
    }
    log::info!("features: wrote matrices for {} instances", corpora.len());
    ws.write_manifest(
        "features",
        &[ws.config.features.seed],
        &[artifacts::FILTERED.to_owned()],
        &outputs,
    )
}

fn read_labels_file(ws: &Workspace) -> Result<BTreeMap<String, Label>, PipelineError> {
    let path = ws.path(artifacts::LABELS);
    read_labels_csv(open(&path)?)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Assemble per-client data from the backbone, features, and labels stages.
fn load_clients(ws: &Workspace) -> Result<Vec<ClientData>, PipelineError> {
    ws.check_stage("label")?;
    ws.check_stage("backbone")?;
    ws.check_stage("features")?;
    let labels = read_labels_file(ws)?;
    let backbone_dir = ws.path(artifacts::BACKBONE_DIR);
    let features_dir = ws.path(artifacts::FEATURES_DIR);
    let mut clients = Vec::new();
    for instance in graph_instances(&backbone_dir)? {
        let graph = read_graph_files(&backbone_dir, instance.as_str())?;
        let rows = read_matrix_bin(open(&features_dir.join(bin_file(&instance)))?)?;
        let ids = read_ids_csv(open(&features_dir.join(ids_file(&instance)))?)?;
        if ids.len() != rows.len() {
            return Err(PipelineError::Data(format!(
                "feature matrix and id list of {instance} disagree ({} rows vs {} ids)",
                rows.len(),
                ids.len()
            )));
        }
        let by_id: BTreeMap<String, Vec<f64>> = ids.into_iter().zip(rows).collect();
        let mut features = Vec::with_capacity(graph.nodes.len());
        let mut node_labels = BTreeMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            let row = by_id.get(node).ok_or_else(|| {
                PipelineError::Data(format!(
                    "no feature row for conversation {node} of {instance}; re-run `fedtox features`"
                ))
            })?;
            features.push(row.clone());
            let label = labels.get(node).ok_or_else(|| {
                PipelineError::Data(format!(
                    "no label for conversation {node} of {instance}; re-run `fedtox label`"
                ))
            })?;
            node_labels.insert(i, *label);
        }
        clients.push(ClientData {
            client_id: instance,
            graph,
            features,
            labels: node_labels,
        });
    }
    Ok(clients)
}

#[derive(Debug, Serialize)]
struct RejectedClient {
    client_id: String,
    reason: String,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    eligible_clients: Vec<String>,
    rejected_clients: Vec<RejectedClient>,
    final_report: EvaluationReport,
}

pub fn stage_train(ws: &Workspace) -> Result<(), PipelineError> {
    let candidates = load_clients(ws)?;
    let fed = &ws.config.federation;
    let (eligible, rejected) =
        eligible_clients(candidates, fed.split_ratio, fed.train_cap, fed.seed);
    if eligible.is_empty() {
        let detail = rejected
            .first()
            .map(|(id, reason)| format!(" (e.g. {id}: {reason})"))
            .unwrap_or_default();
        return Err(PipelineError::Config(format!(
            "no eligible clients under the current split and cap{detail}"
        )));
    }
    log::info!(
        "train: {} eligible clients, {} rejected",
        eligible.len(),
        rejected.len()
    );
    let run = run_federation(&eligible, fed)?;

    write_checkpoint(&run.final_model, create(&ws.path(artifacts::MODEL))?)?;

    let mut w = csv::Writer::from_writer(create(&ws.path(artifacts::ROUNDS))?);
    w.write_record(["round", "n_participants", "n_skipped", "macro_f1"])?;
    for record in &run.history {
        w.write_record([
            record.round.to_string(),
            record.participants.len().to_string(),
            record.skipped.len().to_string(),
            record
                .report
                .as_ref()
                .map(|r| r.macro_f1.to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let report = TrainReport {
        eligible_clients: eligible.iter().map(|c| c.client_id.clone()).collect(),
        rejected_clients: rejected
            .into_iter()
            .map(|(client_id, reason)| RejectedClient { client_id, reason })
            .collect(),
        final_report: run.final_report,
    };
    let mut w = create(&ws.path(artifacts::TRAIN_REPORT))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    log::info!("train: final macro-F1 {:.4}", report.final_report.macro_f1);

    ws.write_manifest(
        "train",
        &[fed.seed],
        &[
            artifacts::BACKBONE_DIR.to_owned(),
            artifacts::FEATURES_DIR.to_owned(),
            artifacts::LABELS.to_owned(),
        ],
        &[
            artifacts::MODEL.to_owned(),
            artifacts::ROUNDS.to_owned(),
            artifacts::TRAIN_REPORT.to_owned(),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum AxisValue {
    Count(usize),
    Threshold(f64),
    Ablation(String),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{n}"),
            AxisValue::Threshold(t) => write!(f, "{t}"),
            AxisValue::Ablation(name) => write!(f, "{name}"),
        }
    }
}

pub fn parse_axis(name: &str) -> Option<GridAxis> {
    match name {
        "train-size" => Some(GridAxis::TrainSize),
        "conv-length" => Some(GridAxis::ConvLength),
        "clients-per-round" => Some(GridAxis::ClientsPerRound),
        "toxicity-threshold" => Some(GridAxis::ToxicityThreshold),
        "ablation" => Some(GridAxis::FeatureAblation),
        _ => None,
    }
}

pub fn axis_slug(axis: &GridAxis) -> &'static str {
    match axis {
        GridAxis::TrainSize => "train-size",
        GridAxis::ConvLength => "conv-length",
        GridAxis::ClientsPerRound => "clients-per-round",
        GridAxis::ToxicityThreshold => "toxicity-threshold",
        GridAxis::FeatureAblation => "ablation",
    }
}

pub const ABLATION_NAMES: [&str; 5] = ["dw", "dw+auth", "dw+auth+sent", "auth+sent+conv", "all"];

/// Feature blocks toggled by ablation row name: dw = embeddings,
/// auth = user block, sent = sentiment, conv = conversation statistics.
fn ablation_toggles(name: &str) -> Option<FeatureToggles> {
    let t = |embeddings, user_block, sentiment, statistics| FeatureToggles {
        embeddings,
        user_block,
        sentiment,
        statistics,
    };
    match name {
        "dw" => Some(t(true, false, false, false)),
        "dw+auth" => Some(t(true, true, false, false)),
        "dw+auth+sent" => Some(t(true, true, true, false)),
        "auth+sent+conv" => Some(t(false, true, true, true)),
        "all" => Some(t(true, true, true, true)),
        _ => None,
    }
}

pub fn default_axis_values(axis: &GridAxis) -> Vec<AxisValue> {
    match axis {
        GridAxis::TrainSize => [20, 50, 100, 200, 500]
            .into_iter()
            .map(AxisValue::Count)
            .collect(),
        GridAxis::ConvLength => [1, 5, 10].into_iter().map(AxisValue::Count).collect(),
        GridAxis::ClientsPerRound => [10, 25, 50].into_iter().map(AxisValue::Count).collect(),
        GridAxis::ToxicityThreshold => [0.4, 0.5, 0.6, 0.7, 0.8]
            .into_iter()
            .map(AxisValue::Threshold)
            .collect(),
        GridAxis::FeatureAblation => ABLATION_NAMES
            .into_iter()
            .map(|n| AxisValue::Ablation(n.to_owned()))
            .collect(),
    }
}

pub fn parse_axis_values(axis: &GridAxis, text: &str) -> Result<Vec<AxisValue>, PipelineError> {
    let mut values = Vec::new();
    for raw in text.split(',') {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let value = match axis {
            GridAxis::TrainSize | GridAxis::ConvLength | GridAxis::ClientsPerRound => raw
                .parse::<usize>()
                .map(AxisValue::Count)
                .map_err(|_| PipelineError::Config(format!("'{raw}' is not a count")))?,
            GridAxis::ToxicityThreshold => {
                let t: f64 = raw
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("'{raw}' is not a threshold")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(PipelineError::Config(format!(
                        "threshold {t} is outside [0, 1]"
                    )));
                }
                AxisValue::Threshold(t)
            }
            GridAxis::FeatureAblation => {
                if ablation_toggles(raw).is_none() {
                    return Err(PipelineError::Config(format!(
                        "unknown ablation '{raw}'; expected one of {}",
                        ABLATION_NAMES.join(", ")
                    )));
                }
                AxisValue::Ablation(raw.to_owned())
            }
        };
        values.push(value);
    }
    if values.is_empty() {
        return Err(PipelineError::Config("no axis values given".to_owned()));
    }
    Ok(values)
}

type EmbeddingCache = BTreeMap<(u64, usize), Rc<Vec<BTreeMap<String, TootEmbedding>>>>;

/// One grid cell: the full in-memory pipeline from raw corpora to a
/// federated evaluation, with the axis value overriding one knob.
fn grid_cell(
    raw: &[InstanceCorpus],
    config: &RunConfig,
    axis: &GridAxis,
    value: &AxisValue,
    seed: u64,
    cache: &mut EmbeddingCache,
) -> Result<CellOutcome, PipelineError> {
    let min_posts = match (axis, value) {
        (GridAxis::ConvLength, AxisValue::Count(n)) => *n,
        _ => config.ingest.min_posts,
    };
    let policy = ws_policy(config, axis, value);
    policy.validate().map_err(PipelineError::Config)?;
    let mut options = config.features.options;
    if let (GridAxis::FeatureAblation, AxisValue::Ablation(name)) = (axis, value) {
        options.toggles = ablation_toggles(name)
            .ok_or_else(|| PipelineError::Config(format!("unknown ablation '{name}'")))?;
    }
    let mut fed = config.federation.clone();
    fed.seed = seed;
    match (axis, value) {
        (GridAxis::TrainSize, AxisValue::Count(n)) => fed.train_cap = Some(*n),
        (GridAxis::ClientsPerRound, AxisValue::Count(n)) => fed.clients_per_round = *n,
        _ => {}
    }

    let langs = config.ingest.lang_set();
    let filtered: Vec<InstanceCorpus> = raw
        .iter()
        .map(|c| filter_corpus(c, &langs, min_posts))
        .filter(|c| !c.trees.is_empty())
        .collect();
    if filtered.is_empty() {
        return Err(PipelineError::Data(
            "no conversations survive the cell's filters".to_owned(),
        ));
    }

    let embeddings = cache
        .entry((seed, min_posts))
        .or_insert_with(|| {
            Rc::new(
                filtered
                    .iter()
                    .map(|c| deepwalk_embed(c, &config.features.deepwalk, seed))
                    .collect(),
            )
        })
        .clone();

    let mut candidates = Vec::new();
    for (corpus, emb) in filtered.iter().zip(embeddings.iter()) {
        let labels: BTreeMap<String, Label> = label_corpus(corpus, &policy)
            .into_iter()
            .map(|l| (l.conversation_id, l.label))
            .collect();
        let graph = build_graph(corpus);
        let (backbone, _) = backbone_of(&graph, config.backbone.delta)?;
        let rows = assemble_corpus(corpus, emb, &options)?;
        let by_id: BTreeMap<&str, &Vec<f64>> = rows
            .iter()
            .map(|r| (r.conversation_id.as_str(), &r.values))
            .collect();
        let mut features = Vec::with_capacity(backbone.nodes.len());
        let mut node_labels = BTreeMap::new();
        for (i, node) in backbone.nodes.iter().enumerate() {
            features.push(
                (*by_id
                    .get(node.as_str())
                    .expect("features cover graph nodes"))
                .clone(),
            );
            node_labels.insert(i, labels[node]);
        }
        candidates.push(ClientData {
            client_id: corpus.instance.clone(),
            graph: backbone,
            features,
            labels: node_labels,
        });
    }

    let (eligible, _rejected) =
        eligible_clients(candidates, fed.split_ratio, fed.train_cap, fed.seed);
    if eligible.is_empty() {
        return Err(PipelineError::Config(
            "no eligible clients in this cell".to_owned(),
        ));
    }
    let clients_per_round = fed.clients_per_round.min(eligible.len());
    let run = run_federation(&eligible, &fed)?;
    Ok(CellOutcome {
        report: run.final_report,
        n_clients: eligible.len(),
        clients_per_round,
    })
}

fn ws_policy(
    config: &RunConfig,
    axis: &GridAxis,
    value: &AxisValue,
) -> crate::labeling::ModerationPolicy {
    let mut policy = config.labeling;
    if let (GridAxis::ToxicityThreshold, AxisValue::Threshold(t)) = (axis, value) {
        policy.thr_root = *t;
    }
    policy
}

pub fn stage_grid(
    ws: &Workspace,
    axis_name: &str,
    values: Option<&str>,
) -> Result<Vec<GridCell>, PipelineError> {
    let axis = parse_axis(axis_name).ok_or_else(|| {
        PipelineError::Config(format!(
            "unknown grid axis '{axis_name}'; expected train-size, conv-length, \
             clients-per-round, toxicity-threshold, or ablation"
        ))
    })?;
    let values = match values {
        Some(text) => parse_axis_values(&axis, text)?,
        None => default_axis_values(&axis),
    };

    let input = resolve_corpus_input(ws)?;
    let outcome = parse_corpus(open(&input)?)?;
    if outcome.rejection_count() > 0 {
        log::warn!(
            "grid: input has {} rejected lines",
            outcome.rejection_count()
        );
    }
    let mut raw = outcome.corpora;
    raw.sort_by(|a, b| a.instance.cmp(&b.instance));

    let mut cache = EmbeddingCache::new();
    let seeds = ws.config.grid.seeds.clone();
    let table = run_experiment_grid(&values, &seeds, |value, seed| {
        grid_cell(&raw, &ws.config, &axis, value, seed, &mut cache).map_err(|e| e.to_string())
    });

    if table.iter().all(|cell| cell.failed) {
        let first = table
            .iter()
            .flat_map(|c| c.errors.iter())
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(PipelineError::Data(format!(
            "every grid cell failed; first error: {first}"
        )));
    }

    let slug = axis_slug(&axis);
    let csv_path = format!("grid_{slug}.csv");
    let json_path = format!("grid_{slug}.json");
    write_grid_csv(&axis, &table, create(&ws.path(&csv_path))?)?;
    let mut w = create(&ws.path(&json_path))?;
    serde_json::to_writer_pretty(&mut w, &table)?;
    w.write_all(b"\n")?;
    w.flush()?;
    log::info!("grid: wrote {} cells to {csv_path}", table.len());

    ws.write_manifest(
        &format!("grid-{slug}"),
        &seeds,
        &[input.display().to_string()],
        &[csv_path, json_path],
    )?;
    Ok(table)
}

pub fn stage_llm_eval(ws: &Workspace) -> Result<(), PipelineError> {
    let client = HttpEndpoint::new(ws.config.llm.endpoint.clone())?;
    client.preflight()?;
    stage_llm_eval_with(ws, &client)
}

/// Same as `stage_llm_eval` but with an injected completion client.
pub fn stage_llm_eval_with(
    ws: &Workspace,
    client: &dyn CompletionClient,
) -> Result<(), PipelineError> {
    ws.check_stage("label")?;
    let corpora = load_filtered(ws)?;
    let labels = read_labels_file(ws)?;

    let mut pools = Vec::new();
    for corpus in &corpora {
        let mut items = Vec::new();
        for tree in &corpus.trees {
            let Some(&label) = labels.get(&tree.conversation_id) else {
                return Err(PipelineError::Data(format!(
                    "no label for conversation {}; re-run `fedtox label`",
                    tree.conversation_id
                )));
            };
            match clean_text(tree, ws.config.llm.run.text_budget) {
                Ok(text) => items.push(LabeledText {
                    conversation_id: tree.conversation_id.clone(),
                    instance: corpus.instance.clone(),
                    label,
                    text,
                }),
                Err(LlmError::EmptyConversation(id)) => {
                    log::warn!("llm-eval: skipping {id}: no usable text");
                }
                Err(e) => return Err(e.into()),
            }
        }
        pools.push(InstancePool {
            instance: corpus.instance.clone(),
            items,
        });
    }

    let report = run_baseline(&pools, client, &ws.config.llm.run)?;
    let mut w = create(&ws.path(artifacts::LLM_REPORT_JSON))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    write_baseline_csv(&report, create(&ws.path(artifacts::LLM_REPORT_CSV))?)?;
    log::info!(
        "llm-eval: global macro-F1 {:.4} over {} seeds",
        report.global.macro_f1_mean,
        report.per_seed.len()
    );

    ws.write_manifest(
        "llm-eval",
        &ws.config.llm.run.seeds.clone(),
        &[artifacts::FILTERED.to_owned(), artifacts::LABELS.to_owned()],
        &[
            artifacts::LLM_REPORT_JSON.to_owned(),
            artifacts::LLM_REPORT_CSV.to_owned(),
        ],
    )
}

pub fn stage_report(ws: &Workspace) -> Result<(), PipelineError> {
    let summary = crate::report::render_summary(ws)?;
    let mut w = create(&ws.path(artifacts::SUMMARY))?;
    w.write_all(summary.as_bytes())?;
    w.flush()?;
    log::info!("report: wrote {}", artifacts::SUMMARY);
    ws.write_manifest("report", &[], &[], &[artifacts::SUMMARY.to_owned()])
}
