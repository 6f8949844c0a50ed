//! Acceptance gate. Each check covers one release criterion and prints a
//! single numbered verdict line, so a full run reads as a checklist. Oracles
//! are written straight from the documented formulas, independently of the
//! library code they vet.
//!
//! The federated checks (08-10) share one synthetic corpus and a per-seed
//! client cache; the first test that needs a seed pays the preparation cost.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use fedtox::config::{FeaturesConfig, GridConfig, IngestConfig, RunConfig};
use fedtox::convgraph::{
    build_graph, extract_backbone, nc_scores, retention, ConversationGraph, Edge,
};
use fedtox::corpus::{
    build_tree, filter_corpus, parse_corpus, ConversationTree, InstanceCorpus, Toot,
};
use fedtox::features::deepwalk::{deepwalk_embed, DeepWalkParams};
use fedtox::features::{
    assemble, assemble_corpus, sentiment_features, FeatureOptions, FeatureToggles,
};
use fedtox::federation::{
    eligible_clients, fedavg_aggregate, run_federation, ClientData, EvaluationReport,
    FederationConfig,
};
use fedtox::graphsage::{loss_and_grads, new_model, train_local, Optimizer, TrainConfig};
use fedtox::labeling::{label_conversation, label_corpus, Label, ModerationPolicy};
use fedtox::llm::{
    build_prompt, clean_text, run_baseline, EndpointConfig, FewShotOrigin, FewShotSet,
    HttpEndpoint, InstancePool, LabeledText, LlmRunConfig,
};
use fedtox::pipeline::{stage_grid, stage_synth, Workspace};
use fedtox::synth::{generate, write_corpus_jsonl, SynthConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Prints the verdict line when dropped: PASS only if the test body ran to
/// completion, FAIL when it unwinds early.
struct Verdict {
    number: u8,
    name: &'static str,
    passed: bool,
}

impl Verdict {
    fn begin(number: u8, name: &'static str) -> Self {
        Self {
            number,
            name,
            passed: false,
        }
    }

    fn pass(mut self) {
        self.passed = true;
    }
}

impl Drop for Verdict {
    fn drop(&mut self) {
        println!(
            "acceptance {:02} ({}): {}",
            self.number,
            self.name,
            if self.passed { "PASS" } else { "FAIL" }
        );
    }
}

fn toot(
    id: &str,
    conv: &str,
    parent: Option<&str>,
    author: &str,
    at: i64,
    toxicity: f64,
    sentiment: f64,
) -> Toot {
    Toot {
        toot_id: id.to_owned(),
        conversation_id: conv.to_owned(),
        parent_id: parent.map(str::to_owned),
        author_id: author.to_owned(),
        instance: "acceptance".to_owned(),
        created_at: at,
        lang: "en".to_owned(),
        toxicity,
        sentiment,
        text: None,
    }
}

/// Round-trip a toot list through the JSONL writer and parser, the same
/// path the ingest stage takes.
fn to_corpora(toots: &[Toot]) -> Vec<InstanceCorpus> {
    let mut buf = Vec::new();
    write_corpus_jsonl(toots, &mut buf).expect("serialize corpus");
    let outcome = parse_corpus(buf.as_slice()).expect("parse corpus");
    assert!(
        outcome.rejected_lines.is_empty() && outcome.dropped_conversations.is_empty(),
        "round-trip must be lossless"
    );
    outcome.corpora
}

// ---------------------------------------------------------------------------
// 01: conversation labeling against a direct transcription of the rule.

/// The moderation rule, written down flat: the root is over the threshold,
/// or the toxic replies are both numerous enough and a large enough share.
fn formula_label(tree: &ConversationTree, policy: &ModerationPolicy) -> Label {
    let root = tree.root();
    if root.toxicity > policy.thr_root {
        return Label::Toxic;
    }
    let reply_scores: Vec<f64> = tree
        .toots
        .iter()
        .filter(|t| t.toot_id != root.toot_id)
        .map(|t| t.toxicity)
        .collect();
    if reply_scores.is_empty() {
        return Label::NonToxic;
    }
    let toxic = reply_scores
        .iter()
        .filter(|&&s| s > policy.thr_root)
        .count();
    let share = toxic as f64 / reply_scores.len() as f64;
    if toxic as u32 > policy.thr_number && share > policy.thr_fraction {
        Label::Toxic
    } else {
        Label::NonToxic
    }
}

/// Toxicity scores mix a continuum with a small grid so that score ==
/// threshold collisions actually occur and strictness is exercised.
fn random_score(rng: &mut ChaCha8Rng) -> f64 {
    const GRID: [f64; 7] = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0];
    if rng.gen_bool(0.5) {
        GRID[rng.gen_range(0..GRID.len())]
    } else {
        rng.gen_range(0.0..1.0)
    }
}

fn random_tree(rng: &mut ChaCha8Rng, key: usize) -> ConversationTree {
    let conv = format!("c{key}");
    let size = rng.gen_range(1..=20usize);
    let mut toots = Vec::with_capacity(size);
    let mut ids: Vec<String> = Vec::with_capacity(size);
    for k in 0..size {
        let id = format!("c{key}_t{k}");
        let parent = if k == 0 {
            None
        } else {
            Some(ids[rng.gen_range(0..ids.len())].clone())
        };
        toots.push(toot(
            &id,
            &conv,
            parent.as_deref(),
            &format!("u{}", rng.gen_range(0..40)),
            1000 + k as i64,
            random_score(rng),
            rng.gen_range(-1.0..1.0),
        ));
        ids.push(id);
    }
    build_tree(toots).expect("valid random tree")
}

#[test]
fn criterion_01_labeling_matches_a_direct_formula_oracle() {
    let verdict = Verdict::begin(1, "labeling formula oracle");
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC01);

    let trees: Vec<ConversationTree> = (0..10_000).map(|k| random_tree(&mut rng, k)).collect();
    let policies: Vec<ModerationPolicy> = (0..100)
        .map(|_| ModerationPolicy {
            thr_root: random_score(&mut rng),
            thr_number: rng.gen_range(0..5),
            thr_fraction: if rng.gen_bool(0.4) {
                [0.0, 0.25, 1.0 / 3.0, 0.5][rng.gen_range(0..4)]
            } else {
                rng.gen_range(0.0..1.0)
            },
        })
        .collect();

    let mut mismatches = 0usize;
    for tree in &trees {
        for policy in &policies {
            if label_conversation(tree, policy).label != formula_label(tree, policy) {
                mismatches += 1;
            }
        }
    }
    assert_eq!(mismatches, 0, "{mismatches} of 1,000,000 labels disagree");
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(10),
        "overran budget: {elapsed:?}"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 02: conversation graph against brute-force participant intersection.

fn brute_force_edges(corpus: &InstanceCorpus) -> BTreeMap<(String, String), u32> {
    let mut edges = BTreeMap::new();
    for i in 0..corpus.trees.len() {
        for j in (i + 1)..corpus.trees.len() {
            let a: BTreeSet<&str> = corpus.trees[i]
                .toots
                .iter()
                .map(|t| t.author_id.as_str())
                .collect();
            let b: BTreeSet<&str> = corpus.trees[j]
                .toots
                .iter()
                .map(|t| t.author_id.as_str())
                .collect();
            let shared = a.intersection(&b).count() as u32;
            if shared > 0 {
                let mut pair = [
                    corpus.trees[i].conversation_id.clone(),
                    corpus.trees[j].conversation_id.clone(),
                ];
                pair.sort();
                let [x, y] = pair;
                edges.insert((x, y), shared);
            }
        }
    }
    edges
}

fn graph_edge_map(graph: &ConversationGraph) -> BTreeMap<(String, String), u32> {
    graph
        .edges
        .iter()
        .map(|e| {
            let mut pair = [graph.nodes[e.u].clone(), graph.nodes[e.v].clone()];
            pair.sort();
            let [x, y] = pair;
            ((x, y), e.weight)
        })
        .collect()
}

#[test]
fn criterion_02_graph_construction_matches_brute_force() {
    let verdict = Verdict::begin(2, "conversation graph vs brute force");
    let started = Instant::now();

    // Two conversations sharing exactly the users blue, green, and red.
    let left = build_tree(vec![
        toot("l0", "left", None, "blue", 0, 0.1, 0.0),
        toot("l1", "left", Some("l0"), "green", 1, 0.1, 0.0),
        toot("l2", "left", Some("l0"), "red", 2, 0.1, 0.0),
        toot("l3", "left", Some("l1"), "amber", 3, 0.1, 0.0),
    ])
    .expect("left tree");
    let right = build_tree(vec![
        toot("r0", "right", None, "blue", 0, 0.1, 0.0),
        toot("r1", "right", Some("r0"), "green", 1, 0.1, 0.0),
        toot("r2", "right", Some("r0"), "red", 2, 0.1, 0.0),
        toot("r3", "right", Some("r2"), "cyan", 3, 0.1, 0.0),
    ])
    .expect("right tree");
    let fixture = InstanceCorpus::from_trees("acceptance".to_owned(), vec![left, right]);
    let graph = build_graph(&fixture);
    assert_eq!(graph.edges.len(), 1, "exactly one edge expected");
    assert_eq!(graph.edges[0].weight, 3, "three shared users");
    assert_eq!(graph_edge_map(&graph), brute_force_edges(&fixture));

    let mut rng = ChaCha8Rng::seed_from_u64(0xAC02);
    for case in 0..40 {
        let n_trees = rng.gen_range(1..=50usize);
        let pool = rng.gen_range(5..30usize);
        let trees: Vec<ConversationTree> = (0..n_trees)
            .map(|k| {
                let conv = format!("c{case}_{k}");
                let size = rng.gen_range(1..=6usize);
                let mut toots = Vec::with_capacity(size);
                let mut ids: Vec<String> = Vec::new();
                for t in 0..size {
                    let id = format!("{conv}_t{t}");
                    let parent = if t == 0 {
                        None
                    } else {
                        Some(ids[rng.gen_range(0..ids.len())].clone())
                    };
                    toots.push(toot(
                        &id,
                        &conv,
                        parent.as_deref(),
                        &format!("u{}", rng.gen_range(0..pool)),
                        t as i64,
                        0.0,
                        0.0,
                    ));
                    ids.push(id);
                }
                build_tree(toots).expect("random tree")
            })
            .collect();
        let corpus = InstanceCorpus::from_trees("acceptance".to_owned(), trees);
        let graph = build_graph(&corpus);
        assert_eq!(
            graph_edge_map(&graph),
            brute_force_edges(&corpus),
            "case {case} diverges from brute force"
        );
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "overran budget: {elapsed:?}"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 03: noise-corrected scores against a straight-line formula evaluation.

/// Step-by-step evaluation of the published backbone formulas, kept
/// deliberately flat so it can be checked against the write-up line by line.
fn straight_line_nc(graph: &ConversationGraph) -> Vec<(f64, f64)> {
    let mut strength = vec![0.0f64; graph.nodes.len()];
    let mut total = 0.0f64;
    for e in &graph.edges {
        strength[e.u] += e.weight as f64;
        strength[e.v] += e.weight as f64;
        total += 2.0 * e.weight as f64;
    }
    graph
        .edges
        .iter()
        .map(|e| {
            let nij = e.weight as f64;
            let ni = strength[e.u];
            let nj = strength[e.v];
            let ndd = total;

            let kappa = ndd / (ni * nj);
            let score = (kappa * nij - 1.0) / (kappa * nij + 1.0);

            let p_bar = ni * nj / (ndd * ndd);
            let v = ni * nj * (ndd - ni) * (ndd - nj) / (ndd.powi(4) * (ndd - 1.0));
            assert!(v > 0.0, "fixture generator must avoid degenerate graphs");
            let alpha0 = (p_bar * p_bar / v) * (1.0 - p_bar) - p_bar;
            let beta0 = (p_bar / v) * (1.0 - p_bar * p_bar) - (1.0 - p_bar);
            let alpha = alpha0 + nij;
            let beta = beta0 + ndd - nij;
            let p_hat = alpha / (alpha + beta);
            let var_weight = p_hat * (1.0 - p_hat) * ndd;

            let d = 1.0 / (ni * nj) - ndd * (ni + nj) / (ni * nj).powi(2);
            let var_score =
                var_weight * (2.0 * (kappa + nij * d) / (kappa * nij + 1.0).powi(2)).powi(2);
            assert!(var_score >= 0.0, "negative variance in oracle");
            (score, var_score.sqrt())
        })
        .collect()
}

fn random_weighted_graph(rng: &mut ChaCha8Rng) -> ConversationGraph {
    let n = rng.gen_range(3..=12usize);
    let nodes: Vec<String> = (0..n).map(|k| format!("n{k}")).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen_bool(0.45) {
                edges.push(Edge {
                    u,
                    v,
                    weight: rng.gen_range(1..=9u32),
                });
            }
        }
    }
    if edges.is_empty() {
        edges.push(Edge {
            u: 0,
            v: 1,
            weight: rng.gen_range(1..=9u32),
        });
    }
    ConversationGraph::new("acceptance".to_owned(), nodes, edges)
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn criterion_03_nc_scores_match_straight_line_formulas() {
    let verdict = Verdict::begin(3, "backbone score oracle and monotone delta");
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC03);

    for case in 0..1000 {
        let graph = random_weighted_graph(&mut rng);
        let scores = nc_scores(&graph).expect("non-degenerate by construction");
        let oracle = straight_line_nc(&graph);
        assert_eq!(scores.len(), oracle.len());
        for (got, (score, sdev)) in scores.iter().zip(&oracle) {
            assert!(
                relative_error(got.nc_score, *score) <= 1e-10,
                "case {case}: score {} vs oracle {score}",
                got.nc_score
            );
            assert!(
                relative_error(got.sdev, *sdev) <= 1e-10,
                "case {case}: sdev {} vs oracle {sdev}",
                got.sdev
            );
        }

        // Stricter thresholds only ever remove edges, never add them.
        let mut previous: Option<BTreeSet<(usize, usize)>> = None;
        for delta in [0.0, 0.25, 0.5, 1.0, 1.64, 2.5, 5.0] {
            let backbone = extract_backbone(&graph, &scores, delta);
            assert_eq!(backbone.nodes, graph.nodes, "node set must be preserved");
            let kept: BTreeSet<(usize, usize)> =
                backbone.edges.iter().map(|e| (e.u, e.v)).collect();
            if let Some(prev) = &previous {
                assert!(
                    prev.is_superset(&kept),
                    "case {case}: delta {delta} grew the backbone"
                );
            }
            previous = Some(kept);
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "overran budget: {elapsed:?}"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 04: backboning thins dense graphs without shedding their nodes.

#[test]
fn criterion_04_backboning_cuts_density_not_nodes() {
    let verdict = Verdict::begin(4, "backbone density and retention shape");
    // Default generator settings already sit at the dense shared_user_rate
    // of 0.3; five seeds guard against a lucky draw.
    for seed in 1..=5u64 {
        let synthetic = generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .expect("generate corpus");
        let corpora = to_corpora(&synthetic.toots);

        let mut node_rets = Vec::new();
        let mut edge_rets = Vec::new();
        let mut dens_before = Vec::new();
        let mut dens_after = Vec::new();
        for corpus in &corpora {
            let graph = build_graph(corpus);
            let Ok(scores) = nc_scores(&graph) else {
                continue;
            };
            let backbone = extract_backbone(&graph, &scores, 1.64);
            let stats = retention(&graph, &backbone);
            node_rets.push(stats.node_retention);
            edge_rets.push(stats.edge_retention);
            dens_before.push(stats.density_before);
            dens_after.push(stats.density_after);
        }
        assert!(
            node_rets.len() >= 10,
            "seed {seed}: too few scorable instances ({})",
            node_rets.len()
        );
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&dens_after) < mean(&dens_before),
            "seed {seed}: density did not drop ({} vs {})",
            mean(&dens_after),
            mean(&dens_before)
        );
        assert!(
            mean(&node_rets) >= mean(&edge_rets),
            "seed {seed}: nodes were shed faster than edges ({} vs {})",
            mean(&node_rets),
            mean(&edge_rets)
        );
    }
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 05: the feature vector contract.

#[test]
fn criterion_05_feature_vectors_are_401_dimensional() {
    let verdict = Verdict::begin(5, "feature layout and sentiment fixture");

    // Sentiment fixture plus a handful of overlapping conversations.
    let fixture = build_tree(vec![
        toot("s0", "senti", None, "ann", 0, 0.1, 0.5),
        toot("s1", "senti", Some("s0"), "ben", 60, 0.1, -0.5),
        toot("s2", "senti", Some("s1"), "ann", 120, 0.1, 0.0),
    ])
    .expect("sentiment fixture");
    let mut trees = vec![fixture];
    for k in 0..5 {
        let conv = format!("extra{k}");
        trees.push(
            build_tree(vec![
                toot(&format!("{conv}_a"), &conv, None, "ann", 0, 0.2, 0.1),
                toot(
                    &format!("{conv}_b"),
                    &conv,
                    Some(&format!("{conv}_a")),
                    &format!("guest{k}"),
                    30,
                    0.3,
                    -0.1,
                ),
                toot(
                    &format!("{conv}_c"),
                    &conv,
                    Some(&format!("{conv}_a")),
                    "ben",
                    90,
                    0.4,
                    0.2,
                ),
            ])
            .expect("filler tree"),
        );
    }
    let corpus = InstanceCorpus::from_trees("acceptance".to_owned(), trees);
    let params = DeepWalkParams {
        n_walks: 2,
        walk_len: 8,
        window: 2,
        negatives: 2,
        epochs: 1,
        ..DeepWalkParams::default()
    };
    let embeddings = deepwalk_embed(&corpus, &params, 11);

    let all_on = FeatureOptions::default();
    assert_eq!(all_on.toggles.dimension(params.dims), 401);
    let rows = assemble_corpus(&corpus, &embeddings, &all_on).expect("assemble");
    for row in &rows {
        assert_eq!(
            row.values.len(),
            401,
            "{} is not 401-dim",
            row.conversation_id
        );
    }

    // Ablation arithmetic: dropping a block shrinks the vector by exactly
    // that block's width.
    let tree = corpus.tree("senti").expect("fixture present");
    let no_embeddings = FeatureOptions {
        toggles: FeatureToggles {
            embeddings: false,
            ..FeatureToggles::default()
        },
        ..FeatureOptions::default()
    };
    assert_eq!(no_embeddings.toggles.dimension(params.dims), 17);
    assert_eq!(
        assemble(tree, &corpus, &embeddings, &no_embeddings)
            .expect("assemble")
            .values
            .len(),
        17
    );
    let no_sentiment = FeatureOptions {
        toggles: FeatureToggles {
            sentiment: false,
            ..FeatureToggles::default()
        },
        ..FeatureOptions::default()
    };
    assert_eq!(no_sentiment.toggles.dimension(params.dims), 396);
    assert_eq!(
        assemble(tree, &corpus, &embeddings, &no_sentiment)
            .expect("assemble")
            .values
            .len(),
        396
    );

    // Sentiment block: scores [0.5, -0.5, 0.0] in temporal order.
    let senti = sentiment_features(tree);
    assert!((senti[3] - 1.0).abs() <= 1e-9, "drift {} != 1.0", senti[3]);
    assert!(
        (senti[4] - (1.0f64 / 6.0).sqrt()).abs() <= 1e-9,
        "volatility {} != sqrt(1/6)",
        senti[4]
    );
    // And it occupies the documented slice of the full vector.
    let full = assemble(tree, &corpus, &embeddings, &all_on).expect("assemble");
    assert_eq!(&full.values[393..398], &senti);

    verdict.pass();
}

// ---------------------------------------------------------------------------
// 06: analytic gradients against central finite differences.

fn grid_graph(n: usize, edges: &[(usize, usize)]) -> ConversationGraph {
    let nodes: Vec<String> = (0..n).map(|k| format!("n{k}")).collect();
    let edges: Vec<Edge> = edges
        .iter()
        .map(|&(u, v)| Edge { u, v, weight: 1 })
        .collect();
    ConversationGraph::new("acceptance".to_owned(), nodes, edges)
}

#[test]
fn criterion_06_analytic_gradients_match_finite_differences() {
    let verdict = Verdict::begin(6, "gradient check vs finite differences");
    let started = Instant::now();

    type GradCase = (u64, usize, Vec<(usize, usize)>, Vec<usize>);
    let cases: [GradCase; 3] = [
        (
            11,
            5,
            vec![(0, 1), (1, 2), (2, 3), (3, 4)],
            vec![0, 1, 2, 3, 4],
        ),
        (
            23,
            6,
            vec![(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (1, 4)],
            vec![0, 2, 3, 5],
        ),
        // one isolated node, partial mask
        (
            47,
            7,
            vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5)],
            vec![0, 1, 3, 4, 6],
        ),
    ];

    for (seed, n, edges, mask) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = grid_graph(n, &edges);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.2..1.3)).collect())
            .collect();
        let labels: BTreeMap<usize, Label> = (0..n)
            .map(|v| {
                (
                    v,
                    if rng.gen_bool(0.5) {
                        Label::Toxic
                    } else {
                        Label::NonToxic
                    },
                )
            })
            .collect();
        let mask: BTreeSet<usize> = mask.into_iter().collect();
        let model = new_model(7, 5, 2, seed);

        let (_, grads) = loss_and_grads(&graph, &features, &labels, &mask, &model).expect("grads");
        let analytic = grads.to_flat();
        let params = model.to_flat();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let lp = loss_and_grads(
                &graph,
                &features,
                &labels,
                &mask,
                &model.with_flat(&plus).expect("same shape"),
            )
            .expect("loss+")
            .0;
            let lm = loss_and_grads(
                &graph,
                &features,
                &labels,
                &mask,
                &model.with_flat(&minus).expect("same shape"),
            )
            .expect("loss-")
            .0;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "seed {seed} param {i}: analytic {} vs numeric {numeric} (rel {rel:.2e})",
                analytic[i]
            );
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "overran budget: {elapsed:?}"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 07: averaging degeneracies that must hold exactly.

#[test]
fn criterion_07_fedavg_degenerate_cases_are_exact() {
    let verdict = Verdict::begin(7, "single-client and identical-client exactness");
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC07);

    let n = 10;
    let graph = grid_graph(
        n,
        &[
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (4, 5),
            (5, 6),
            (6, 7),
            (7, 8),
            (8, 9),
            (2, 7),
        ],
    );
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels: BTreeMap<usize, Label> = (0..n)
        .map(|v| {
            (
                v,
                if v % 2 == 0 {
                    Label::Toxic
                } else {
                    Label::NonToxic
                },
            )
        })
        .collect();
    let data = ClientData {
        client_id: "solo".to_owned(),
        graph,
        features,
        labels,
    };
    let (clients, rejected) = eligible_clients(vec![data], 0.8, None, 3);
    assert_eq!(clients.len(), 1);
    assert!(rejected.is_empty());

    let config = FederationConfig {
        rounds: 4,
        clients_per_round: 1,
        train_cap: None,
        split_ratio: 0.8,
        train_config: TrainConfig {
            local_epochs: 2,
            learning_rate: 0.01,
            batch_size: 1,
            optimizer: Optimizer::Adam,
        },
        model_hidden: 6,
        model_depth: 2,
        seed: 21,
        eval_every: None,
    };
    let run = run_federation(&clients, &config).expect("single-client run");

    // Re-derive the same run as plain repeated local training. Averaging a
    // single update must be the identity, bit for bit.
    let solo = &clients[0];
    let input_dim = solo.normalized_features()[0].len();
    let mut model = new_model(
        input_dim,
        config.model_hidden,
        config.model_depth,
        config.seed,
    );
    for _ in 0..config.rounds {
        model = train_local(
            &solo.graph,
            solo.normalized_features(),
            &solo.labels,
            &solo.train_mask,
            &model,
            &config.train_config,
            0,
        )
        .expect("local step");
    }
    let federated = run.final_model.to_flat();
    let direct = model.to_flat();
    assert_eq!(federated.len(), direct.len());
    for (i, (a, b)) in federated.iter().zip(&direct).enumerate() {
        assert_eq!(a.to_bits(), b.to_bits(), "param {i}: {a} vs {b}");
    }

    // Two clients holding the same model average back to that model.
    let doubled = fedavg_aggregate(
        &[run.final_model.clone(), run.final_model.clone()],
        &[7.0, 7.0],
    )
    .expect("aggregate");
    for (i, (a, b)) in doubled.to_flat().iter().zip(&federated).enumerate() {
        assert_eq!(a.to_bits(), b.to_bits(), "identical-client param {i} moved");
    }

    // Weighted mean on constant models: (2 * 1 + 6 * 3) / 4 = 5 exactly.
    let base = new_model(4, 3, 1, 2);
    let twos = base
        .with_flat(&vec![2.0; base.param_count()])
        .expect("shape");
    let sixes = base
        .with_flat(&vec![6.0; base.param_count()])
        .expect("shape");
    let mixed = fedavg_aggregate(&[twos, sixes], &[1.0, 3.0]).expect("aggregate");
    assert!(mixed.to_flat().iter().all(|&p| p == 5.0));

    verdict.pass();
}

// ---------------------------------------------------------------------------
// Shared fixture for the federated criteria: one synthetic corpus, clients
// cached per embedding seed.

fn flagship_corpora() -> &'static [InstanceCorpus] {
    static CORPORA: OnceLock<Vec<InstanceCorpus>> = OnceLock::new();
    CORPORA.get_or_init(|| {
        let config = SynthConfig {
            signal_strength: 0.9,
            toxic_prevalence: 0.3,
            seed: 1,
            ..SynthConfig::default()
        };
        let synthetic = generate(&config).expect("generate corpus");
        let langs: BTreeSet<String> = ["en".to_owned()].into();
        to_corpora(&synthetic.toots)
            .iter()
            .map(|c| filter_corpus(c, &langs, 5))
            .filter(|c| !c.trees.is_empty())
            .collect()
    })
}

fn flagship_clients(seed: u64) -> Arc<Vec<ClientData>> {
    static CACHE: OnceLock<Mutex<BTreeMap<u64, Arc<Vec<ClientData>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut map = cache.lock().expect("client cache");
    if let Some(hit) = map.get(&seed) {
        return hit.clone();
    }

    let policy = ModerationPolicy::default();
    // Trimmed walk budget: enough to embed, small enough to keep the whole
    // suite inside its runtime budget.
    let walks = DeepWalkParams {
        n_walks: 3,
        walk_len: 12,
        window: 2,
        negatives: 2,
        epochs: 2,
        ..DeepWalkParams::default()
    };
    let options = FeatureOptions::default();

    let mut clients = Vec::new();
    for corpus in flagship_corpora() {
        let labels = label_corpus(corpus, &policy);
        let graph = build_graph(corpus);
        let backbone = match nc_scores(&graph) {
            Ok(scores) => extract_backbone(&graph, &scores, 1.64),
            Err(_) => graph.clone(),
        };
        let embeddings = deepwalk_embed(corpus, &walks, seed);
        let rows = assemble_corpus(corpus, &embeddings, &options).expect("assemble");
        let row_by_id: BTreeMap<&str, &Vec<f64>> = rows
            .iter()
            .map(|r| (r.conversation_id.as_str(), &r.values))
            .collect();
        let label_by_id: BTreeMap<&str, Label> = labels
            .iter()
            .map(|l| (l.conversation_id.as_str(), l.label))
            .collect();
        let features: Vec<Vec<f64>> = backbone
            .nodes
            .iter()
            .map(|id| row_by_id[id.as_str()].clone())
            .collect();
        let node_labels: BTreeMap<usize, Label> = backbone
            .nodes
            .iter()
            .enumerate()
            .map(|(i, id)| (i, label_by_id[id.as_str()]))
            .collect();
        clients.push(ClientData {
            client_id: backbone.instance.clone(),
            graph: backbone,
            features,
            labels: node_labels,
        });
    }
    let arc = Arc::new(clients);
    map.insert(seed, arc.clone());
    arc
}

fn flagship_run(seed: u64, clients_per_round: usize, train_cap: Option<usize>) -> EvaluationReport {
    let data = flagship_clients(seed);
    let (clients, _) = eligible_clients(data.as_ref().clone(), 0.8, train_cap, seed);
    assert!(
        !clients.is_empty(),
        "no eligible clients at cap {train_cap:?}"
    );
    let config = FederationConfig {
        rounds: 50,
        clients_per_round,
        train_cap,
        split_ratio: 0.8,
        train_config: TrainConfig {
            local_epochs: 2,
            learning_rate: 0.01,
            batch_size: 1,
            optimizer: Optimizer::Adam,
        },
        model_hidden: 64,
        model_depth: 2,
        seed,
        eval_every: None,
    };
    run_federation(&clients, &config)
        .expect("federated run")
        .final_report
}

// ---------------------------------------------------------------------------
// 08: the pipeline recovers the planted signal end to end.

#[test]
fn criterion_08_federated_training_recovers_planted_signal() {
    let verdict = Verdict::begin(8, "end-to-end signal recovery");
    for seed in [1u64, 2, 3] {
        let started = Instant::now();
        let report = flagship_run(seed, 10, None);
        let elapsed = started.elapsed();
        assert!(
            report.macro_f1 >= 0.85,
            "seed {seed}: pooled macro-F1 {:.4} below 0.85",
            report.macro_f1
        );
        assert!(
            elapsed < Duration::from_secs(600),
            "seed {seed} overran budget: {elapsed:?}"
        );
    }
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 09: participation has little effect on the final score.

#[test]
fn criterion_09_participation_has_little_effect() {
    let verdict = Verdict::begin(9, "5 vs 20 clients per round");
    let mean_at = |clients_per_round: usize| {
        [1u64, 2, 3]
            .iter()
            .map(|&s| flagship_run(s, clients_per_round, None).macro_f1)
            .sum::<f64>()
            / 3.0
    };
    let low = mean_at(5);
    let high = mean_at(20);
    assert!(
        (low - high).abs() <= 0.05,
        "participation gap too large: {low:.4} vs {high:.4}"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 10: the train cap throttles eligibility, not quality.

#[test]
fn criterion_10_train_cap_shrinks_eligibility_not_quality() {
    let verdict = Verdict::begin(10, "train-cap eligibility and quality");

    let data = flagship_clients(1);
    let mut previous = usize::MAX;
    for cap in [1usize, 10, 20, 50, 100, 200, 500] {
        let eligible = eligible_clients(data.as_ref().clone(), 0.8, Some(cap), 1)
            .0
            .len();
        assert!(
            eligible <= previous,
            "cap {cap} grew eligibility: {eligible} > {previous}"
        );
        previous = eligible;
    }

    let mean_at = |cap: usize| {
        [1u64, 2, 3]
            .iter()
            .map(|&s| flagship_run(s, 10, Some(cap)).macro_f1)
            .sum::<f64>()
            / 3.0
    };
    let large = mean_at(200);
    let small = mean_at(20);
    assert!(
        large >= small,
        "cap 200 scored below cap 20: {large:.4} vs {small:.4}"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 11: grid cells re-run byte-identically.

#[test]
fn criterion_11_grid_cells_rerun_byte_identically() {
    let verdict = Verdict::begin(11, "grid reruns are byte-identical");
    let dir = tempfile::tempdir().expect("tempdir");
    let config = RunConfig {
        out_dir: dir.path().join("run"),
        synth: SynthConfig {
            n_instances: 4,
            users_per_instance: 25,
            conversations_per_instance: 40,
            toxic_prevalence: 0.4,
            signal_strength: 1.0,
            shared_user_rate: 0.5,
            seed: 7,
            ..SynthConfig::default()
        },
        ingest: IngestConfig {
            min_posts: 2,
            ..IngestConfig::default()
        },
        features: FeaturesConfig {
            deepwalk: DeepWalkParams {
                dims: 8,
                n_walks: 2,
                walk_len: 8,
                window: 2,
                negatives: 2,
                epochs: 1,
                ..DeepWalkParams::default()
            },
            options: FeatureOptions::default(),
            seed: 3,
        },
        federation: FederationConfig {
            rounds: 3,
            clients_per_round: 2,
            model_hidden: 8,
            model_depth: 1,
            train_config: TrainConfig {
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            ..FederationConfig::default()
        },
        grid: GridConfig { seeds: vec![1] },
        ..RunConfig::default()
    };
    let ws = Workspace::new(config).expect("workspace");
    stage_synth(&ws).expect("synth");

    stage_grid(&ws, "toxicity-threshold", Some("0.5,0.7")).expect("first grid run");
    let csv = ws.path("grid_toxicity-threshold.csv");
    let json = ws.path("grid_toxicity-threshold.json");
    let csv_first = std::fs::read(&csv).expect("grid csv");
    let json_first = std::fs::read(&json).expect("grid json");

    stage_grid(&ws, "toxicity-threshold", Some("0.5,0.7")).expect("second grid run");
    assert_eq!(
        csv_first,
        std::fs::read(&csv).expect("grid csv"),
        "csv drifted"
    );
    assert_eq!(
        json_first,
        std::fs::read(&json).expect("grid json"),
        "json drifted"
    );
    verdict.pass();
}

// ---------------------------------------------------------------------------
// 12: the few-shot harness against mock endpoints.

/// Single-threaded generate endpoint: one request per connection, POST
/// bodies answered through the handler, GET used as a liveness probe.
mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    pub struct MockEndpoint {
        pub base_url: String,
        stop: Arc<AtomicBool>,
        handle: Option<std::thread::JoinHandle<()>>,
    }

    impl MockEndpoint {
        pub fn start<F>(handler: F) -> Self
        where
            F: Fn(&str) -> String + Send + 'static,
        {
            let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock endpoint");
            let addr = listener.local_addr().expect("local addr");
            let stop = Arc::new(AtomicBool::new(false));
            let stop2 = stop.clone();
            let handle = std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(mut stream) = stream else { continue };
                    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
                    let mut line = String::new();
                    if reader.read_line(&mut line).is_err() || line.is_empty() {
                        continue;
                    }
                    let is_get = line.starts_with("GET");
                    let mut content_length = 0usize;
                    loop {
                        let mut header = String::new();
                        if reader.read_line(&mut header).is_err() || header.trim().is_empty() {
                            break;
                        }
                        if let Some(v) = header.to_lowercase().strip_prefix("content-length:") {
                            content_length = v.trim().parse().unwrap_or(0);
                        }
                    }
                    let mut body = vec![0u8; content_length];
                    if content_length > 0 {
                        reader.read_exact(&mut body).expect("request body");
                    }
                    let reply = if is_get {
                        "ok".to_owned()
                    } else {
                        let parsed: serde_json::Value =
                            serde_json::from_slice(&body).unwrap_or_default();
                        let prompt = parsed
                            .get("prompt")
                            .and_then(|v| v.as_str())
                            .unwrap_or_default();
                        serde_json::json!({ "response": handler(prompt) }).to_string()
                    };
                    let response = format!(
                        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                        reply.len(),
                        reply
                    );
                    let _ = stream.write_all(response.as_bytes());
                }
            });
            Self {
                base_url: format!("http://{addr}"),
                stop,
                handle: Some(handle),
            }
        }
    }

    impl Drop for MockEndpoint {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::SeqCst);
            let _ = std::net::TcpStream::connect(self.base_url.trim_start_matches("http://"));
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }
}

fn mock_client(server: &mock::MockEndpoint) -> HttpEndpoint {
    HttpEndpoint::new(EndpointConfig {
        base_url: server.base_url.clone(),
        model_name: "mock".to_owned(),
        timeout_secs: 5,
        max_retries: 1,
    })
    .expect("endpoint config")
}

/// Pools whose texts carry their ground truth as an inline marker, so a
/// mock can answer as a perfect oracle.
fn marked_pool(instance: &str, per_class: usize) -> InstancePool {
    let mut items = Vec::new();
    for k in 0..per_class {
        items.push(LabeledText {
            conversation_id: format!("{instance}_t{k}"),
            instance: instance.to_owned(),
            label: Label::Toxic,
            text: format!("u{k}: [planted:toxic] awful thread {k} on {instance}"),
        });
        items.push(LabeledText {
            conversation_id: format!("{instance}_n{k}"),
            instance: instance.to_owned(),
            label: Label::NonToxic,
            text: format!("u{k}: [planted:clean] pleasant thread {k} on {instance}"),
        });
    }
    InstancePool {
        instance: instance.to_owned(),
        items,
    }
}

fn oracle_reply(prompt: &str) -> String {
    let conversation = prompt
        .rsplit_once("Conversation:\n")
        .map(|(_, tail)| tail)
        .unwrap_or(prompt);
    if conversation.contains("[planted:toxic]") {
        "LABEL: TOXIC\nREASON: marker".to_owned()
    } else {
        "LABEL: NON-TOXIC\nREASON: marker".to_owned()
    }
}

#[test]
fn criterion_12_llm_harness_against_mock_endpoints() {
    let verdict = Verdict::begin(12, "few-shot harness against mock endpoints");

    // The rendered prompt is pinned byte-for-byte against a golden file.
    let toxic: Vec<String> = (0..10)
        .map(|k| format!("alice: example toxic text {k}"))
        .collect();
    let friendly: Vec<String> = (0..10)
        .map(|k| format!("bob: example friendly text {k}"))
        .collect();
    let fewshot = FewShotSet::new(toxic, friendly, FewShotOrigin::Pooled).expect("balanced");
    let mut t0 = toot("g0", "golden", None, "carol", 0, 0.9, -0.5);
    t0.text = Some("<p>you are all clowns &amp; frauds</p>".to_owned());
    let mut t1 = toot("g1", "golden", Some("g0"), "dave", 60, 0.1, 0.3);
    t1.text = Some("no worries, <b>stay calm</b>".to_owned());
    let mut t2 = toot("g2", "golden", Some("g1"), "erin", 120, 0.1, 0.2);
    t2.text = Some("agreed &amp; moving on".to_owned());
    let tree = build_tree(vec![t0, t1, t2]).expect("golden tree");
    let prompt = build_prompt(&fewshot, &clean_text(&tree, 8000).expect("clean"));
    assert_eq!(
        prompt.as_bytes(),
        &include_bytes!("data/prompt_golden.txt")[..],
        "rendered prompt deviates from the golden file"
    );

    let run_config = LlmRunConfig {
        fewshot_per_class: 2,
        local_test_per_class: 3,
        global_test_per_class: 5,
        instances_per_seed: 2,
        seeds: vec![1, 42],
        text_budget: 1000,
    };

    // A perfect oracle scores 1.0 in every setup.
    {
        let server = mock::MockEndpoint::start(oracle_reply);
        let client = mock_client(&server);
        let pools = vec![
            marked_pool("a", 12),
            marked_pool("b", 12),
            marked_pool("c", 12),
        ];
        let report = run_baseline(&pools, &client, &run_config).expect("oracle run");
        assert_eq!(report.local_local.macro_f1_mean, 1.0);
        assert_eq!(report.local_global.macro_f1_mean, 1.0);
        assert_eq!(report.global.macro_f1_mean, 1.0);
        assert_eq!(report.global.defaulted_total, 0);
    }

    // Predicting NON-TOXIC for everything on balanced test sets gives a
    // macro-F1 of exactly (0 + 2/3) / 2 = 1/3.
    {
        let server = mock::MockEndpoint::start(|_| "LABEL: NON-TOXIC\nREASON: always".to_owned());
        let client = mock_client(&server);
        let pools = vec![marked_pool("a", 12), marked_pool("b", 12)];
        let config = LlmRunConfig {
            seeds: vec![1],
            ..run_config.clone()
        };
        let report = run_baseline(&pools, &client, &config).expect("constant run");
        assert_eq!(report.global.macro_f1_mean, 1.0 / 3.0);
        assert_eq!(report.local_local.macro_f1_mean, 1.0 / 3.0);
    }

    // Refusals on exactly the toxic test items: the defaulted counts must
    // equal the per-setup toxic test sizes, nothing more.
    {
        let server = mock::MockEndpoint::start(|prompt| {
            let conversation = prompt
                .rsplit_once("Conversation:\n")
                .map(|x| x.1)
                .unwrap_or("");
            if conversation.contains("[planted:toxic]") {
                "I cannot assist with that.".to_owned()
            } else {
                oracle_reply(prompt)
            }
        });
        let client = mock_client(&server);
        let pools = vec![marked_pool("a", 12)];
        let config = LlmRunConfig {
            instances_per_seed: 1,
            seeds: vec![1],
            ..run_config
        };
        let report = run_baseline(&pools, &client, &config).expect("refusal run");
        assert_eq!(report.per_seed[0].local_local.defaulted, 3);
        assert_eq!(report.per_seed[0].global.defaulted, 5);
    }

    verdict.pass();
}
