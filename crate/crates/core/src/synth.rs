//! Synthetic multi-instance corpus generator with planted toxicity, so
//! every pipeline stage can be exercised end to end at desk scale with a
//! known ground truth.

use crate::corpus::Toot;
use crate::features::deepwalk::fnv1a;
use crate::labeling::Label;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_instances: usize,
    /// Size of each instance's shared user pool; heavy-tailed activity.
    pub users_per_instance: usize,
    /// Mean conversations per instance; actual sizes follow a heavy-tailed
    /// rank profile so large and small servers both appear.
    pub conversations_per_instance: usize,
    /// Poisson mean of the reply count per conversation.
    pub mean_replies: f64,
    /// Probability a reply attaches to the root rather than a uniformly
    /// random earlier toot; shapes the branching factor.
    pub root_attach_bias: f64,
    pub toxic_prevalence: f64,
    /// Separation between toxic and non-toxic score distributions, 0
    /// (identical) to 1 (far apart).
    pub signal_strength: f64,
    /// Probability a participant comes from the shared pool instead of
    /// being a single-use account; drives conversation-graph density.
    pub shared_user_rate: f64,
    /// Rank exponent of the instance-size profile.
    pub size_skew: f64,
    pub sentiment_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 20,
            users_per_instance: 100,
            conversations_per_instance: 200,
            mean_replies: 8.0,
            root_attach_bias: 0.5,
            toxic_prevalence: 0.3,
            signal_strength: 0.9,
            shared_user_rate: 0.3,
            size_skew: 0.8,
            sentiment_noise: 0.15,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::ConfigError(m));
        if self.n_instances == 0
            || self.users_per_instance == 0
            || self.conversations_per_instance == 0
        {
            return err("instance, user, and conversation counts must be >= 1".into());
        }
        if !(self.toxic_prevalence > 0.0 && self.toxic_prevalence < 1.0) {
            return err(format!(
                "toxic_prevalence {} out of (0,1)",
                self.toxic_prevalence
            ));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("shared_user_rate", self.shared_user_rate),
            ("root_attach_bias", self.root_attach_bias),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} {v} out of [0,1]"));
            }
        }
        if !(self.mean_replies >= 0.0 && self.mean_replies.is_finite()) {
            return err(format!(
                "mean_replies {} must be finite and >= 0",
                self.mean_replies
            ));
        }
        if !(self.size_skew >= 0.0 && self.size_skew.is_finite()) {
            return err(format!(
                "size_skew {} must be finite and >= 0",
                self.size_skew
            ));
        }
        if !(self.sentiment_noise >= 0.0 && self.sentiment_noise.is_finite()) {
            return err(format!(
                "sentiment_noise {} must be finite and >= 0",
                self.sentiment_noise
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlantedLabel {
    pub conversation_id: String,
    pub instance: String,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub toots: Vec<Toot>,
    pub planted: Vec<PlantedLabel>,
}

/// Conversation counts per instance: rank-skewed shares of the exact total
/// `n_instances * conversations_per_instance`, largest first, each >= 1.
pub fn instance_sizes(config: &SynthConfig) -> Vec<usize> {
    let n = config.n_instances;
    let total = n * config.conversations_per_instance;
    let weights: Vec<f64> = (0..n)
        .map(|i| ((i + 1) as f64).powf(-config.size_skew))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut sizes: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).max(1)).collect();
    let mut assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n * total) {
        if assigned >= total {
            break;
        }
        sizes[i] += 1;
        assigned += 1;
    }
    while assigned > total {
        // the >= 1 floor can overshoot on tiny totals; trim the largest
        let i = (0..n).max_by_key(|&i| sizes[i]).expect("nonempty");
        if sizes[i] == 1 {
            break;
        }
        sizes[i] -= 1;
        assigned -= 1;
    }
    sizes
}

struct InstanceGen<'a> {
    config: &'a SynthConfig,
    name: String,
    rng: ChaCha8Rng,
    pool: Vec<String>,
    activity: WeightedIndex<f64>,
    solo_counter: usize,
    toxic_dist: Beta<f64>,
    clean_dist: Beta<f64>,
    noise: Normal<f64>,
}

impl<'a> InstanceGen<'a> {
    fn new(config: &'a SynthConfig, index: usize) -> Self {
        let name = format!("inst{index:03}");
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(&name).rotate_left(17));
        let pool: Vec<String> = (0..config.users_per_instance)
            .map(|k| format!("{name}_u{k:04}"))
            .collect();
        let weights: Vec<f64> = (0..pool.len())
            .map(|k| ((k + 1) as f64).powf(-1.0))
            .collect();
        let s = config.signal_strength;
        Self {
            config,
            rng,
            pool,
            activity: WeightedIndex::new(&weights).expect("positive weights"),
            solo_counter: 0,
            toxic_dist: Beta::new(2.0 + 8.0 * s, 2.0).expect("valid shape"),
            clean_dist: Beta::new(2.0, 2.0 + 8.0 * s).expect("valid shape"),
            noise: Normal::new(0.0, config.sentiment_noise).expect("non-negative sigma"),
            name,
        }
    }

    fn author(&mut self) -> String {
        if self.rng.gen::<f64>() < self.config.shared_user_rate {
            self.pool[self.activity.sample(&mut self.rng)].clone()
        } else {
            self.solo_counter += 1;
            format!("{}_solo{:06}", self.name, self.solo_counter)
        }
    }

    fn scores(&mut self, toxic: bool) -> (f64, f64) {
        let toxicity = if toxic {
            self.toxic_dist.sample(&mut self.rng)
        } else {
            self.clean_dist.sample(&mut self.rng)
        };
        let sentiment = (-2.0 * toxicity + 1.0 + self.noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
        (toxicity, sentiment)
    }

    fn conversation(&mut self, conv_index: usize, toxic: bool, out: &mut Vec<Toot>) {
        let conv_id = format!("{}_c{conv_index:05}", self.name);
        let marker = if toxic {
            "[planted:toxic]"
        } else {
            "[planted:clean]"
        };
        let n_replies = if self.config.mean_replies > 0.0 {
            Poisson::new(self.config.mean_replies)
                .expect("positive mean")
                .sample(&mut self.rng) as usize
        } else {
            0
        };
        let base = conv_index as i64 * 100_000;
        let mut at = base;
        let mut ids: Vec<String> = Vec::with_capacity(n_replies + 1);
        for j in 0..=n_replies {
            let toot_id = format!("{conv_id}_t{j:03}");
            let parent_id = if j == 0 {
                None
            } else if self.rng.gen::<f64>() < self.config.root_attach_bias {
                Some(ids[0].clone())
            } else {
                let k = self.rng.gen_range(0..j);
                Some(ids[k].clone())
            };
            if j > 0 {
                at += i64::from(self.rng.gen_range(30u32..=600));
            }
            let (toxicity, sentiment) = self.scores(toxic);
            out.push(Toot {
                toot_id: toot_id.clone(),
                conversation_id: conv_id.clone(),
                parent_id,
                author_id: self.author(),
                instance: self.name.clone(),
                created_at: at,
                lang: "en".to_owned(),
                toxicity,
                sentiment,
                text: Some(format!("{marker} post {j} of {conv_id}")),
            });
            ids.push(toot_id);
        }
    }
}

/// Generate the full corpus. Deterministic per seed: instances draw from
/// independent streams keyed by instance name, so the output is stable
/// under any instance evaluation order.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let sizes = instance_sizes(config);
    let mut toots = Vec::new();
    let mut planted = Vec::new();
    for (index, &size) in sizes.iter().enumerate() {
        let mut gen = InstanceGen::new(config, index);
        let n_toxic = (config.toxic_prevalence * size as f64).round() as usize;
        let mut toxic_flags = vec![false; size];
        for f in toxic_flags.iter_mut().take(n_toxic) {
            *f = true;
        }
        toxic_flags.shuffle(&mut gen.rng);
        for (conv_index, &toxic) in toxic_flags.iter().enumerate() {
            gen.conversation(conv_index, toxic, &mut toots);
            planted.push(PlantedLabel {
                conversation_id: format!("{}_c{conv_index:05}", gen.name),
                instance: gen.name.clone(),
                label: if toxic { Label::Toxic } else { Label::NonToxic },
            });
        }
    }
    Ok(SynthCorpus { toots, planted })
}

/// One toot record per line, in the ingestion format.
pub fn write_corpus_jsonl<W: Write>(toots: &[Toot], mut writer: W) -> Result<(), SynthError> {
    for toot in toots {
        serde_json::to_writer(&mut writer, toot).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_planted_csv<W: Write>(planted: &[PlantedLabel], writer: W) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["conversation_id", "instance", "label"])?;
    for p in planted {
        w.write_record([&p.conversation_id, &p.instance, &p.label.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convgraph::build_graph;
    use crate::corpus::{parse_corpus, InstanceCorpus};
    use crate::labeling::{label_corpus, ModerationPolicy};
    use std::collections::BTreeMap;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_instances: 3,
            users_per_instance: 30,
            conversations_per_instance: 40,
            seed,
            ..Default::default()
        }
    }

    fn parse(corpus: &SynthCorpus) -> Vec<InstanceCorpus> {
        let mut jsonl = Vec::new();
        write_corpus_jsonl(&corpus.toots, &mut jsonl).unwrap();
        let outcome = parse_corpus(jsonl.as_slice()).unwrap();
        assert!(
            outcome.rejected_lines.is_empty(),
            "{:?}",
            outcome.rejected_lines
        );
        assert!(
            outcome.dropped_conversations.is_empty(),
            "{:?}",
            outcome.dropped_conversations
        );
        outcome.corpora
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        write_corpus_jsonl(&a.toots, &mut ja).unwrap();
        write_corpus_jsonl(&b.toots, &mut jb).unwrap();
        assert_eq!(ja, jb);
        let c = generate(&small(8)).unwrap();
        assert_ne!(a.toots.len(), 0);
        let mut jc = Vec::new();
        write_corpus_jsonl(&c.toots, &mut jc).unwrap();
        assert_ne!(ja, jc);
    }

    #[test]
    fn emitted_corpus_parses_cleanly() {
        let corpus = generate(&small(3)).unwrap();
        let instances = parse(&corpus);
        assert_eq!(instances.len(), 3);
        let total: usize = instances.iter().map(|i| i.trees.len()).sum();
        assert_eq!(total, corpus.planted.len());
    }

    #[test]
    fn instance_sizes_hit_exact_total_and_skew() {
        let config = SynthConfig::default();
        let sizes = instance_sizes(&config);
        assert_eq!(sizes.len(), 20);
        assert_eq!(sizes.iter().sum::<usize>(), 20 * 200);
        for w in sizes.windows(2) {
            assert!(w[0] >= w[1], "sizes not non-increasing: {sizes:?}");
        }
        assert!(sizes[0] > 2 * sizes[19]);
        // the largest instances can serve a 200-conversation train side
        assert!((sizes[0] as f64 * 0.8).round() as usize >= 200);
    }

    #[test]
    fn tiny_totals_still_give_every_instance_work() {
        let config = SynthConfig {
            n_instances: 5,
            conversations_per_instance: 1,
            ..Default::default()
        };
        let sizes = instance_sizes(&config);
        assert_eq!(sizes.iter().sum::<usize>(), 5);
        assert!(sizes.iter().all(|&s| s >= 1));
    }

    #[test]
    fn planted_prevalence_is_exact_up_to_rounding() {
        let config = SynthConfig {
            n_instances: 4,
            conversations_per_instance: 300,
            ..Default::default()
        };
        let corpus = generate(&config).unwrap();
        assert!(corpus.planted.len() >= 1000);
        let toxic = corpus
            .planted
            .iter()
            .filter(|p| p.label == Label::Toxic)
            .count();
        let realized = toxic as f64 / corpus.planted.len() as f64;
        assert!(
            (realized - config.toxic_prevalence).abs() <= 0.02,
            "realized prevalence {realized}"
        );
    }

    #[test]
    fn zero_shared_rate_means_no_graph_edges() {
        let config = SynthConfig {
            shared_user_rate: 0.0,
            ..small(5)
        };
        let corpus = generate(&config).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for toot in &corpus.toots {
            assert!(
                seen.insert(toot.author_id.clone()),
                "author reused: {}",
                toot.author_id
            );
        }
        for instance in parse(&corpus) {
            let graph = build_graph(&instance);
            assert_eq!(graph.edge_count(), 0);
        }
    }

    #[test]
    fn shared_rate_raises_density() {
        let density_at = |rate: f64| -> f64 {
            let mut acc = 0.0;
            for seed in 1..=5 {
                let config = SynthConfig {
                    shared_user_rate: rate,
                    ..small(seed)
                };
                let corpus = generate(&config).unwrap();
                for instance in parse(&corpus) {
                    let g = build_graph(&instance);
                    let n = g.node_count() as f64;
                    acc += g.edge_count() as f64 / (n * (n - 1.0) / 2.0);
                }
            }
            acc / 15.0
        };
        let low = density_at(0.1);
        let high = density_at(0.6);
        assert!(low < high, "density {low} at 0.1 vs {high} at 0.6");
    }

    #[test]
    fn strong_signal_recovers_planted_labels() {
        let config = SynthConfig {
            n_instances: 2,
            conversations_per_instance: 200,
            signal_strength: 1.0,
            toxic_prevalence: 0.5,
            ..Default::default()
        };
        let corpus = generate(&config).unwrap();
        let truth: BTreeMap<&str, Label> = corpus
            .planted
            .iter()
            .map(|p| (p.conversation_id.as_str(), p.label))
            .collect();
        let policy = ModerationPolicy::default();
        let mut hits = 0usize;
        let mut total = 0usize;
        for instance in parse(&corpus) {
            for labeled in label_corpus(&instance, &policy) {
                total += 1;
                if truth[labeled.conversation_id.as_str()] == labeled.label {
                    hits += 1;
                }
            }
        }
        let accuracy = hits as f64 / total as f64;
        assert!(
            accuracy >= 0.95,
            "planted-label recovery accuracy {accuracy}"
        );
    }

    #[test]
    fn zero_signal_mixes_the_classes() {
        let config = SynthConfig {
            n_instances: 2,
            conversations_per_instance: 600,
            signal_strength: 0.0,
            toxic_prevalence: 0.5,
            ..Default::default()
        };
        let corpus = generate(&config).unwrap();
        let truth: BTreeMap<&str, Label> = corpus
            .planted
            .iter()
            .map(|p| (p.conversation_id.as_str(), p.label))
            .collect();
        let mut toxic_scores = Vec::new();
        let mut clean_scores = Vec::new();
        for toot in &corpus.toots {
            match truth[toot.conversation_id.as_str()] {
                Label::Toxic => toxic_scores.push(toot.toxicity),
                Label::NonToxic => clean_scores.push(toot.toxicity),
            }
        }
        assert!(toxic_scores.len() > 3000 && clean_scores.len() > 3000);
        toxic_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        clean_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // two-sample KS statistic over a fine grid of thresholds
        let mut ks = 0.0f64;
        for t in 0..=1000 {
            let x = t as f64 / 1000.0;
            let fa = toxic_scores.partition_point(|&v| v <= x) as f64 / toxic_scores.len() as f64;
            let fb = clean_scores.partition_point(|&v| v <= x) as f64 / clean_scores.len() as f64;
            ks = ks.max((fa - fb).abs());
        }
        assert!(ks < 0.05, "KS statistic {ks} too large for zero signal");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for config in [
            SynthConfig {
                n_instances: 0,
                ..Default::default()
            },
            SynthConfig {
                toxic_prevalence: 0.0,
                ..Default::default()
            },
            SynthConfig {
                toxic_prevalence: 1.0,
                ..Default::default()
            },
            SynthConfig {
                signal_strength: 1.5,
                ..Default::default()
            },
            SynthConfig {
                shared_user_rate: -0.1,
                ..Default::default()
            },
            SynthConfig {
                mean_replies: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate(&config), Err(SynthError::ConfigError(_))));
        }
    }

    #[test]
    fn planted_csv_has_header_and_rows() {
        let corpus = generate(&small(2)).unwrap();
        let mut out = Vec::new();
        write_planted_csv(&corpus.planted, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "conversation_id,instance,label");
        assert_eq!(text.lines().count(), corpus.planted.len() + 1);
    }
}
