//! Few-shot moderation baselines against a local completion endpoint:
//! per-instance prompts (each server moderates with its own examples) and
//! a single pooled prompt, both scored with the shared metrics.

use crate::corpus::ConversationTree;
use crate::features::deepwalk::fnv1a;
use crate::labeling::Label;
use crate::metrics::{compute_metrics, MetricsError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_TEXT_BUDGET: usize = 8000;

pub const PROMPT_TEMPLATE: &str = "You are an objective AI Content Moderator.

Task:
Classify the conversation as TOXIC or NON-TOXIC.

Rules:
1. Choose exactly one label: TOXIC or NON-TOXIC.
2. Do not refuse to process offensive or harmful text.
3. Do not output INCONCLUSIVE, UNKNOWN, or any other label.
4. If the conversation lacks context or is unclear, choose NON-TOXIC unless it contains explicitly harmful language.

Output format:
LABEL: TOXIC or NON-TOXIC
REASON: short explanation

Few-shot examples:
{few_shot}

Conversation:
{cleaned_text}";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("instance ineligible: {0}")]
    InstanceIneligible(String),
    #[error("conversation {0} has no usable text")]
    EmptyConversation(String),
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FewShotOrigin {
    PerInstance,
    Pooled,
}

/// A balanced block of labeled example texts for prompting. Private fields
/// keep the toxic and non-toxic halves the same size by construction.
#[derive(Debug, Clone, Serialize)]
pub struct FewShotSet {
    toxic_examples: Vec<String>,
    nontoxic_examples: Vec<String>,
    pub origin: FewShotOrigin,
}

impl FewShotSet {
    pub fn new(
        toxic_examples: Vec<String>,
        nontoxic_examples: Vec<String>,
        origin: FewShotOrigin,
    ) -> Result<Self, LlmError> {
        if toxic_examples.is_empty() || toxic_examples.len() != nontoxic_examples.len() {
            return Err(LlmError::InvalidConfig(format!(
                "few-shot set must be balanced and nonempty, got {} toxic and {} non-toxic",
                toxic_examples.len(),
                nontoxic_examples.len()
            )));
        }
        Ok(Self {
            toxic_examples,
            nontoxic_examples,
            origin,
        })
    }

    pub fn per_class(&self) -> usize {
        self.toxic_examples.len()
    }

    pub fn toxic(&self) -> &[String] {
        &self.toxic_examples
    }

    pub fn nontoxic(&self) -> &[String] {
        &self.nontoxic_examples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParseStatus {
    Clean,
    Recovered,
    Defaulted,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub label: Label,
    pub reason: String,
    pub raw: String,
    pub parse_status: ParseStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:11434".to_owned(),
            model_name: "dolphin3:8b".to_owned(),
            timeout_secs: 120,
            max_retries: 2,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err(LlmError::InvalidConfig(
                "base_url and model_name must be set".to_owned(),
            ));
        }
        if self.timeout_secs == 0 {
            return Err(LlmError::InvalidConfig(
                "timeout must be positive".to_owned(),
            ));
        }
        Ok(())
    }
}

fn strip_html(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_tag = false;
    for c in raw.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => {
                in_tag = false;
                out.push(' ');
            }
            _ if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
}

/// Render a conversation as `author: text` lines in temporal order, tags
/// stripped and whitespace collapsed, truncated to `budget` characters.
pub fn clean_text(tree: &ConversationTree, budget: usize) -> Result<String, LlmError> {
    let mut lines = Vec::new();
    for toot in &tree.toots {
        let stripped = strip_html(toot.text.as_deref().unwrap_or(""));
        let collapsed = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
        if !collapsed.is_empty() {
            lines.push(format!("{}: {}", toot.author_id, collapsed));
        }
    }
    if lines.is_empty() {
        return Err(LlmError::EmptyConversation(tree.conversation_id.clone()));
    }
    let text = lines.join("\n");
    if text.chars().count() <= budget {
        return Ok(text);
    }
    let cut: String = text.chars().take(budget).collect();
    Ok(format!("{cut} [truncated]"))
}

/// Substitute the template placeholders. Pure: identical inputs yield
/// identical bytes. Examples render as the text followed by its LABEL
/// line, all toxic first, then all non-toxic.
pub fn build_prompt(fewshot: &FewShotSet, conversation_text: &str) -> String {
    let mut blocks = Vec::with_capacity(fewshot.per_class() * 2);
    for text in fewshot.toxic() {
        blocks.push(format!("{text}\nLABEL: TOXIC"));
    }
    for text in fewshot.nontoxic() {
        blocks.push(format!("{text}\nLABEL: NON-TOXIC"));
    }
    let (head, rest) = PROMPT_TEMPLATE
        .split_once("{few_shot}")
        .expect("template has few_shot slot");
    let (mid, tail) = rest
        .split_once("{cleaned_text}")
        .expect("template has cleaned_text slot");
    format!(
        "{head}{}{mid}{conversation_text}{tail}",
        blocks.join("\n\n")
    )
}

/// Parse a completion into a label. The non-toxic token is checked first
/// because "NON-TOXIC" contains "TOXIC" as a substring. Clean means the
/// label line carried nothing else.
pub fn parse_completion(raw: &str) -> Option<(Label, ParseStatus)> {
    let line = raw.lines().find(|l| l.to_uppercase().contains("LABEL:"))?;
    let upper = line.to_uppercase();
    let tail = &upper[upper.find("LABEL:").expect("matched above") + "LABEL:".len()..];
    let label = if tail.contains("NON-TOXIC") || tail.contains("NONTOXIC") {
        Label::NonToxic
    } else if tail.contains("TOXIC") {
        Label::Toxic
    } else {
        return None;
    };
    let trimmed = upper.trim();
    let clean =
        trimmed == "LABEL: TOXIC" || trimmed == "LABEL: NON-TOXIC" || trimmed == "LABEL: NONTOXIC";
    Some((
        label,
        if clean
            && raw
                .lines()
                .filter(|l| l.to_uppercase().contains("LABEL:"))
                .count()
                == 1
        {
            ParseStatus::Clean
        } else {
            ParseStatus::Recovered
        },
    ))
}

fn extract_reason(raw: &str) -> String {
    raw.lines()
        .find_map(|l| {
            let upper = l.to_uppercase();
            upper
                .find("REASON:")
                .map(|pos| l[pos + "REASON:".len()..].trim().to_owned())
        })
        .unwrap_or_default()
}

pub trait CompletionClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// Minimal JSON generate-endpoint client (the contract most local
/// inference servers speak): POST {model, prompt, stream: false}, read the
/// completion from the "response" field.
pub struct HttpEndpoint {
    agent: ureq::Agent,
    config: EndpointConfig,
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        Ok(Self { agent, config })
    }

    /// Cheap reachability probe before a long evaluation run.
    pub fn preflight(&self) -> Result<(), LlmError> {
        self.agent
            .get(&self.config.base_url)
            .call()
            .map_err(|e| LlmError::EndpointUnavailable(e.to_string()))?;
        Ok(())
    }
}

impl CompletionClient for HttpEndpoint {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let url = format!(
            "{}/api/generate",
            self.config.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": self.config.model_name,
            "prompt": prompt,
            "stream": false,
        });
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                log::debug!("transport retry {attempt} after: {last_error}");
            }
            match self.agent.post(&url).send_json(body.clone()) {
                Ok(response) => {
                    let parsed: serde_json::Value = response
                        .into_json()
                        .map_err(|e| LlmError::EndpointUnavailable(e.to_string()))?;
                    let completion = parsed
                        .get("response")
                        .and_then(|v| v.as_str())
                        .unwrap_or_default();
                    return Ok(completion.to_owned());
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(LlmError::EndpointUnavailable(last_error))
    }
}

/// Ask for a verdict, retrying an unparseable completion once. A second
/// failure defaults to NonToxic, mirroring the template's own fallback
/// rule, and is visible as `ParseStatus::Defaulted`.
pub fn classify(client: &dyn CompletionClient, prompt: &str) -> Result<Verdict, LlmError> {
    let mut last_raw = String::new();
    for _ in 0..2 {
        let raw = client.complete(prompt)?;
        if let Some((label, parse_status)) = parse_completion(&raw) {
            let reason = extract_reason(&raw);
            return Ok(Verdict {
                label,
                reason,
                raw,
                parse_status,
            });
        }
        last_raw = raw;
    }
    Ok(Verdict {
        label: Label::NonToxic,
        reason: String::new(),
        raw: last_raw,
        parse_status: ParseStatus::Defaulted,
    })
}

/// One labeled, cleaned conversation ready for prompting.
#[derive(Debug, Clone, Serialize)]
pub struct LabeledText {
    pub conversation_id: String,
    pub instance: String,
    pub label: Label,
    pub text: String,
}

/// Everything one instance can contribute to the baseline.
#[derive(Debug, Clone)]
pub struct InstancePool {
    pub instance: String,
    pub items: Vec<LabeledText>,
}

/// Draw a balanced few-shot set and a balanced test set, disjoint by
/// construction, deterministic per seed.
pub fn split_fewshot_and_test(
    items: &[LabeledText],
    origin: FewShotOrigin,
    fewshot_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(FewShotSet, Vec<LabeledText>), LlmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut toxic: Vec<&LabeledText> = items.iter().filter(|i| i.label == Label::Toxic).collect();
    let mut nontoxic: Vec<&LabeledText> = items
        .iter()
        .filter(|i| i.label == Label::NonToxic)
        .collect();
    let need = fewshot_per_class + test_per_class;
    if toxic.len() < need || nontoxic.len() < need {
        return Err(LlmError::InstanceIneligible(format!(
            "need {need} per class, have {} toxic and {} non-toxic",
            toxic.len(),
            nontoxic.len()
        )));
    }
    toxic.shuffle(&mut rng);
    nontoxic.shuffle(&mut rng);
    let fewshot = FewShotSet::new(
        toxic[..fewshot_per_class]
            .iter()
            .map(|i| i.text.clone())
            .collect(),
        nontoxic[..fewshot_per_class]
            .iter()
            .map(|i| i.text.clone())
            .collect(),
        origin,
    )?;
    let test: Vec<LabeledText> = toxic[fewshot_per_class..need]
        .iter()
        .chain(&nontoxic[fewshot_per_class..need])
        .map(|i| (*i).clone())
        .collect();
    Ok((fewshot, test))
}

/// Balanced class-stratified sample, deterministic per seed.
pub fn sample_balanced(
    items: &[LabeledText],
    per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledText>, LlmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut toxic: Vec<&LabeledText> = items.iter().filter(|i| i.label == Label::Toxic).collect();
    let mut nontoxic: Vec<&LabeledText> = items
        .iter()
        .filter(|i| i.label == Label::NonToxic)
        .collect();
    if toxic.len() < per_class || nontoxic.len() < per_class {
        return Err(LlmError::InstanceIneligible(format!(
            "need {per_class} per class, have {} toxic and {} non-toxic",
            toxic.len(),
            nontoxic.len()
        )));
    }
    toxic.shuffle(&mut rng);
    nontoxic.shuffle(&mut rng);
    Ok(toxic[..per_class]
        .iter()
        .chain(&nontoxic[..per_class])
        .map(|i| (*i).clone())
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmRunConfig {
    pub fewshot_per_class: usize,
    pub local_test_per_class: usize,
    pub global_test_per_class: usize,
    pub instances_per_seed: usize,
    pub seeds: Vec<u64>,
    pub text_budget: usize,
}

impl Default for LlmRunConfig {
    fn default() -> Self {
        Self {
            fewshot_per_class: 10,
            local_test_per_class: 10,
            global_test_per_class: 500,
            instances_per_seed: 10,
            seeds: vec![1, 42, 999],
            text_budget: DEFAULT_TEXT_BUDGET,
        }
    }
}

/// Scores for one setup in one seed; instance-averaged for the local
/// setups, single-run for the global one.
#[derive(Debug, Clone, Serialize)]
pub struct SetupMetrics {
    pub macro_f1: f64,
    pub toxic_precision: f64,
    pub toxic_recall: f64,
    pub classified: usize,
    pub defaulted: usize,
    pub recovered: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub instances: Vec<String>,
    pub local_local: SetupMetrics,
    pub local_global: SetupMetrics,
    pub global: SetupMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SetupAggregate {
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub toxic_precision_mean: f64,
    pub toxic_recall_mean: f64,
    pub defaulted_total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineReport {
    pub per_seed: Vec<SeedReport>,
    pub local_local: SetupAggregate,
    pub local_global: SetupAggregate,
    pub global: SetupAggregate,
}

struct BatchOutcome {
    pairs: Vec<(Label, Label)>,
    defaulted: usize,
    recovered: usize,
}

/// Classify every item with the given prompt examples. Endpoint failures
/// on individual conversations become Defaulted verdicts so a long run
/// never aborts halfway.
fn classify_batch(
    client: &dyn CompletionClient,
    fewshot: &FewShotSet,
    items: &[LabeledText],
) -> BatchOutcome {
    let mut pairs = Vec::with_capacity(items.len());
    let mut defaulted = 0;
    let mut recovered = 0;
    for item in items {
        let prompt = build_prompt(fewshot, &item.text);
        let verdict = match classify(client, &prompt) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("conversation {} defaulted: {e}", item.conversation_id);
                Verdict {
                    label: Label::NonToxic,
                    reason: String::new(),
                    raw: String::new(),
                    parse_status: ParseStatus::Defaulted,
                }
            }
        };
        match verdict.parse_status {
            ParseStatus::Defaulted => defaulted += 1,
            ParseStatus::Recovered => recovered += 1,
            ParseStatus::Clean => {}
        }
        pairs.push((item.label, verdict.label));
    }
    BatchOutcome {
        pairs,
        defaulted,
        recovered,
    }
}

fn metrics_of(outcome: &BatchOutcome) -> Result<SetupMetrics, LlmError> {
    let m = compute_metrics(&outcome.pairs)?;
    Ok(SetupMetrics {
        macro_f1: m.macro_f1,
        toxic_precision: m.toxic_precision,
        toxic_recall: m.toxic_recall,
        classified: outcome.pairs.len(),
        defaulted: outcome.defaulted,
        recovered: outcome.recovered,
    })
}

fn average_setups(per_instance: &[SetupMetrics]) -> SetupMetrics {
    let n = per_instance.len().max(1) as f64;
    SetupMetrics {
        macro_f1: per_instance.iter().map(|m| m.macro_f1).sum::<f64>() / n,
        toxic_precision: per_instance.iter().map(|m| m.toxic_precision).sum::<f64>() / n,
        toxic_recall: per_instance.iter().map(|m| m.toxic_recall).sum::<f64>() / n,
        classified: per_instance.iter().map(|m| m.classified).sum(),
        defaulted: per_instance.iter().map(|m| m.defaulted).sum(),
        recovered: per_instance.iter().map(|m| m.recovered).sum(),
    }
}

/// One seed of the full baseline: pick eligible instances, build local
/// prompts and test sets, reserve the pooled prompt and the shared global
/// test set, then score all three setups.
pub fn run_seed(
    pools: &[InstancePool],
    client: &dyn CompletionClient,
    config: &LlmRunConfig,
    seed: u64,
) -> Result<SeedReport, LlmError> {
    let eligible: Vec<&InstancePool> = pools
        .iter()
        .filter(|p| {
            split_fewshot_and_test(
                &p.items,
                FewShotOrigin::PerInstance,
                config.fewshot_per_class,
                config.local_test_per_class,
                seed,
            )
            .is_ok()
        })
        .collect();
    if eligible.is_empty() {
        return Err(LlmError::InstanceIneligible(
            "no instance can fill a balanced prompt and test set".to_owned(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11bd);
    let mut picked: Vec<&InstancePool> = eligible.clone();
    picked.shuffle(&mut rng);
    if picked.len() > config.instances_per_seed {
        picked.truncate(config.instances_per_seed);
    } else if eligible.len() < config.instances_per_seed {
        log::warn!(
            "only {} eligible instances for {} requested",
            eligible.len(),
            config.instances_per_seed
        );
    }
    picked.sort_by(|a, b| a.instance.cmp(&b.instance));

    let mut local_splits = Vec::with_capacity(picked.len());
    let mut fewshot_ids: BTreeSet<String> = BTreeSet::new();
    for pool in &picked {
        let split_seed = seed ^ fnv1a(&pool.instance);
        let (fewshot, test) = split_fewshot_and_test(
            &pool.items,
            FewShotOrigin::PerInstance,
            config.fewshot_per_class,
            config.local_test_per_class,
            split_seed,
        )?;
        // few-shot texts are tracked by conversation id for the global
        // disjointness guarantee
        for item in &pool.items {
            if fewshot.toxic().contains(&item.text) || fewshot.nontoxic().contains(&item.text) {
                fewshot_ids.insert(item.conversation_id.clone());
            }
        }
        assert!(
            test.iter()
                .all(|t| !fewshot_ids.contains(&t.conversation_id)),
            "few-shot leaked into a local test set"
        );
        local_splits.push((pool.instance.clone(), fewshot, test));
    }

    let pooled_items: Vec<LabeledText> = pools
        .iter()
        .flat_map(|p| p.items.iter())
        .filter(|i| !fewshot_ids.contains(&i.conversation_id))
        .cloned()
        .collect();
    let (pooled_fewshot, _) = split_fewshot_and_test(
        &pooled_items,
        FewShotOrigin::Pooled,
        config.fewshot_per_class,
        0,
        seed ^ 0x6aa7,
    )
    .map_err(|_| {
        LlmError::InstanceIneligible("pooled corpus cannot fill the shared prompt".to_owned())
    })?;
    let mut pooled_fewshot_ids: BTreeSet<String> = BTreeSet::new();
    for item in &pooled_items {
        if pooled_fewshot.toxic().contains(&item.text)
            || pooled_fewshot.nontoxic().contains(&item.text)
        {
            pooled_fewshot_ids.insert(item.conversation_id.clone());
        }
    }
    let global_candidates: Vec<LabeledText> = pooled_items
        .into_iter()
        .filter(|i| !pooled_fewshot_ids.contains(&i.conversation_id))
        .collect();
    let global_test = sample_balanced(
        &global_candidates,
        config.global_test_per_class,
        seed ^ 0x3e57,
    )
    .map_err(|_| {
        LlmError::InstanceIneligible("pooled corpus cannot fill the global test set".to_owned())
    })?;

    let mut local_local = Vec::new();
    let mut local_global = Vec::new();
    for (_, fewshot, test) in &local_splits {
        local_local.push(metrics_of(&classify_batch(client, fewshot, test))?);
        local_global.push(metrics_of(&classify_batch(client, fewshot, &global_test))?);
    }
    let global = metrics_of(&classify_batch(client, &pooled_fewshot, &global_test))?;

    Ok(SeedReport {
        seed,
        instances: picked.iter().map(|p| p.instance.clone()).collect(),
        local_local: average_setups(&local_local),
        local_global: average_setups(&local_global),
        global,
    })
}

fn aggregate(
    reports: &[SeedReport],
    pick: impl Fn(&SeedReport) -> &SetupMetrics,
) -> SetupAggregate {
    let values: Vec<f64> = reports.iter().map(|r| pick(r).macro_f1).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    SetupAggregate {
        macro_f1_mean: mean,
        macro_f1_std: std,
        toxic_precision_mean: reports.iter().map(|r| pick(r).toxic_precision).sum::<f64>() / n,
        toxic_recall_mean: reports.iter().map(|r| pick(r).toxic_recall).sum::<f64>() / n,
        defaulted_total: reports.iter().map(|r| pick(r).defaulted).sum(),
    }
}

/// All seeds, mean and std per setup.
pub fn run_baseline(
    pools: &[InstancePool],
    client: &dyn CompletionClient,
    config: &LlmRunConfig,
) -> Result<BaselineReport, LlmError> {
    if config.seeds.is_empty() {
        return Err(LlmError::InvalidConfig(
            "at least one seed required".to_owned(),
        ));
    }
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        per_seed.push(run_seed(pools, client, config, seed)?);
    }
    Ok(BaselineReport {
        local_local: aggregate(&per_seed, |r| &r.local_local),
        local_global: aggregate(&per_seed, |r| &r.local_global),
        global: aggregate(&per_seed, |r| &r.global),
        per_seed,
    })
}

pub fn write_baseline_csv<W: std::io::Write>(
    report: &BaselineReport,
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "setup",
        "macro_f1_mean",
        "macro_f1_std",
        "toxic_precision_mean",
        "toxic_recall_mean",
        "defaulted_total",
    ])?;
    for (name, agg) in [
        ("local_local", &report.local_local),
        ("local_global", &report.local_global),
        ("global", &report.global),
    ] {
        w.write_record([
            name.to_owned(),
            agg.macro_f1_mean.to_string(),
            agg.macro_f1_std.to_string(),
            agg.toxic_precision_mean.to_string(),
            agg.toxic_recall_mean.to_string(),
            agg.defaulted_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
