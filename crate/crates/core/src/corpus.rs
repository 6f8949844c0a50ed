//! Corpus ingestion: line-delimited toot records parsed into per-instance
//! collections of validated conversation trees.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use thiserror::Error;

/// A single post or reply with its precomputed toxicity/sentiment scores.
///
/// Scores are ingested, never computed here: the record format carries them
/// so the pipeline stays model-agnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Toot {
    pub toot_id: String,
    pub conversation_id: String,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub author_id: String,
    pub instance: String,
    pub created_at: i64,
    pub lang: String,
    pub toxicity: f64,
    pub sentiment: f64,
    #[serde(default)]
    pub text: Option<String>,
}

/// A rooted reply tree; the unit of classification.
///
/// Toots are stored sorted by `(created_at, toot_id)` so that "last toot"
/// and consecutive-pair features are well defined.
#[derive(Debug, Clone)]
pub struct ConversationTree {
    pub conversation_id: String,
    pub instance: String,
    root_index: usize,
    pub toots: Vec<Toot>,
    /// child toot_id -> parent toot_id
    pub parent_index: BTreeMap<String, String>,
    pub participants: BTreeSet<String>,
}

impl ConversationTree {
    pub fn root(&self) -> &Toot {
        &self.toots[self.root_index]
    }

    pub fn len(&self) -> usize {
        self.toots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.toots.is_empty()
    }

    /// All toots except the root, in stored order.
    pub fn replies(&self) -> impl Iterator<Item = &Toot> {
        let root_index = self.root_index;
        self.toots
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != root_index)
            .map(|(_, t)| t)
    }
}

/// All conversation trees of one instance plus the author -> conversations
/// inverted index.
#[derive(Debug, Clone)]
pub struct InstanceCorpus {
    pub instance: String,
    pub trees: Vec<ConversationTree>,
    pub user_index: BTreeMap<String, BTreeSet<String>>,
}

impl InstanceCorpus {
    pub fn from_trees(instance: String, trees: Vec<ConversationTree>) -> Self {
        let mut user_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for tree in &trees {
            for user in &tree.participants {
                user_index
                    .entry(user.clone())
                    .or_default()
                    .insert(tree.conversation_id.clone());
            }
        }
        Self {
            instance,
            trees,
            user_index,
        }
    }

    pub fn tree(&self, conversation_id: &str) -> Option<&ConversationTree> {
        self.trees
            .iter()
            .find(|t| t.conversation_id == conversation_id)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unreadable input stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("conversation {0} malformed: {1}")]
    ConversationMalformed(String, String),
    #[error("conversation {conversation}: toot {toot} references missing parent {parent}")]
    OrphanReply {
        conversation: String,
        toot: String,
        parent: String,
    },
}

/// A record-level rejection, reported with its 1-based input line number.
#[derive(Debug, Clone, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

/// A conversation dropped during tree validation.
#[derive(Debug, Clone, Serialize)]
pub struct DroppedConversation {
    pub conversation_id: String,
    /// First input line that mentioned the conversation.
    pub line: usize,
    pub reason: String,
}

/// Result of parsing a record stream. Nothing is dropped without trace:
/// every bad line and every rejected conversation is accounted for.
#[derive(Debug)]
pub struct ParseOutcome {
    pub corpora: Vec<InstanceCorpus>,
    pub rejected_lines: Vec<Rejection>,
    pub dropped_conversations: Vec<DroppedConversation>,
}

impl ParseOutcome {
    pub fn rejection_count(&self) -> usize {
        self.rejected_lines.len()
    }
}

fn validate_record(toot: &Toot) -> Result<(), String> {
    if !(0.0..=1.0).contains(&toot.toxicity) {
        return Err(format!("toxicity {} out of [0,1]", toot.toxicity));
    }
    if !(-1.0..=1.0).contains(&toot.sentiment) {
        return Err(format!("sentiment {} out of [-1,1]", toot.sentiment));
    }
    if toot.created_at < 0 {
        return Err(format!("created_at {} negative", toot.created_at));
    }
    if toot.toot_id.is_empty() || toot.conversation_id.is_empty() {
        return Err("empty identifier".to_owned());
    }
    Ok(())
}

/// Parse line-delimited JSON toot records into per-instance corpora.
///
/// Records are grouped by conversation and each conversation is assigned to
/// the instance of its root toot. Malformed lines are rejected with their
/// line number; conversations failing tree validation are dropped with a
/// reason rather than repaired.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<ParseOutcome, CorpusError> {
    let mut rejected_lines = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    // conversation_id -> (first line seen, records)
    let mut by_conversation: BTreeMap<String, (usize, Vec<Toot>)> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toot: Toot = match serde_json::from_str(&line) {
            Ok(t) => t,
            Err(e) => {
                rejected_lines.push(Rejection {
                    line: line_no,
                    reason: format!("invalid record: {e}"),
                });
                continue;
            }
        };
        if let Err(reason) = validate_record(&toot) {
            rejected_lines.push(Rejection {
                line: line_no,
                reason,
            });
            continue;
        }
        if !seen_ids.insert(toot.toot_id.clone()) {
            rejected_lines.push(Rejection {
                line: line_no,
                reason: format!("duplicate toot_id {}", toot.toot_id),
            });
            continue;
        }
        by_conversation
            .entry(toot.conversation_id.clone())
            .or_insert_with(|| (line_no, Vec::new()))
            .1
            .push(toot);
    }

    let mut dropped_conversations = Vec::new();
    let mut by_instance: BTreeMap<String, Vec<ConversationTree>> = BTreeMap::new();
    for (conversation_id, (first_line, records)) in by_conversation {
        match build_tree(records) {
            Ok(tree) => by_instance
                .entry(tree.instance.clone())
                .or_default()
                .push(tree),
            Err(e) => dropped_conversations.push(DroppedConversation {
                conversation_id,
                line: first_line,
                reason: e.to_string(),
            }),
        }
    }

    let corpora = by_instance
        .into_iter()
        .map(|(instance, mut trees)| {
            trees.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
            InstanceCorpus::from_trees(instance, trees)
        })
        .collect();

    Ok(ParseOutcome {
        corpora,
        rejected_lines,
        dropped_conversations,
    })
}

/// Build a validated tree from the records of one conversation.
///
/// The tree is assigned to the root toot's instance, so a conversation
/// spanning instances lives on the server that hosted its initial post.
pub fn build_tree(mut records: Vec<Toot>) -> Result<ConversationTree, CorpusError> {
    let conversation_id = match records.first() {
        Some(t) => t.conversation_id.clone(),
        None => {
            return Err(CorpusError::ConversationMalformed(
                String::new(),
                "no records".to_owned(),
            ))
        }
    };
    if records.iter().any(|t| t.conversation_id != conversation_id) {
        return Err(CorpusError::ConversationMalformed(
            conversation_id,
            "mixed conversation ids".to_owned(),
        ));
    }

    records.sort_by(|a, b| {
        (a.created_at, a.toot_id.as_str()).cmp(&(b.created_at, b.toot_id.as_str()))
    });

    let roots: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, t)| t.parent_id.is_none())
        .map(|(i, _)| i)
        .collect();
    let root_index = match roots.as_slice() {
        [r] => *r,
        [] => {
            return Err(CorpusError::ConversationMalformed(
                conversation_id,
                "no root".to_owned(),
            ))
        }
        _ => {
            return Err(CorpusError::ConversationMalformed(
                conversation_id,
                format!("{} roots", roots.len()),
            ))
        }
    };

    let positions: BTreeMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, t)| (t.toot_id.as_str(), i))
        .collect();
    let mut parent_of: Vec<Option<usize>> = vec![None; records.len()];
    for (i, toot) in records.iter().enumerate() {
        if let Some(parent_id) = &toot.parent_id {
            match positions.get(parent_id.as_str()) {
                Some(&p) => parent_of[i] = Some(p),
                None => {
                    return Err(CorpusError::OrphanReply {
                        conversation: conversation_id,
                        toot: toot.toot_id.clone(),
                        parent: parent_id.clone(),
                    })
                }
            }
        }
    }

    // Every node must reach the root; a walk longer than the node count
    // means the parent links loop.
    for start in 0..records.len() {
        let mut node = start;
        let mut steps = 0;
        while let Some(p) = parent_of[node] {
            node = p;
            steps += 1;
            if steps > records.len() {
                return Err(CorpusError::ConversationMalformed(
                    records[start].conversation_id.clone(),
                    "cycle in parent links".to_owned(),
                ));
            }
        }
        if node != root_index {
            return Err(CorpusError::ConversationMalformed(
                records[start].conversation_id.clone(),
                "cycle in parent links".to_owned(),
            ));
        }
    }

    let parent_index = records
        .iter()
        .zip(&parent_of)
        .filter_map(|(t, p)| p.map(|p| (t.toot_id.clone(), records[p].toot_id.clone())))
        .collect();
    let participants = records.iter().map(|t| t.author_id.clone()).collect();
    let instance = records[root_index].instance.clone();

    Ok(ConversationTree {
        conversation_id,
        instance,
        root_index,
        toots: records,
        parent_index,
        participants,
    })
}

/// Keep trees whose root language is allowed and which have at least
/// `min_posts` toots; the exclusion is strict-below, so a tree of exactly
/// `min_posts` toots survives.
pub fn filter_corpus(
    corpus: &InstanceCorpus,
    allowed_langs: &BTreeSet<String>,
    min_posts: usize,
) -> InstanceCorpus {
    let min_posts = min_posts.max(1);
    let trees = corpus
        .trees
        .iter()
        .filter(|t| allowed_langs.contains(&t.root().lang) && t.len() >= min_posts)
        .cloned()
        .collect();
    InstanceCorpus::from_trees(corpus.instance.clone(), trees)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub instances: usize,
    pub conversations: usize,
    pub toots: usize,
    pub unique_authors: usize,
}

pub fn corpus_stats(corpora: &[InstanceCorpus]) -> CorpusStats {
    let mut authors = BTreeSet::new();
    let mut conversations = 0;
    let mut toots = 0;
    for corpus in corpora {
        for tree in &corpus.trees {
            conversations += 1;
            toots += tree.len();
            authors.extend(tree.participants.iter().cloned());
        }
    }
    CorpusStats {
        instances: corpora.len(),
        conversations,
        toots,
        unique_authors: authors.len(),
    }
}

/// Write the line-number + reason rejection report.
pub fn write_rejection_report<W: std::io::Write>(
    outcome: &ParseOutcome,
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["line", "reason"])?;
    for r in &outcome.rejected_lines {
        w.write_record([r.line.to_string(), r.reason.clone()])?;
    }
    for d in &outcome.dropped_conversations {
        w.write_record([
            d.line.to_string(),
            format!("conversation {} dropped: {}", d.conversation_id, d.reason),
        ])?;
    }
    w.flush()?;
    Ok(())
}
