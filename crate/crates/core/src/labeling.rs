//! Conversation-level toxic/non-toxic labels from toot-level scores.
//!
//! A conversation is toxic when its root crosses the moderator threshold or
//! when its replies carry enough toxic mass; every inequality is strict.

use crate::corpus::{ConversationTree, InstanceCorpus};
use serde::{Deserialize, Serialize};

/// Moderator threshold policy. `thr_root` doubles as the per-toot toxicity
/// cutoff so the moderator tunes a single knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModerationPolicy {
    pub thr_root: f64,
    pub thr_number: u32,
    pub thr_fraction: f64,
}

impl Default for ModerationPolicy {
    fn default() -> Self {
        Self {
            thr_root: 0.6,
            thr_number: 1,
            thr_fraction: 0.01,
        }
    }
}

impl ModerationPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.thr_root) {
            return Err(format!("thr_root {} out of [0,1]", self.thr_root));
        }
        if !(0.0..=1.0).contains(&self.thr_fraction) {
            return Err(format!("thr_fraction {} out of [0,1]", self.thr_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Toxic,
    NonToxic,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn class_index(self) -> usize {
        match self {
            Label::Toxic => 0,
            Label::NonToxic => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Label::Toxic),
            1 => Some(Label::NonToxic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Toxic => write!(f, "Toxic"),
            Label::NonToxic => write!(f, "NonToxic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelReason {
    RootToxic,
    ReplyMass,
    Clean,
}

impl std::fmt::Display for LabelReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelReason::RootToxic => write!(f, "RootToxic"),
            LabelReason::ReplyMass => write!(f, "ReplyMass"),
            LabelReason::Clean => write!(f, "Clean"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversationLabel {
    pub conversation_id: String,
    pub label: Label,
    pub reason: LabelReason,
}

pub fn toot_is_toxic(score: f64, policy: &ModerationPolicy) -> bool {
    score > policy.thr_root
}

pub fn label_conversation(tree: &ConversationTree, policy: &ModerationPolicy) -> ConversationLabel {
    let (label, reason) = if toot_is_toxic(tree.root().toxicity, policy) {
        (Label::Toxic, LabelReason::RootToxic)
    } else {
        let reply_count = tree.len() - 1;
        let toxic_replies = tree
            .replies()
            .filter(|t| toot_is_toxic(t.toxicity, policy))
            .count();
        // Zero replies leave the fraction undefined; the clause is then
        // vacuously false because toxic_replies is 0.
        let mass = toxic_replies as u32 > policy.thr_number
            && reply_count > 0
            && toxic_replies as f64 / reply_count as f64 > policy.thr_fraction;
        if mass {
            (Label::Toxic, LabelReason::ReplyMass)
        } else {
            (Label::NonToxic, LabelReason::Clean)
        }
    };
    ConversationLabel {
        conversation_id: tree.conversation_id.clone(),
        label,
        reason,
    }
}

pub fn label_corpus(corpus: &InstanceCorpus, policy: &ModerationPolicy) -> Vec<ConversationLabel> {
    corpus
        .trees
        .iter()
        .map(|t| label_conversation(t, policy))
        .collect()
}

/// Export labels as `conversation_id,label,reason` rows.
pub fn write_labels_csv<W: std::io::Write>(
    labels: &[ConversationLabel],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["conversation_id", "label", "reason"])?;
    for l in labels {
        w.write_record([
            l.conversation_id.clone(),
            l.label.to_string(),
            l.reason.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows written by `write_labels_csv` back into a lookup table.
pub fn read_labels_csv<R: std::io::Read>(
    reader: R,
) -> Result<std::collections::BTreeMap<String, Label>, String> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = std::collections::BTreeMap::new();
    for record in r.records() {
        let record = record.map_err(|e| e.to_string())?;
        let id = record
            .get(0)
            .ok_or_else(|| "missing conversation_id column".to_owned())?;
        let label = match record.get(1) {
            Some("Toxic") => Label::Toxic,
            Some("NonToxic") => Label::NonToxic,
            other => return Err(format!("unknown label {other:?} for {id}")),
        };
        out.insert(id.to_owned(), label);
    }
    Ok(out)
}
