//! Federated graph-learning pipeline for conversation-level toxicity
//! moderation across decentralized social-network instances.
//!
//! The stages mirror a moderation workflow: ingest per-instance conversation
//! trees, derive labels from a threshold policy, connect conversations that
//! share participants, denoise that graph, embed it, and train a federated
//! classifier without moving raw data between instances.

pub mod config;
pub mod convgraph;
pub mod corpus;
pub mod features;
pub mod federation;
pub mod graphsage;
pub mod labeling;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod synth;
