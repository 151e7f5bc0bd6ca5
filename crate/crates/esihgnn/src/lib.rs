//! Event-state interaction graph networks for conversational emotion
//! recognition.
//!
//! A conversation becomes a heterogeneous directed acyclic graph: one
//! event node and one state node per turn, joined by eight relation
//! types that run strictly backward in time. A layered graph network
//! ([`model::Model`]) updates both node kinds turn by turn, and a linear
//! head predicts an emotion class per utterance. Training, evaluation
//! metrics, an ablation harness, and a JSONL corpus pipeline round out
//! the crate; everything differentiates through a small tape-based
//! reverse-mode engine ([`tape`]).
//!
//! ```
//! use esihgnn::graph::{build_graph, Conversation, Utterance};
//!
//! let turns = ["alice", "bob", "alice"]
//!     .iter()
//!     .enumerate()
//!     .map(|(i, s)| Utterance {
//!         turn_index: i,
//!         speaker_id: s.to_string(),
//!         text: None,
//!         label: None,
//!         feature: vec![0.0; 4],
//!     })
//!     .collect();
//! let conv = Conversation::new("demo".into(), turns).unwrap();
//! let graph = build_graph(&conv, 1).unwrap();
//! assert_eq!(graph.num_nodes(), 6);
//! assert_eq!(graph.edges.len(), 12);
//! ```
//!
//! The concept guide under `book/` walks through the graph construction,
//! the layer equations, and the training loop with runnable snippets.

pub mod checkpoint;
pub mod corpus;
pub mod edge_features;
pub mod error;
pub mod grad_check;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
