//! Heterogeneous event-state interaction graph construction.
//!
//! Each conversation turn contributes one event node and one state node.
//! Edges run strictly backward in time under one of eight relation
//! types, each a distinct (source kind, target kind, same-speaker)
//! triple. A window `ω` bounds how many prior turns of each speaker may
//! contribute sources to a target.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

/// One conversation turn.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub turn_index: usize,
    pub speaker_id: String,
    pub text: Option<String>,
    pub label: Option<usize>,
    pub feature: Vec<f32>,
}

/// Ordered turns of one dialogue.
#[derive(Clone, Debug)]
pub struct Conversation {
    pub dialogue_id: String,
    pub turns: Vec<Utterance>,
    pub speaker_count: usize,
}

impl Conversation {
    /// Validates turn density and counts speakers by first appearance.
    /// Single-speaker conversations are accepted with a warning.
    pub fn new(dialogue_id: String, turns: Vec<Utterance>) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::Domain {
                op: "conversation",
                detail: format!("dialogue {dialogue_id} has no turns"),
            });
        }
        for (i, t) in turns.iter().enumerate() {
            if t.turn_index != i {
                return Err(Error::Domain {
                    op: "conversation",
                    detail: format!(
                        "dialogue {dialogue_id}: turn_index {} at position {i}",
                        t.turn_index
                    ),
                });
            }
        }
        let mut seen = Vec::new();
        for t in &turns {
            if !seen.contains(&t.speaker_id) {
                seen.push(t.speaker_id.clone());
            }
        }
        if seen.len() < 2 {
            eprintln!("warning: dialogue {dialogue_id} has a single speaker");
        }
        Ok(Conversation { dialogue_id, turns, speaker_count: seen.len() })
    }

    /// Speaker index by order of first appearance within this dialogue.
    pub fn speaker_index(&self, turn: usize) -> usize {
        let id = &self.turns[turn].speaker_id;
        let mut seen: Vec<&str> = Vec::new();
        for t in &self.turns {
            if !seen.contains(&t.speaker_id.as_str()) {
                seen.push(&t.speaker_id);
            }
            if t.turn_index == turn {
                break;
            }
        }
        seen.iter().position(|s| s == id).expect("speaker seen by its own turn")
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// The first `k` turns as a standalone conversation.
    pub fn prefix(&self, k: usize) -> Result<Conversation> {
        Conversation::new(self.dialogue_id.clone(), self.turns[..k].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Event,
    State,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Event => write!(f, "event"),
            NodeKind::State => write!(f, "state"),
        }
    }
}

/// The eight relation types. Each is a distinct
/// (source kind, target kind, same-speaker) triple; together they
/// exhaust `{event,state}² × {intra,inter}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    XWant,
    OWant,
    XDrive,
    ODrive,
    XReact,
    OReact,
    XDepend,
    ODepend,
}

pub use RelationType::*;

impl RelationType {
    pub const ALL: [RelationType; 8] =
        [XWant, OWant, XDrive, ODrive, XReact, OReact, XDepend, ODepend];

    pub fn source_kind(self) -> NodeKind {
        match self {
            XWant | OWant | XReact | OReact => NodeKind::Event,
            XDrive | ODrive | XDepend | ODepend => NodeKind::State,
        }
    }

    pub fn target_kind(self) -> NodeKind {
        match self {
            XWant | OWant | XDrive | ODrive => NodeKind::Event,
            XReact | OReact | XDepend | ODepend => NodeKind::State,
        }
    }

    pub fn same_speaker(self) -> bool {
        matches!(self, XWant | XDrive | XReact | XDepend)
    }

    pub fn from_triple(src: NodeKind, dst: NodeKind, same_speaker: bool) -> RelationType {
        *Self::ALL
            .iter()
            .find(|r| {
                r.source_kind() == src && r.target_kind() == dst && r.same_speaker() == same_speaker
            })
            .expect("triples exhaust the space")
    }

    pub fn name(self) -> &'static str {
        match self {
            XWant => "xWant",
            OWant => "oWant",
            XDrive => "xDrive",
            ODrive => "oDrive",
            XReact => "xReact",
            OReact => "oReact",
            XDepend => "xDepend",
            ODepend => "oDepend",
        }
    }

    pub fn parse(s: &str) -> Option<RelationType> {
        Self::ALL.iter().copied().find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Subset of the eight relations, used by the ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationSet(u8);

impl RelationSet {
    pub fn all() -> Self {
        RelationSet(0xff)
    }

    pub fn empty() -> Self {
        RelationSet(0)
    }

    pub fn contains(self, r: RelationType) -> bool {
        self.0 & (1 << r as u8) != 0
    }

    pub fn without(self, r: RelationType) -> Self {
        RelationSet(self.0 & !(1 << r as u8))
    }

    pub fn with(self, r: RelationType) -> Self {
        RelationSet(self.0 | (1 << r as u8))
    }

    /// Remove a coarse relation group, e.g. both event-to-event
    /// relations.
    pub fn without_group(self, src: NodeKind, dst: NodeKind) -> Self {
        let mut s = self;
        for r in RelationType::ALL {
            if r.source_kind() == src && r.target_kind() == dst {
                s = s.without(r);
            }
        }
        s
    }

    pub fn iter(self) -> impl Iterator<Item = RelationType> {
        RelationType::ALL.into_iter().filter(move |r| self.contains(*r))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl Default for RelationSet {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub turn: usize,
    pub kind: NodeKind,
}

impl NodeRef {
    pub fn event(turn: usize) -> Self {
        NodeRef { turn, kind: NodeKind::Event }
    }
    pub fn state(turn: usize) -> Self {
        NodeRef { turn, kind: NodeKind::State }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::Event => write!(f, "e{}", self.turn),
            NodeKind::State => write!(f, "s{}", self.turn),
        }
    }
}

/// Directed edge with positional annotation: `position.0` is the source
/// turn (absolute, 0-based); `position.1` is the recency rank of the
/// source among the destination's predecessors under this relation
/// (1 = most recent).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub relation: RelationType,
    pub position: (usize, usize),
}

/// The constructed event-state interaction graph of one conversation.
/// Immutable after construction; edges are grouped by destination.
#[derive(Clone, Debug)]
pub struct HeteroGraph {
    pub dialogue_id: String,
    /// Per-turn speaker ids, copied from the conversation.
    pub speakers: Vec<String>,
    pub edges: Vec<Edge>,
}

impl HeteroGraph {
    pub fn num_turns(&self) -> usize {
        self.speakers.len()
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.speakers.len()
    }

    /// Incoming edges of one node, in stored (deterministic) order.
    pub fn incoming(&self, node: NodeRef) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == node)
    }

    /// Same graph restricted to a relation subset (ablation view).
    pub fn filtered(&self, relations: RelationSet) -> HeteroGraph {
        HeteroGraph {
            dialogue_id: self.dialogue_id.clone(),
            speakers: self.speakers.clone(),
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|e| relations.contains(e.relation))
                .collect(),
        }
    }
}

/// Build the interaction graph for one conversation.
///
/// For each target turn: intra relations draw sources from the most
/// recent `omega` prior turns by the same speaker; inter relations draw
/// from the most recent `omega` prior turns of each other speaker.
pub fn build_graph(conv: &Conversation, omega: usize) -> Result<HeteroGraph> {
    if conv.is_empty() {
        return Err(Error::Domain { op: "build_graph", detail: "empty conversation".into() });
    }
    if omega == 0 {
        return Err(Error::Domain { op: "build_graph", detail: "omega must be >= 1".into() });
    }
    let n = conv.len();
    let mut edges = Vec::new();

    for i in 0..n {
        let target_speaker = &conv.turns[i].speaker_id;

        // most recent `omega` prior turns of the same speaker
        let mut intra: Vec<usize> = (0..i)
            .filter(|&j| &conv.turns[j].speaker_id == target_speaker)
            .collect();
        let keep = intra.len().saturating_sub(omega);
        intra.drain(..keep);

        // most recent `omega` prior turns of each other speaker
        let mut by_speaker: HashMap<&str, Vec<usize>> = HashMap::new();
        for j in 0..i {
            let s = conv.turns[j].speaker_id.as_str();
            if s != target_speaker {
                by_speaker.entry(s).or_default().push(j);
            }
        }
        let mut inter: Vec<usize> = Vec::new();
        for turns in by_speaker.values() {
            let keep = turns.len().saturating_sub(omega);
            inter.extend_from_slice(&turns[keep..]);
        }
        inter.sort_unstable();

        for dst_kind in [NodeKind::Event, NodeKind::State] {
            let dst = NodeRef { turn: i, kind: dst_kind };
            for src_kind in [NodeKind::Event, NodeKind::State] {
                for (same, sources) in [(true, &intra), (false, &inter)] {
                    let relation = RelationType::from_triple(src_kind, dst_kind, same);
                    // descending recency: rank 1 = most recent predecessor
                    for (rank, &j) in sources.iter().rev().enumerate() {
                        edges.push(Edge {
                            src: NodeRef { turn: j, kind: src_kind },
                            dst,
                            relation,
                            position: (j, rank + 1),
                        });
                    }
                }
            }
        }
    }

    edges.sort_unstable_by_key(|e| (e.dst.turn, e.dst.kind, e.relation, e.position.1));
    Ok(HeteroGraph {
        dialogue_id: conv.dialogue_id.clone(),
        speakers: conv.turns.iter().map(|t| t.speaker_id.clone()).collect(),
        edges,
    })
}

/// Structural check: every edge must point strictly forward in time and
/// carry the relation matching its endpoint kinds and speakers.
pub fn validate_dag(g: &HeteroGraph) -> std::result::Result<(), String> {
    for e in &g.edges {
        if e.src.turn >= e.dst.turn {
            return Err(format!(
                "edge {} -> {} ({}) violates turn ordering",
                e.src, e.dst, e.relation
            ));
        }
        let same = g.speakers[e.src.turn] == g.speakers[e.dst.turn];
        let expected = RelationType::from_triple(e.src.kind, e.dst.kind, same);
        if expected != e.relation {
            return Err(format!(
                "edge {} -> {} labeled {}, triple implies {}",
                e.src, e.dst, e.relation, expected
            ));
        }
    }
    Ok(())
}

/// Serializable graph document; the JSON schema for `export_graph`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub dialogue_id: String,
    pub nodes: Vec<NodeRef>,
    pub edges: Vec<EdgeDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub relation: String,
    pub position: [usize; 2],
}

impl HeteroGraph {
    pub fn to_doc(&self) -> GraphDoc {
        let mut nodes = Vec::with_capacity(self.num_nodes());
        for turn in 0..self.num_turns() {
            nodes.push(NodeRef::event(turn));
            nodes.push(NodeRef::state(turn));
        }
        GraphDoc {
            dialogue_id: self.dialogue_id.clone(),
            nodes,
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    src: e.src,
                    dst: e.dst,
                    relation: e.relation.name().to_string(),
                    position: [e.position.0, e.position.1],
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "dot" => Ok(ExportFormat::Dot),
            other => Err(Error::Usage(format!("unknown graph format '{other}'"))),
        }
    }
}

/// Deterministic serialization of a graph as JSON or Graphviz DOT.
pub fn export_graph(g: &HeteroGraph, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_string_pretty(&g.to_doc())?),
        ExportFormat::Dot => {
            let mut out = String::new();
            out.push_str("digraph conversation {\n  rankdir=LR;\n");
            for turn in 0..g.num_turns() {
                out.push_str(&format!("  e{turn} [shape=box label=\"e_{turn}\"];\n"));
                out.push_str(&format!("  s{turn} [shape=ellipse label=\"s_{turn}\"];\n"));
            }
            for e in &g.edges {
                out.push_str(&format!(
                    "  {} -> {} [label=\"{}\"];\n",
                    e.src, e.dst, e.relation
                ));
            }
            out.push_str("}\n");
            Ok(out)
        }
    }
}

/// Parse the JSON graph schema back into a document.
pub fn parse_graph(json: &str) -> Result<GraphDoc> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn conv_from_speakers(speakers: &[&str]) -> Conversation {
        let turns = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| Utterance {
                turn_index: i,
                speaker_id: s.to_string(),
                text: None,
                label: None,
                feature: vec![0.0; 4],
            })
            .collect();
        Conversation::new("d0".into(), turns).unwrap()
    }

    /// Brute-force enumerator over all node pairs, written independently
    /// of `build_graph`: an edge j -> i exists iff the relation triple
    /// matches and j is among the last `omega` turns of its own speaker
    /// before i.
    pub(crate) fn enumerate_edges(conv: &Conversation, omega: usize) -> Vec<Edge> {
        let n = conv.len();
        let mut out = Vec::new();
        for i in 0..n {
            for dst_kind in [NodeKind::Event, NodeKind::State] {
                for j in 0..i {
                    // recency of j among turns of j's speaker before i
                    let later = (j + 1..i)
                        .filter(|&k| conv.turns[k].speaker_id == conv.turns[j].speaker_id)
                        .count();
                    if later >= omega {
                        continue;
                    }
                    let same = conv.turns[j].speaker_id == conv.turns[i].speaker_id;
                    for src_kind in [NodeKind::Event, NodeKind::State] {
                        let relation = RelationType::from_triple(src_kind, dst_kind, same);
                        out.push(Edge {
                            src: NodeRef { turn: j, kind: src_kind },
                            dst: NodeRef { turn: i, kind: dst_kind },
                            relation,
                            position: (j, 0), // rel filled below
                        });
                    }
                }
            }
        }
        // relative position: rank by recency among same (dst, relation)
        let snapshot = out.clone();
        for e in out.iter_mut() {
            let rank = snapshot
                .iter()
                .filter(|o| o.dst == e.dst && o.relation == e.relation && o.src.turn > e.src.turn)
                .count();
            e.position.1 = rank + 1;
        }
        out
    }

    fn edge_set(edges: &[Edge]) -> std::collections::BTreeSet<Edge> {
        edges.iter().copied().collect()
    }

    #[test]
    fn single_turn_has_no_edges() {
        let conv = conv_from_speakers(&["A"]);
        let g = build_graph(&conv, 1).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn aba_omega1_yields_twelve_edges() {
        let conv = conv_from_speakers(&["A", "B", "A"]);
        let g = build_graph(&conv, 1).unwrap();
        assert_eq!(g.edges.len(), 12);
        assert_eq!(edge_set(&g.edges), edge_set(&enumerate_edges(&conv, 1)));

        // spot-check the fixed expectations into turn 1
        let has = |src: NodeRef, dst: NodeRef, r: RelationType| {
            g.edges.iter().any(|e| e.src == src && e.dst == dst && e.relation == r)
        };
        assert!(has(NodeRef::event(0), NodeRef::event(1), OWant));
        assert!(has(NodeRef::state(0), NodeRef::event(1), ODrive));
        assert!(has(NodeRef::event(0), NodeRef::state(1), OReact));
        assert!(has(NodeRef::state(0), NodeRef::state(1), ODepend));
        assert!(has(NodeRef::event(1), NodeRef::event(2), OWant));
        assert!(has(NodeRef::event(0), NodeRef::event(2), XWant));
    }

    #[test]
    fn aa_omega1_yields_four_intra_edges() {
        let conv = conv_from_speakers(&["A", "A"]);
        let g = build_graph(&conv, 1).unwrap();
        assert_eq!(g.edges.len(), 4);
        assert!(g.edges.iter().all(|e| e.relation.same_speaker()));
        assert_eq!(edge_set(&g.edges), edge_set(&enumerate_edges(&conv, 1)));
    }

    #[test]
    fn relative_positions_rank_by_recency() {
        // same speaker at turns 0, 2, 4 targeting turn 6 under omega=3
        let conv = conv_from_speakers(&["A", "B", "A", "B", "A", "B", "A"]);
        let g = build_graph(&conv, 3).unwrap();
        let xwant: Vec<&Edge> = g
            .incoming(NodeRef::event(6))
            .filter(|e| e.relation == XWant)
            .collect();
        let positions: Vec<(usize, usize)> = xwant.iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![(4, 1), (2, 2), (0, 3)]);
    }

    #[test]
    fn inter_positions_with_two_other_speakers() {
        let conv = conv_from_speakers(&["A", "B", "C"]);
        let g = build_graph(&conv, 1).unwrap();
        assert_eq!(edge_set(&g.edges), edge_set(&enumerate_edges(&conv, 1)));
        let owant: Vec<&Edge> = g
            .incoming(NodeRef::event(2))
            .filter(|e| e.relation == OWant)
            .collect();
        let positions: Vec<(usize, usize)> = owant.iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![(1, 1), (0, 2)]);
    }

    #[test]
    fn empty_conversation_rejected_at_build() {
        // Conversation::new already rejects zero turns
        assert!(Conversation::new("d".into(), vec![]).is_err());
    }

    #[test]
    fn validate_rejects_forged_edges() {
        let conv = conv_from_speakers(&["A", "B", "A", "B"]);
        let mut g = build_graph(&conv, 1).unwrap();
        assert!(validate_dag(&g).is_ok());

        g.edges.push(Edge {
            src: NodeRef::event(3),
            dst: NodeRef::event(1),
            relation: OWant,
            position: (3, 1),
        });
        let err = validate_dag(&g).unwrap_err();
        assert!(err.contains("e3"), "report names the edge: {err}");
        g.edges.pop();

        // xWant between different speakers
        g.edges.push(Edge {
            src: NodeRef::event(0),
            dst: NodeRef::event(1),
            relation: XWant,
            position: (0, 1),
        });
        let err = validate_dag(&g).unwrap_err();
        assert!(err.contains("xWant"), "{err}");
    }

    #[test]
    fn export_round_trip_and_fixtures() {
        let conv = conv_from_speakers(&["A"]);
        let g = build_graph(&conv, 1).unwrap();
        let json = export_graph(&g, ExportFormat::Json).unwrap();
        let doc = parse_graph(&json).unwrap();
        assert_eq!(doc.nodes.len(), 2);
        assert!(doc.edges.is_empty());

        let conv = conv_from_speakers(&["A", "B", "A"]);
        let g = build_graph(&conv, 1).unwrap();
        let json = export_graph(&g, ExportFormat::Json).unwrap();
        let doc = parse_graph(&json).unwrap();
        assert_eq!(doc.edges.len(), 12);
        assert_eq!(doc, g.to_doc());

        let dot = export_graph(&g, ExportFormat::Dot).unwrap();
        assert!(dot.contains("e0 -> e1"));
        assert!(dot.contains("label=\"oWant\""));
    }

    #[test]
    fn relation_triples_exhaustive_and_distinct() {
        let mut seen = std::collections::HashSet::new();
        for r in RelationType::ALL {
            seen.insert((r.source_kind(), r.target_kind(), r.same_speaker()));
        }
        assert_eq!(seen.len(), 8);
        for src in [NodeKind::Event, NodeKind::State] {
            for dst in [NodeKind::Event, NodeKind::State] {
                for same in [true, false] {
                    let _ = RelationType::from_triple(src, dst, same);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn builder_matches_enumerator(
            speakers in proptest::collection::vec(0usize..3, 1..8),
            omega in 1usize..4,
        ) {
            let names: Vec<String> = speakers.iter().map(|s| format!("S{s}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let conv = conv_from_speakers(&refs);
            let g = build_graph(&conv, omega).unwrap();
            prop_assert_eq!(edge_set(&g.edges), edge_set(&enumerate_edges(&conv, omega)));
            prop_assert!(validate_dag(&g).is_ok());
            // loose bound |E| <= 8 * omega * N * S
            prop_assert!(g.edges.len() <= 8 * omega * conv.len() * conv.speaker_count);
        }

        #[test]
        fn prefix_is_induced_subgraph(
            speakers in proptest::collection::vec(0usize..3, 2..8),
            omega in 1usize..4,
            k in 1usize..8,
        ) {
            let names: Vec<String> = speakers.iter().map(|s| format!("S{s}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let conv = conv_from_speakers(&refs);
            let k = k.min(conv.len());
            let full = build_graph(&conv, omega).unwrap();
            let pre = build_graph(&conv.prefix(k).unwrap(), omega).unwrap();
            let induced: std::collections::BTreeSet<Edge> = full
                .edges
                .iter()
                .copied()
                .filter(|e| e.dst.turn < k)
                .collect();
            prop_assert_eq!(edge_set(&pre.edges), induced);
        }
    }
}
