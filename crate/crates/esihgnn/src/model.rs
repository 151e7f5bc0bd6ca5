//! The HDAGNN forward pass.
//!
//! Per layer, turns are visited in increasing order. A node's message is
//! an attention-weighted sum over its predecessors' *layer-l* states
//! (already updated, the DAG recurrence), scored against the node's own
//! layer-(l-1) state. Inter-turn GRUs then absorb the message; within a
//! turn, two more GRUs exchange information between the event node and
//! its sibling state node. Per-turn emotion logits come from a linear
//! head over the concatenation of all layers' fused states.

use crate::edge_features::{EdgeFeature, EdgeFeatureTable, EdgeMode, ExternalVectors};
use crate::error::{Error, Result};
use crate::graph::{
    build_graph, Conversation, Edge, HeteroGraph, NodeKind, NodeRef, RelationSet, RelationType,
};
use crate::nn::{gru_cell, init_matrix, GruNodes, GruParams};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Everything that fixes the architecture.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub hidden: usize,
    pub event_dim: usize,
    pub onehot_dim: usize,
    pub classes: usize,
    /// Number of HDAGNN layers (L). Layer 0 holds the projected inputs.
    pub layers: usize,
    pub omega: usize,
    pub intra_esi: bool,
    /// Optional LeakyReLU on attention scores; off reproduces the
    /// literal score formula.
    pub leaky_relu: bool,
    /// Swap the input/hidden roles of the inter-turn GRUs.
    pub gru_swapped: bool,
    pub relations: RelationSet,
    pub edge_mode: EdgeMode,
    pub edge_trainable_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 300,
            event_dim: 1024,
            onehot_dim: 2,
            classes: 2,
            layers: 4,
            omega: 1,
            intra_esi: true,
            leaky_relu: false,
            gru_swapped: false,
            relations: RelationSet::all(),
            edge_mode: EdgeMode::Default,
            edge_trainable_dim: crate::edge_features::DEFAULT_TRAINABLE_DIM,
            dropout: 0.0,
        }
    }
}

/// Per-layer trainable parameters.
pub struct LayerParams {
    /// Per relation: node transform `W_{r,v}` and edge transform `W_{r,a}`.
    pub rel: BTreeMap<RelationType, (ParamId, ParamId)>,
    /// Row map producing one score per edge.
    pub score: ParamId,
    /// Position map over (absolute, relative).
    pub pos: ParamId,
    pub gru_e_inter: GruParams,
    pub gru_s_inter: GruParams,
    pub gru_e_intra: GruParams,
    pub gru_s_intra: GruParams,
}

pub struct ModelParams {
    pub proj_event: ParamId,
    pub proj_state: ParamId,
    pub layers: Vec<LayerParams>,
    pub w_z: ParamId,
    pub b_z: ParamId,
}

/// Model = config + parameter store + edge feature table.
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub edge_table: EdgeFeatureTable,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Deterministic initialization under `seed`.
    pub fn new(config: ModelConfig, seed: u64, external: Option<ExternalVectors>) -> Self {
        let mut store = ParamStore::new();
        let edge_table = EdgeFeatureTable::build(
            config.edge_mode,
            config.relations.iter(),
            &mut store,
            config.edge_trainable_dim,
            seed ^ 0x9e37_79b9,
            external,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;

        let proj_event =
            store.register("proj.event", init_matrix::<T, _>(h, config.event_dim, &mut rng));
        let proj_state =
            store.register("proj.state", init_matrix::<T, _>(h, config.onehot_dim, &mut rng));

        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let mut rel = BTreeMap::new();
            for r in config.relations.iter() {
                let wv =
                    store.register(format!("l{l}.{}.w_v", r.name()), init_matrix::<T, _>(h, h, &mut rng));
                let wa = store.register(
                    format!("l{l}.{}.w_a", r.name()),
                    init_matrix::<T, _>(h, edge_table.feature_dim(r), &mut rng),
                );
                rel.insert(r, (wv, wa));
            }
            let score = store.register(format!("l{l}.score"), init_matrix::<T, _>(1, h, &mut rng));
            let pos = store.register(format!("l{l}.pos"), init_matrix::<T, _>(h, 2, &mut rng));
            let gru_e_inter = GruParams::init(&mut store, &format!("l{l}.gru_e_inter"), h, h, &mut rng);
            let gru_s_inter = GruParams::init(&mut store, &format!("l{l}.gru_s_inter"), h, h, &mut rng);
            let gru_e_intra = GruParams::init(&mut store, &format!("l{l}.gru_e_intra"), h, h, &mut rng);
            let gru_s_intra = GruParams::init(&mut store, &format!("l{l}.gru_s_intra"), h, h, &mut rng);
            layers.push(LayerParams {
                rel,
                score,
                pos,
                gru_e_inter,
                gru_s_inter,
                gru_e_intra,
                gru_s_intra,
            });
        }

        let head_dim = (config.layers + 1) * h;
        let w_z = store.register("head.w_z", init_matrix::<T, _>(config.classes, head_dim, &mut rng));
        let b_z = store.register("head.b_z", Tensor::zeros(vec![config.classes]));

        Model { config, params: ModelParams { proj_event, proj_state, layers, w_z, b_z }, edge_table, store }
    }

    /// Re-instantiate this model at a different precision.
    pub fn cast<U: Real>(self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params,
            edge_table: self.edge_table,
            store: self.store.cast(),
        }
    }

    pub fn forward(&self, conv: &Conversation, opts: &mut ForwardOpts) -> Result<Forward<T>> {
        let graph = build_graph(conv, self.config.omega)?;
        self.forward_on_graph(conv, &graph, opts)
    }

    /// Full forward pass over one conversation. The returned tape can be
    /// replayed backward through the optional loss node.
    pub fn forward_on_graph(
        &self,
        conv: &Conversation,
        graph: &HeteroGraph,
        opts: &mut ForwardOpts,
    ) -> Result<Forward<T>> {
        let cfg = &self.config;
        let n = conv.len();
        let h = cfg.hidden;
        let mut tape = Tape::new();

        // layer 0: projected inputs
        let proj_e = tape.param(&self.store, self.params.proj_event);
        let proj_s = tape.param(&self.store, self.params.proj_state);
        let mut h_event: Vec<Vec<NodeId>> = vec![Vec::with_capacity(n); cfg.layers + 1];
        let mut h_state: Vec<Vec<NodeId>> = vec![Vec::with_capacity(n); cfg.layers + 1];
        for i in 0..n {
            let feat = &conv.turns[i].feature;
            if feat.len() != cfg.event_dim {
                return Err(Error::Shape {
                    op: "project_inputs",
                    detail: format!(
                        "turn {i} feature dim {} != event_dim {}",
                        feat.len(),
                        cfg.event_dim
                    ),
                });
            }
            let sp = conv.speaker_index(i);
            if sp >= cfg.onehot_dim {
                return Err(Error::Domain {
                    op: "project_inputs",
                    detail: format!("speaker index {sp} >= one-hot dim {}", cfg.onehot_dim),
                });
            }
            let feat_leaf =
                tape.leaf(Tensor::vector(feat.iter().map(|&v| T::from_f32(v)).collect()));
            let mut onehot = Tensor::zeros(vec![cfg.onehot_dim]);
            onehot.data_mut()[sp] = T::one();
            let onehot_leaf = tape.leaf(onehot);
            h_event[0].push(tape.matvec(proj_e, feat_leaf)?);
            h_state[0].push(tape.matvec(proj_s, onehot_leaf)?);
        }

        let mut attention_sums = Vec::new();

        for (li, layer) in self.params.layers.iter().enumerate() {
            let l = li + 1;
            let rel_nodes: BTreeMap<RelationType, (NodeId, NodeId)> = layer
                .rel
                .iter()
                .map(|(r, (wv, wa))| {
                    (*r, (tape.param(&self.store, *wv), tape.param(&self.store, *wa)))
                })
                .collect();
            let score_w = tape.param(&self.store, layer.score);
            let pos_w = tape.param(&self.store, layer.pos);
            let g_e_inter = GruNodes::bring(&mut tape, &self.store, &layer.gru_e_inter);
            let g_s_inter = GruNodes::bring(&mut tape, &self.store, &layer.gru_s_inter);
            let g_e_intra = GruNodes::bring(&mut tape, &self.store, &layer.gru_e_intra);
            let g_s_intra = GruNodes::bring(&mut tape, &self.store, &layer.gru_s_intra);

            for i in 0..n {
                // messages first; both in-turn updates read only messages
                // and layer-(l-1) states
                let m_event = self.message(
                    &mut tape,
                    graph,
                    NodeRef::event(i),
                    h_event[l - 1][i],
                    &h_event[l],
                    &h_state[l],
                    &rel_nodes,
                    score_w,
                    pos_w,
                    &mut attention_sums,
                    l,
                )?;
                let m_state = self.message(
                    &mut tape,
                    graph,
                    NodeRef::state(i),
                    h_state[l - 1][i],
                    &h_event[l],
                    &h_state[l],
                    &rel_nodes,
                    score_w,
                    pos_w,
                    &mut attention_sums,
                    l,
                )?;

                let inter = |tape: &mut Tape<T>, g: &GruNodes, prev, msg| {
                    if cfg.gru_swapped {
                        gru_cell(tape, g, msg, prev)
                    } else {
                        gru_cell(tape, g, prev, msg)
                    }
                };
                let bar_e = inter(&mut tape, &g_e_inter, h_event[l - 1][i], m_event)?;
                let bar_s = inter(&mut tape, &g_s_inter, h_state[l - 1][i], m_state)?;

                let (mut new_e, mut new_s) = if cfg.intra_esi {
                    let tilde_e = gru_cell(&mut tape, &g_e_intra, m_state, h_event[l - 1][i])?;
                    let tilde_s = gru_cell(&mut tape, &g_s_intra, m_event, h_state[l - 1][i])?;
                    (tape.add(bar_e, tilde_e)?, tape.add(bar_s, tilde_s)?)
                } else {
                    (bar_e, bar_s)
                };
                if let Some(rng) = opts.dropout_rng.as_deref_mut() {
                    new_e = dropout(&mut tape, new_e, cfg.dropout, rng)?;
                    new_s = dropout(&mut tape, new_s, cfg.dropout, rng)?;
                }
                h_event[l].push(new_e);
                h_state[l].push(new_s);
                let _ = h;
            }
        }

        // prediction head
        let w_z = tape.param(&self.store, self.params.w_z);
        let b_z = tape.param(&self.store, self.params.b_z);
        let mut h_cat = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut losses = Vec::new();
        for i in 0..n {
            let mut parts = Vec::with_capacity(cfg.layers + 1);
            for l in 0..=cfg.layers {
                parts.push(tape.add(h_event[l][i], h_state[l][i])?);
            }
            let mut cat = tape.concat(&parts)?;
            if let Some(rng) = opts.dropout_rng.as_deref_mut() {
                cat = dropout(&mut tape, cat, cfg.dropout, rng)?;
            }
            let z = tape.matvec(w_z, cat)?;
            let z = tape.add(z, b_z)?;
            let p = tape.softmax(z)?;
            let p = tape.value(p).clone();
            if let Some(label) = conv.turns[i].label {
                if label >= cfg.classes {
                    return Err(Error::Domain {
                        op: "forward",
                        detail: format!("label {label} >= classes {}", cfg.classes),
                    });
                }
                losses.push(tape.nll_loss(z, label)?);
            }
            h_cat.push(cat);
            logits.push(z);
            probs.push(p);
        }

        let loss = if losses.is_empty() {
            None
        } else {
            let stacked = tape.concat(&losses)?;
            let total = tape.sum(stacked)?;
            Some(tape.scale(total, T::from_f64(1.0 / losses.len() as f64))?)
        };

        Ok(Forward { tape, h_cat, logits, probs, loss, attention_sums })
    }

    /// Attention (joint softmax over all incoming edges of the node) and
    /// weighted aggregation into one message. Empty neighborhoods yield
    /// the zero vector.
    #[allow(clippy::too_many_arguments)]
    fn message(
        &self,
        tape: &mut Tape<T>,
        graph: &HeteroGraph,
        node: NodeRef,
        h_prev: NodeId,
        h_event_l: &[NodeId],
        h_state_l: &[NodeId],
        rel_nodes: &BTreeMap<RelationType, (NodeId, NodeId)>,
        score_w: NodeId,
        pos_w: NodeId,
        attention_sums: &mut Vec<AttentionRecord>,
        layer: usize,
    ) -> Result<NodeId> {
        let edges: Vec<&Edge> = graph
            .incoming(node)
            .filter(|e| self.config.relations.contains(e.relation))
            .collect();
        if edges.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(vec![self.config.hidden])));
        }

        let mut scores = Vec::with_capacity(edges.len());
        let mut items = Vec::with_capacity(edges.len());
        for e in &edges {
            let (wv, wa) = rel_nodes[&e.relation];
            let h_j = match e.src.kind {
                NodeKind::Event => h_event_l[e.src.turn],
                NodeKind::State => h_state_l[e.src.turn],
            };
            let item = tape.matvec(wv, h_j)?;
            let t_target = tape.matvec(wv, h_prev)?;
            let feat = self.edge_feature_node(tape, &graph.dialogue_id, e)?;
            let t_edge = tape.matvec(wa, feat)?;
            let pos = tape.leaf(Tensor::vector(vec![
                T::from_f64(e.position.0 as f64),
                T::from_f64(e.position.1 as f64),
            ]));
            let t_pos = tape.matvec(pos_w, pos)?;

            let sum = tape.add(t_target, item)?;
            let sum = tape.add(sum, t_edge)?;
            let sum = tape.add(sum, t_pos)?;
            let mut s = tape.matvec(score_w, sum)?;
            if self.config.leaky_relu {
                s = tape.leaky_relu(s, T::from_f64(0.2))?;
            }
            scores.push(s);
            items.push(item);
        }
        let stacked = tape.concat(&scores)?;
        let alpha = tape.softmax(stacked)?;
        attention_sums.push(AttentionRecord {
            layer,
            node,
            sum: tape.value(alpha).data().iter().map(|&v| Real::to_f64(v)).sum(),
        });
        tape.weighted_sum(alpha, &items)
    }

    fn edge_feature_node(
        &self,
        tape: &mut Tape<T>,
        dialogue_id: &str,
        edge: &Edge,
    ) -> Result<NodeId> {
        Ok(match self.edge_table.lookup(dialogue_id, edge)? {
            EdgeFeature::Binary => tape.leaf(Tensor::vector(vec![T::one()])),
            EdgeFeature::Trainable(id) => tape.param(&self.store, id),
            EdgeFeature::External(v) => {
                tape.leaf(Tensor::vector(v.iter().map(|&x| T::from_f64(x)).collect()))
            }
        })
    }

    /// Predicted class per turn (no dropout).
    pub fn predict(&self, conv: &Conversation) -> Result<Vec<usize>> {
        let fwd = self.forward(conv, &mut ForwardOpts::inference())?;
        Ok(fwd.probs.iter().map(Tensor::argmax).collect())
    }
}

/// Per-pass options. Dropout engages only when an RNG is supplied.
pub struct ForwardOpts {
    pub dropout_rng: Option<Box<ChaCha8Rng>>,
}

impl ForwardOpts {
    pub fn inference() -> Self {
        ForwardOpts { dropout_rng: None }
    }

    pub fn training(rng: ChaCha8Rng) -> Self {
        ForwardOpts { dropout_rng: Some(Box::new(rng)) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub node: NodeRef,
    pub sum: f64,
}

/// Result of one forward pass.
pub struct Forward<T: Real> {
    pub tape: Tape<T>,
    pub h_cat: Vec<NodeId>,
    pub logits: Vec<NodeId>,
    pub probs: Vec<Tensor<T>>,
    pub loss: Option<NodeId>,
    pub attention_sums: Vec<AttentionRecord>,
}

impl<T: Real> Forward<T> {
    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.tape.value(l).at(0).to_f64())
    }

    pub fn h_value(&self, turn: usize) -> &Tensor<T> {
        self.tape.value(self.h_cat[turn])
    }
}

/// Inverted dropout: keep with probability `1 - p`, scale kept units by
/// `1/(1-p)`.
fn dropout<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let scale = T::from_f64(1.0 / keep);
    let mask = Tensor::vector(
        (0..tape.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect(),
    );
    let mask = tape.leaf(mask);
    tape.mul(x, mask)
}
