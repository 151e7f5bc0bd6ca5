//! Optimization loop, evaluation, and the ablation harness.

use crate::corpus::{Corpus, Split};
use crate::edge_features::{EdgeMode, ExternalVectors, DEFAULT_TRAINABLE_DIM};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Conversation, NodeKind, RelationSet, RelationType};
use crate::metrics::{Confusion, MetricSpec};
use crate::model::{ForwardOpts, Model, ModelConfig};
use crate::tape::{ParamStore, Tape};
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Decoupled-weight-decay adaptive-moment optimizer.
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect(),
            v: store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect(),
        }
    }

    /// One update from the accumulated gradients. Moment arithmetic runs
    /// in f64 regardless of the parameter precision.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = store.grad(id).clone();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let value = store.value_mut(id);
            for i in 0..value.len() {
                let g = grad.at(i).to_f64();
                let mi = self.beta1 * m.at(i).to_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.at(i).to_f64() + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = T::from_f64(mi);
                v.data_mut()[i] = T::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let p = value.at(i).to_f64();
                value.data_mut()[i] =
                    T::from_f64(p - self.lr * (update + self.weight_decay * p));
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) {
    let total: f64 = store
        .ids()
        .map(|id| store.grad(id).sq_norm().to_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = T::from_f64(max_norm / total);
        for id in store.ids().collect::<Vec<_>>() {
            store.grad_mut(id).scale_in_place(scale);
        }
    }
}

fn default_lr() -> f64 {
    3e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_layers() -> usize {
    4
}
fn default_omega() -> usize {
    1
}
fn default_hidden() -> usize {
    300
}
fn default_dropout() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_grad_clip() -> Option<f64> {
    Some(5.0)
}
fn default_patience() -> usize {
    20
}
fn default_metric() -> MetricSpec {
    MetricSpec::weighted()
}
fn default_edge_mode() -> String {
    "default".into()
}
fn default_edge_dim() -> usize {
    DEFAULT_TRAINABLE_DIM
}

/// Full training configuration. Unknown keys in a config file are
/// rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Conversations per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_omega")]
    pub omega: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Relations removed from the active set (ablation).
    #[serde(default)]
    pub ablate_relations: Vec<String>,
    #[serde(default = "default_edge_mode")]
    pub edge_mode: String,
    #[serde(default = "default_edge_dim")]
    pub edge_trainable_dim: usize,
    #[serde(default = "default_true")]
    pub intra_esi: bool,
    #[serde(default)]
    pub leaky_relu: bool,
    #[serde(default)]
    pub gru_swapped: bool,
    #[serde(default = "default_metric")]
    pub metric: MetricSpec,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.hidden == 0 || self.omega == 0 {
            return Err(Error::Usage("batch_size, epochs, hidden, omega must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage("dropout must be in [0, 1)".into()));
        }
        self.relations()?;
        Ok(())
    }

    /// Active relation set after ablation.
    pub fn relations(&self) -> Result<RelationSet> {
        let mut set = RelationSet::all();
        for name in &self.ablate_relations {
            let r = RelationType::parse(name)
                .ok_or_else(|| Error::Usage(format!("unknown relation '{name}'")))?;
            set = set.without(r);
        }
        Ok(set)
    }

    pub fn model_config(&self, corpus: &Corpus) -> Result<ModelConfig> {
        Ok(ModelConfig {
            hidden: self.hidden,
            event_dim: corpus.header.feature_dim,
            onehot_dim: corpus.header.speakers_onehot_dim,
            classes: corpus.header.num_classes,
            layers: self.layers,
            omega: self.omega,
            intra_esi: self.intra_esi,
            leaky_relu: self.leaky_relu,
            gru_swapped: self.gru_swapped,
            relations: self.relations()?,
            edge_mode: EdgeMode::parse(&self.edge_mode)?,
            edge_trainable_dim: self.edge_trainable_dim,
            dropout: self.dropout,
        })
    }
}

/// Config file: training settings plus paths.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub corpus: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_vectors: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_out: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub epochs: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test_metric: f64,
    pub train_metric: f64,
    pub seed: u64,
    pub config: TrainConfig,
    pub wall_time_s: f64,
    pub param_count: usize,
}

/// Train a model on the corpus' train split, selecting by validation
/// metric. Deterministic under a fixed seed.
pub fn train<T: Real>(
    config: &TrainConfig,
    corpus: &Corpus,
    external: Option<ExternalVectors>,
) -> Result<(Model<T>, RunReport)> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Usage("train split is empty".into()));
    }
    let start = Instant::now();
    let model_config = config.model_config(corpus)?;
    let mut model: Model<T> = Model::new(model_config, config.seed, external);
    let mut opt = AdamW::new(&model.store, config.learning_rate, config.weight_decay);

    // graphs are static per conversation; build once
    let graphs: Vec<_> = corpus
        .train
        .iter()
        .map(|c| build_graph(c, config.omega))
        .collect::<Result<_>>()?;

    let val_split: &[Conversation] =
        if corpus.val.is_empty() { &corpus.train } else { &corpus.val };

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x5851_f42d));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            model.store.zero_grads();
            for &ci in chunk {
                let conv = &corpus.train[ci];
                let mut opts = if config.dropout > 0.0 {
                    ForwardOpts::training(ChaCha8Rng::seed_from_u64(
                        config.seed ^ ((epoch as u64) << 32) ^ (ci as u64 + 1),
                    ))
                } else {
                    ForwardOpts::inference()
                };
                let fwd = model.forward_on_graph(conv, &graphs[ci], &mut opts)?;
                let loss = fwd.loss.ok_or_else(|| Error::Usage(format!(
                    "dialogue {} has no labels",
                    conv.dialogue_id
                )))?;
                let lv = fwd.tape.value(loss).at(0).to_f64();
                if !lv.is_finite() {
                    return Err(Error::NonFinite { op: "train_loss" });
                }
                epoch_loss += lv;
                seen += 1;
                fwd.tape.backward(loss, &mut model.store)?;
            }
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut model.store, max_norm);
            }
            opt.step(&mut model.store);
        }
        let train_loss = epoch_loss / seen.max(1) as f64;

        let val_metric = evaluate(&model, val_split, &config.metric)?;
        epochs.push(EpochStat { epoch, train_loss, val_metric });

        // ties break toward the earlier epoch
        let improved = match &best {
            Some((_, b, _)) => val_metric > *b,
            None => true,
        };
        if improved {
            let snapshot = model.store.ids().map(|id| model.store.value(id).clone()).collect();
            best = Some((epoch, val_metric, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_metric, snapshot) = best.expect("at least one epoch ran");
    for (id, value) in model.store.ids().collect::<Vec<_>>().into_iter().zip(snapshot) {
        *model.store.value_mut(id) = value;
    }

    let test_metric = if corpus.test.is_empty() {
        best_val_metric
    } else {
        evaluate(&model, &corpus.test, &config.metric)?
    };
    let train_metric = evaluate(&model, &corpus.train, &config.metric)?;

    let report = RunReport {
        epochs,
        best_epoch,
        best_val_metric,
        test_metric,
        train_metric,
        seed: config.seed,
        config: config.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        param_count: model.store.scalar_count(),
    };
    Ok((model, report))
}

/// Score a model over labeled conversations.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    convs: &[Conversation],
    metric: &MetricSpec,
) -> Result<f64> {
    let mut cm = Confusion::new(model.config.classes);
    for conv in convs {
        let preds = model.predict(conv)?;
        for (t, &p) in conv.turns.iter().zip(&preds) {
            if let Some(gold) = t.label {
                cm.record(gold, p);
            }
        }
    }
    cm.score(metric)
}

/// Context-free baseline: softmax regression over
/// (feature ⊕ speaker one-hot) per utterance, ignoring all history.
pub fn linear_probe(
    corpus: &Corpus,
    eval_split: Split,
    metric: &MetricSpec,
    seed: u64,
    epochs: usize,
) -> Result<f64> {
    let header = &corpus.header;
    let in_dim = header.feature_dim + header.speakers_onehot_dim;
    let classes = header.num_classes;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = store.register("probe.w", crate::nn::init_matrix(classes, in_dim, &mut rng));
    let b = store.register("probe.b", Tensor::zeros(vec![classes]));

    let sample = |conv: &Conversation, i: usize| -> (Vec<f64>, Option<usize>) {
        let mut x: Vec<f64> = conv.turns[i].feature.iter().map(|&v| v as f64).collect();
        let mut onehot = vec![0.0; header.speakers_onehot_dim];
        onehot[conv.speaker_index(i)] = 1.0;
        x.extend(onehot);
        (x, conv.turns[i].label)
    };

    let mut opt = AdamW::new(&store, 0.05, 1e-4);
    for _ in 0..epochs {
        store.zero_grads();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let bn = tape.param(&store, b);
        let mut losses = Vec::new();
        for conv in &corpus.train {
            for i in 0..conv.len() {
                let (x, label) = sample(conv, i);
                if let Some(label) = label {
                    let xn = tape.leaf(Tensor::vector(x));
                    let z = tape.matvec(wn, xn)?;
                    let z = tape.add(z, bn)?;
                    losses.push(tape.nll_loss(z, label)?);
                }
            }
        }
        if losses.is_empty() {
            return Err(Error::Usage("no labels for probe".into()));
        }
        let stacked = tape.concat(&losses)?;
        let total = tape.sum(stacked)?;
        let loss = tape.scale(total, 1.0 / losses.len() as f64)?;
        tape.backward(loss, &mut store)?;
        opt.step(&mut store);
    }

    let mut cm = Confusion::new(classes);
    for conv in corpus.split(eval_split) {
        for i in 0..conv.len() {
            let (x, label) = sample(conv, i);
            if let Some(gold) = label {
                let mut tape = Tape::new();
                let wn = tape.param(&store, w);
                let bn = tape.param(&store, b);
                let xn = tape.leaf(Tensor::vector(x));
                let z = tape.matvec(wn, xn)?;
                let z = tape.add(z, bn)?;
                cm.record(gold, tape.value(z).argmax());
            }
        }
    }
    cm.score(metric)
}

/// One row of the ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub val_metric: f64,
    pub test_metric: f64,
    pub train_loss_final: f64,
    pub edges_total: usize,
    pub param_count: usize,
    pub wall_time_s: f64,
}

/// The standard ablation grid: window sweep, the four relation-group
/// removals, both edge-representation overrides, and the intra-turn
/// interaction removal. All rows share the base seed.
pub fn standard_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut grid = Vec::new();
    for omega in [1usize, 2, 3] {
        let name = if omega == 1 {
            "full".to_string()
        } else {
            format!("omega={omega}")
        };
        grid.push((name, TrainConfig { omega, ..base.clone() }));
    }
    let groups = [
        ("-{event-to-event}", NodeKind::Event, NodeKind::Event),
        ("-{state-to-event}", NodeKind::State, NodeKind::Event),
        ("-{event-to-state}", NodeKind::Event, NodeKind::State),
        ("-{state-to-state}", NodeKind::State, NodeKind::State),
    ];
    for (name, src, dst) in groups {
        let removed: Vec<String> = RelationType::ALL
            .iter()
            .filter(|r| r.source_kind() == src && r.target_kind() == dst)
            .map(|r| r.name().to_string())
            .collect();
        grid.push((name.to_string(), TrainConfig { ablate_relations: removed, ..base.clone() }));
    }
    grid.push(("trainable".into(), TrainConfig { edge_mode: "trainable".into(), ..base.clone() }));
    grid.push(("0/1".into(), TrainConfig { edge_mode: "binary01".into(), ..base.clone() }));
    grid.push(("-IntraESI".into(), TrainConfig { intra_esi: false, ..base.clone() }));
    grid
}

/// Run a grid of configurations over one corpus.
pub fn ablate<T: Real>(
    grid: &[(String, TrainConfig)],
    corpus: &Corpus,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for (name, config) in grid {
        let relations = config.relations()?;
        let edges_total: usize = corpus
            .all()
            .map(|c| {
                build_graph(c, config.omega).map(|g| g.filtered(relations).edges.len())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        let (_, report) = train::<T>(config, corpus, None)?;
        rows.push(AblationRow {
            name: name.clone(),
            val_metric: report.best_val_metric,
            test_metric: report.test_metric,
            train_loss_final: report.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
            edges_total,
            param_count: report.param_count,
            wall_time_s: report.wall_time_s,
        });
    }
    Ok(rows)
}

/// Aligned-column text rendering of an ablation table.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>10} {:>10} {:>12} {:>10} {:>12} {:>10}\n",
        "config", "val", "test", "final loss", "edges", "params", "time(s)"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>10.4} {:>10.4} {:>12.4} {:>10} {:>12} {:>10.2}\n",
            r.name, r.val_metric, r.test_metric, r.train_loss_final, r.edges_total,
            r.param_count, r.wall_time_s
        ));
    }
    out
}
