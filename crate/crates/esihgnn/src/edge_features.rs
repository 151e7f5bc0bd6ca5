//! Edge representation sources.
//!
//! Relations with event-node sources can carry externally supplied
//! knowledge vectors (per edge); relations with state-node sources carry
//! one trainable shared vector per relation. Two ablation overrides
//! replace everything with trainable vectors or a constant 0/1
//! indicator.

use crate::error::{Error, Result};
use crate::graph::{Edge, NodeKind, NodeRef, RelationType};
use crate::nn::init_vector;
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::BufRead;

pub const DEFAULT_EXTERNAL_DIM: usize = 768;
pub const DEFAULT_TRAINABLE_DIM: usize = 300;

/// Corpus-level switch selecting how edges are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EdgeMode {
    /// External vectors for event-source relations when a knowledge file
    /// is loaded (trainable fallback otherwise); trainable shared
    /// vectors for state-source relations.
    #[default]
    Default,
    /// All eight relations use trainable shared vectors.
    Trainable,
    /// All edges carry the one-dimensional constant feature `(1.0)`.
    Binary01,
}

impl EdgeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(EdgeMode::Default),
            "trainable" => Ok(EdgeMode::Trainable),
            "binary01" => Ok(EdgeMode::Binary01),
            other => Err(Error::Usage(format!("unknown edge mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
enum RelationSource {
    External,
    TrainableShared(ParamId),
    Binary01,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct ExternalKey {
    dialogue_id: String,
    src: NodeRef,
    dst: NodeRef,
    relation: RelationType,
}

/// Resolved feature of one edge.
pub enum EdgeFeature<'a> {
    External(&'a [f64]),
    Trainable(ParamId),
    Binary,
}

/// Maps every builder-producible edge to exactly one feature vector.
pub struct EdgeFeatureTable {
    sources: HashMap<RelationType, RelationSource>,
    external: HashMap<ExternalKey, Vec<f64>>,
    pub external_dim: usize,
    pub trainable_dim: usize,
}

impl EdgeFeatureTable {
    /// Assemble the table for the active relations. Trainable vectors
    /// are drawn from `uniform(-0.1, 0.1)` under `seed` and registered
    /// on the store.
    pub fn build<T: Real>(
        mode: EdgeMode,
        relations: impl IntoIterator<Item = RelationType>,
        store: &mut ParamStore<T>,
        trainable_dim: usize,
        seed: u64,
        external: Option<ExternalVectors>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sources = HashMap::new();
        let (ext_map, external_dim) = match external {
            Some(v) => (v.records, v.dim),
            None => (HashMap::new(), DEFAULT_EXTERNAL_DIM),
        };
        let has_external = !ext_map.is_empty();

        for r in relations {
            let source = match mode {
                EdgeMode::Binary01 => RelationSource::Binary01,
                EdgeMode::Trainable => RelationSource::TrainableShared(init_shared(
                    store,
                    r,
                    trainable_dim,
                    &mut rng,
                )),
                EdgeMode::Default => {
                    if r.source_kind() == NodeKind::Event && has_external {
                        RelationSource::External
                    } else {
                        RelationSource::TrainableShared(init_shared(
                            store,
                            r,
                            trainable_dim,
                            &mut rng,
                        ))
                    }
                }
            };
            sources.insert(r, source);
        }
        EdgeFeatureTable { sources, external: ext_map, external_dim, trainable_dim }
    }

    /// Feature dimension seen by the attention transform for this
    /// relation.
    pub fn feature_dim(&self, r: RelationType) -> usize {
        match self.sources.get(&r) {
            Some(RelationSource::External) => self.external_dim,
            Some(RelationSource::TrainableShared(_)) => self.trainable_dim,
            Some(RelationSource::Binary01) => 1,
            None => 0,
        }
    }

    /// Trainable parameter ids owned by this table.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<(RelationType, ParamId)> = self
            .sources
            .iter()
            .filter_map(|(r, s)| match s {
                RelationSource::TrainableShared(id) => Some((*r, *id)),
                _ => None,
            })
            .collect();
        ids.sort_by_key(|(r, _)| *r);
        ids.into_iter().map(|(_, id)| id).collect()
    }

    /// Resolve one edge to its feature.
    pub fn lookup(&self, dialogue_id: &str, edge: &Edge) -> Result<EdgeFeature<'_>> {
        match self.sources.get(&edge.relation) {
            Some(RelationSource::Binary01) => Ok(EdgeFeature::Binary),
            Some(RelationSource::TrainableShared(id)) => Ok(EdgeFeature::Trainable(*id)),
            Some(RelationSource::External) => {
                let key = ExternalKey {
                    dialogue_id: dialogue_id.to_string(),
                    src: edge.src,
                    dst: edge.dst,
                    relation: edge.relation,
                };
                match self.external.get(&key) {
                    Some(v) => Ok(EdgeFeature::External(v)),
                    None => Err(Error::MissingFeature {
                        edge: format!(
                            "{dialogue_id}: {} -> {} ({})",
                            edge.src, edge.dst, edge.relation
                        ),
                    }),
                }
            }
            None => Err(Error::Domain {
                op: "edge_lookup",
                detail: format!("relation {} not active", edge.relation),
            }),
        }
    }
}

fn init_shared<T: Real>(
    store: &mut ParamStore<T>,
    r: RelationType,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    store.register(format!("edge.{}", r.name()), init_vector(dim, -0.1, 0.1, rng))
}

/// Parsed contents of a knowledge-vector file.
pub struct ExternalVectors {
    records: HashMap<ExternalKey, Vec<f64>>,
    pub dim: usize,
}

impl ExternalVectors {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Load a knowledge-vector file.
///
/// Line 1 is the header `dim D`. Every following non-empty line is one
/// record: `dialogue_id src_turn src_kind dst_turn dst_kind relation`
/// followed by `D` whitespace-separated decimal floats.
pub fn load_external(reader: impl BufRead) -> Result<ExternalVectors> {
    let mut lines = reader.lines().enumerate();
    let dim = match lines.next() {
        Some((_, Ok(header))) => {
            let parts: Vec<&str> = header.split_whitespace().collect();
            match parts.as_slice() {
                ["dim", d] => d.parse::<usize>().map_err(|_| Error::Parse {
                    line: 1,
                    detail: format!("bad dimension '{d}'"),
                })?,
                _ => {
                    return Err(Error::Parse {
                        line: 1,
                        detail: "expected header 'dim D'".into(),
                    })
                }
            }
        }
        _ => return Err(Error::Parse { line: 1, detail: "missing header".into() }),
    };
    if dim == 0 {
        return Err(Error::Parse { line: 1, detail: "dimension must be >= 1".into() });
    }

    let mut records = HashMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 + dim {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("expected {} fields, got {}", 6 + dim, parts.len()),
            });
        }
        let parse_turn = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: lineno,
                detail: format!("bad turn index '{s}'"),
            })
        };
        let parse_kind = |s: &str| match s {
            "event" => Ok(NodeKind::Event),
            "state" => Ok(NodeKind::State),
            _ => Err(Error::Parse { line: lineno, detail: format!("bad node kind '{s}'") }),
        };
        let relation = RelationType::parse(parts[5]).ok_or_else(|| Error::Parse {
            line: lineno,
            detail: format!("unknown relation '{}'", parts[5]),
        })?;
        let mut values = Vec::with_capacity(dim);
        for v in &parts[6..] {
            values.push(v.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                detail: format!("bad float '{v}'"),
            })?);
        }
        let key = ExternalKey {
            dialogue_id: parts[0].to_string(),
            src: NodeRef { turn: parse_turn(parts[1])?, kind: parse_kind(parts[2])? },
            dst: NodeRef { turn: parse_turn(parts[3])?, kind: parse_kind(parts[4])? },
            relation,
        };
        records.insert(key, values);
    }
    Ok(ExternalVectors { records, dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeRef, RelationType::*};
    use crate::tensor::Tensor;

    fn edge(src: NodeRef, dst: NodeRef, r: RelationType) -> Edge {
        Edge { src, dst, relation: r, position: (src.turn, 1) }
    }

    #[test]
    fn binary_mode_is_constant_indicator() {
        let mut store = ParamStore::<f64>::new();
        let table =
            EdgeFeatureTable::build(EdgeMode::Binary01, RelationType::ALL, &mut store, 300, 0, None);
        let e = edge(NodeRef::event(0), NodeRef::event(1), OWant);
        assert!(matches!(table.lookup("d", &e).unwrap(), EdgeFeature::Binary));
        assert_eq!(table.feature_dim(OWant), 1);
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn trainable_shared_by_relation() {
        let mut store = ParamStore::<f64>::new();
        let table =
            EdgeFeatureTable::build(EdgeMode::Trainable, RelationType::ALL, &mut store, 300, 5, None);
        let e1 = edge(NodeRef::state(0), NodeRef::state(2), XDepend);
        let e2 = edge(NodeRef::state(1), NodeRef::state(3), XDepend);
        let id1 = match table.lookup("d", &e1).unwrap() {
            EdgeFeature::Trainable(id) => id,
            _ => panic!("expected trainable"),
        };
        let id2 = match table.lookup("d", &e2).unwrap() {
            EdgeFeature::Trainable(id) => id,
            _ => panic!("expected trainable"),
        };
        assert_eq!(id1, id2);
        assert_eq!(store.len(), 8);
        for id in table.trainable_ids() {
            assert!(store.value(id).data().iter().all(|v| (-0.1..0.1).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_vectors() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        let t1 =
            EdgeFeatureTable::build(EdgeMode::Trainable, RelationType::ALL, &mut s1, 16, 9, None);
        let t2 =
            EdgeFeatureTable::build(EdgeMode::Trainable, RelationType::ALL, &mut s2, 16, 9, None);
        for (a, b) in t1.trainable_ids().into_iter().zip(t2.trainable_ids()) {
            assert_eq!(s1.value(a), s2.value(b));
        }
    }

    #[test]
    fn default_mode_splits_by_source_kind() {
        let file = "dim 3\nd1 0 event 1 event oWant 0.1 0.2 0.3\n";
        let ext = load_external(file.as_bytes()).unwrap();
        let mut store = ParamStore::<f64>::new();
        let table = EdgeFeatureTable::build(
            EdgeMode::Default,
            RelationType::ALL,
            &mut store,
            300,
            0,
            Some(ext),
        );
        // event-source relation resolves to the stored vector exactly
        let e = edge(NodeRef::event(0), NodeRef::event(1), OWant);
        match table.lookup("d1", &e).unwrap() {
            EdgeFeature::External(v) => assert_eq!(v, &[0.1, 0.2, 0.3]),
            _ => panic!("expected external"),
        }
        // state-source relations stay trainable
        let e = edge(NodeRef::state(0), NodeRef::event(1), ODrive);
        assert!(matches!(table.lookup("d1", &e).unwrap(), EdgeFeature::Trainable(_)));
        // missing external key names the edge
        let e = edge(NodeRef::event(0), NodeRef::event(2), XWant);
        match table.lookup("d1", &e) {
            Err(Error::MissingFeature { edge }) => assert!(edge.contains("xWant")),
            other => panic!("expected missing feature, got {:?}", other.err()),
        }
    }

    #[test]
    fn default_without_file_falls_back_to_trainable() {
        let mut store = ParamStore::<f64>::new();
        let table =
            EdgeFeatureTable::build(EdgeMode::Default, RelationType::ALL, &mut store, 300, 0, None);
        let e = edge(NodeRef::event(0), NodeRef::event(1), OWant);
        assert!(matches!(table.lookup("d", &e).unwrap(), EdgeFeature::Trainable(_)));
    }

    #[test]
    fn load_external_rejects_bad_records() {
        // record with wrong float count for the declared dim
        let mixed = "dim 3\nd1 0 event 1 event oWant 0.1 0.2\n";
        match load_external(mixed.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other.err()),
        }
        assert!(load_external("nope\n".as_bytes()).is_err());
        // empty body is fine: zero records
        let empty = load_external("dim 4\n".as_bytes()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn trainable_vector_moves_under_gradient() {
        let mut store = ParamStore::<f64>::new();
        let table =
            EdgeFeatureTable::build(EdgeMode::Trainable, RelationType::ALL, &mut store, 4, 1, None);
        let id = table.trainable_ids()[0];
        let before = store.value(id).clone();
        // one plain gradient step against loss = v·v
        let mut tape = crate::tape::Tape::new();
        let v = tape.param(&store, id);
        let loss = tape.dot(v, v).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let grad = store.grad(id).clone();
        store.value_mut(id).axpy(-0.1, &grad);
        assert_ne!(&before, store.value(id));
        let _ = Tensor::<f64>::zeros(vec![1]);
    }
}
