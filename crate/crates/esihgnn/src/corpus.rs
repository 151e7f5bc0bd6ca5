//! Corpus ingestion (JSON-lines plus optional binary feature sidecar),
//! the deterministic toy featurizer, and the synthetic corpus
//! generator.
//!
//! A corpus file starts with one header line:
//!
//! ```json
//! {"speakers_onehot_dim": 2, "num_classes": 2, "feature_dim": 16}
//! ```
//!
//! Every following line is one conversation:
//!
//! ```json
//! {"dialogue_id": "d0", "split": "train", "utterances":
//!   [{"speaker": "A", "label": 1, "feature": [0.0, 1.0]}]}
//! ```
//!
//! Each utterance resolves exactly one feature source: inline `feature`,
//! `feature_ref` (float offset into the sidecar), a sidecar manifest
//! entry for (dialogue_id, turn), or the toy featurizer over `text`.

use crate::error::{Error, Result};
use crate::graph::{Conversation, Utterance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub speakers_onehot_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Path (relative to the corpus file) of the sidecar manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
    /// Labels the corpus wants excluded from micro-F1 pooling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationLine {
    dialogue_id: String,
    #[serde(default)]
    split: Split,
    utterances: Vec<UtteranceLine>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_ref: Option<usize>,
}

/// Sidecar manifest: one record per stored feature row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub bin: String,
    pub rows: Vec<SidecarRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SidecarRow {
    pub dialogue_id: String,
    pub turn: usize,
    /// Float offset into the binary file.
    pub offset: usize,
    pub dim: usize,
}

struct Sidecar {
    floats: Vec<f32>,
    by_turn: HashMap<(String, usize), (usize, usize)>,
}

fn load_sidecar(manifest_path: &Path) -> Result<Sidecar> {
    let manifest: SidecarManifest = serde_json::from_reader(File::open(manifest_path)?)?;
    let bin_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.bin);
    let mut bytes = Vec::new();
    File::open(&bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse { line: 0, detail: "sidecar length not a multiple of 4".into() });
    }
    let floats = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let by_turn = manifest
        .rows
        .into_iter()
        .map(|r| ((r.dialogue_id, r.turn), (r.offset, r.dim)))
        .collect();
    Ok(Sidecar { floats, by_turn })
}

/// Parsed corpus with its three splits.
pub struct Corpus {
    pub header: CorpusHeader,
    pub train: Vec<Conversation>,
    pub val: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Conversation] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Conversation> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn summary(&self) -> CorpusSummary {
        let convs: Vec<&Conversation> = self.all().collect();
        let dialogues = convs.len();
        let utterances: usize = convs.iter().map(|c| c.len()).sum();
        let avg_len = if dialogues == 0 { 0.0 } else { utterances as f64 / dialogues as f64 };
        let avg_speakers = if dialogues == 0 {
            0.0
        } else {
            convs.iter().map(|c| c.speaker_count as f64).sum::<f64>() / dialogues as f64
        };
        CorpusSummary {
            dialogues,
            utterances,
            avg_len,
            avg_speakers,
            per_split: [
                (self.train.len(), self.train.iter().map(|c| c.len()).sum()),
                (self.val.len(), self.val.iter().map(|c| c.len()).sum()),
                (self.test.len(), self.test.iter().map(|c| c.len()).sum()),
            ],
        }
    }
}

/// The A.L./A.S.-style ingestion summary.
#[derive(Debug, Serialize)]
pub struct CorpusSummary {
    pub dialogues: usize,
    pub utterances: usize,
    pub avg_len: f64,
    pub avg_speakers: f64,
    /// (dialogues, utterances) for train/val/test.
    pub per_split: [(usize, usize); 3],
}

/// Parse a corpus file, resolving every feature source.
pub fn ingest(path: &Path) -> Result<Corpus> {
    let file = File::open(path)
        .map_err(|e| Error::Usage(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: CorpusHeader = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: 1, detail: format!("bad header: {e}") })?,
        _ => return Err(Error::Usage(format!("corpus {} is empty", path.display()))),
    };

    let sidecar = match &header.sidecar {
        Some(rel) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            Some(load_sidecar(&p)?)
        }
        None => None,
    };

    let mut corpus = Corpus { header: header.clone(), train: vec![], val: vec![], test: vec![] };
    let mut any = false;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let parsed: ConversationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, detail: e.to_string() })?;
        let mut turns = Vec::with_capacity(parsed.utterances.len());
        for (ti, u) in parsed.utterances.into_iter().enumerate() {
            if let Some(l) = u.label {
                if l >= header.num_classes {
                    return Err(Error::Parse {
                        line: lineno,
                        detail: format!("label {l} >= num_classes {}", header.num_classes),
                    });
                }
            }
            let feature = resolve_feature(
                &header,
                sidecar.as_ref(),
                &parsed.dialogue_id,
                ti,
                &u,
                lineno,
            )?;
            turns.push(Utterance {
                turn_index: ti,
                speaker_id: u.speaker,
                text: u.text,
                label: u.label,
                feature,
            });
        }
        let conv = Conversation::new(parsed.dialogue_id, turns)?;
        match parsed.split {
            Split::Train => corpus.train.push(conv),
            Split::Val => corpus.val.push(conv),
            Split::Test => corpus.test.push(conv),
        }
    }
    if !any {
        return Err(Error::Usage(format!("corpus {} has no conversations", path.display())));
    }
    Ok(corpus)
}

fn resolve_feature(
    header: &CorpusHeader,
    sidecar: Option<&Sidecar>,
    dialogue_id: &str,
    turn: usize,
    u: &UtteranceLine,
    lineno: usize,
) -> Result<Vec<f32>> {
    if let Some(f) = &u.feature {
        if f.len() != header.feature_dim {
            return Err(Error::Parse {
                line: lineno,
                detail: format!(
                    "{dialogue_id} turn {turn}: inline feature dim {} != {}",
                    f.len(),
                    header.feature_dim
                ),
            });
        }
        return Ok(f.clone());
    }
    if let Some(off) = u.feature_ref {
        let sc = sidecar.ok_or_else(|| Error::Parse {
            line: lineno,
            detail: format!("{dialogue_id} turn {turn}: feature_ref without sidecar"),
        })?;
        let end = off + header.feature_dim;
        if end > sc.floats.len() {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("{dialogue_id} turn {turn}: feature_ref {off} out of range"),
            });
        }
        return Ok(sc.floats[off..end].to_vec());
    }
    if let Some(sc) = sidecar {
        if let Some(&(off, dim)) = sc.by_turn.get(&(dialogue_id.to_string(), turn)) {
            if dim != header.feature_dim || off + dim > sc.floats.len() {
                return Err(Error::Parse {
                    line: lineno,
                    detail: format!("{dialogue_id} turn {turn}: bad sidecar row"),
                });
            }
            return Ok(sc.floats[off..off + dim].to_vec());
        }
    }
    if let Some(text) = &u.text {
        return Ok(toy_featurize(text, header.feature_dim, 0));
    }
    Err(Error::Parse {
        line: lineno,
        detail: format!("{dialogue_id} turn {turn}: no feature source"),
    })
}

/// Serialize a corpus back to its JSONL form (features inline).
pub fn export(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    let mut header = corpus.header.clone();
    header.sidecar = None;
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for (split, convs) in [
        (Split::Train, &corpus.train),
        (Split::Val, &corpus.val),
        (Split::Test, &corpus.test),
    ] {
        for c in convs {
            let line = ConversationLine {
                dialogue_id: c.dialogue_id.clone(),
                split,
                utterances: c
                    .turns
                    .iter()
                    .map(|t| UtteranceLine {
                        speaker: t.speaker_id.clone(),
                        label: t.label,
                        text: t.text.clone(),
                        feature: Some(t.feature.clone()),
                        feature_ref: None,
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic hashed bag-of-words embedding. Tokens are lowercased
/// and whitespace-split; each token hashes to an (index, sign) pair;
/// the accumulated vector is L2-normalized. Empty text maps to zero.
pub fn toy_featurize(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut v = vec![0.0f32; dim];
    for token in text.to_lowercase().split_whitespace() {
        let h = fnv1a(token.as_bytes(), seed);
        let idx = (h % dim as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub dialogues: usize,
    pub max_turns: usize,
    pub speakers: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dialogues", self.dialogues),
            ("max-turns", self.max_turns),
            ("speakers", self.speakers),
            ("classes", self.classes),
            ("feature-dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::Usage(format!("{name} must be >= 1")));
            }
        }
        if self.feature_dim < self.classes {
            return Err(Error::Usage("feature-dim must be >= classes".into()));
        }
        Ok(())
    }
}

/// Generate a corpus whose labels mix a planted feature direction with
/// a contagion rule.
///
/// Each utterance is either *clear* (strong component along its class
/// direction; the label is readable from the feature alone) or
/// *ambiguous* (weak component along a decoy direction; the true label
/// copies the previous utterance's label). A context-free classifier
/// tops out near clear-fraction + chance on the rest; a model that sees
/// the conversation history can recover every label.
///
/// The requested `dialogues` form the train split; half as many (rounded
/// up) go to val and to test each.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // orthogonal-ish class directions: disjoint index blocks
    let block = spec.feature_dim / spec.classes;
    let direction = |class: usize, x: &mut Vec<f32>, strength: f32| {
        let start = class * block;
        for i in start..start + block.max(1).min(spec.feature_dim - start) {
            x[i] += strength;
        }
    };

    let header = CorpusHeader {
        speakers_onehot_dim: spec.speakers,
        num_classes: spec.classes,
        feature_dim: spec.feature_dim,
        sidecar: None,
        excluded_labels: vec![],
    };

    let n_val = spec.dialogues.div_ceil(2);
    let n_test = spec.dialogues.div_ceil(2);
    let mut corpus = Corpus { header, train: vec![], val: vec![], test: vec![] };

    let make_dialogue = |id: usize, rng: &mut ChaCha8Rng| -> Result<Conversation> {
        let n_turns = if spec.max_turns == 1 { 1 } else { rng.gen_range(2..=spec.max_turns.max(2)) };
        let mut turns = Vec::with_capacity(n_turns);
        let mut prev_label: Option<usize> = None;
        for t in 0..n_turns {
            // keep at least two speakers active when possible
            let speaker = if spec.speakers > 1 && t == 1 {
                let first: usize = 0;
                let mut s = rng.gen_range(0..spec.speakers);
                if s == first {
                    s = (s + 1) % spec.speakers;
                }
                s
            } else if t == 0 {
                0
            } else {
                rng.gen_range(0..spec.speakers)
            };
            let mut x: Vec<f32> = (0..spec.feature_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let candidate = rng.gen_range(0..spec.classes);
            let ambiguous = prev_label.is_some() && rng.gen_bool(0.5);
            let label = if ambiguous {
                direction(candidate, &mut x, 0.15);
                prev_label.unwrap()
            } else {
                direction(candidate, &mut x, 1.0);
                candidate
            };
            prev_label = Some(label);
            turns.push(Utterance {
                turn_index: t,
                speaker_id: format!("S{speaker}"),
                text: None,
                label: Some(label),
                feature: x,
            });
        }
        Conversation::new(format!("syn{id}"), turns)
    };

    let mut id = 0;
    for _ in 0..spec.dialogues {
        corpus.train.push(make_dialogue(id, &mut rng)?);
        id += 1;
    }
    for _ in 0..n_val {
        corpus.val.push(make_dialogue(id, &mut rng)?);
        id += 1;
    }
    for _ in 0..n_test {
        corpus.test.push(make_dialogue(id, &mut rng)?);
        id += 1;
    }
    Ok(corpus)
}

/// Generate and write a synthetic corpus file.
pub fn gen_synthetic_to_file(spec: &SynthSpec, path: &Path) -> Result<()> {
    let corpus = gen_synthetic(spec)?;
    let text = export(&corpus)?;
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Write a corpus with features in a binary sidecar instead of inline.
pub fn export_with_sidecar(corpus: &Corpus, corpus_path: &Path) -> Result<()> {
    let stem = corpus_path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    let manifest_name = format!("{stem}.manifest.json");
    let bin_name = format!("{stem}.bin");
    let dir: PathBuf = corpus_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut floats: Vec<f32> = Vec::new();
    let mut rows = Vec::new();
    let mut body = String::new();
    let mut header = corpus.header.clone();
    header.sidecar = Some(manifest_name.clone());
    body.push_str(&serde_json::to_string(&header)?);
    body.push('\n');
    for (split, convs) in [
        (Split::Train, &corpus.train),
        (Split::Val, &corpus.val),
        (Split::Test, &corpus.test),
    ] {
        for c in convs {
            for t in &c.turns {
                rows.push(SidecarRow {
                    dialogue_id: c.dialogue_id.clone(),
                    turn: t.turn_index,
                    offset: floats.len(),
                    dim: t.feature.len(),
                });
                floats.extend_from_slice(&t.feature);
            }
            let line = ConversationLine {
                dialogue_id: c.dialogue_id.clone(),
                split,
                utterances: c
                    .turns
                    .iter()
                    .map(|t| UtteranceLine {
                        speaker: t.speaker_id.clone(),
                        label: t.label,
                        text: t.text.clone(),
                        feature: None,
                        feature_ref: None,
                    })
                    .collect(),
            };
            body.push_str(&serde_json::to_string(&line)?);
            body.push('\n');
        }
    }
    File::create(corpus_path)?.write_all(body.as_bytes())?;
    let manifest = SidecarManifest { bin: bin_name.clone(), rows };
    serde_json::to_writer(File::create(dir.join(&manifest_name))?, &manifest)?;
    let mut bin = File::create(dir.join(&bin_name))?;
    for f in floats {
        bin.write_all(&f.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_corpus(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn ingest_reports_summary_shape() {
        let dir = tempdir().unwrap();
        let mut content = String::from(
            r#"{"speakers_onehot_dim":2,"num_classes":2,"feature_dim":2}"#,
        );
        content.push('\n');
        for d in 0..3 {
            content.push_str(&format!(
                r#"{{"dialogue_id":"d{d}","utterances":[{{"speaker":"A","label":0,"feature":[0.0,1.0]}},{{"speaker":"B","label":1,"feature":[1.0,0.0]}}]}}"#
            ));
            content.push('\n');
        }
        let p = write_corpus(dir.path(), "c.jsonl", &content);
        let corpus = ingest(&p).unwrap();
        let s = corpus.summary();
        assert_eq!(s.dialogues, 3);
        assert_eq!(s.utterances, 6);
        assert!((s.avg_len - 2.0).abs() < 1e-12);
        assert!((s.avg_speakers - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ingest_rejects_empty_and_bad_lines() {
        let dir = tempdir().unwrap();
        let p = write_corpus(dir.path(), "empty.jsonl", "");
        assert!(matches!(ingest(&p), Err(Error::Usage(_))));

        let p = write_corpus(
            dir.path(),
            "hdr_only.jsonl",
            "{\"speakers_onehot_dim\":2,\"num_classes\":2,\"feature_dim\":2}\n",
        );
        assert!(matches!(ingest(&p), Err(Error::Usage(_))));

        let mut content =
            String::from(r#"{"speakers_onehot_dim":2,"num_classes":2,"feature_dim":2}"#);
        content.push('\n');
        content.push_str(r#"{"dialogue_id":"d0","utterances":[{"speaker":"A"}]}"#);
        content.push('\n');
        let p = write_corpus(dir.path(), "nofeat.jsonl", &content);
        match ingest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other.err()),
        }
    }

    #[test]
    fn toy_featurizer_laws() {
        assert_eq!(toy_featurize("", 8, 0), vec![0.0; 8]);
        assert_eq!(toy_featurize("hello world", 8, 0), toy_featurize("hello world", 8, 0));
        assert_eq!(toy_featurize("hello world", 8, 0), toy_featurize("world hello", 8, 0));
        assert_ne!(toy_featurize("hello world", 8, 0), toy_featurize("other words", 8, 0));
        let v = toy_featurize("a b c d e", 8, 0);
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_fallback_featurizes() {
        let dir = tempdir().unwrap();
        let mut content =
            String::from(r#"{"speakers_onehot_dim":2,"num_classes":2,"feature_dim":4}"#);
        content.push('\n');
        content.push_str(
            r#"{"dialogue_id":"d0","utterances":[{"speaker":"A","label":0,"text":"hi there"},{"speaker":"B","label":1,"text":"hello"}]}"#,
        );
        content.push('\n');
        let p = write_corpus(dir.path(), "text.jsonl", &content);
        let corpus = ingest(&p).unwrap();
        assert_eq!(corpus.train[0].turns[0].feature, toy_featurize("hi there", 4, 0));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = SynthSpec {
            dialogues: 4,
            max_turns: 6,
            speakers: 2,
            classes: 2,
            feature_dim: 8,
            seed: 77,
        };
        let a = export(&gen_synthetic(&spec).unwrap()).unwrap();
        let b = export(&gen_synthetic(&spec).unwrap()).unwrap();
        assert_eq!(a, b);

        let minimal = SynthSpec {
            dialogues: 1,
            max_turns: 1,
            speakers: 2,
            classes: 2,
            feature_dim: 4,
            seed: 0,
        };
        let c = gen_synthetic(&minimal).unwrap();
        assert_eq!(c.train.len(), 1);
        assert_eq!(c.train[0].len(), 1);
    }

    #[test]
    fn export_round_trips() {
        let spec = SynthSpec {
            dialogues: 3,
            max_turns: 5,
            speakers: 3,
            classes: 3,
            feature_dim: 9,
            seed: 5,
        };
        let corpus = gen_synthetic(&spec).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("syn.jsonl");
        std::fs::write(&p, export(&corpus).unwrap()).unwrap();
        let back = ingest(&p).unwrap();
        assert_eq!(back.train.len(), corpus.train.len());
        assert_eq!(export(&back).unwrap(), export(&corpus).unwrap());
    }

    #[test]
    fn sidecar_round_trips() {
        let spec = SynthSpec {
            dialogues: 2,
            max_turns: 4,
            speakers: 2,
            classes: 2,
            feature_dim: 6,
            seed: 3,
        };
        let corpus = gen_synthetic(&spec).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("side.jsonl");
        export_with_sidecar(&corpus, &p).unwrap();
        let back = ingest(&p).unwrap();
        assert_eq!(export(&back).unwrap(), export(&corpus).unwrap());
    }
}
