//! Conversation datasets: JSONL schema, manifests, embedding tables, and the
//! caches written during preprocessing.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification target (a class index) or regression target (a vector).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Values(Vec<f64>),
}

impl Label {
    pub fn as_class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Values(_) => None,
        }
    }

    pub fn as_values(&self) -> Option<&[f64]> {
        match self {
            Label::Class(_) => None,
            Label::Values(v) => Some(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Speaker names in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker.as_str()) {
                seen.push(u.speaker.as_str());
            }
        }
        seen
    }
}

fn validate_conversations(path: &str, convs: &[Conversation]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut feat_dim: Option<usize> = None;
    for conv in convs {
        if !ids.insert(&conv.id) {
            return Err(Error::Data(format!(
                "{path}: duplicate conversation id {:?}",
                conv.id
            )));
        }
        if conv.utterances.is_empty() {
            return Err(Error::Data(format!(
                "{path}: conversation {:?} has no utterances",
                conv.id
            )));
        }
        for (i, u) in conv.utterances.iter().enumerate() {
            let has_tokens = u.tokens.as_ref().map_or(false, |t| !t.is_empty());
            let has_features = u.features.as_ref().map_or(false, |f| !f.is_empty());
            if !has_tokens && !has_features {
                return Err(Error::Data(format!(
                    "{path}: conversation {:?} utterance {i} has neither tokens nor features",
                    conv.id
                )));
            }
            if let Some(f) = &u.features {
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "{path}: conversation {:?} utterance {i} has non-finite features",
                        conv.id
                    )));
                }
                match feat_dim {
                    None => feat_dim = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(Error::Data(format!(
                            "{path}: conversation {:?} utterance {i} has {} features, expected {d}",
                            conv.id,
                            f.len()
                        )));
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

/// Loads one-JSON-object-per-line conversations. Blank lines are skipped;
/// malformed lines report their line number.
pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&shown, e))?;
    let mut convs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&shown, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: shown.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        convs.push(conv);
    }
    validate_conversations(&shown, &convs)?;
    Ok(convs)
}

pub fn save_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&shown, e))?;
    let mut w = BufWriter::new(file);
    for conv in convs {
        serde_json::to_writer(&mut w, conv)?;
        writeln!(w).map_err(|e| Error::io(&shown, e))?;
    }
    Ok(())
}

// ── manifests ───────────────────────────────────────────────────────────

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Classification,
    Regression,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub train: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<String>,
    pub test: String,
    pub mode: TaskMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Attribute names for regression labels, in vector order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Conversation>,
    pub val: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub mode: TaskMode,
    /// Class count for classification, output width for regression.
    pub out_dim: usize,
}

impl Dataset {
    pub fn splits(&self) -> impl Iterator<Item = &Conversation> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }

    /// Token vocabulary over every split, sorted.
    pub fn vocab(&self) -> BTreeSet<String> {
        let mut vocab = BTreeSet::new();
        for conv in self.splits() {
            for u in &conv.utterances {
                if let Some(tokens) = &u.tokens {
                    vocab.extend(tokens.iter().cloned());
                }
            }
        }
        vocab
    }

    /// Largest number of distinct speakers in any single conversation.
    pub fn max_speakers(&self) -> usize {
        self.splits().map(|c| c.speakers().len()).max().unwrap_or(0)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.splits()
            .flat_map(|c| c.utterances.iter())
            .find_map(|u| u.features.as_ref().map(|f| f.len()))
    }

    /// True when every utterance in every split carries a feature vector.
    pub fn fully_featured(&self) -> bool {
        self.splits()
            .flat_map(|c| c.utterances.iter())
            .all(|u| u.features.is_some())
    }
}

fn check_labels(convs: &[Conversation], mode: TaskMode) -> Result<(usize, usize)> {
    let mut max_class = 0usize;
    let mut reg_dim = 0usize;
    for conv in convs {
        for (i, u) in conv.utterances.iter().enumerate() {
            match (mode, &u.label) {
                (TaskMode::Classification, Label::Class(c)) => max_class = max_class.max(*c),
                (TaskMode::Regression, Label::Values(v)) => {
                    if reg_dim == 0 {
                        reg_dim = v.len();
                    }
                    if v.is_empty() || v.len() != reg_dim {
                        return Err(Error::Data(format!(
                            "conversation {:?} utterance {i}: regression label width {} (expected {reg_dim})",
                            conv.id,
                            v.len()
                        )));
                    }
                }
                (mode, label) => {
                    return Err(Error::Data(format!(
                        "conversation {:?} utterance {i}: label {label:?} does not fit {mode:?} mode",
                        conv.id
                    )));
                }
            }
        }
    }
    Ok((max_class, reg_dim))
}

/// Loads a manifest and the splits it names; relative paths resolve against
/// the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let shown = manifest_path.display().to_string();
    let file = File::open(manifest_path).map_err(|e| Error::io(&shown, e))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let train = load_conversations(&resolve(&manifest.train))?;
    let val = match &manifest.val {
        Some(p) => load_conversations(&resolve(p))?,
        None => Vec::new(),
    };
    let test = load_conversations(&resolve(&manifest.test))?;

    let mut max_class = 0;
    let mut reg_dim = 0;
    for split in [&train, &val, &test] {
        let (mc, rd) = check_labels(split, manifest.mode)?;
        max_class = max_class.max(mc);
        if reg_dim == 0 {
            reg_dim = rd;
        } else if rd != 0 && rd != reg_dim {
            return Err(Error::Data(format!(
                "regression label width differs between splits ({reg_dim} vs {rd})"
            )));
        }
    }

    let out_dim = match manifest.mode {
        TaskMode::Classification => {
            let inferred = max_class + 1;
            match manifest.num_classes {
                Some(n) if n < inferred => {
                    return Err(Error::Data(format!(
                        "manifest declares {n} classes but labels reach {}",
                        inferred - 1
                    )));
                }
                Some(n) => n,
                None => inferred,
            }
        }
        TaskMode::Regression => match &manifest.attributes {
            Some(a) if a.len() != reg_dim => {
                return Err(Error::Data(format!(
                    "manifest names {} attributes but labels carry {reg_dim}",
                    a.len()
                )));
            }
            _ => reg_dim,
        },
    };
    if out_dim == 0 {
        return Err(Error::Data("dataset has no usable labels".into()));
    }

    Ok(Dataset {
        train,
        val,
        test,
        mode: manifest.mode,
        out_dim,
    })
}

/// Splits off max(1, n/10) conversations for validation when the manifest
/// provides none. Deterministic in the seed; returns the held-out part.
pub fn split_holdout(train: &mut Vec<Conversation>, seed: u64) -> Vec<Conversation> {
    if train.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let k = (train.len() / 10).max(1);
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    let mut val = Vec::with_capacity(k);
    for &i in picked.iter().rev() {
        val.push(train.remove(i));
    }
    val.reverse();
    val
}

// ── embeddings ──────────────────────────────────────────────────────────

pub const PAD_ROW: usize = 0;
pub const UNK_ROW: usize = 1;

/// Token to row-index mapping over a dense matrix. Row 0 is the all-zero
/// padding vector, row 1 the unknown-token vector.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub dim: usize,
    index: HashMap<String, usize>,
    pub matrix: Vec<f64>,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.matrix.len() / self.dim
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ROW)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    fn build(entries: Vec<(String, Vec<f64>)>, dim: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut matrix = vec![0.0; (entries.len() + 2) * dim];
        // Row 1 (unknown) is the mean of all known vectors.
        for (row, (token, vec)) in entries.into_iter().enumerate() {
            let at = (row + 2) * dim;
            matrix[at..at + dim].copy_from_slice(&vec);
            for (k, v) in vec.iter().enumerate() {
                matrix[dim + k] += v;
            }
            if index.insert(token.clone(), row + 2).is_some() {
                return Err(Error::Data(format!("duplicate embedding for token {token:?}")));
            }
        }
        let n = index.len().max(1) as f64;
        for k in 0..dim {
            matrix[dim + k] /= n;
        }
        Ok(EmbeddingTable { dim, index, matrix })
    }

    /// Parses "token v1 v2 ... vd" lines.
    pub fn load(path: &Path) -> Result<Self> {
        let shown = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&shown, e))?;
        let mut entries = Vec::new();
        let mut dim = 0usize;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&shown, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap().to_string();
            let vec: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vec = vec.map_err(|e| Error::Parse {
                path: shown.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if vec.is_empty() {
                return Err(Error::Parse {
                    path: shown.clone(),
                    line: i + 1,
                    msg: "no vector values after the token".into(),
                });
            }
            if dim == 0 {
                dim = vec.len();
            } else if vec.len() != dim {
                return Err(Error::Parse {
                    path: shown.clone(),
                    line: i + 1,
                    msg: format!("expected {dim} values, found {}", vec.len()),
                });
            }
            entries.push((token, vec));
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{shown}: empty embedding file")));
        }
        Self::build(entries, dim)
    }

    /// Deterministic random table for a vocabulary, for runs without
    /// pretrained vectors.
    pub fn random(vocab: &BTreeSet<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let entries: Vec<(String, Vec<f64>)> = vocab
            .iter()
            .map(|t| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-bound..bound)).collect();
                (t.clone(), v)
            })
            .collect();
        Self::build(entries, dim)
    }
}

// ── feature cache ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CacheRow {
    id: String,
    index: usize,
    features: Vec<f64>,
}

/// Writes every utterance's feature vector, one JSON row per utterance.
pub fn write_feature_cache(path: &Path, convs: &[Conversation]) -> Result<()> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&shown, e))?;
    let mut w = BufWriter::new(file);
    for conv in convs {
        for (i, u) in conv.utterances.iter().enumerate() {
            let features = u.features.clone().ok_or_else(|| {
                Error::Data(format!(
                    "conversation {:?} utterance {i} has no features to cache",
                    conv.id
                ))
            })?;
            let row = CacheRow {
                id: conv.id.clone(),
                index: i,
                features,
            };
            serde_json::to_writer(&mut w, &row)?;
            writeln!(w).map_err(|e| Error::io(&shown, e))?;
        }
    }
    Ok(())
}

/// Fills `features` on the given conversations from a cache file. Every
/// utterance must be covered exactly once.
pub fn apply_feature_cache(path: &Path, convs: &mut [Conversation]) -> Result<()> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&shown, e))?;
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (ci, conv) in convs.iter().enumerate() {
        by_id.insert(conv.id.clone(), ci);
    }
    let mut filled = vec![0usize; convs.len()];
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&shown, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CacheRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: shown.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    for row in rows {
        let Some(&ci) = by_id.get(row.id.as_str()) else {
            continue; // caches may cover more data than this split
        };
        let conv = &mut convs[ci];
        if row.index >= conv.utterances.len() {
            return Err(Error::Data(format!(
                "{shown}: cache row for {:?} utterance {} out of range",
                row.id, row.index
            )));
        }
        conv.utterances[row.index].features = Some(row.features);
        filled[ci] += 1;
    }
    for (ci, conv) in convs.iter().enumerate() {
        if filled[ci] != conv.utterances.len() {
            return Err(Error::Data(format!(
                "{shown}: cache covers {}/{} utterances of conversation {:?}",
                filled[ci],
                conv.utterances.len(),
                conv.id
            )));
        }
    }
    Ok(())
}

// ── predictions ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub utterance_index: usize,
    pub pred: Label,
    pub gold: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let shown = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&shown, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w).map_err(|e| Error::io(&shown, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn conv(id: &str, n: usize, rng: &mut ChaCha8Rng) -> Conversation {
        let utterances = (0..n)
            .map(|i| Utterance {
                speaker: format!("s{}", rng.gen_range(0..2)),
                tokens: Some(vec![format!("w{}", rng.gen_range(0..50)), "the".into()]),
                features: Some(vec![rng.gen_range(-1.0..1.0), i as f64]),
                label: Label::Class(rng.gen_range(0..6)),
            })
            .collect();
        Conversation {
            id: id.into(),
            utterances,
        }
    }

    #[test]
    fn jsonl_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("convs.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let convs: Vec<Conversation> = (0..31)
            .map(|i| conv(&format!("dia{i}"), rng.gen_range(40..60), &mut rng))
            .collect();
        let total: usize = convs.iter().map(|c| c.utterances.len()).sum();
        assert!(total > 1200, "fixture should be sizeable, got {total}");
        save_conversations(&path, &convs).unwrap();
        let back = load_conversations(&path).unwrap();
        assert_eq!(back, convs);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","utterances":[{"speaker":"x","tokens":["hi"],"label":0}]}"#;
        std::fs::write(&path, format!("{good}\n{{broken\n")).unwrap();
        let err = load_conversations(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn utterance_needs_tokens_or_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"a","utterances":[{"speaker":"x","label":0}]}"#,
        )
        .unwrap();
        let err = load_conversations(&path).unwrap_err().to_string();
        assert!(err.contains("neither tokens nor features"), "{err}");
    }

    #[test]
    fn both_tokens_and_features_are_legal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("both.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"a","utterances":[{"speaker":"x","tokens":["hi"],"features":[0.5,1.0],"label":2}]}"#,
        )
        .unwrap();
        let convs = load_conversations(&path).unwrap();
        assert_eq!(convs[0].utterances[0].tokens.as_ref().unwrap().len(), 1);
        assert_eq!(convs[0].utterances[0].features.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let row = r#"{"id":"same","utterances":[{"speaker":"x","tokens":["hi"],"label":0}]}"#;
        std::fs::write(&path, format!("{row}\n{row}\n")).unwrap();
        let err = load_conversations(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate conversation id"), "{err}");
    }

    fn write_manifest_fixture(dir: &Path, mode: &str, extra: &str) -> PathBuf {
        let mk = |name: &str, labels: &[&str]| {
            let mut body = String::new();
            for (i, l) in labels.iter().enumerate() {
                writeln!(
                    body,
                    r#"{{"id":"{name}-{i}","utterances":[{{"speaker":"a","tokens":["hi"],"label":{l}}},{{"speaker":"b","tokens":["yo"],"label":{l}}}]}}"#
                )
                .unwrap();
            }
            std::fs::write(dir.join(name), body).unwrap();
        };
        match mode {
            "classification" => {
                mk("train.jsonl", &["0", "2"]);
                mk("test.jsonl", &["1"]);
            }
            _ => {
                mk("train.jsonl", &["[0.5,1.0]", "[0.1,0.2]"]);
                mk("test.jsonl", &["[0.0,0.0]"]);
            }
        }
        let manifest = dir.join("manifest.json");
        std::fs::write(
            &manifest,
            format!(
                r#"{{"train":"train.jsonl","test":"test.jsonl","mode":"{mode}"{extra}}}"#
            ),
        )
        .unwrap();
        manifest
    }

    #[test]
    fn manifest_resolves_relative_paths_and_infers_classes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest_fixture(dir.path(), "classification", "");
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert!(ds.val.is_empty());
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.out_dim, 3); // labels 0..=2
        assert_eq!(ds.max_speakers(), 2);
    }

    #[test]
    fn manifest_class_count_must_cover_labels() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            write_manifest_fixture(dir.path(), "classification", r#","num_classes":2"#);
        let err = load_dataset(&manifest).unwrap_err().to_string();
        assert!(err.contains("labels reach 2"), "{err}");
    }

    #[test]
    fn regression_labels_take_width_from_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest_fixture(dir.path(), "regression", "");
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.mode, TaskMode::Regression);
        assert_eq!(ds.out_dim, 2);
    }

    #[test]
    fn classification_mode_rejects_vector_labels() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("train.jsonl"),
            r#"{"id":"a","utterances":[{"speaker":"x","tokens":["hi"],"label":[0.5]}]}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("test.jsonl"),
            r#"{"id":"b","utterances":[{"speaker":"x","tokens":["hi"],"label":0}]}"#,
        )
        .unwrap();
        let manifest = dir.path().join("manifest.json");
        std::fs::write(
            &manifest,
            r#"{"train":"train.jsonl","test":"test.jsonl","mode":"classification"}"#,
        )
        .unwrap();
        let err = load_dataset(&manifest).unwrap_err().to_string();
        assert!(err.contains("does not fit"), "{err}");
    }

    #[test]
    fn holdout_is_deterministic_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut make = || -> Vec<Conversation> {
            (0..20)
                .map(|i| conv(&format!("d{i}"), 3, &mut rng))
                .collect()
        };
        let mut a = make();
        let mut b = a.clone();
        let va = split_holdout(&mut a, 7);
        let vb = split_holdout(&mut b, 7);
        assert_eq!(va.len(), 2);
        assert_eq!(a.len(), 18);
        assert_eq!(va.iter().map(|c| &c.id).collect::<Vec<_>>(),
                   vb.iter().map(|c| &c.id).collect::<Vec<_>>());
        let mut single = vec![a[0].clone()];
        assert!(split_holdout(&mut single, 7).is_empty());
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn embeddings_pad_unk_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "alpha 1.0 2.0\nbeta 3.0 4.0\n").unwrap();
        let table = EmbeddingTable::load(&path).unwrap();
        assert_eq!(table.dim, 2);
        assert_eq!(table.rows(), 4);
        assert_eq!(&table.matrix[0..2], &[0.0, 0.0]); // pad
        assert_eq!(&table.matrix[2..4], &[2.0, 3.0]); // unk = mean
        assert_eq!(table.lookup("alpha"), 2);
        assert_eq!(table.lookup("beta"), 3);
        assert_eq!(table.lookup("missing"), UNK_ROW);
    }

    #[test]
    fn embeddings_reject_ragged_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "alpha 1.0 2.0\nbeta 3.0\n").unwrap();
        let err = EmbeddingTable::load(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn random_table_is_seed_deterministic() {
        let vocab: BTreeSet<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let t1 = EmbeddingTable::random(&vocab, 4, 11).unwrap();
        let t2 = EmbeddingTable::random(&vocab, 4, 11).unwrap();
        let t3 = EmbeddingTable::random(&vocab, 4, 12).unwrap();
        assert_eq!(t1.matrix, t2.matrix);
        assert_ne!(t1.matrix, t3.matrix);
        assert_eq!(t1.rows(), 5);
    }

    #[test]
    fn feature_cache_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let convs: Vec<Conversation> = (0..3).map(|i| conv(&format!("d{i}"), 4, &mut rng)).collect();
        write_feature_cache(&path, &convs).unwrap();
        let mut stripped: Vec<Conversation> = convs
            .iter()
            .cloned()
            .map(|mut c| {
                for u in &mut c.utterances {
                    u.features = None;
                }
                c
            })
            .collect();
        apply_feature_cache(&path, &mut stripped).unwrap();
        for (a, b) in stripped.iter().zip(&convs) {
            for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
                let fa = ua.features.as_ref().unwrap();
                let fb = ub.features.as_ref().unwrap();
                for (x, y) in fa.iter().zip(fb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn incomplete_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut convs = vec![conv("d0", 3, &mut rng)];
        let mut short = convs.clone();
        short[0].utterances.pop();
        write_feature_cache(&path, &short).unwrap();
        let err = apply_feature_cache(&path, &mut convs).unwrap_err().to_string();
        assert!(err.contains("covers 2/3"), "{err}");
    }
}
