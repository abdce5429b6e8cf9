//! On-disk artifacts: embedding files, manifests, checkpoints, and the
//! synthetic archive generator.
//!
//! Two tiny binary containers are defined here. `RHYE1` holds one
//! utterance's frame embeddings as f32 little-endian, frame-major:
//!
//! ```text
//! offset 0   magic "RHYE"
//! offset 4   u32 LE version (= 1)
//! offset 8   u32 LE frame count T
//! offset 12  u32 LE embedding dim D
//! offset 16  T*D f32 LE payload
//! ```
//!
//! `RHYM1` holds trained parameters as f64 little-endian blobs behind a
//! JSON header describing the model, the training configuration, and the
//! tensor table (name, shape, byte offset into the blob section):
//!
//! ```text
//! offset 0   magic "RHYM"
//! offset 4   u32 LE version (= 1)
//! offset 8   u32 LE header byte length H
//! offset 12  UTF-8 JSON header
//! offset 12+H  f64 LE parameter blobs, in header order
//! ```
//!
//! Every writer here is deterministic: identical inputs produce identical
//! bytes, which is what the reproducibility checks diff against.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RhymeError};
use crate::network::{Ablation, ModelConfig, ParamLayout, ParameterStore};
use crate::training::TrainConfig;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"RHYE";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RHYM";
pub const FORMAT_VERSION: u32 = 1;

// ─── embedding sequences ─────────────────────────────────────────────────

/// One utterance's embedding frames, T x D, always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    frames: Array2<f32>,
}

impl EmbeddingSequence {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        let (t, d) = frames.dim();
        if t == 0 || d == 0 {
            return Err(RhymeError::InvalidArgument(format!(
                "embedding sequence must be non-empty, got {t} x {d}"
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(RhymeError::InvalidArgument(
                "embedding sequence contains a non-finite value".into(),
            ));
        }
        Ok(EmbeddingSequence { frames })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Concatenates several synchronized embedding streams along D. All streams
/// must agree on the frame count.
pub fn concat_streams(streams: &[EmbeddingSequence]) -> Result<EmbeddingSequence> {
    if streams.is_empty() {
        return Err(RhymeError::InvalidArgument("concat_streams: no streams given".into()));
    }
    let t = streams[0].num_frames();
    if let Some(bad) = streams.iter().find(|s| s.num_frames() != t) {
        return Err(RhymeError::Shape(format!(
            "concat_streams: frame count mismatch ({} vs {})",
            bad.num_frames(),
            t
        )));
    }
    let total_d: usize = streams.iter().map(|s| s.dim()).sum();
    let mut frames = Array2::<f32>::zeros((t, total_d));
    let mut col = 0;
    for s in streams {
        frames
            .slice_mut(ndarray::s![.., col..col + s.dim()])
            .assign(s.frames());
        col += s.dim();
    }
    EmbeddingSequence::new(frames)
}

fn read_u32_le(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn write_embedding(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    let (t, d) = seq.frames.dim();
    let mut buf = Vec::with_capacity(16 + 4 * t * d);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for row in seq.frames.outer_iter() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingSequence> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(RhymeError::format(0, "bad magic, expected \"RHYE\""));
    }
    if bytes.len() < 16 {
        return Err(RhymeError::format(
            bytes.len() as u64,
            format!("truncated header, expected 16 bytes, file has {}", bytes.len()),
        ));
    }
    let version = read_u32_le(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(RhymeError::format(4, format!("unsupported version {version}, expected 1")));
    }
    let t = read_u32_le(&bytes, 8) as usize;
    let d = read_u32_le(&bytes, 12) as usize;
    if t == 0 || d == 0 {
        return Err(RhymeError::format(8, format!("empty shape {t} x {d}")));
    }
    let expected_payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| RhymeError::format(8, "shape overflows payload size"))?;
    let actual_payload = bytes.len() - 16;
    if actual_payload != expected_payload {
        return Err(RhymeError::format(
            bytes.len() as u64,
            format!("expected {expected_payload} payload bytes for {t} x {d}, found {actual_payload}"),
        ));
    }
    let mut frames = Array2::<f32>::zeros((t, d));
    for i in 0..t * d {
        let off = 16 + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(RhymeError::format(off as u64, "non-finite embedding value"));
        }
        frames[(i / d, i % d)] = v;
    }
    Ok(EmbeddingSequence { frames })
}

// ─── manifests ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Bonafide,
    Spoof,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Bonafide => 0,
            ClassLabel::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Bonafide => "bonafide",
            ClassLabel::Spoof => "spoof",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One line of a JSONL manifest. `path` is resolved relative to the
/// manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: ClassLabel,
    pub corpus: String,
    pub generator: String,
    pub split: Split,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(line).map_err(|e| RhymeError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(RhymeError::Manifest {
                line: i + 1,
                message: format!("duplicate id `{}`", record.id),
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(RhymeError::Manifest { line: 0, message: "manifest has no records".into() });
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| RhymeError::InvalidArgument(format!("manifest serialization: {e}")))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Splits manifest records into a training selection and a test selection.
///
/// Training takes `split == train` records, restricted to `train_corpus`
/// when given, minus any record whose generator tag is excluded. Test takes
/// `split == test` records restricted to `test_corpus`. Generator
/// exclusions deliberately do not apply to the test side; holding a
/// generator out of training and then testing on it is the point of the
/// exclusion list.
///
/// An empty training selection is a configuration error. The test
/// selection may be empty; callers that need one check for themselves.
pub fn protocol_select<'a>(
    records: &'a [ManifestRecord],
    train_corpus: Option<&str>,
    test_corpus: Option<&str>,
    exclude_generators: &[String],
) -> Result<(Vec<&'a ManifestRecord>, Vec<&'a ManifestRecord>)> {
    let excluded: BTreeSet<&str> = exclude_generators.iter().map(|s| s.as_str()).collect();
    let train: Vec<&ManifestRecord> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .filter(|r| train_corpus.map_or(true, |c| r.corpus == c))
        .filter(|r| !excluded.contains(r.generator.as_str()))
        .collect();
    if train.is_empty() {
        return Err(RhymeError::Config(format!(
            "empty train selection (corpus filter {:?}, {} generator exclusions)",
            train_corpus,
            excluded.len()
        )));
    }
    let test: Vec<&ManifestRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .filter(|r| test_corpus.map_or(true, |c| r.corpus == c))
        .collect();
    Ok((train, test))
}

/// Dev-split records for the given corpus, used as a validation set.
pub fn select_dev<'a>(
    records: &'a [ManifestRecord],
    corpus: Option<&str>,
) -> Vec<&'a ManifestRecord> {
    records
        .iter()
        .filter(|r| r.split == Split::Dev)
        .filter(|r| corpus.map_or(true, |c| r.corpus == c))
        .collect()
}

/// A manifest record joined with its loaded embedding.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub id: String,
    pub label: ClassLabel,
    pub generator: String,
    pub seq: EmbeddingSequence,
}

/// Loads the embedding file behind each record, resolving paths against the
/// manifest's directory, and enforces one embedding dimension across the
/// whole selection.
pub fn load_utterances(
    manifest_path: &Path,
    records: &[&ManifestRecord],
) -> Result<Vec<LoadedUtterance>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::with_capacity(records.len());
    let mut dim: Option<usize> = None;
    for r in records {
        let seq = read_embedding(&base.join(&r.path))?;
        match dim {
            None => dim = Some(seq.dim()),
            Some(d) if d != seq.dim() => {
                return Err(RhymeError::Config(format!(
                    "embedding dim mismatch: `{}` has D = {}, expected {d}",
                    r.path,
                    seq.dim()
                )));
            }
            _ => {}
        }
        out.push(LoadedUtterance {
            id: r.id.clone(),
            label: r.label,
            generator: r.generator.clone(),
            seq,
        });
    }
    Ok(out)
}

// ─── synthetic archives ──────────────────────────────────────────────────

/// Parameters of the synthetic two-class archive.
///
/// Bonafide frames are standard normal. Spoof frames get a mean shift of
/// `separation` on coordinate 1 and, unless disabled, a periodic
/// 0.5*sin(2*pi*tau/8) artifact on coordinate 2. With `separation = 0` and
/// the sinusoid off the two classes are identically distributed and any
/// downstream detector should sit at chance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub frames: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub sinusoid: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_per_class: 1000,
            frames: 50,
            dim: 64,
            separation: 2.0,
            seed: 7,
            sinusoid: true,
        }
    }
}

/// SplitMix64 of seed + k: cheap independent substreams from one seed.
pub(crate) fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the archive under `out_dir`: `manifest.jsonl` plus one RHYE1
/// file per utterance under `emb/`. Within each class the first 80% of
/// utterances are train, the next 10% dev, the rest test. Returns the
/// manifest path. Identical specs produce byte-identical directories.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.n_per_class == 0 || spec.frames == 0 {
        return Err(RhymeError::InvalidArgument(
            "synthetic spec: n_per_class and frames must be positive".into(),
        ));
    }
    if spec.dim < 2 {
        return Err(RhymeError::InvalidArgument(
            "synthetic spec: dim must be at least 2".into(),
        ));
    }
    if !spec.separation.is_finite() || spec.separation < 0.0 {
        return Err(RhymeError::InvalidArgument(
            "synthetic spec: separation must be finite and non-negative".into(),
        ));
    }
    let emb_dir = out_dir.join("emb");
    std::fs::create_dir_all(&emb_dir)?;

    let n = spec.n_per_class;
    let n_train = (n as f64 * 0.8).floor() as usize;
    let n_dev = (n as f64 * 0.1).floor() as usize;

    let mut records = Vec::with_capacity(2 * n);
    for (class_idx, label) in [(0u64, ClassLabel::Bonafide), (1u64, ClassLabel::Spoof)] {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, class_idx), i as u64));
            let mut frames = Array2::<f32>::zeros((spec.frames, spec.dim));
            for tau in 0..spec.frames {
                for j in 0..spec.dim {
                    let mut v: f64 = rng.sample(StandardNormal);
                    if label == ClassLabel::Spoof {
                        if j == 0 {
                            v += spec.separation;
                        }
                        if j == 1 && spec.sinusoid {
                            v += 0.5 * (2.0 * std::f64::consts::PI * (tau as f64 + 1.0) / 8.0).sin();
                        }
                    }
                    frames[(tau, j)] = v as f32;
                }
            }
            let id = format!("{}_{i:05}", label.as_str());
            let rel_path = format!("emb/{id}.rhye");
            write_embedding(&out_dir.join(&rel_path), &EmbeddingSequence::new(frames)?)?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            let generator = match label {
                ClassLabel::Bonafide => "none".to_string(),
                ClassLabel::Spoof => {
                    if i % 2 == 0 {
                        "G1".to_string()
                    } else {
                        "G2".to_string()
                    }
                }
            };
            records.push(ManifestRecord {
                id,
                path: rel_path,
                label,
                corpus: "SYN".to_string(),
                generator,
                split,
            });
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &records)?;
    Ok(manifest_path)
}

// ─── checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Present when gating is ablated: the constant the gate is pinned to.
    pub fixed_alpha: Option<f64>,
    pub tensors: Vec<TensorMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterStore,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<()> {
    let layout = params.layout();
    let tensors: Vec<TensorMeta> = layout
        .entries()
        .iter()
        .map(|e| TensorMeta {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset_bytes: (e.offset * 8) as u64,
        })
        .collect();
    let header = CheckpointHeader {
        schema: "RHYM1".to_string(),
        model: model.clone(),
        train: train.clone(),
        fixed_alpha: if model.ablation == Ablation::NoGating { Some(0.5) } else { None },
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| RhymeError::InvalidArgument(format!("checkpoint header serialization: {e}")))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    for &v in params.values() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, ModelConfig, TrainConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(RhymeError::format(0, "bad magic, expected \"RHYM\""));
    }
    if bytes.len() < 12 {
        return Err(RhymeError::format(bytes.len() as u64, "truncated checkpoint header"));
    }
    let version = read_u32_le(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(RhymeError::format(4, format!("unsupported version {version}, expected 1")));
    }
    let header_len = read_u32_le(&bytes, 8) as usize;
    if bytes.len() < 12 + header_len {
        return Err(RhymeError::format(
            bytes.len() as u64,
            format!("truncated header, expected {header_len} bytes at offset 12"),
        ));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| RhymeError::format(12, format!("header parse failure: {e}")))?;
    if header.schema != "RHYM1" {
        return Err(RhymeError::format(12, format!("unknown schema `{}`", header.schema)));
    }
    header.model.validate()?;

    // The tensor table must match the layout the model config implies;
    // a checkpoint edited out from under its config is a format error.
    let layout = Arc::new(ParamLayout::for_config(&header.model));
    let expected = layout.entries();
    if header.tensors.len() != expected.len() {
        return Err(RhymeError::format(
            12,
            format!("tensor table has {} entries, expected {}", header.tensors.len(), expected.len()),
        ));
    }
    for (meta, entry) in header.tensors.iter().zip(expected) {
        if meta.name != entry.name
            || meta.shape != entry.shape
            || meta.offset_bytes != (entry.offset * 8) as u64
        {
            return Err(RhymeError::format(
                12,
                format!("tensor `{}` disagrees with the model layout", meta.name),
            ));
        }
    }
    let blob_start = 12 + header_len;
    let expected_blob = layout.total_len() * 8;
    let actual_blob = bytes.len() - blob_start;
    if actual_blob != expected_blob {
        return Err(RhymeError::format(
            bytes.len() as u64,
            format!("expected {expected_blob} parameter bytes, found {actual_blob}"),
        ));
    }
    let mut values = vec![0.0f64; layout.total_len()];
    for (i, v) in values.iter_mut().enumerate() {
        let off = blob_start + 8 * i;
        *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(RhymeError::format(off as u64, "non-finite parameter value"));
        }
    }
    let params = ParameterStore::from_values(layout, values)?;
    Ok((params, header.model, header.train))
}

/// Reads only the JSON header of a checkpoint.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(RhymeError::format(0, "bad magic, expected \"RHYM\""));
    }
    let header_len = read_u32_le(&bytes, 8) as usize;
    if bytes.len() < 12 + header_len {
        return Err(RhymeError::format(bytes.len() as u64, "truncated header"));
    }
    serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| RhymeError::format(12, format!("header parse failure: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.rhye");
        let frames = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.25 - 1.0);
        let seq = EmbeddingSequence::new(frames).unwrap();
        write_embedding(&path, &seq).unwrap();
        let back = read_embedding(&path).unwrap();
        assert_eq!(seq, back);
        let bytes1 = std::fs::read(&path).unwrap();
        write_embedding(&path, &back).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn embedding_read_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.rhye");
        let seq =
            EmbeddingSequence::new(Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f32)).unwrap();
        write_embedding(&path, &seq).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        match read_embedding(&path) {
            Err(RhymeError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        match read_embedding(&path) {
            Err(RhymeError::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }

        // header claims 2x3 but payload is short; error names the expected count
        let truncated = &good[..good.len() - 4];
        std::fs::write(&path, truncated).unwrap();
        match read_embedding(&path) {
            Err(RhymeError::Format { message, .. }) => {
                assert!(message.contains("24"), "message should name expected bytes: {message}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![
            ManifestRecord {
                id: "a1".into(),
                path: "emb/a1.rhye".into(),
                label: ClassLabel::Bonafide,
                corpus: "ASV".into(),
                generator: "none".into(),
                split: Split::Train,
            },
            ManifestRecord {
                id: "a2".into(),
                path: "emb/a2.rhye".into(),
                label: ClassLabel::Spoof,
                corpus: "ASV".into(),
                generator: "D1".into(),
                split: Split::Test,
            },
        ];
        save_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), records);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = r#"{"id":"a","path":"p","label":"bonafide","corpus":"C","generator":"none","split":"train"}"#;
        let bad_label = r#"{"id":"b","path":"p","label":"genuine","corpus":"C","generator":"none","split":"train"}"#;
        std::fs::write(&path, format!("{good}\n{bad_label}\n")).unwrap();
        match load_manifest(&path) {
            Err(RhymeError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }

        std::fs::write(&path, format!("{good}\n{good}\n")).unwrap();
        match load_manifest(&path) {
            Err(RhymeError::Manifest { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    fn rec(id: &str, corpus: &str, generator: &str, split: Split) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            path: format!("emb/{id}.rhye"),
            label: if generator == "none" { ClassLabel::Bonafide } else { ClassLabel::Spoof },
            corpus: corpus.into(),
            generator: generator.into(),
            split,
        }
    }

    #[test]
    fn protocol_select_filters_corpora_and_generators() {
        let records = vec![
            rec("t1", "A", "none", Split::Train),
            rec("t2", "A", "D1", Split::Train),
            rec("t3", "A", "D2", Split::Train),
            rec("t4", "B", "none", Split::Train),
            rec("e1", "B", "F1", Split::Test),
            rec("e2", "A", "D1", Split::Test),
        ];
        let (train, test) =
            protocol_select(&records, Some("A"), Some("B"), &["D2".to_string()]).unwrap();
        assert_eq!(train.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["t1", "t2"]);
        assert_eq!(test.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["e1"]);
        // ids never overlap across the two sides
        assert!(train.iter().all(|t| test.iter().all(|e| e.id != t.id)));

        assert!(matches!(
            protocol_select(&records, Some("NOPE"), None, &[]),
            Err(RhymeError::Config(_))
        ));
    }

    #[test]
    fn synthetic_archive_is_deterministic() {
        let spec = SyntheticSpec { n_per_class: 4, frames: 6, dim: 4, ..SyntheticSpec::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&spec, d1.path()).unwrap();
        let m2 = generate_synthetic(&spec, d2.path()).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
        for r in load_manifest(&m1).unwrap() {
            let b1 = std::fs::read(d1.path().join(&r.path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(b1, b2, "embedding bytes differ for {}", r.id);
        }
    }

    #[test]
    fn synthetic_split_counts_follow_80_10_10() {
        let spec =
            SyntheticSpec { n_per_class: 20, frames: 3, dim: 4, ..SyntheticSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let records = load_manifest(&generate_synthetic(&spec, dir.path()).unwrap()).unwrap();
        assert_eq!(records.len(), 40);
        let count = |s: Split, l: ClassLabel| {
            records.iter().filter(|r| r.split == s && r.label == l).count()
        };
        assert_eq!(count(Split::Train, ClassLabel::Bonafide), 16);
        assert_eq!(count(Split::Dev, ClassLabel::Bonafide), 2);
        assert_eq!(count(Split::Test, ClassLabel::Bonafide), 2);
        assert_eq!(count(Split::Train, ClassLabel::Spoof), 16);
    }

    #[test]
    fn concat_streams_joins_along_dim() {
        let a = EmbeddingSequence::new(Array2::from_elem((3, 2), 1.0f32)).unwrap();
        let b = EmbeddingSequence::new(Array2::from_elem((3, 5), 2.0f32)).unwrap();
        let joined = concat_streams(&[a.clone(), b]).unwrap();
        assert_eq!(joined.num_frames(), 3);
        assert_eq!(joined.dim(), 7);
        assert_eq!(joined.frames()[(1, 0)], 1.0);
        assert_eq!(joined.frames()[(1, 6)], 2.0);
        let short = EmbeddingSequence::new(Array2::from_elem((2, 2), 0.0f32)).unwrap();
        assert!(concat_streams(&[a, short]).is_err());
    }
}
