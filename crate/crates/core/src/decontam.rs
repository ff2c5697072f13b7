//! Near-duplicate removal against evaluation-set descriptor indexes.
//!
//! Images are represented by unit-norm float vectors; similarity is the
//! maximum cosine against the index rows. A pair is removed only when its
//! score is strictly above the threshold. The descriptor model itself is
//! pluggable: descriptors come from a sidecar file, an external embedder
//! process, or a built-in perceptual-hash fallback (which runs without
//! any ML dependency but is not faithful to the published threshold
//! semantics and is labeled as such in reports).

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Paper-stated removal threshold.
pub const DEFAULT_THRESHOLD: f32 = 0.604169;

/// Magic prefix of the descriptor index file format.
pub const INDEX_MAGIC: &[u8; 5] = b"SFDX1";

/// Tolerance for the unit-norm invariant on stored descriptors.
pub const NORM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum DecontamError {
    #[error("descriptor file format error: {0}")]
    Format(String),
    #[error("descriptor dimension mismatch: index dim {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("descriptor provider failed: {0}")]
    Provider(String),
}

/// A unit-norm image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    vector: Vec<f32>,
}

impl Descriptor {
    /// Build a descriptor, normalizing to unit L2 norm.
    pub fn new(vector: Vec<f32>) -> Result<Self, DecontamError> {
        let norm = vector.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(DecontamError::Format(
                "descriptor has zero or non-finite norm".into(),
            ));
        }
        let vector = if (norm - 1.0).abs() <= NORM_TOLERANCE {
            vector
        } else {
            vector.iter().map(|v| v / norm).collect()
        };
        Ok(Descriptor { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }
}

/// Evaluation-set descriptors: a row-major matrix with one evaluation
/// dataset label per row. Immutable after load; queries are read-only.
#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    dim: usize,
    rows: Vec<f32>,
    labels: Vec<u32>,
    label_names: Vec<String>,
}

impl DescriptorIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.label_names[self.labels[i] as usize]
    }

    /// Build an index from (vector, label) pairs. Rows are normalized.
    pub fn from_rows(rows: Vec<(Vec<f32>, String)>) -> Result<Self, DecontamError> {
        if rows.is_empty() {
            return Err(DecontamError::Format("index must have at least one row".into()));
        }
        let dim = rows[0].0.len();
        let mut flat = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        let mut label_names: Vec<String> = Vec::new();
        for (vec, label) in rows {
            if vec.len() != dim {
                return Err(DecontamError::DimMismatch {
                    expected: dim,
                    got: vec.len(),
                });
            }
            let normalized = Descriptor::new(vec)?;
            flat.extend_from_slice(normalized.as_slice());
            let idx = match label_names.iter().position(|n| *n == label) {
                Some(i) => i as u32,
                None => {
                    label_names.push(label);
                    (label_names.len() - 1) as u32
                }
            };
            labels.push(idx);
        }
        Ok(DescriptorIndex {
            dim,
            rows: flat,
            labels,
            label_names,
        })
    }

    /// Serialize to the documented binary format:
    ///
    /// ```text
    /// magic   5 bytes  "SFDX1"
    /// dim     u32 LE
    /// count   u32 LE
    /// body    count x dim f32 LE rows
    /// footer  name_count u32 LE,
    ///         name_count x (len u16 LE, utf-8 bytes),
    ///         count x u32 LE label indices
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.row_count() as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.label_names.len() as u32).to_le_bytes());
        for name in &self.label_names {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        for label in &self.labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecontamError> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        let magic = cursor.take(5)?;
        if magic != INDEX_MAGIC {
            return Err(DecontamError::Format("bad magic".into()));
        }
        let dim = cursor.u32()? as usize;
        let count = cursor.u32()? as usize;
        if dim == 0 || count == 0 {
            return Err(DecontamError::Format("empty index".into()));
        }
        let mut rows = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            rows.push(f32::from_le_bytes(cursor.take(4)?.try_into().unwrap()));
        }
        let name_count = cursor.u32()? as usize;
        let mut label_names = Vec::with_capacity(name_count);
        for _ in 0..name_count {
            let len = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap()) as usize;
            let raw = cursor.take(len)?;
            label_names.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| DecontamError::Format("label is not UTF-8".into()))?,
            );
        }
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let idx = cursor.u32()?;
            if idx as usize >= label_names.len() {
                return Err(DecontamError::Format("label index out of range".into()));
            }
            labels.push(idx);
        }
        // Normalize rows on load; zero rows are a format defect.
        for r in 0..count {
            let slice = &mut rows[r * dim..(r + 1) * dim];
            let norm = slice.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(DecontamError::Format(format!("row {r} has bad norm")));
            }
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                for v in slice.iter_mut() {
                    *v /= norm;
                }
            }
        }
        Ok(DescriptorIndex {
            dim,
            rows,
            labels,
            label_names,
        })
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecontamError> {
        if self.pos + n > self.bytes.len() {
            return Err(DecontamError::Format("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DecontamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a descriptor index from a file in the documented binary format.
pub fn load_descriptor_index(path: &Path) -> Result<DescriptorIndex, DecontamError> {
    let bytes = std::fs::read(path).map_err(|e| DecontamError::Format(e.to_string()))?;
    DescriptorIndex::from_bytes(&bytes)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum cosine similarity of the query over all index rows, with the
/// argmax row's evaluation-dataset label. Ties break to the lowest row.
pub fn max_similarity<'i>(
    query: &Descriptor,
    index: &'i DescriptorIndex,
) -> Result<(f32, &'i str), DecontamError> {
    if query.dim() != index.dim() {
        return Err(DecontamError::DimMismatch {
            expected: index.dim(),
            got: query.dim(),
        });
    }
    let mut best_score = f32::NEG_INFINITY;
    let mut best_row = 0usize;
    for r in 0..index.row_count() {
        let s = dot(query.as_slice(), index.row(r));
        if s > best_score {
            best_score = s;
            best_row = r;
        }
    }
    Ok((best_score, index.label(best_row)))
}

/// Labels of evaluation datasets with at least one row strictly above the
/// threshold for this query.
pub fn labels_above<'i>(
    query: &Descriptor,
    index: &'i DescriptorIndex,
    threshold: f32,
) -> Result<Vec<&'i str>, DecontamError> {
    if query.dim() != index.dim() {
        return Err(DecontamError::DimMismatch {
            expected: index.dim(),
            got: query.dim(),
        });
    }
    let mut hit: Vec<bool> = vec![false; index.label_names.len()];
    for r in 0..index.row_count() {
        if dot(query.as_slice(), index.row(r)) > threshold {
            hit[index.labels[r] as usize] = true;
        }
    }
    Ok(index
        .label_names
        .iter()
        .enumerate()
        .filter(|(i, _)| hit[*i])
        .map(|(_, n)| n.as_str())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecontamReport {
    pub total: usize,
    pub removed: usize,
    pub removal_rate: f64,
    pub per_eval_dataset_hits: BTreeMap<String, usize>,
    pub threshold: f32,
}

/// Partition pairs into kept and removed, preserving input order.
/// A pair is removed iff its max similarity is strictly above the
/// threshold; a score exactly equal to the threshold is kept.
pub fn filter_pairs<T>(
    pairs: Vec<(T, Descriptor)>,
    index: &DescriptorIndex,
    threshold: f32,
) -> Result<(Vec<T>, Vec<RemovedPair<T>>, DecontamReport), DecontamError> {
    let total = pairs.len();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut hits: BTreeMap<String, usize> = BTreeMap::new();
    for (item, descriptor) in pairs {
        let (score, label) = max_similarity(&descriptor, index)?;
        if score > threshold {
            for l in labels_above(&descriptor, index, threshold)? {
                *hits.entry(l.to_string()).or_insert(0) += 1;
            }
            removed.push(RemovedPair {
                item,
                score,
                label: label.to_string(),
            });
        } else {
            kept.push(item);
        }
    }
    let report = DecontamReport {
        total,
        removed: removed.len(),
        removal_rate: if total == 0 {
            0.0
        } else {
            removed.len() as f64 / total as f64
        },
        per_eval_dataset_hits: hits,
        threshold,
    };
    Ok((kept, removed, report))
}

/// A removed pair with the score and argmax dataset that caused removal.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovedPair<T> {
    pub item: T,
    pub score: f32,
    pub label: String,
}

// ---------------------------------------------------------------------
// Descriptor providers
// ---------------------------------------------------------------------

/// Source of descriptors for pipeline images. Implementations must be
/// deterministic per (image bytes, provider).
pub trait DescriptorProvider: Sync {
    fn descriptor(&self, jpeg_bytes: &[u8]) -> Result<Descriptor, DecontamError>;
    fn name(&self) -> &'static str;
    /// Whether the provider reproduces the published similarity model's
    /// threshold semantics.
    fn paper_faithful(&self) -> bool;
}

#[derive(Debug, Deserialize)]
struct SidecarRow {
    sha256: String,
    vector: Vec<f32>,
}

/// Looks descriptors up by image content hash in a JSONL sidecar file
/// (`{"sha256": "...", "vector": [...]}` per line). This is how
/// descriptors from the paper's similarity model are supplied.
pub struct SidecarProvider {
    map: HashMap<String, Vec<f32>>,
}

impl SidecarProvider {
    pub fn load(path: &Path) -> Result<Self, DecontamError> {
        let file = std::fs::File::open(path).map_err(|e| DecontamError::Provider(e.to_string()))?;
        let reader = std::io::BufReader::new(file);
        let mut map = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DecontamError::Provider(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SidecarRow = serde_json::from_str(&line).map_err(|e| {
                DecontamError::Provider(format!("sidecar line {}: {e}", lineno + 1))
            })?;
            map.insert(row.sha256.to_ascii_lowercase(), row.vector);
        }
        Ok(SidecarProvider { map })
    }
}

impl DescriptorProvider for SidecarProvider {
    fn descriptor(&self, jpeg_bytes: &[u8]) -> Result<Descriptor, DecontamError> {
        let digest = hex::encode(Sha256::digest(jpeg_bytes));
        let vector = self
            .map
            .get(&digest)
            .ok_or_else(|| DecontamError::Provider(format!("no sidecar entry for {digest}")))?;
        Descriptor::new(vector.clone())
    }

    fn name(&self) -> &'static str {
        "sidecar"
    }

    fn paper_faithful(&self) -> bool {
        true
    }
}

/// Runs an external embedder per image. The command template is
/// whitespace-split with `{input}` substituted by a temp file path; the
/// process must print a JSON array of floats on stdout.
pub struct ProcessProvider {
    pub command_template: String,
    pub timeout: Duration,
}

impl ProcessProvider {
    pub fn new(command_template: impl Into<String>) -> Self {
        ProcessProvider {
            command_template: command_template.into(),
            timeout: Duration::from_secs(120),
        }
    }
}

impl DescriptorProvider for ProcessProvider {
    fn descriptor(&self, jpeg_bytes: &[u8]) -> Result<Descriptor, DecontamError> {
        let dir = tempfile::tempdir().map_err(|e| DecontamError::Provider(e.to_string()))?;
        let input = dir.path().join("image.jpg");
        std::fs::write(&input, jpeg_bytes).map_err(|e| DecontamError::Provider(e.to_string()))?;
        let tokens: Vec<String> = self
            .command_template
            .split_whitespace()
            .map(|t| t.replace("{input}", &input.to_string_lossy()))
            .collect();
        let (program, args) = tokens
            .split_first()
            .ok_or_else(|| DecontamError::Provider("empty embedder command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| DecontamError::Provider(format!("spawn {program}: {e}")))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(status)) if status.success() => break,
                Ok(Some(status)) => {
                    return Err(DecontamError::Provider(format!("exit status {status}")))
                }
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(DecontamError::Provider("embedder timeout".into()));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(DecontamError::Provider(e.to_string())),
            }
        }
        let mut stdout = Vec::new();
        use std::io::Read;
        child
            .stdout
            .take()
            .ok_or_else(|| DecontamError::Provider("no stdout".into()))?
            .read_to_end(&mut stdout)
            .map_err(|e| DecontamError::Provider(e.to_string()))?;
        let vector: Vec<f32> = serde_json::from_slice(&stdout)
            .map_err(|e| DecontamError::Provider(format!("bad embedder output: {e}")))?;
        Descriptor::new(vector)
    }

    fn name(&self) -> &'static str {
        "process"
    }

    fn paper_faithful(&self) -> bool {
        // Depends on what the external command runs; without verification
        // the report must not claim fidelity.
        false
    }
}

/// Built-in fallback: a 64-bit difference hash mapped to a 64-dim vector
/// with components of magnitude 1/8, which is unit-norm by construction.
/// Lets the full pipeline run with zero ML dependencies; its threshold
/// semantics differ from the published model's.
pub struct PhashProvider;

/// Difference hash of the decoded image: 9x8 grayscale downsample, one
/// bit per horizontal neighbor comparison.
pub fn difference_hash(jpeg_bytes: &[u8]) -> Result<u64, DecontamError> {
    let img = image::load_from_memory(jpeg_bytes)
        .map_err(|e| DecontamError::Provider(format!("phash decode: {e}")))?;
    let gray = image::imageops::resize(
        &img.to_luma8(),
        9,
        8,
        image::imageops::FilterType::Triangle,
    );
    let mut hash = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            hash <<= 1;
            if gray.get_pixel(x, y).0[0] > gray.get_pixel(x + 1, y).0[0] {
                hash |= 1;
            }
        }
    }
    Ok(hash)
}

impl DescriptorProvider for PhashProvider {
    fn descriptor(&self, jpeg_bytes: &[u8]) -> Result<Descriptor, DecontamError> {
        let hash = difference_hash(jpeg_bytes)?;
        let vector: Vec<f32> = (0..64)
            .map(|bit| {
                if hash >> (63 - bit) & 1 == 1 {
                    0.125
                } else {
                    -0.125
                }
            })
            .collect();
        Descriptor::new(vector)
    }

    fn name(&self) -> &'static str {
        "phash"
    }

    fn paper_faithful(&self) -> bool {
        false
    }
}
