//! Dataset persistence and statistics: the JSONL manifest, CommonPool-style
//! tar shards, summary statistics, and training-mixture proportions.
//!
//! The manifest is the unit of determinism: rows are written in key order
//! with a fixed field order, so identical inputs and settings produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::NormalizedCaption;

/// Width of the zero-padded decimal sample key.
pub const KEY_WIDTH: usize = 9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("manifest line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("all subset counts are zero")]
    AllZero,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Arxiv,
    Pmc,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::Arxiv => "arxiv",
            Subset::Pmc => "pmc",
        }
    }
}

/// One normalized image-caption record. The JPEG bytes live next to the
/// manifest as `images/{key}.jpg`; the manifest row carries everything
/// else.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedPair {
    pub key: String,
    pub subset: Subset,
    pub paper_id: String,
    pub jpeg: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub caption: NormalizedCaption,
    pub image_sha256: String,
    /// Original member path of the graphic inside the paper archive.
    pub source_path: String,
    /// The `.tex` or `.nxml` member the caption came from.
    pub source_doc: String,
    /// Caption byte span (arXiv) or (fig, graphic) indices (PMC).
    pub span: (u64, u64),
}

/// One manifest line. Field order is the serialization order and must not
/// change, or manifests stop being byte-reproducible across builds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub key: String,
    pub subset: Subset,
    pub paper_id: String,
    pub source_doc: String,
    pub source_path: String,
    pub span: [u64; 2],
    pub width: u32,
    pub height: u32,
    pub image_sha256: String,
    pub caption: String,
    pub caption_chars: u64,
    pub caption_words: u64,
    pub caption_refs: u64,
    pub caption_cits: u64,
    pub caption_lossy: bool,
    pub pipeline_version: String,
    pub subst_table_sha256: String,
}

impl ManifestRow {
    pub fn from_pair(pair: &ExtractedPair) -> Self {
        ManifestRow {
            key: pair.key.clone(),
            subset: pair.subset,
            paper_id: pair.paper_id.clone(),
            source_doc: pair.source_doc.clone(),
            source_path: pair.source_path.clone(),
            span: [pair.span.0, pair.span.1],
            width: pair.width,
            height: pair.height,
            image_sha256: pair.image_sha256.clone(),
            caption: pair.caption.text.clone(),
            caption_chars: pair.caption.char_length as u64,
            caption_words: crate::caption::caption_word_count(&pair.caption) as u64,
            caption_refs: pair.caption.replacements.ref_count as u64,
            caption_cits: pair.caption.replacements.cit_count as u64,
            caption_lossy: pair.caption.lossy,
            pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
            subst_table_sha256: crate::caption::macro_table_sha256().to_string(),
        }
    }
}

/// Write manifest rows as JSONL, one row per pair, in key order.
/// Returns the row count.
pub fn write_manifest(rows: &[ManifestRow], out: &Path) -> Result<usize, DatasetError> {
    let mut seen: Option<&str> = None;
    for row in rows {
        if let Some(prev) = seen {
            if row.key.as_str() == prev {
                return Err(DatasetError::DuplicateKey(row.key.clone()));
            }
            debug_assert!(row.key.as_str() > prev, "rows must arrive in key order");
        }
        seen = Some(&row.key);
    }
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("manifest rows serialize");
        buf.push(b'\n');
    }
    std::fs::write(out, &buf).map_err(io_err(out))?;
    Ok(rows.len())
}

/// Read and validate a manifest file.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| DatasetError::Format {
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Format a sample key.
pub fn format_key(index: usize) -> String {
    format!("{index:0width$}", width = KEY_WIDTH)
}

/// Write tar shards named `{index:05}.tar`, each holding `{key}.jpg`,
/// `{key}.txt` (caption) and `{key}.json` (metadata row) per pair, in key
/// order. The last shard may be short. Headers are zeroed (mtime 0,
/// uid/gid 0, mode 0644) so output is byte-deterministic.
pub fn write_shards(
    rows: &[ManifestRow],
    image_bytes: impl Fn(&ManifestRow) -> Result<Vec<u8>, DatasetError>,
    shard_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, DatasetError> {
    assert!(shard_size >= 1, "shard_size must be >= 1");
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut shard_paths = Vec::new();
    for (shard_index, chunk) in rows.chunks(shard_size).enumerate() {
        let path = out_dir.join(format!("{shard_index:05}.tar"));
        let mut builder = tar::Builder::new(Vec::new());
        for row in chunk {
            let jpeg = image_bytes(row)?;
            append_entry(&mut builder, &format!("{}.jpg", row.key), &jpeg)?;
            append_entry(&mut builder, &format!("{}.txt", row.key), row.caption.as_bytes())?;
            let json = serde_json::to_vec(row).expect("manifest rows serialize");
            append_entry(&mut builder, &format!("{}.json", row.key), &json)?;
        }
        let bytes = builder
            .into_inner()
            .map_err(io_err(&path))?;
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        shard_paths.push(path);
    }
    Ok(shard_paths)
}

fn append_entry(
    builder: &mut tar::Builder<Vec<u8>>,
    name: &str,
    data: &[u8],
) -> Result<(), DatasetError> {
    let mut header = tar::Header::new_ustar();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_uid(0);
    header.set_gid(0);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, name, data)
        .map_err(|source| DatasetError::Io {
            path: PathBuf::from(name),
            source,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetStats {
    pub figure_count: u64,
    /// Absent (not zero) when the subset is empty.
    pub avg_caption_chars: Option<f64>,
    pub avg_caption_words: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub figure_count: u64,
    pub avg_caption_chars: Option<f64>,
    pub avg_caption_words: Option<f64>,
    pub per_subset: BTreeMap<String, SubsetStats>,
}

/// One-pass counts and exact arithmetic means over a manifest. Lengths
/// are recomputed from the caption text, not trusted from the row.
pub fn compute_stats(rows: &[ManifestRow]) -> DatasetStats {
    #[derive(Default)]
    struct Acc {
        count: u64,
        chars: u64,
        words: u64,
    }
    impl Acc {
        fn push(&mut self, caption: &str) {
            self.count += 1;
            self.chars += caption.chars().count() as u64;
            self.words += caption.split_whitespace().count() as u64;
        }
        fn stats(&self) -> SubsetStats {
            SubsetStats {
                figure_count: self.count,
                avg_caption_chars: (self.count > 0)
                    .then(|| self.chars as f64 / self.count as f64),
                avg_caption_words: (self.count > 0)
                    .then(|| self.words as f64 / self.count as f64),
            }
        }
    }

    let mut total = Acc::default();
    let mut by_subset: BTreeMap<String, Acc> = BTreeMap::new();
    for row in rows {
        total.push(&row.caption);
        by_subset
            .entry(row.subset.as_str().to_string())
            .or_default()
            .push(&row.caption);
    }
    let per_subset = by_subset
        .into_iter()
        .map(|(name, acc)| (name, acc.stats()))
        .collect();
    let t = total.stats();
    DatasetStats {
        figure_count: t.figure_count,
        avg_caption_chars: t.avg_caption_chars,
        avg_caption_words: t.avg_caption_words,
        per_subset,
    }
}

/// Render stats as an aligned text table with the columns
/// `Dataset | # figures | avg caption length` (characters; the word-based
/// averages are appended as a footnote so either unit can be checked).
pub fn format_stats_table(stats: &DatasetStats) -> String {
    let mut rows: Vec<(String, String, String)> = Vec::new();
    rows.push((
        "Dataset".to_string(),
        "# figures".to_string(),
        "avg caption length".to_string(),
    ));
    let fmt_avg = |v: Option<f64>| match v {
        Some(x) => format!("{x:.2}"),
        None => "-".to_string(),
    };
    for (name, s) in &stats.per_subset {
        rows.push((
            name.clone(),
            s.figure_count.to_string(),
            fmt_avg(s.avg_caption_chars),
        ));
    }
    rows.push((
        "total".to_string(),
        stats.figure_count.to_string(),
        fmt_avg(stats.avg_caption_chars),
    ));

    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (a, b, c) in &rows {
        out.push_str(&format!("{a:<w0$}  {b:>w1$}  {c:>w2$}\n"));
    }
    out.push_str(&format!(
        "avg caption length is in characters; in words: {}\n",
        fmt_avg(stats.avg_caption_words)
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureProportions {
    /// (subset, fraction) in input order; fractions sum to 1 within 1e-9.
    pub fractions: Vec<(String, f64)>,
    /// Nearest-integer percentages; the largest fraction absorbs the
    /// rounding residue so they sum to exactly 100.
    pub percentages: Vec<(String, i64)>,
}

/// Per-subset sampling fractions: count_i / total, plus integer
/// percentages under the documented remainder rule.
pub fn mixture_proportions(counts: &[(String, u64)]) -> Result<MixtureProportions, DatasetError> {
    let total: u64 = counts.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(DatasetError::AllZero);
    }
    let fractions: Vec<(String, f64)> = counts
        .iter()
        .map(|(name, c)| (name.clone(), *c as f64 / total as f64))
        .collect();
    let mut percentages: Vec<(String, i64)> = fractions
        .iter()
        .map(|(name, f)| (name.clone(), (f * 100.0).round() as i64))
        .collect();
    let residue: i64 = 100 - percentages.iter().map(|(_, p)| p).sum::<i64>();
    if residue != 0 {
        let largest = fractions
            .iter()
            .enumerate()
            .max_by(|(ia, (_, fa)), (ib, (_, fb))| {
                fa.partial_cmp(fb)
                    .unwrap()
                    .then(ib.cmp(ia)) // tie: earliest input position
            })
            .map(|(i, _)| i)
            .expect("counts is non-empty");
        percentages[largest].1 += residue;
    }
    Ok(MixtureProportions {
        fractions,
        percentages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::normalize_caption;

    fn row(key: &str, subset: Subset, caption: &str) -> ManifestRow {
        let pair = ExtractedPair {
            key: key.to_string(),
            subset,
            paper_id: "p".into(),
            jpeg: vec![0xFF, 0xD8, 0xFF, 0xD9],
            width: 2,
            height: 2,
            caption: normalize_caption(caption),
            image_sha256: "00".into(),
            source_path: "a.png".into(),
            source_doc: "main.tex".into(),
            span: (0, 1),
        };
        ManifestRow::from_pair(&pair)
    }

    #[test]
    fn manifest_is_written_in_key_order_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let rows = vec![
            row("000000000", Subset::Arxiv, "first"),
            row("000000001", Subset::Pmc, "second"),
            row("000000002", Subset::Arxiv, "third"),
        ];
        assert_eq!(write_manifest(&rows, &path).unwrap(), 3);
        let loaded = read_manifest(&path).unwrap();
        assert_eq!(loaded, rows);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let rows = vec![
            row("000000000", Subset::Arxiv, "a"),
            row("000000000", Subset::Arxiv, "b"),
        ];
        assert!(matches!(
            write_manifest(&rows, &path),
            Err(DatasetError::DuplicateKey(_))
        ));
    }

    #[test]
    fn manifest_write_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.jsonl");
        let p2 = dir.path().join("m2.jsonl");
        let rows = vec![row("000000000", Subset::Arxiv, "caption α")];
        write_manifest(&rows, &p1).unwrap();
        write_manifest(&rows, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn malformed_manifest_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"key\": 1}\n").unwrap();
        match read_manifest(&path) {
            Err(DatasetError::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn shards_have_expected_sizes_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ManifestRow> = (0..5)
            .map(|i| row(&format_key(i), Subset::Arxiv, &format!("caption {i}")))
            .collect();
        let shards = write_shards(&rows, |_| Ok(vec![0xFF, 0xD8, 0xFF, 0xD9]), 2, dir.path()).unwrap();
        assert_eq!(shards.len(), 3);
        assert_eq!(shards[0].file_name().unwrap(), "00000.tar");

        let mut keys_seen = Vec::new();
        for shard in &shards {
            let data = std::fs::read(shard).unwrap();
            let mut archive = tar::Archive::new(&data[..]);
            for entry in archive.entries().unwrap() {
                let entry = entry.unwrap();
                let path = entry.path().unwrap().to_string_lossy().into_owned();
                if let Some(key) = path.strip_suffix(".json") {
                    keys_seen.push(key.to_string());
                }
            }
        }
        assert_eq!(
            keys_seen,
            (0..5).map(format_key).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_pairs_make_zero_shards() {
        let dir = tempfile::tempdir().unwrap();
        let shards = write_shards(&[], |_| Ok(vec![]), 10, dir.path()).unwrap();
        assert!(shards.is_empty());
    }

    #[test]
    fn shard_bytes_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let rows = vec![row("000000000", Subset::Pmc, "x")];
        let img = |_: &ManifestRow| Ok(vec![1u8, 2, 3]);
        let s1 = write_shards(&rows, img, 1, d1.path()).unwrap();
        let s2 = write_shards(&rows, img, 1, d2.path()).unwrap();
        assert_eq!(
            std::fs::read(&s1[0]).unwrap(),
            std::fs::read(&s2[0]).unwrap()
        );
    }

    #[test]
    fn stats_are_exact_means() {
        let rows = vec![
            row("000000000", Subset::Arxiv, "0123456789"),
            row("000000001", Subset::Arxiv, "01234567890123456789"),
        ];
        let stats = compute_stats(&rows);
        assert_eq!(stats.figure_count, 2);
        assert_eq!(stats.avg_caption_chars, Some(15.0));
        let arxiv = &stats.per_subset["arxiv"];
        assert_eq!(arxiv.figure_count, 2);
        assert_eq!(arxiv.avg_caption_chars, Some(15.0));
    }

    #[test]
    fn empty_manifest_reports_absent_averages() {
        let stats = compute_stats(&[]);
        assert_eq!(stats.figure_count, 0);
        assert_eq!(stats.avg_caption_chars, None);
        assert_eq!(stats.avg_caption_words, None);
        let table = format_stats_table(&stats);
        assert!(table.contains("Dataset"));
        assert!(table.contains("# figures"));
        assert!(table.contains("avg caption length"));
    }

    #[test]
    fn mixture_matches_published_proportions() {
        let counts = vec![
            ("CommonPool".to_string(), 11_778_443u64),
            ("arXiv".to_string(), 1_117_377),
            ("PMC".to_string(), 766_855),
        ];
        let mix = mixture_proportions(&counts).unwrap();
        let pcts: Vec<i64> = mix.percentages.iter().map(|(_, p)| *p).collect();
        assert_eq!(pcts, vec![86, 8, 6]);
        let sum: f64 = mix.fractions.iter().map(|(_, f)| f).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_simple_cases() {
        let mix = mixture_proportions(&[("a".into(), 1), ("b".into(), 0)]).unwrap();
        assert_eq!(mix.fractions[0].1, 1.0);
        assert_eq!(mix.fractions[1].1, 0.0);

        let mix =
            mixture_proportions(&[("a".into(), 1), ("b".into(), 1), ("c".into(), 2)]).unwrap();
        let fr: Vec<f64> = mix.fractions.iter().map(|(_, f)| *f).collect();
        assert_eq!(fr, vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn mixture_residue_goes_to_largest_fraction() {
        // 1/3 each rounds to 33+33+33 = 99; the residue lands on the
        // largest fraction (tie broken by input order).
        let mix = mixture_proportions(&[("a".into(), 1), ("b".into(), 1), ("c".into(), 1)])
            .unwrap();
        let pcts: Vec<i64> = mix.percentages.iter().map(|(_, p)| *p).collect();
        assert_eq!(pcts.iter().sum::<i64>(), 100);
        assert_eq!(pcts, vec![34, 33, 33]);
    }

    #[test]
    fn mixture_all_zero_is_an_error() {
        assert!(matches!(
            mixture_proportions(&[("a".into(), 0)]),
            Err(DatasetError::AllZero)
        ));
    }

    #[test]
    fn percentages_sum_to_100_on_random_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let counts: Vec<(String, u64)> = (0..n)
                .map(|i| (format!("s{i}"), rng.gen_range(0..1_000_000u64)))
                .collect();
            if counts.iter().all(|(_, c)| *c == 0) {
                continue;
            }
            let mix = mixture_proportions(&counts).unwrap();
            assert_eq!(mix.percentages.iter().map(|(_, p)| p).sum::<i64>(), 100);
        }
    }
}
