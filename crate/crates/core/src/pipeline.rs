//! Batch orchestration: wiring ingest, figure matching, caption
//! normalization, image processing, and dataset persistence into runs
//! over whole archive collections.
//!
//! Per-paper failures never abort a batch; they land in the skip log or
//! rejection report. Every run writes a machine-readable summary whose
//! counts satisfy `pairs_out = pairs_in - rejections - removals`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::caption::{normalize_caption, NormalizedCaption};
use crate::dataset::{
    format_key, write_manifest, DatasetError, ExtractedPair, ManifestRow, Subset,
};
use crate::decontam::{
    filter_pairs, load_descriptor_index, DescriptorProvider, PhashProvider, ProcessProvider,
    SidecarProvider,
};
use crate::imageproc::{
    decode_image, encode_jpeg, resize_to_target, ImageProcError, RasterizerHook,
    DEFAULT_JPEG_QUALITY, DEFAULT_RESIZE_TARGET, RESIZE_FILTER_NAME,
};
use crate::ingest::{
    classify_source, enumerate_members, enumerate_pmc_package, gunzip, paper_id_from_filename,
    IngestError, MemberKind, PaperArchive, SourceKind,
};
use crate::jats;
use crate::tex::{decode_tex, find_figure_candidates, parse_tex, FigureCandidate};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Usage or configuration problems; CLI exit code 1.
    #[error("configuration error: {0}")]
    Config(String),
    /// I/O setup failures; CLI exit code 2.
    #[error("I/O error: {0}")]
    Io(String),
    /// Malformed data files; CLI exit code 3.
    #[error("data format error: {0}")]
    Format(String),
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => PipelineError::Io(e.to_string()),
            DatasetError::AllZero | DatasetError::DuplicateKey(_) => {
                PipelineError::Config(e.to_string())
            }
            DatasetError::Format { .. } => PipelineError::Format(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub jpeg_quality: u8,
    pub resize_target: u32,
    pub threshold: f32,
    pub rasterizer: Option<RasterizerHook>,
    /// Worker threads; 0 means the rayon default.
    pub jobs: usize,
    pub shard_size: usize,
}

impl PipelineConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            out_dir: out_dir.into(),
            jpeg_quality: DEFAULT_JPEG_QUALITY,
            resize_target: DEFAULT_RESIZE_TARGET,
            threshold: crate::decontam::DEFAULT_THRESHOLD,
            rasterizer: None,
            jobs: 0,
            shard_size: 10_000,
        }
    }
}

/// Skip log line: a whole paper or package that left the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkipRecord {
    pub paper_id: String,
    pub stage: String,
    pub reason: String,
}

/// Rejection report line: one graphic that did not become a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectionRecord {
    pub paper_id: String,
    pub tex_path: String,
    pub span: [u64; 2],
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveSettings {
    pub jpeg_quality: u8,
    pub resize_target: u32,
    pub resize_filter: String,
    pub rasterizer: Option<String>,
    pub jobs: usize,
}

/// Machine-readable per-run accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub pipeline_version: String,
    pub subst_table_sha256: String,
    pub settings: EffectiveSettings,
    pub papers_seen: u64,
    pub papers_processed: u64,
    pub papers_skipped: u64,
    pub parse_degraded_files: u64,
    /// Graphics that failed the matching rules; these never become pairs.
    pub rule_rejections: u64,
    /// Matched candidates entering the normalization stages.
    pub pairs_in: u64,
    /// Post-match rejections by stage reason.
    pub stage_rejections: BTreeMap<String, u64>,
    pub rejections_total: u64,
    pub removals_total: u64,
    pub pairs_out: u64,
}

impl RunSummary {
    /// The accounting identity every run must satisfy.
    pub fn balanced(&self) -> bool {
        self.pairs_out == self.pairs_in - self.rejections_total - self.removals_total
    }
}

#[derive(Debug)]
struct PairDraft {
    subset: Subset,
    paper_id: String,
    source_doc: String,
    source_path: String,
    span: (u64, u64),
    jpeg: Vec<u8>,
    width: u32,
    height: u32,
    caption: NormalizedCaption,
}

#[derive(Debug, Default)]
struct SubmissionResult {
    drafts: Vec<PairDraft>,
    skips: Vec<SkipRecord>,
    rejections: Vec<RejectionRecord>,
    processed: bool,
    parse_degraded: u64,
    rule_rejections: u64,
    pairs_in: u64,
    stage_rejections: BTreeMap<String, u64>,
}

impl SubmissionResult {
    fn skip(paper_id: &str, stage: &str, reason: impl Into<String>) -> Self {
        SubmissionResult {
            skips: vec![SkipRecord {
                paper_id: paper_id.to_string(),
                stage: stage.to_string(),
                reason: reason.into(),
            }],
            ..Default::default()
        }
    }

    fn bump_stage(&mut self, reason: &str) {
        *self.stage_rejections.entry(reason.to_string()).or_insert(0) += 1;
    }
}

fn run_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    if jobs == 0 {
        Ok(f())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(pool.install(f))
    }
}

/// Expand input paths: directories yield their matching files sorted by
/// name; files pass through.
fn expand_inputs(inputs: &[PathBuf], suffixes: &[&str]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", input.display())))?
                .filter_map(|r| r.ok())
                .map(|e| e.path())
                .filter(|p| {
                    let name = p.file_name().unwrap_or_default().to_string_lossy();
                    suffixes.iter().any(|s| name.ends_with(s))
                })
                .collect();
            entries.sort();
            out.extend(entries);
        } else if input.exists() {
            out.push(input.clone());
        } else {
            return Err(PipelineError::Io(format!(
                "input {} does not exist",
                input.display()
            )));
        }
    }
    Ok(out)
}

/// One arXiv submission: the per-paper file from the bulk layout.
struct Submission {
    paper_id: String,
    payload: Vec<u8>,
    gzipped: bool,
}

/// Collect submissions from the inputs: outer `.tar` containers of
/// per-paper `.gz` files, or bare per-paper `.gz` files.
fn collect_arxiv_submissions(files: &[PathBuf]) -> Result<Vec<Submission>, PipelineError> {
    let mut submissions = Vec::new();
    for path in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        let bytes =
            std::fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        if name.ends_with(".tar") {
            let mut archive = tar::Archive::new(&bytes[..]);
            let entries = archive
                .entries()
                .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
            for entry in entries {
                let mut entry =
                    entry.map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
                if !entry.header().entry_type().is_file() {
                    continue;
                }
                let entry_name = entry
                    .path()
                    .map_err(|e| PipelineError::Format(e.to_string()))?
                    .to_string_lossy()
                    .into_owned();
                let mut payload = Vec::with_capacity(entry.size() as usize);
                entry
                    .read_to_end(&mut payload)
                    .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
                submissions.push(Submission {
                    paper_id: paper_id_from_filename(&entry_name),
                    gzipped: entry_name.ends_with(".gz"),
                    payload,
                });
            }
        } else {
            submissions.push(Submission {
                paper_id: paper_id_from_filename(&name),
                gzipped: name.ends_with(".gz"),
                payload: bytes,
            });
        }
    }
    Ok(submissions)
}

/// Run the arXiv extraction pipeline over the inputs and persist the
/// manifest, images, reports, and run summary under the output directory.
pub fn run_extract_arxiv(
    config: &PipelineConfig,
    inputs: &[PathBuf],
) -> Result<RunSummary, PipelineError> {
    prepare_out_dir(config)?;
    let files = expand_inputs(inputs, &[".tar", ".gz"])?;
    let submissions = collect_arxiv_submissions(&files)?;
    let results = run_pool(config.jobs, || {
        submissions
            .par_iter()
            .map(|s| process_arxiv_submission(s, config))
            .collect::<Vec<_>>()
    })?;
    finalize_extract("extract-arxiv", submissions.len(), results, config)
}

fn process_arxiv_submission(submission: &Submission, config: &PipelineConfig) -> SubmissionResult {
    let paper_id = &submission.paper_id;
    let payload: Vec<u8> = if submission.gzipped {
        match gunzip(&submission.payload) {
            Ok(p) => p,
            Err(e) => return SubmissionResult::skip(paper_id, "decompress", e.to_string()),
        }
    } else {
        submission.payload.clone()
    };

    let kind = classify_source(&payload);
    if kind != SourceKind::LatexProjectTar {
        return SubmissionResult::skip(paper_id, "classify", kind.as_str());
    }

    let archive = match enumerate_members(&payload, paper_id) {
        Ok(a) => a,
        Err(e) => return SubmissionResult::skip(paper_id, "enumerate", e.to_string()),
    };

    let mut result = SubmissionResult {
        processed: true,
        ..Default::default()
    };
    for raw in &archive.traversal_rejects {
        result.skips.push(SkipRecord {
            paper_id: paper_id.clone(),
            stage: "enumerate".into(),
            reason: format!("path traversal: {raw}"),
        });
    }

    let tex_paths: Vec<String> = archive
        .paths_where(|k| matches!(k, MemberKind::TexSource))
        .into_iter()
        .map(str::to_owned)
        .collect();
    for tex_path in &tex_paths {
        let bytes = archive.content(tex_path).expect("member content present");
        let source = decode_tex(bytes);
        let tree = parse_tex(&source);
        if tree.degraded {
            result.parse_degraded += 1;
        }
        let (candidates, rejections) = find_figure_candidates(&tree, &archive, tex_path);
        result.rule_rejections += rejections.len() as u64;
        for r in rejections {
            result.rejections.push(RejectionRecord {
                paper_id: paper_id.clone(),
                tex_path: tex_path.clone(),
                span: [r.span.start as u64, r.span.end as u64],
                reason: serde_variant_name(&r.reason),
                detail: r.detail,
            });
        }
        for candidate in candidates {
            result.pairs_in += 1;
            process_candidate(candidate, Subset::Arxiv, &archive, config, &mut result);
        }
    }
    result
}

fn serde_variant_name<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| "unknown".into())
}

/// Shared post-match stages: image normalization then caption
/// normalization. Failures are counted per stage and logged as
/// rejections.
fn process_candidate(
    candidate: FigureCandidate,
    subset: Subset,
    archive: &PaperArchive,
    config: &PipelineConfig,
    result: &mut SubmissionResult,
) {
    let span = [
        candidate.caption_span.start as u64,
        candidate.caption_span.end as u64,
    ];
    let reject = |result: &mut SubmissionResult, reason: &str, detail: Option<String>| {
        result.bump_stage(reason);
        result.rejections.push(RejectionRecord {
            paper_id: candidate.paper_id.clone(),
            tex_path: candidate.tex_path.clone(),
            span,
            reason: reason.to_string(),
            detail,
        });
    };

    let bytes = archive
        .content(&candidate.graphics_path)
        .expect("candidate soundness: member exists");
    let extension = candidate
        .graphics_path
        .rsplit_once('.')
        .map(|(_, e)| e.to_ascii_lowercase())
        .unwrap_or_default();

    let raster = match decode_image(
        bytes,
        &extension,
        config.rasterizer.as_ref(),
        config.resize_target,
    ) {
        Ok(r) => r,
        Err(ImageProcError::VectorNoHook) => {
            return reject(result, "vector_no_hook", Some(candidate.graphics_path));
        }
        Err(ImageProcError::Hook(msg)) => {
            return reject(result, "hook_error", Some(msg));
        }
        Err(ImageProcError::Decode(msg)) => {
            return reject(result, "decode_error", Some(msg));
        }
    };
    let resized = resize_to_target(&raster, config.resize_target);
    let jpeg = encode_jpeg(&resized, config.jpeg_quality);

    let caption = normalize_caption(&candidate.caption_source);
    if caption.text.is_empty() {
        return reject(result, "empty_caption", None);
    }

    result.drafts.push(PairDraft {
        subset,
        paper_id: candidate.paper_id,
        source_doc: candidate.tex_path,
        source_path: candidate.graphics_path,
        span: (span[0], span[1]),
        width: resized.width,
        height: resized.height,
        jpeg,
        caption,
    });
}

/// Run the PMC extraction pipeline over `.tar.gz` package paths.
pub fn run_extract_pmc(
    config: &PipelineConfig,
    inputs: &[PathBuf],
) -> Result<RunSummary, PipelineError> {
    prepare_out_dir(config)?;
    let files = expand_inputs(inputs, &[".tar.gz", ".tgz"])?;
    let packages: Vec<(String, Vec<u8>)> = files
        .iter()
        .map(|path| {
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            let bytes = std::fs::read(path)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
            Ok((paper_id_from_filename(&name), bytes))
        })
        .collect::<Result<_, PipelineError>>()?;
    let results = run_pool(config.jobs, || {
        packages
            .par_iter()
            .map(|(paper_id, bytes)| process_pmc_package(paper_id, bytes, config))
            .collect::<Vec<_>>()
    })?;
    finalize_extract("extract-pmc", packages.len(), results, config)
}

fn process_pmc_package(paper_id: &str, targz: &[u8], config: &PipelineConfig) -> SubmissionResult {
    let archive = match enumerate_pmc_package(targz, paper_id) {
        Ok(a) => a,
        Err(e) => {
            let stage = match e {
                IngestError::MissingNxml | IngestError::MultipleNxml(_) => "package",
                IngestError::Decompress(_) => "decompress",
                IngestError::Tar(_) => "enumerate",
            };
            return SubmissionResult::skip(paper_id, stage, e.to_string());
        }
    };
    let nxml_path = archive.nxml_path.clone().expect("set by enumerate_pmc_package");
    let nxml_bytes = archive.content(&nxml_path).expect("member content present");

    let text = match jats::decode_xml(nxml_bytes) {
        Ok(t) => t,
        Err(e) => return SubmissionResult::skip(paper_id, "parse", e.to_string()),
    };
    let doc = match jats::parse_jats(&text) {
        Ok(d) => d,
        Err(e) => return SubmissionResult::skip(paper_id, "parse", e.to_string()),
    };

    let mut result = SubmissionResult {
        processed: true,
        ..Default::default()
    };
    let (candidates, rejections) = jats::extract_jats_figures(&doc, &archive);
    result.rule_rejections += rejections.len() as u64;
    for r in rejections {
        result.rejections.push(RejectionRecord {
            paper_id: paper_id.to_string(),
            tex_path: nxml_path.clone(),
            span: [0, 0],
            reason: serde_variant_name(&r.reason),
            detail: r.detail.or(r.fig_id),
        });
    }
    for candidate in candidates {
        result.pairs_in += 1;
        process_candidate(candidate, Subset::Pmc, &archive, config, &mut result);
    }
    result
}

fn prepare_out_dir(config: &PipelineConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(config.out_dir.join("images"))
        .map_err(|e| PipelineError::Config(format!("output dir: {e}")))?;
    std::fs::create_dir_all(config.out_dir.join("reports"))
        .map_err(|e| PipelineError::Config(format!("output dir: {e}")))?;
    Ok(())
}

fn effective_settings(config: &PipelineConfig) -> EffectiveSettings {
    EffectiveSettings {
        jpeg_quality: config.jpeg_quality,
        resize_target: config.resize_target,
        resize_filter: RESIZE_FILTER_NAME.to_string(),
        rasterizer: config.rasterizer.as_ref().map(|h| h.identity()),
        jobs: config.jobs,
    }
}

fn finalize_extract(
    command: &str,
    papers_seen: usize,
    results: Vec<SubmissionResult>,
    config: &PipelineConfig,
) -> Result<RunSummary, PipelineError> {
    let mut drafts = Vec::new();
    let mut skips = Vec::new();
    let mut rejections = Vec::new();
    let mut summary = RunSummary {
        command: command.to_string(),
        pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
        subst_table_sha256: crate::caption::macro_table_sha256().to_string(),
        settings: effective_settings(config),
        papers_seen: papers_seen as u64,
        papers_processed: 0,
        papers_skipped: 0,
        parse_degraded_files: 0,
        rule_rejections: 0,
        pairs_in: 0,
        stage_rejections: BTreeMap::new(),
        rejections_total: 0,
        removals_total: 0,
        pairs_out: 0,
    };
    for result in results {
        if result.processed {
            summary.papers_processed += 1;
        } else {
            summary.papers_skipped += 1;
        }
        summary.parse_degraded_files += result.parse_degraded;
        summary.rule_rejections += result.rule_rejections;
        summary.pairs_in += result.pairs_in;
        for (reason, count) in result.stage_rejections {
            *summary.stage_rejections.entry(reason).or_insert(0) += count;
        }
        drafts.extend(result.drafts);
        skips.extend(result.skips);
        rejections.extend(result.rejections);
    }
    summary.rejections_total = summary.stage_rejections.values().sum();

    // Reproducible keys: stable sort independent of worker completion
    // order, then sequential numbering.
    drafts.sort_by(|a, b| {
        (&a.subset, &a.paper_id, &a.source_path, a.span, &a.source_doc).cmp(&(
            &b.subset,
            &b.paper_id,
            &b.source_path,
            b.span,
            &b.source_doc,
        ))
    });

    let images_dir = config.out_dir.join("images");
    let mut rows = Vec::with_capacity(drafts.len());
    for (index, draft) in drafts.into_iter().enumerate() {
        let key = format_key(index);
        let image_sha256 = hex::encode(Sha256::digest(&draft.jpeg));
        let image_path = images_dir.join(format!("{key}.jpg"));
        std::fs::write(&image_path, &draft.jpeg)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", image_path.display())))?;
        let pair = ExtractedPair {
            key,
            subset: draft.subset,
            paper_id: draft.paper_id,
            jpeg: draft.jpeg,
            width: draft.width,
            height: draft.height,
            caption: draft.caption,
            image_sha256,
            source_path: draft.source_path,
            source_doc: draft.source_doc,
            span: draft.span,
        };
        rows.push(ManifestRow::from_pair(&pair));
    }
    summary.pairs_out = rows.len() as u64;

    write_manifest(&rows, &config.out_dir.join("manifest.jsonl"))?;
    write_jsonl(&config.out_dir.join("reports/skips.jsonl"), &skips)?;
    write_jsonl(&config.out_dir.join("reports/rejections.jsonl"), &rejections)?;
    write_json(&config.out_dir.join("run_summary.json"), &summary)?;
    debug_assert!(summary.balanced());
    Ok(summary)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("report rows serialize");
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut buf = serde_json::to_vec_pretty(value).expect("summary serializes");
    buf.push(b'\n');
    std::fs::write(path, buf).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

/// Which descriptor provider a decontamination run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    /// Built-in perceptual hash; runs everywhere, not paper-faithful.
    Phash,
    /// Sidecar JSONL of precomputed descriptors keyed by image sha256.
    Sidecar(PathBuf),
    /// External embedder command with an `{input}` placeholder.
    Process(String),
}

impl ProviderSpec {
    /// Parse `phash`, `sidecar:<path>` or `process:<command>`.
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        if s == "phash" {
            return Ok(ProviderSpec::Phash);
        }
        if let Some(path) = s.strip_prefix("sidecar:") {
            return Ok(ProviderSpec::Sidecar(PathBuf::from(path)));
        }
        if let Some(cmd) = s.strip_prefix("process:") {
            return Ok(ProviderSpec::Process(cmd.to_string()));
        }
        Err(PipelineError::Config(format!(
            "unknown provider {s:?}; expected phash, sidecar:<path>, or process:<command>"
        )))
    }

    fn build(&self) -> Result<Box<dyn DescriptorProvider>, PipelineError> {
        match self {
            ProviderSpec::Phash => Ok(Box::new(PhashProvider)),
            ProviderSpec::Sidecar(path) => Ok(Box::new(
                SidecarProvider::load(path).map_err(|e| PipelineError::Format(e.to_string()))?,
            )),
            ProviderSpec::Process(cmd) => Ok(Box::new(ProcessProvider::new(cmd.clone()))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ProviderSpec::Phash => "phash",
            ProviderSpec::Sidecar(_) => "sidecar",
            ProviderSpec::Process(_) => "process",
        }
    }

    fn paper_faithful(&self) -> bool {
        matches!(self, ProviderSpec::Sidecar(_))
    }
}

/// Full decontamination report written as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecontamRunReport {
    #[serde(flatten)]
    pub report: crate::decontam::DecontamReport,
    pub kept: usize,
    /// Pairs whose descriptor could not be produced; never silently kept.
    pub undecided: usize,
    pub provider: String,
    /// False for providers whose threshold semantics differ from the
    /// published similarity model's.
    pub provider_paper_faithful: bool,
    /// Similarity is computed on the normalized (resized) images.
    pub similarity_computed_on: String,
}

/// Filter a manifest against a descriptor index. Writes kept, removed,
/// and undecided manifests (rows verbatim), a removal detail report, the
/// JSON report, and a run summary.
pub fn run_decontaminate(
    config: &PipelineConfig,
    manifest_path: &Path,
    index_path: &Path,
    provider_spec: &ProviderSpec,
) -> Result<DecontamRunReport, PipelineError> {
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| PipelineError::Config(format!("output dir: {e}")))?;
    let index =
        load_descriptor_index(index_path).map_err(|e| PipelineError::Format(e.to_string()))?;
    let provider = provider_spec.build()?;

    let raw = std::fs::read_to_string(manifest_path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", manifest_path.display())))?;
    let mut rows: Vec<(ManifestRow, String)> = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| PipelineError::Format(format!("manifest line {}: {e}", idx + 1)))?;
        rows.push((row, line.to_string()));
    }

    let images_dir = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("images");

    let descriptors: Vec<Result<crate::decontam::Descriptor, String>> =
        run_pool(config.jobs, || {
            rows.par_iter()
                .map(|(row, _)| {
                    let path = images_dir.join(format!("{}.jpg", row.key));
                    let bytes = std::fs::read(&path)
                        .map_err(|e| format!("{}: {e}", path.display()))?;
                    provider.descriptor(&bytes).map_err(|e| e.to_string())
                })
                .collect()
        })?;

    let mut undecided: Vec<&String> = Vec::new();
    let mut undecided_details: Vec<serde_json::Value> = Vec::new();
    let mut decided: Vec<(usize, crate::decontam::Descriptor)> = Vec::new();
    for (i, result) in descriptors.into_iter().enumerate() {
        match result {
            Ok(d) => decided.push((i, d)),
            Err(message) => {
                undecided.push(&rows[i].1);
                undecided_details.push(serde_json::json!({
                    "key": rows[i].0.key,
                    "error": message,
                }));
            }
        }
    }

    let (kept_idx, removed, report) = filter_pairs(decided, &index, config.threshold)
        .map_err(|e| PipelineError::Format(e.to_string()))?;

    let kept_lines: Vec<&String> = kept_idx.iter().map(|i| &rows[*i].1).collect();
    let removed_lines: Vec<&String> = removed.iter().map(|r| &rows[r.item].1).collect();
    let removal_details: Vec<serde_json::Value> = removed
        .iter()
        .map(|r| {
            serde_json::json!({
                "key": rows[r.item].0.key,
                "score": r.score,
                "eval_dataset": r.label,
            })
        })
        .collect();

    write_lines(&config.out_dir.join("kept-manifest.jsonl"), &kept_lines)?;
    write_lines(&config.out_dir.join("removed-manifest.jsonl"), &removed_lines)?;
    write_lines(&config.out_dir.join("undecided-manifest.jsonl"), &undecided)?;
    write_jsonl(&config.out_dir.join("removed-details.jsonl"), &removal_details)?;
    write_jsonl(&config.out_dir.join("undecided-details.jsonl"), &undecided_details)?;

    let run_report = DecontamRunReport {
        kept: kept_lines.len(),
        undecided: undecided.len(),
        provider: provider_spec.name().to_string(),
        provider_paper_faithful: provider_spec.paper_faithful(),
        similarity_computed_on: "normalized_images".to_string(),
        report,
    };
    write_json(&config.out_dir.join("decontam_report.json"), &run_report)?;

    let summary = RunSummary {
        command: "decontaminate".into(),
        pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
        subst_table_sha256: crate::caption::macro_table_sha256().to_string(),
        settings: effective_settings(config),
        papers_seen: 0,
        papers_processed: 0,
        papers_skipped: 0,
        parse_degraded_files: 0,
        rule_rejections: 0,
        pairs_in: rows.len() as u64,
        stage_rejections: BTreeMap::from([(
            "descriptor_undecided".to_string(),
            undecided.len() as u64,
        )]),
        rejections_total: undecided.len() as u64,
        removals_total: run_report.report.removed as u64,
        pairs_out: kept_lines.len() as u64,
    };
    debug_assert!(summary.balanced());
    write_json(&config.out_dir.join("run_summary.json"), &summary)?;
    Ok(run_report)
}

fn write_lines(path: &Path, lines: &[&String]) -> Result<(), PipelineError> {
    let mut buf = String::new();
    for line in lines {
        buf.push_str(line);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}
