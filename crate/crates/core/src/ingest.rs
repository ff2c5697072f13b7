//! Archive streaming and member classification.
//!
//! arXiv submissions arrive as gzipped payloads in a variety of formats;
//! only tar archives of LaTeX projects carry extractable figures. PMC OA
//! packages are gzipped tars with a single `.nxml` markup file.

use std::io::Read;

use flate2::read::GzDecoder;
use indexmap::IndexMap;
use thiserror::Error;

/// Image extensions recognized by the extraction pipeline.
pub const IMAGE_EXTENSIONS: [&str; 7] = ["jpg", "jpeg", "gif", "png", "pdf", "eps", "ps"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("gzip stream is corrupt: {0}")]
    Decompress(std::io::Error),
    #[error("tar archive is truncated or malformed: {0}")]
    Tar(std::io::Error),
    #[error("package contains no .nxml member")]
    MissingNxml,
    #[error("package contains {0} .nxml members")]
    MultipleNxml(usize),
}

/// Format of a decompressed arXiv submission payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    /// A tar archive of a LaTeX project; the only kind that proceeds to extraction.
    LatexProjectTar,
    SingleTex,
    Html,
    Ghostscript,
    Pdf,
    Unknown,
}

impl SourceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::LatexProjectTar => "latex_project_tar",
            SourceKind::SingleTex => "single_tex",
            SourceKind::Html => "html",
            SourceKind::Ghostscript => "ghostscript",
            SourceKind::Pdf => "pdf",
            SourceKind::Unknown => "unknown",
        }
    }
}

/// What an archive member is, as far as extraction cares.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MemberKind {
    TexSource,
    /// A graphics file; carries its lowercased extension (one of [`IMAGE_EXTENSIONS`]).
    Image(String),
    Other,
}

/// One regular file inside a paper archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveMember {
    /// Normalized `/`-separated path relative to the archive root.
    pub path: String,
    pub size_bytes: u64,
    pub kind: MemberKind,
}

/// All regular members of one paper archive, keyed by normalized path,
/// in tar order. Contents are held in memory; arXiv projects and PMC
/// packages are small.
#[derive(Debug, Clone, Default)]
pub struct PaperArchive {
    pub paper_id: String,
    members: IndexMap<String, ArchiveMember>,
    contents: IndexMap<String, Vec<u8>>,
    /// Normalized paths that were dropped because they escaped the archive root.
    pub traversal_rejects: Vec<String>,
    /// Path of the unique `.nxml` member, set by [`enumerate_pmc_package`].
    pub nxml_path: Option<String>,
}

impl PaperArchive {
    pub fn new(paper_id: impl Into<String>) -> Self {
        PaperArchive {
            paper_id: paper_id.into(),
            ..Default::default()
        }
    }

    pub fn members(&self) -> impl Iterator<Item = &ArchiveMember> {
        self.members.values()
    }

    pub fn member(&self, path: &str) -> Option<&ArchiveMember> {
        self.members.get(path)
    }

    pub fn content(&self, path: &str) -> Option<&[u8]> {
        self.contents.get(path).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn insert(&mut self, member: ArchiveMember, data: Vec<u8>) {
        self.contents.insert(member.path.clone(), data);
        self.members.insert(member.path.clone(), member);
    }

    /// Paths of members matching the kind predicate, in tar order.
    pub fn paths_where(&self, pred: impl Fn(&MemberKind) -> bool) -> Vec<&str> {
        self.members
            .values()
            .filter(|m| pred(&m.kind))
            .map(|m| m.path.as_str())
            .collect()
    }
}

/// Classify a member path into a [`MemberKind`] from its extension.
pub fn classify_member(path: &str) -> MemberKind {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("tex") => MemberKind::TexSource,
        Some(e) if IMAGE_EXTENSIONS.contains(&e) => MemberKind::Image(e.to_string()),
        _ => MemberKind::Other,
    }
}

/// Normalize an archive-internal path: `/` separators, no leading `./`,
/// no empty segments. Returns `None` when the path escapes the archive
/// root (contains a `..` segment or is absolute).
pub fn normalize_member_path(raw: &str) -> Option<String> {
    let raw = raw.replace('\\', "/");
    if raw.starts_with('/') {
        return None;
    }
    let mut out: Vec<&str> = Vec::new();
    for seg in raw.split('/') {
        match seg {
            "" | "." => continue,
            ".." => return None,
            s => out.push(s),
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out.join("/"))
    }
}

/// Decompress a gzip payload fully into memory.
pub fn gunzip(bytes: &[u8]) -> Result<Vec<u8>, IngestError> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(IngestError::Decompress)?;
    Ok(out)
}

fn looks_like_tar(payload: &[u8]) -> bool {
    // ustar magic at offset 257 covers POSIX and GNU tars.
    payload.len() >= 512 && &payload[257..262] == b"ustar"
}

/// Classify a decompressed arXiv submission payload.
///
/// Detection order: tar magic, `%PDF`, `%!PS`, HTML sniff (first
/// non-whitespace byte is `<`), then a TeX heuristic (a backslash command
/// within the first 4 KiB), else `Unknown`.
pub fn classify_source(payload: &[u8]) -> SourceKind {
    if looks_like_tar(payload) {
        return SourceKind::LatexProjectTar;
    }
    if payload.starts_with(b"%PDF") {
        return SourceKind::Pdf;
    }
    if payload.starts_with(b"%!PS") {
        return SourceKind::Ghostscript;
    }
    if let Some(first) = payload.iter().find(|b| !b.is_ascii_whitespace()) {
        if *first == b'<' {
            return SourceKind::Html;
        }
    }
    let head = &payload[..payload.len().min(4096)];
    let mut prev_backslash = false;
    for &b in head {
        if prev_backslash && b.is_ascii_alphabetic() {
            return SourceKind::SingleTex;
        }
        prev_backslash = b == b'\\';
    }
    SourceKind::Unknown
}

/// Enumerate the regular members of a tar payload.
///
/// Directory, symlink, and hardlink entries are skipped. Paths are
/// normalized; traversal paths are dropped and recorded on the archive.
/// A duplicate normalized path keeps the later entry (tar overwrite
/// semantics).
pub fn enumerate_members(tar_payload: &[u8], paper_id: &str) -> Result<PaperArchive, IngestError> {
    let mut archive = PaperArchive::new(paper_id);
    let mut reader = tar::Archive::new(tar_payload);
    for entry in reader.entries().map_err(IngestError::Tar)? {
        let mut entry = entry.map_err(IngestError::Tar)?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let raw_path = entry
            .path()
            .map_err(IngestError::Tar)?
            .to_string_lossy()
            .into_owned();
        let Some(path) = normalize_member_path(&raw_path) else {
            archive.traversal_rejects.push(raw_path);
            continue;
        };
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data).map_err(IngestError::Tar)?;
        let member = ArchiveMember {
            kind: classify_member(&path),
            size_bytes: data.len() as u64,
            path,
        };
        archive.insert(member, data);
    }
    Ok(archive)
}

/// Enumerate a gzipped PMC OA package and locate its unique `.nxml` member.
pub fn enumerate_pmc_package(targz: &[u8], paper_id: &str) -> Result<PaperArchive, IngestError> {
    let payload = gunzip(targz)?;
    let mut archive = enumerate_members(&payload, paper_id)?;
    let nxml: Vec<String> = archive
        .members()
        .filter(|m| m.path.to_ascii_lowercase().ends_with(".nxml"))
        .map(|m| m.path.clone())
        .collect();
    match nxml.len() {
        0 => Err(IngestError::MissingNxml),
        1 => {
            archive.nxml_path = Some(nxml.into_iter().next().unwrap());
            Ok(archive)
        }
        n => Err(IngestError::MultipleNxml(n)),
    }
}

/// Derive a paper id from an archive filename by stripping known archive
/// suffixes (`.tar.gz`, `.tgz`, `.tar`, `.gz`).
pub fn paper_id_from_filename(name: &str) -> String {
    let base = name.rsplit('/').next().unwrap_or(name);
    for suffix in [".tar.gz", ".tgz", ".tar", ".gz"] {
        if let Some(stripped) = base.strip_suffix(suffix) {
            return stripped.to_string();
        }
    }
    base.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn make_tar(entries: &[(&str, &[u8])]) -> Vec<u8> {
        let mut builder = tar::Builder::new(Vec::new());
        for (path, data) in entries {
            let mut header = tar::Header::new_ustar();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_cksum();
            builder.append_data(&mut header, path, *data).unwrap();
        }
        builder.into_inner().unwrap()
    }

    pub(crate) fn gzip(data: &[u8]) -> Vec<u8> {
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(data).unwrap();
        enc.finish().unwrap()
    }

    #[test]
    fn classify_pdf_magic() {
        assert_eq!(classify_source(b"%PDF-1.5 blah"), SourceKind::Pdf);
    }

    #[test]
    fn classify_tar_with_tex() {
        let tar = make_tar(&[("main.tex", b"\\documentclass{article}")]);
        assert_eq!(classify_source(&tar), SourceKind::LatexProjectTar);
    }

    #[test]
    fn classify_single_tex() {
        assert_eq!(
            classify_source(b"\\documentclass{article}\n\\begin{document}hi\\end{document}"),
            SourceKind::SingleTex
        );
    }

    #[test]
    fn classify_postscript_and_html_and_unknown() {
        assert_eq!(classify_source(b"%!PS-Adobe-2.0"), SourceKind::Ghostscript);
        assert_eq!(classify_source(b"  <html><body>"), SourceKind::Html);
        assert_eq!(classify_source(b"just plain text"), SourceKind::Unknown);
    }

    #[test]
    fn enumerate_assigns_kinds() {
        let tar = make_tar(&[
            ("main.tex", b"x"),
            ("fig/a.png", b"y"),
            ("notes.txt", b"z"),
        ]);
        let archive = enumerate_members(&tar, "p1").unwrap();
        assert_eq!(archive.len(), 3);
        assert_eq!(archive.member("main.tex").unwrap().kind, MemberKind::TexSource);
        assert_eq!(
            archive.member("fig/a.png").unwrap().kind,
            MemberKind::Image("png".into())
        );
        assert_eq!(archive.member("notes.txt").unwrap().kind, MemberKind::Other);
    }

    #[test]
    fn enumerate_is_case_insensitive_on_extensions() {
        let tar = make_tar(&[("A.TEX", b"x"), ("b.JPG", b"y")]);
        let archive = enumerate_members(&tar, "p").unwrap();
        assert_eq!(archive.member("A.TEX").unwrap().kind, MemberKind::TexSource);
        assert_eq!(
            archive.member("b.JPG").unwrap().kind,
            MemberKind::Image("jpg".into())
        );
    }

    #[test]
    fn enumerate_empty_tar() {
        let tar = make_tar(&[]);
        let archive = enumerate_members(&tar, "p").unwrap();
        assert!(archive.is_empty());
    }

    #[test]
    fn enumerate_drops_traversal_paths() {
        let tar = make_tar(&[("../evil.tex", b"x"), ("ok.tex", b"y")]);
        let archive = enumerate_members(&tar, "p").unwrap();
        assert_eq!(archive.len(), 1);
        assert!(archive.member("ok.tex").is_some());
        assert_eq!(archive.traversal_rejects, vec!["../evil.tex".to_string()]);
    }

    #[test]
    fn enumerate_is_idempotent() {
        let tar = make_tar(&[("main.tex", b"x"), ("img.png", b"abc")]);
        let a = enumerate_members(&tar, "p").unwrap();
        let b = enumerate_members(&tar, "p").unwrap();
        let pa: Vec<_> = a.members().collect();
        let pb: Vec<_> = b.members().collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn truncated_tar_reports_error() {
        let tar = make_tar(&[("main.tex", &[b'x'; 600])]);
        let truncated = &tar[..700];
        assert!(matches!(
            enumerate_members(truncated, "p"),
            Err(IngestError::Tar(_))
        ));
    }

    #[test]
    fn pmc_package_finds_nxml() {
        let tar = make_tar(&[("pkg/paper.nxml", b"<x/>"), ("pkg/f1.jpg", b"j")]);
        let archive = enumerate_pmc_package(&gzip(&tar), "PMC1").unwrap();
        assert_eq!(archive.nxml_path.as_deref(), Some("pkg/paper.nxml"));
    }

    #[test]
    fn pmc_package_missing_nxml() {
        let tar = make_tar(&[("a.jpg", b"j")]);
        assert!(matches!(
            enumerate_pmc_package(&gzip(&tar), "PMC1"),
            Err(IngestError::MissingNxml)
        ));
    }

    #[test]
    fn pmc_package_multiple_nxml() {
        let tar = make_tar(&[("x.nxml", b"<x/>"), ("y.nxml", b"<y/>")]);
        assert!(matches!(
            enumerate_pmc_package(&gzip(&tar), "PMC1"),
            Err(IngestError::MultipleNxml(2))
        ));
    }

    #[test]
    fn corrupt_gzip_reports_decompress_error() {
        assert!(matches!(
            gunzip(b"not gzip at all"),
            Err(IngestError::Decompress(_))
        ));
    }

    #[test]
    fn paper_id_strips_archive_suffixes() {
        assert_eq!(paper_id_from_filename("2012.01234.gz"), "2012.01234");
        assert_eq!(paper_id_from_filename("astro-ph0001001.gz"), "astro-ph0001001");
        assert_eq!(paper_id_from_filename("/x/PMC12345.tar.gz"), "PMC12345");
    }

    #[test]
    fn normalize_rejects_absolute_and_dotdot() {
        assert_eq!(normalize_member_path("a/../b"), None);
        assert_eq!(normalize_member_path("/abs"), None);
        assert_eq!(normalize_member_path("./a/./b.png"), Some("a/b.png".into()));
    }
}
