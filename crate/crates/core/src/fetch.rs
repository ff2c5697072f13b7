//! Acquisition of source archives from an acquisition manifest.
//!
//! HTTP(S) and local-file transports with byte-range resume, sha256
//! verification, bounded retries with exponential backoff, and a per-entry
//! status report. No partially-written file ever appears at its final
//! destination path: transfers go to `<dest>.part` and are renamed after
//! verification; checksum failures are quarantined as `<dest>.bad`.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionEntry {
    /// `http(s)://...` URL or a local filesystem path.
    pub uri: String,
    /// Output path relative to the fetch directory; unique per manifest.
    pub dest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Ok,
    ChecksumMismatch,
    /// Non-retryable transport failure (e.g. HTTP 4xx, bad URI).
    TransportError,
    /// Retry budget used up on retryable failures.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryReport {
    pub dest: String,
    pub uri: String,
    pub status: FetchStatus,
    pub attempts: u32,
    /// Payload bytes actually transferred by this run.
    pub bytes_fetched: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub parallelism: usize,
    pub attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        FetchOptions {
            parallelism: 4,
            attempts: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(600),
        }
    }
}

/// Fetch every entry into `out_dir`. Always completes with a report in
/// entry order; per-entry failures never abort the batch.
pub fn fetch_all(
    entries: &[AcquisitionEntry],
    out_dir: &Path,
    options: &FetchOptions,
) -> Vec<EntryReport> {
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..entries.len()).collect());
    let reports: Mutex<Vec<Option<EntryReport>>> = Mutex::new(vec![None; entries.len()]);
    let workers = options.parallelism.max(1).min(entries.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let report = fetch_entry(&entries[index], out_dir, options);
                reports.lock().unwrap()[index] = Some(report);
            });
        }
    });

    reports
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every entry produced a report"))
        .collect()
}

fn fetch_entry(entry: &AcquisitionEntry, out_dir: &Path, options: &FetchOptions) -> EntryReport {
    let dest = out_dir.join(&entry.dest);
    let mut report = EntryReport {
        dest: entry.dest.clone(),
        uri: entry.uri.clone(),
        status: FetchStatus::Ok,
        attempts: 0,
        bytes_fetched: 0,
        message: None,
    };

    // Already fetched and verified: transfer nothing.
    if dest.exists() {
        match verify_existing(&dest, entry) {
            Ok(true) => return report,
            Ok(false) => {
                // Stale or corrupt final file; refetch from scratch.
                let _ = std::fs::remove_file(&dest);
            }
            Err(e) => {
                report.status = FetchStatus::TransportError;
                report.message = Some(e);
                return report;
            }
        }
    }
    if let Some(parent) = dest.parent() {
        if let Err(e) = std::fs::create_dir_all(parent) {
            report.status = FetchStatus::TransportError;
            report.message = Some(e.to_string());
            return report;
        }
    }

    let part = dest.with_extension(match dest.extension() {
        Some(ext) => format!("{}.part", ext.to_string_lossy()),
        None => "part".to_string(),
    });

    let is_http = entry.uri.starts_with("http://") || entry.uri.starts_with("https://");
    let mut last_error = String::new();
    for attempt in 0..options.attempts {
        report.attempts = attempt + 1;
        if attempt > 0 {
            std::thread::sleep(options.backoff_base * 2u32.pow(attempt - 1));
        }
        let result = if is_http {
            http_fetch(&entry.uri, &part, options)
        } else {
            local_copy(Path::new(&entry.uri), &part)
        };
        match result {
            Ok(bytes) => {
                report.bytes_fetched += bytes;
                return finalize(entry, &part, &dest, report);
            }
            Err(TransferError::Fatal(msg)) => {
                report.status = FetchStatus::TransportError;
                report.message = Some(msg);
                return report;
            }
            Err(TransferError::Retryable { message, bytes }) => {
                report.bytes_fetched += bytes;
                last_error = message;
            }
        }
    }
    report.status = FetchStatus::Exhausted;
    report.message = Some(last_error);
    report
}

fn finalize(
    entry: &AcquisitionEntry,
    part: &Path,
    dest: &Path,
    mut report: EntryReport,
) -> EntryReport {
    if let Some(expected) = &entry.expected_sha256 {
        match file_sha256(part) {
            Ok(actual) if actual.eq_ignore_ascii_case(expected) => {}
            Ok(actual) => {
                let quarantine = bad_path(dest);
                let _ = std::fs::rename(part, &quarantine);
                report.status = FetchStatus::ChecksumMismatch;
                report.message = Some(format!(
                    "expected {expected}, got {actual}; quarantined as {}",
                    quarantine.display()
                ));
                return report;
            }
            Err(e) => {
                report.status = FetchStatus::TransportError;
                report.message = Some(e);
                return report;
            }
        }
    }
    if let Err(e) = std::fs::rename(part, dest) {
        report.status = FetchStatus::TransportError;
        report.message = Some(e.to_string());
    }
    report
}

fn bad_path(dest: &Path) -> PathBuf {
    let mut name = dest.file_name().unwrap_or_default().to_os_string();
    name.push(".bad");
    dest.with_file_name(name)
}

fn verify_existing(dest: &Path, entry: &AcquisitionEntry) -> Result<bool, String> {
    if let Some(expected) = &entry.expected_sha256 {
        let actual = file_sha256(dest)?;
        return Ok(actual.eq_ignore_ascii_case(expected));
    }
    if let Some(size) = entry.size_bytes {
        let meta = std::fs::metadata(dest).map_err(|e| e.to_string())?;
        return Ok(meta.len() == size);
    }
    Ok(true)
}

fn file_sha256(path: &Path) -> Result<String, String> {
    let mut file = std::fs::File::open(path).map_err(|e| e.to_string())?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| e.to_string())?;
    Ok(hex::encode(hasher.finalize()))
}

enum TransferError {
    /// Worth retrying (connection drop, 5xx); carries bytes banked so far.
    Retryable { message: String, bytes: u64 },
    Fatal(String),
}

fn local_copy(source: &Path, part: &Path) -> Result<u64, TransferError> {
    std::fs::copy(source, part)
        .map_err(|e| TransferError::Fatal(format!("copy {}: {e}", source.display())))
}

/// One HTTP attempt. Resumes from the current `.part` length via a Range
/// request when the server honors it (206); a 200 restarts the file.
fn http_fetch(uri: &str, part: &Path, options: &FetchOptions) -> Result<u64, TransferError> {
    let offset = std::fs::metadata(part).map(|m| m.len()).unwrap_or(0);
    let client = reqwest::blocking::Client::builder()
        .timeout(options.timeout)
        .build()
        .map_err(|e| TransferError::Fatal(e.to_string()))?;

    let mut request = client.get(uri);
    if offset > 0 {
        request = request.header(reqwest::header::RANGE, format!("bytes={offset}-"));
    }
    let response = request.send().map_err(|e| TransferError::Retryable {
        message: e.to_string(),
        bytes: 0,
    })?;

    let status = response.status();
    let resumed = status == reqwest::StatusCode::PARTIAL_CONTENT;
    if !status.is_success() {
        let message = format!("HTTP {status} for {uri}");
        return if status.is_server_error() {
            Err(TransferError::Retryable { message, bytes: 0 })
        } else {
            Err(TransferError::Fatal(message))
        };
    }

    let mut file = if resumed {
        std::fs::OpenOptions::new()
            .append(true)
            .open(part)
            .map_err(|e| TransferError::Fatal(e.to_string()))?
    } else {
        std::fs::File::create(part).map_err(|e| TransferError::Fatal(e.to_string()))?
    };

    let mut reader = response;
    let mut buf = [0u8; 64 * 1024];
    let mut transferred = 0u64;
    loop {
        match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                file.write_all(&buf[..n])
                    .map_err(|e| TransferError::Fatal(e.to_string()))?;
                transferred += n as u64;
            }
            Err(e) => {
                // Keep what we have; the next attempt resumes from it.
                let _ = file.flush();
                return Err(TransferError::Retryable {
                    message: e.to_string(),
                    bytes: transferred,
                });
            }
        }
    }
    file.flush().map_err(|e| TransferError::Fatal(e.to_string()))?;
    Ok(transferred)
}

/// Parse an acquisition manifest: JSONL of [`AcquisitionEntry`].
pub fn read_acquisition_manifest(path: &Path) -> Result<Vec<AcquisitionEntry>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: AcquisitionEntry =
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", idx + 1))?;
        if !seen.insert(entry.dest.clone()) {
            return Err(format!("line {}: duplicate dest {}", idx + 1, entry.dest));
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_copy_with_checksum_ok() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        std::fs::write(&src, b"payload").unwrap();
        let entry = AcquisitionEntry {
            uri: src.to_string_lossy().into_owned(),
            dest: "out/dest.bin".into(),
            expected_sha256: Some(hex::encode(Sha256::digest(b"payload"))),
            size_bytes: None,
        };
        let reports = fetch_all(&[entry], dir.path(), &FetchOptions::default());
        assert_eq!(reports[0].status, FetchStatus::Ok);
        assert_eq!(
            std::fs::read(dir.path().join("out/dest.bin")).unwrap(),
            b"payload"
        );
    }

    #[test]
    fn checksum_mismatch_quarantines() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        std::fs::write(&src, b"payload").unwrap();
        let entry = AcquisitionEntry {
            uri: src.to_string_lossy().into_owned(),
            dest: "dest.bin".into(),
            expected_sha256: Some("00".repeat(32)),
            size_bytes: None,
        };
        let reports = fetch_all(&[entry], dir.path(), &FetchOptions::default());
        assert_eq!(reports[0].status, FetchStatus::ChecksumMismatch);
        assert!(!dir.path().join("dest.bin").exists());
        assert!(dir.path().join("dest.bin.bad").exists());
    }

    #[test]
    fn rerun_transfers_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        std::fs::write(&src, b"payload").unwrap();
        let entry = AcquisitionEntry {
            uri: src.to_string_lossy().into_owned(),
            dest: "dest.bin".into(),
            expected_sha256: Some(hex::encode(Sha256::digest(b"payload"))),
            size_bytes: None,
        };
        let first = fetch_all(std::slice::from_ref(&entry), dir.path(), &FetchOptions::default());
        assert!(first[0].bytes_fetched > 0);
        let second = fetch_all(&[entry], dir.path(), &FetchOptions::default());
        assert_eq!(second[0].status, FetchStatus::Ok);
        assert_eq!(second[0].bytes_fetched, 0);
    }

    #[test]
    fn missing_local_source_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let entry = AcquisitionEntry {
            uri: "/nonexistent/path.bin".into(),
            dest: "dest.bin".into(),
            expected_sha256: None,
            size_bytes: None,
        };
        let reports = fetch_all(&[entry], dir.path(), &FetchOptions::default());
        assert_eq!(reports[0].status, FetchStatus::TransportError);
    }

    #[test]
    fn manifest_rejects_duplicate_dest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acq.jsonl");
        std::fs::write(
            &path,
            "{\"uri\": \"a\", \"dest\": \"x\"}\n{\"uri\": \"b\", \"dest\": \"x\"}\n",
        )
        .unwrap();
        assert!(read_acquisition_manifest(&path).is_err());
    }
}
