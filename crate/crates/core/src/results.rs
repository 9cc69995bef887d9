//! Run manifest, integrity checks and the plain-text run report.
//!
//! `manifest.json` schema (all keys camelCase):
//!
//! ```text
//! hashAlgorithm  "sha256"
//! runId          string
//! configDigest   hex sha256 of the canonical config, null if it did not parse
//! replyCode      reply code from the coordinator, null if none was received
//! pods[]         podName, namespace, status,
//!                containers[]: name, verdict, exitCode, files[], extractionError, note
//!                files[]: path (relative to the run directory), size, sha256
//! deletions[]    podName, namespace, ok, detail
//! errors[]       run-level failures (config, connection, non-OK reply)
//! createdAt      RFC 3339 UTC timestamp
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rpc::{DeployReply, PodStatus, ReplyCode, Verdict};

pub const HASH_ALGORITHM: &str = "sha256";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileEntry {
    /// `/`-separated, relative to the run directory.
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContainerEntry {
    pub name: String,
    pub verdict: Verdict,
    pub exit_code: Option<i32>,
    pub files: Vec<FileEntry>,
    pub extraction_error: Option<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PodEntry {
    pub pod_name: String,
    pub namespace: String,
    pub status: PodStatus,
    pub containers: Vec<ContainerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Deletion {
    pub pod_name: String,
    pub namespace: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub hash_algorithm: String,
    pub run_id: String,
    pub config_digest: Option<String>,
    pub reply_code: Option<ReplyCode>,
    pub pods: Vec<PodEntry>,
    pub deletions: Vec<Deletion>,
    pub errors: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Summary {
    Pass,
    Fail,
}

impl RunManifest {
    /// A manifest for a run that never got a usable reply.
    pub fn failed(run_id: &str, config_digest: Option<String>, errors: Vec<String>) -> Self {
        RunManifest {
            hash_algorithm: HASH_ALGORITHM.to_string(),
            run_id: run_id.to_string(),
            config_digest,
            reply_code: None,
            pods: Vec::new(),
            deletions: Vec::new(),
            errors,
            created_at: Utc::now(),
        }
    }

    pub fn containers(&self) -> impl Iterator<Item = (&PodEntry, &ContainerEntry)> {
        self.pods.iter().flat_map(|p| p.containers.iter().map(move |c| (p, c)))
    }

    pub fn summary(&self) -> Summary {
        let mut containers = self.containers().peekable();
        if containers.peek().is_some() && containers.all(|(_, c)| c.verdict == Verdict::Passed) {
            Summary::Pass
        } else {
            Summary::Fail
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifests always serialize");
        out.push(b'\n');
        out
    }
}

/// What extraction produced for one container.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContainerInventory {
    pub namespace: String,
    pub pod_name: String,
    pub container_name: String,
    /// Relative to the run directory.
    pub files: Vec<PathBuf>,
    pub error: Option<String>,
    pub note: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ResultsError {
    #[error("inventory mismatch at {path}: {reason}")]
    InventoryMismatch { path: String, reason: String },
}

fn mismatch(path: impl Into<String>, reason: impl Into<String>) -> ResultsError {
    ResultsError::InventoryMismatch {
        path: path.into(),
        reason: reason.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn slash_path(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn file_entry(root: &Path, rel: &Path) -> Result<FileEntry, ResultsError> {
    let path = slash_path(rel);
    let bytes = std::fs::read(root.join(rel)).map_err(|e| mismatch(&path, e.to_string()))?;
    Ok(FileEntry {
        size: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
        path,
    })
}

/// Builds the manifest of a run whose files live under `root`.
pub fn build_manifest(
    root: &Path,
    reply: &DeployReply,
    inventory: &[ContainerInventory],
    deletions: Vec<Deletion>,
    run_id: &str,
    config_digest: Option<String>,
) -> Result<RunManifest, ResultsError> {
    let mut pods = Vec::with_capacity(reply.pods.len());
    for pod in &reply.pods {
        let mut containers = Vec::with_capacity(pod.containers.len());
        for c in &pod.containers {
            let found = inventory.iter().find(|inv| {
                inv.namespace == pod.namespace && inv.pod_name == pod.pod_name && inv.container_name == c.container_name
            });
            let mut rels: Vec<&PathBuf> = found.map(|inv| inv.files.iter().collect()).unwrap_or_default();
            rels.sort();
            let files = rels
                .into_iter()
                .map(|rel| file_entry(root, rel))
                .collect::<Result<Vec<_>, _>>()?;
            containers.push(ContainerEntry {
                name: c.container_name.clone(),
                verdict: c.verdict,
                exit_code: c.exit_code,
                files,
                extraction_error: found.and_then(|inv| inv.error.clone()),
                note: found.and_then(|inv| inv.note.clone()),
            });
        }
        pods.push(PodEntry {
            pod_name: pod.pod_name.clone(),
            namespace: pod.namespace.clone(),
            status: pod.status,
            containers,
        });
    }
    let mut errors = Vec::new();
    if reply.code != ReplyCode::Ok {
        errors.push(format!("coordinator replied {}: {}", code_str(reply.code), reply.detail));
    }
    Ok(RunManifest {
        hash_algorithm: HASH_ALGORITHM.to_string(),
        run_id: run_id.to_string(),
        config_digest,
        reply_code: Some(reply.code),
        pods,
        deletions,
        errors,
        created_at: Utc::now(),
    })
}

fn code_str(code: ReplyCode) -> String {
    serde_json::to_value(code)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{code:?}"))
}

/// Checks every listed file against its recorded size and hash.
pub fn verify_manifest(root: &Path, manifest: &RunManifest) -> Result<(), ResultsError> {
    if manifest.hash_algorithm != HASH_ALGORITHM {
        return Err(mismatch("", format!("unsupported hash algorithm {}", manifest.hash_algorithm)));
    }
    for (_, c) in manifest.containers() {
        for f in &c.files {
            let actual = file_entry(root, Path::new(&f.path))?;
            if actual.size != f.size {
                return Err(mismatch(&f.path, format!("size {} != recorded {}", actual.size, f.size)));
            }
            if actual.sha256 != f.sha256 {
                return Err(mismatch(&f.path, "content hash differs"));
            }
        }
    }
    Ok(())
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Passed => "PASSED",
        Verdict::Failed => "FAILED",
        Verdict::NotRun => "NOT_RUN",
    }
}

/// Plain-text report: one row per container, failing containers first.
pub fn summarize(manifest: &RunManifest) -> String {
    let mut rows: Vec<(&PodEntry, &ContainerEntry)> = manifest.containers().collect();
    rows.sort_by_key(|(_, c)| c.verdict == Verdict::Passed);

    let names: Vec<String> = rows
        .iter()
        .map(|(p, c)| format!("{}/{}/{}", p.namespace, p.pod_name, c.name))
        .collect();
    let width = names.iter().map(String::len).max().unwrap_or(0).max("CONTAINER".len());

    let mut out = String::new();
    let _ = writeln!(out, "run {}", manifest.run_id);
    let _ = writeln!(out, "{:<width$}  {:<8}  {:>4}  {:>5}", "CONTAINER", "VERDICT", "EXIT", "FILES");
    for (name, (_, c)) in names.iter().zip(&rows) {
        let exit = c.exit_code.map_or_else(|| "-".to_string(), |x| x.to_string());
        let _ = writeln!(
            out,
            "{name:<width$}  {:<8}  {exit:>4}  {:>5}",
            verdict_str(c.verdict),
            c.files.len()
        );
        if let Some(err) = &c.extraction_error {
            let _ = writeln!(out, "  extraction failed: {err}");
        }
    }
    for d in manifest.deletions.iter().filter(|d| !d.ok) {
        let _ = writeln!(out, "delete {}/{} failed: {}", d.namespace, d.pod_name, d.detail);
    }
    for e in &manifest.errors {
        let _ = writeln!(out, "error: {e}");
    }
    let overall = match manifest.summary() {
        Summary::Pass => "PASS",
        Summary::Fail => "FAIL",
    };
    let _ = writeln!(out, "OVERALL: {overall}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpc::{ContainerResult, PodResult};

    fn reply(containers: &[(&str, Option<i32>)], status: PodStatus) -> DeployReply {
        DeployReply {
            run_id: "r".into(),
            code: ReplyCode::Ok,
            detail: String::new(),
            pods: vec![PodResult {
                pod_name: "p".into(),
                namespace: "ns".into(),
                sidecar_name: "bunk8s-results".into(),
                status,
                containers: containers
                    .iter()
                    .map(|(n, x)| ContainerResult::new(*n, *x, "/out"))
                    .collect(),
                message: String::new(),
            }],
        }
    }

    fn inv(container: &str, files: &[&str]) -> ContainerInventory {
        ContainerInventory {
            namespace: "ns".into(),
            pod_name: "p".into(),
            container_name: container.into(),
            files: files.iter().map(PathBuf::from).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn single_file_hash_matches_and_tampering_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("ns/p/t")).unwrap();
        std::fs::write(dir.path().join("ns/p/t/log.txt"), b"ok\n").unwrap();

        let rep = reply(&[("t", Some(0))], PodStatus::Succeeded);
        let m = build_manifest(dir.path(), &rep, &[inv("t", &["ns/p/t/log.txt"])], vec![], "r", None).unwrap();
        let f = &m.pods[0].containers[0].files[0];
        assert_eq!(f.path, "ns/p/t/log.txt");
        assert_eq!(f.size, 3);
        // sha256("ok\n"), computed with coreutils sha256sum
        assert_eq!(f.sha256, "dc51b8c96c2d745df3bd5590d990230a482fd247123599548e0632fdbf97fc22");
        verify_manifest(dir.path(), &m).unwrap();

        std::fs::write(dir.path().join("ns/p/t/log.txt"), b"oK\n").unwrap();
        assert!(matches!(
            verify_manifest(dir.path(), &m),
            Err(ResultsError::InventoryMismatch { .. })
        ));
    }

    #[test]
    fn missing_inventory_file_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let rep = reply(&[("t", Some(0))], PodStatus::Succeeded);
        let err = build_manifest(dir.path(), &rep, &[inv("t", &["ns/p/t/gone"])], vec![], "r", None).unwrap_err();
        assert!(err.to_string().contains("ns/p/t/gone"));
    }

    #[test]
    fn timed_out_pod_lists_not_run_containers() {
        let dir = tempfile::tempdir().unwrap();
        let rep = reply(&[("a", None), ("b", None)], PodStatus::TimedOut);
        let m = build_manifest(dir.path(), &rep, &[], vec![], "r", None).unwrap();
        assert_eq!(m.pods[0].status, PodStatus::TimedOut);
        assert!(m.pods[0]
            .containers
            .iter()
            .all(|c| c.verdict == Verdict::NotRun && c.files.is_empty()));
        assert_eq!(m.summary(), Summary::Fail);
    }

    #[test]
    fn report_lists_failures_first_and_ends_with_overall() {
        let dir = tempfile::tempdir().unwrap();
        let rep = reply(&[("good", Some(0)), ("bad", Some(1))], PodStatus::Failed);
        let m = build_manifest(dir.path(), &rep, &[], vec![], "r", None).unwrap();
        let report = summarize(&m);
        assert!(report.ends_with("OVERALL: FAIL\n"), "{report}");
        let bad = report.find("ns/p/bad").unwrap();
        let good = report.find("ns/p/good").unwrap();
        assert!(bad < good);

        let rep = reply(&[("good", Some(0))], PodStatus::Succeeded);
        let m = build_manifest(dir.path(), &rep, &[], vec![], "r", None).unwrap();
        assert!(summarize(&m).ends_with("OVERALL: PASS\n"));
        assert_eq!(summarize(&m), summarize(&m.clone()));
    }
}
