//! The CI-side driver: one linear run from config file to exit code.
//!
//! Exit codes:
//!
//! | code | meaning                                                         |
//! |------|-----------------------------------------------------------------|
//! | 0    | every test container passed, results stored, pods deleted       |
//! | 1    | a test failed, timed out or its pod errored                     |
//! | 2    | the config (or output directory) is unusable                    |
//! | 3    | the coordinator could not be reached or rejected the run        |
//! | 4    | tests passed but extracting results or deleting pods failed     |

use std::path::{Path, PathBuf};
use std::time::Duration;

use futures::future::join_all;

use crate::cluster::{archive, ClusterBackend};
use crate::config::{parse_config, render_config};
use crate::coordinator::sidecar_result_path;
use crate::results::{build_manifest, sha256_hex, summarize, ContainerInventory, Deletion, RunManifest};
use crate::rpc::{decode_reply, encode_request, DeployReply, DeployRequest, PodStatus, ReplyCode, Verdict};

mod client;

pub use client::{coordinator_url, ClientError, CoordinatorClient, HttpCoordinatorClient, InProcessClient, UnreachableClient};

pub const EXIT_PASSED: i32 = 0;
pub const EXIT_TESTS_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_COORDINATOR: i32 = 3;
pub const EXIT_ARTIFACTS: i32 = 4;

pub const REPLY_FILE: &str = "reply.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";

pub const DEFAULT_TIMEOUT_GRACE: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    /// Added to twice the longest pod timeout to bound the deploy call.
    pub timeout_grace: Duration,
    /// Fixed run id; a random one is generated when absent.
    pub run_id: Option<String>,
}

impl LaunchOptions {
    pub fn new(config_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        LaunchOptions {
            config_path: config_path.into(),
            output_dir: output_dir.into(),
            timeout_grace: DEFAULT_TIMEOUT_GRACE,
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchOutcome {
    pub exit_code: i32,
    pub manifest_path: PathBuf,
    /// Absent when no reply was received.
    pub reply_path: Option<PathBuf>,
}

/// Runs one launch. Every failure ends up in the exit code and the manifest.
pub async fn run_launcher(opts: &LaunchOptions, backend: &dyn ClusterBackend, client: &dyn CoordinatorClient) -> LaunchOutcome {
    let out = opts.output_dir.as_path();
    let run_id = opts
        .run_id
        .clone()
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let manifest_path = out.join(MANIFEST_FILE);
    let finish_early = |exit_code: i32, digest: Option<String>, error: String| {
        tracing::error!("{error}");
        let manifest = RunManifest::failed(&run_id, digest, vec![error]);
        write_outputs(out, &manifest);
        LaunchOutcome {
            exit_code,
            manifest_path: manifest_path.clone(),
            reply_path: None,
        }
    };

    if let Err(e) = std::fs::create_dir_all(out) {
        tracing::error!("creating output directory {}: {e}", out.display());
        return LaunchOutcome {
            exit_code: EXIT_CONFIG,
            manifest_path,
            reply_path: None,
        };
    }

    let text = match std::fs::read_to_string(&opts.config_path) {
        Ok(t) => t,
        Err(e) => return finish_early(EXIT_CONFIG, None, format!("reading config {}: {e}", opts.config_path.display())),
    };
    let (target, run) = match parse_config(&text) {
        Ok(parsed) => parsed,
        Err(e) => return finish_early(EXIT_CONFIG, None, format!("invalid config: {e}")),
    };
    let digest = sha256_hex(render_config(&target, &run).as_bytes());

    let timeout = run.max_timeout() * 2 + opts.timeout_grace;
    let request = encode_request(&DeployRequest {
        run_id: run_id.clone(),
        run,
    });
    let raw = match client.deploy(&target, request, timeout).await {
        Ok(raw) => raw,
        Err(e) => return finish_early(EXIT_COORDINATOR, Some(digest), format!("coordinator unreachable: {e}")),
    };

    let mut errors = Vec::new();
    let reply_path = out.join(REPLY_FILE);
    let reply_path = match std::fs::write(&reply_path, &raw) {
        Ok(()) => Some(reply_path),
        Err(e) => {
            errors.push(format!("writing {}: {e}", reply_path.display()));
            None
        }
    };
    let with_reply = |mut outcome: LaunchOutcome| {
        outcome.reply_path = reply_path.clone();
        outcome
    };
    let reply = match decode_reply(&raw) {
        Ok(r) => r,
        Err(e) => return with_reply(finish_early(EXIT_COORDINATOR, Some(digest), format!("unreadable reply: {e}"))),
    };
    if reply.run_id != run_id {
        return with_reply(finish_early(
            EXIT_COORDINATOR,
            Some(digest),
            format!("reply is for run {}, expected {run_id}", reply.run_id),
        ));
    }

    let inventory = extract_results(&reply, backend, out).await;
    let deletions = cleanup(&reply, backend).await;

    let mut manifest = match build_manifest(out, &reply, &inventory, deletions, &run_id, Some(digest.clone())) {
        Ok(m) => m,
        Err(e) => {
            let mut m = RunManifest::failed(&run_id, Some(digest), vec![e.to_string()]);
            m.reply_code = Some(reply.code);
            m
        }
    };
    manifest.errors.extend(errors);
    let exit_code = exit_code_for(&reply, &manifest);
    write_outputs(out, &manifest);
    tracing::info!(run_id, exit_code, "launch finished");
    LaunchOutcome {
        exit_code,
        manifest_path,
        reply_path,
    }
}

fn exit_code_for(reply: &DeployReply, manifest: &RunManifest) -> i32 {
    if reply.code != ReplyCode::Ok {
        return EXIT_COORDINATOR;
    }
    let tests_passed = reply.pods.iter().all(|p| {
        p.status == PodStatus::Succeeded && p.containers.iter().all(|c| c.verdict == Verdict::Passed)
    });
    if !tests_passed {
        return EXIT_TESTS_FAILED;
    }
    let extraction_ok = manifest.pods.len() == reply.pods.len()
        && manifest.containers().all(|(_, c)| c.extraction_error.is_none());
    let cleanup_ok = manifest.deletions.iter().all(|d| d.ok);
    if extraction_ok && cleanup_ok && manifest.errors.is_empty() {
        EXIT_PASSED
    } else {
        EXIT_ARTIFACTS
    }
}

fn write_outputs(out: &Path, manifest: &RunManifest) {
    if let Err(e) = std::fs::write(out.join(MANIFEST_FILE), manifest.to_json()) {
        tracing::error!("writing manifest: {e}");
    }
    if let Err(e) = std::fs::write(out.join(REPORT_FILE), summarize(manifest)) {
        tracing::error!("writing report: {e}");
    }
}

/// Directory a container's results are stored in, relative to the output
/// directory.
pub fn container_dir(namespace: &str, pod: &str, container: &str) -> PathBuf {
    [namespace, pod, container].iter().collect()
}

/// Copies every container's results out of its pod's sidecar into
/// `<out>/<namespace>/<pod>/<container>/`. Pods in error status are skipped.
pub async fn extract_results(reply: &DeployReply, backend: &dyn ClusterBackend, out: &Path) -> Vec<ContainerInventory> {
    let jobs = reply.pods.iter().flat_map(|pod| {
        pod.containers.iter().map(move |c| async move {
            let mut inv = ContainerInventory {
                namespace: pod.namespace.clone(),
                pod_name: pod.pod_name.clone(),
                container_name: c.container_name.clone(),
                ..Default::default()
            };
            if pod.status == PodStatus::Error {
                inv.note = Some("pod in error status, extraction skipped".into());
                return inv;
            }
            let rel_dir = container_dir(&pod.namespace, &pod.pod_name, &c.container_name);
            let source = sidecar_result_path(&c.container_name);
            let fetched = backend
                .read_container_file(&pod.namespace, &pod.pod_name, &pod.sidecar_name, &source)
                .await;
            let stored = match fetched {
                Ok(bytes) => archive::unpack_to_dir(&bytes, &out.join(&rel_dir)).map_err(|e| format!("storing results: {e}")),
                Err(e) => Err(e.to_string()),
            };
            match stored {
                Ok(files) => {
                    if files.is_empty() {
                        inv.note = Some(format!("no result files under {source}"));
                    }
                    inv.files = files.into_iter().map(|f| rel_dir.join(f)).collect();
                }
                Err(e) => {
                    tracing::warn!(pod = %pod.pod_name, container = %c.container_name, "extraction failed: {e}");
                    let _ = std::fs::create_dir_all(out.join(&rel_dir));
                    inv.error = Some(e);
                }
            }
            inv
        })
    });
    join_all(jobs).await
}

/// Deletes every pod named in the reply. Already deleted pods count as
/// success, so running it twice is harmless.
pub async fn cleanup(reply: &DeployReply, backend: &dyn ClusterBackend) -> Vec<Deletion> {
    let mut deletions = Vec::with_capacity(reply.pods.len());
    for pod in &reply.pods {
        let result = backend.delete_pod(&pod.namespace, &pod.pod_name).await;
        if let Err(e) = &result {
            tracing::warn!(pod = %pod.pod_name, "delete failed: {e}");
        }
        deletions.push(Deletion {
            pod_name: pod.pod_name.clone(),
            namespace: pod.namespace.clone(),
            ok: result.is_ok(),
            detail: result.err().map(|e| e.to_string()).unwrap_or_default(),
        });
    }
    deletions
}

#[cfg(test)]
mod tests;
