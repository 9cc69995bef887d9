//! The in-cluster service that deploys test runner pods and waits for them.
//!
//! A deploy request is handled in four phases: every namespace must exist,
//! no requested pod may exist or be in use by another run, the pods are
//! created, and then all pods are watched concurrently until each one's test
//! containers have terminated or its timeout elapsed. Any failure before the
//! watch phase is answered with an error code and leaves nothing behind in
//! the cluster. The coordinator never deletes finished pods: results are
//! still inside them until the launcher has copied them out.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::future::join_all;
use futures::StreamExt;
use tokio::time::Instant;

use crate::cluster::{
    ClusterBackend, ClusterError, ContainerState, ErrorKind, PodBlueprint, RestartPolicy, Sidecar,
    TestContainer, VolumeMount, RUN_ID_LABEL,
};
use crate::config::{TestRunnerPodSpec, SIDECAR_CONTAINER_NAME};
use crate::rpc::{ContainerResult, DeployReply, DeployRequest, PodResult, PodStatus, ReplyCode};

mod server;

pub use server::{router, serve, TlsFiles};

pub const SIDECAR_IMAGE_ENV: &str = "BUNK8S_SIDECAR_IMAGE";
pub const DEFAULT_SIDECAR_IMAGE: &str = "busybox:1.36";
pub const RESULT_VOLUME_NAME: &str = "test-results";
/// Directory in the sidecar under which each test container's results appear.
pub const SIDECAR_RESULTS_ROOT: &str = "/results";

const WATCH_RECONNECTS: u32 = 5;
const WATCH_BACKOFF: Duration = Duration::from_millis(200);
const RETAINED_RUNS: usize = 256;

/// Image and command of the result sidecar. It only has to keep running
/// and provide `tar`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidecarSpec {
    pub image: String,
    pub command: Vec<String>,
}

impl Default for SidecarSpec {
    fn default() -> Self {
        SidecarSpec {
            image: DEFAULT_SIDECAR_IMAGE.to_string(),
            command: vec![
                "sh".into(),
                "-c".into(),
                "trap 'exit 0' TERM; sleep 2147483647 & wait".into(),
            ],
        }
    }
}

impl SidecarSpec {
    /// Default sidecar, with the image taken from `BUNK8S_SIDECAR_IMAGE`
    /// when set.
    pub fn from_env() -> Self {
        let mut spec = SidecarSpec::default();
        if let Ok(image) = std::env::var(SIDECAR_IMAGE_ENV) {
            if !image.trim().is_empty() {
                spec.image = image;
            }
        }
        spec
    }
}

/// Path of a test container's results inside the sidecar.
pub fn sidecar_result_path(container_name: &str) -> String {
    format!("{SIDECAR_RESULTS_ROOT}/{container_name}")
}

pub fn build_blueprint(spec: &TestRunnerPodSpec, run_id: &str, sidecar: &SidecarSpec) -> PodBlueprint {
    let test_containers = spec
        .containers
        .iter()
        .map(|c| TestContainer {
            name: c.container_name.clone(),
            image: c.image.clone(),
            command: c.startup_commands.clone(),
            args: c.startup_command_args.clone(),
            result_mount_path: c.test_result_path.clone(),
        })
        .collect();
    let mounts = spec
        .containers
        .iter()
        .map(|c| VolumeMount {
            volume: RESULT_VOLUME_NAME.to_string(),
            mount_path: sidecar_result_path(&c.container_name),
            sub_path: Some(c.container_name.clone()),
        })
        .collect();
    PodBlueprint {
        pod_name: spec.pod_name.clone(),
        namespace: spec.namespace.clone(),
        test_containers,
        sidecar: Sidecar {
            name: SIDECAR_CONTAINER_NAME.to_string(),
            image: sidecar.image.clone(),
            command: sidecar.command.clone(),
            mounts,
        },
        result_volume_name: RESULT_VOLUME_NAME.to_string(),
        restart_policy: RestartPolicy::Never,
        labels: BTreeMap::from([(RUN_ID_LABEL.to_string(), run_id.to_string())]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PodProgress {
    Validating,
    Creating,
    Watching,
    Done(PodResult),
}

impl PodProgress {
    fn rank(&self) -> u8 {
        match self {
            PodProgress::Validating => 0,
            PodProgress::Creating => 1,
            PodProgress::Watching => 2,
            PodProgress::Done(_) => 3,
        }
    }
}

/// Progress of one deploy request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunState {
    pub run_id: String,
    /// Per pod, keyed by (namespace, pod name), in request order.
    pub pods: Vec<((String, String), PodProgress)>,
    pub started_at: Instant,
    pub outcome: Option<ReplyCode>,
}

type PodKey = (String, String);

pub struct Coordinator {
    backend: Arc<dyn ClusterBackend>,
    sidecar: SidecarSpec,
    in_flight: Arc<Mutex<HashSet<PodKey>>>,
    runs: Mutex<Vec<RunState>>,
}

/// Releases reserved pod names when the request finishes.
struct Reservation {
    set: Arc<Mutex<HashSet<PodKey>>>,
    keys: Vec<PodKey>,
}

impl Drop for Reservation {
    fn drop(&mut self) {
        let mut set = self.set.lock().expect("in-flight set poisoned");
        for key in &self.keys {
            set.remove(key);
        }
    }
}

impl Coordinator {
    pub fn new(backend: Arc<dyn ClusterBackend>, sidecar: SidecarSpec) -> Self {
        Coordinator {
            backend,
            sidecar,
            in_flight: Arc::default(),
            runs: Mutex::default(),
        }
    }

    /// Snapshot of a run's progress, while in flight and for a while after.
    pub fn run_state(&self, run_id: &str) -> Option<RunState> {
        self.runs
            .lock()
            .expect("run table poisoned")
            .iter()
            .rev()
            .find(|r| r.run_id == run_id)
            .cloned()
    }

    fn start_run(&self, req: &DeployRequest) {
        let mut runs = self.runs.lock().expect("run table poisoned");
        if runs.len() >= RETAINED_RUNS {
            if let Some(pos) = runs.iter().position(|r| r.outcome.is_some()) {
                runs.remove(pos);
            }
        }
        runs.push(RunState {
            run_id: req.run_id.clone(),
            pods: req
                .run
                .pods
                .iter()
                .map(|p| ((p.namespace.clone(), p.pod_name.clone()), PodProgress::Validating))
                .collect(),
            started_at: Instant::now(),
            outcome: None,
        });
    }

    fn with_run(&self, run_id: &str, f: impl FnOnce(&mut RunState)) {
        let mut runs = self.runs.lock().expect("run table poisoned");
        if let Some(run) = runs.iter_mut().rev().find(|r| r.run_id == run_id) {
            f(run);
        }
    }

    fn advance(&self, run_id: &str, index: usize, next: PodProgress) {
        self.with_run(run_id, |run| {
            let slot = &mut run.pods[index].1;
            debug_assert!(next.rank() >= slot.rank(), "pod progress moved backwards");
            if next.rank() >= slot.rank() {
                *slot = next;
            }
        });
    }

    fn finish(&self, reply: DeployReply) -> DeployReply {
        self.with_run(&reply.run_id, |run| run.outcome = Some(reply.code));
        match reply.code {
            ReplyCode::Ok => tracing::info!(run_id = %reply.run_id, pods = reply.pods.len(), "run finished"),
            code => tracing::warn!(run_id = %reply.run_id, ?code, detail = %reply.detail, "run rejected"),
        }
        reply
    }

    fn reserve(&self, keys: Vec<PodKey>) -> Result<Reservation, PodKey> {
        let mut set = self.in_flight.lock().expect("in-flight set poisoned");
        if let Some(taken) = keys.iter().find(|k| set.contains(*k)) {
            return Err(taken.clone());
        }
        set.extend(keys.iter().cloned());
        Ok(Reservation {
            set: self.in_flight.clone(),
            keys,
        })
    }

    /// Handles one `DeployTestRunner` call. Failures are reported through the
    /// reply code, never as an error.
    pub async fn deploy_test_runners(&self, req: &DeployRequest) -> DeployReply {
        let run_id = req.run_id.as_str();
        self.start_run(req);
        tracing::info!(run_id, pods = req.run.pods.len(), "deploy request received");
        let reject = |code, detail: String| self.finish(DeployReply::error(run_id, code, detail));

        let mut checked = HashSet::new();
        for pod in &req.run.pods {
            let ns = pod.namespace.as_str();
            if !checked.insert(ns) {
                continue;
            }
            match self.backend.namespace_exists(ns).await {
                Ok(true) => {}
                Ok(false) => {
                    return reject(ReplyCode::NamespaceMissing, format!("namespace {ns} does not exist"))
                }
                Err(e) => return reject(ReplyCode::Internal, format!("checking namespace {ns}: {e}")),
            }
        }

        let keys = req
            .run
            .pods
            .iter()
            .map(|p| (p.namespace.clone(), p.pod_name.clone()))
            .collect();
        let _reservation = match self.reserve(keys) {
            Ok(r) => r,
            Err((ns, pod)) => {
                return reject(
                    ReplyCode::PodConflict,
                    format!("pod {ns}/{pod} is in use by another run"),
                )
            }
        };

        for pod in &req.run.pods {
            match self.backend.pod_exists(&pod.namespace, &pod.pod_name).await {
                Ok(false) => {}
                Ok(true) => return reject(ReplyCode::PodConflict, format!("pod {pod} already exists")),
                Err(e) => return reject(ReplyCode::Internal, format!("checking pod {pod}: {e}")),
            }
        }

        let blueprints: Vec<PodBlueprint> = req
            .run
            .pods
            .iter()
            .map(|p| build_blueprint(p, run_id, &self.sidecar))
            .collect();
        let mut created: Vec<&PodBlueprint> = Vec::new();
        for (i, bp) in blueprints.iter().enumerate() {
            self.advance(run_id, i, PodProgress::Creating);
            if let Err(e) = self.backend.create_pod(bp).await {
                for done in &created {
                    if let Err(del) = self.backend.delete_pod(&done.namespace, &done.pod_name).await {
                        tracing::warn!(run_id, pod = %done.pod_name, error = %del, "rollback delete failed");
                    }
                }
                return reject(
                    ReplyCode::CreateFailed,
                    format!("creating pod {}/{}: {e}", bp.namespace, bp.pod_name),
                );
            }
            created.push(bp);
        }

        let watches = req.run.pods.iter().zip(&blueprints).enumerate().map(|(i, (spec, bp))| async move {
            self.advance(run_id, i, PodProgress::Watching);
            let result = self.watch_to_completion(spec, bp).await;
            self.advance(run_id, i, PodProgress::Done(result.clone()));
            result
        });
        let pods = join_all(watches).await;

        self.finish(DeployReply {
            run_id: run_id.to_string(),
            code: ReplyCode::Ok,
            detail: String::new(),
            pods,
        })
    }

    /// Follows one pod until all of its test containers terminated, its
    /// timeout elapsed, or the watch failed for good. The timeout counts from
    /// the first event received for the pod.
    async fn watch_to_completion(&self, spec: &TestRunnerPodSpec, bp: &PodBlueprint) -> PodResult {
        let timeout = spec.test_timeout;
        let first_event_deadline = Instant::now() + timeout;
        let mut deadline: Option<Instant> = None;
        let mut states: BTreeMap<String, ContainerState> = BTreeMap::new();
        let mut failures = 0u32;

        let outcome = 'watch: loop {
            let mut stream = match self.backend.watch_pod(&bp.namespace, &bp.pod_name).await {
                Ok(s) => s,
                Err(e) if retryable(&e) && failures < WATCH_RECONNECTS => {
                    failures += 1;
                    tokio::time::sleep(WATCH_BACKOFF).await;
                    continue;
                }
                Err(e) => break WatchOutcome::Broken(e),
            };
            loop {
                let limit = deadline.unwrap_or(first_event_deadline);
                let item = match tokio::time::timeout_at(limit, stream.next()).await {
                    Err(_elapsed) => break 'watch WatchOutcome::TimedOut,
                    Ok(item) => item,
                };
                match item {
                    Some(Ok(event)) => {
                        failures = 0;
                        deadline.get_or_insert(event.timestamp + timeout);
                        for (name, state) in event.container_states {
                            let slot = states.entry(name).or_insert(state);
                            if !slot.is_terminated() {
                                *slot = state;
                            }
                        }
                        let finished = bp
                            .test_containers
                            .iter()
                            .all(|c| states.get(&c.name).is_some_and(|s| s.is_terminated()));
                        if finished {
                            break 'watch WatchOutcome::Finished;
                        }
                    }
                    Some(Err(e)) if retryable(&e) && failures < WATCH_RECONNECTS => {
                        failures += 1;
                        tracing::debug!(pod = %spec, error = %e, "re-establishing watch");
                        tokio::time::sleep(WATCH_BACKOFF).await;
                        continue 'watch;
                    }
                    Some(Err(e)) => break 'watch WatchOutcome::Broken(e),
                    None if failures < WATCH_RECONNECTS => {
                        failures += 1;
                        continue 'watch;
                    }
                    None => {
                        break 'watch WatchOutcome::Broken(ClusterError::new(
                            ErrorKind::Transport,
                            format!("pod {spec}"),
                            "watch kept closing",
                        ))
                    }
                }
            }
        };

        let containers: Vec<ContainerResult> = spec
            .containers
            .iter()
            .map(|c| {
                let exit_code = states.get(&c.container_name).and_then(|s| s.exit_code());
                ContainerResult::new(c.container_name.clone(), exit_code, c.test_result_path.clone())
            })
            .collect();
        let failed = containers.iter().filter(|c| c.exit_code.is_some_and(|x| x != 0)).count();
        let (status, message) = match outcome {
            WatchOutcome::Finished if failed == 0 => (PodStatus::Succeeded, "all test containers exited 0".to_string()),
            WatchOutcome::Finished => (
                PodStatus::Failed,
                format!("{failed} of {} test containers failed", containers.len()),
            ),
            WatchOutcome::TimedOut => (
                PodStatus::TimedOut,
                format!("test timeout of {}s elapsed", timeout.as_secs()),
            ),
            WatchOutcome::Broken(e) => (PodStatus::Error, format!("watch failed: {e}")),
        };
        tracing::info!(pod = %spec, ?status, "pod finished");
        PodResult {
            pod_name: spec.pod_name.clone(),
            namespace: spec.namespace.clone(),
            sidecar_name: bp.sidecar.name.clone(),
            status,
            containers,
            message,
        }
    }
}

enum WatchOutcome {
    Finished,
    TimedOut,
    Broken(ClusterError),
}

fn retryable(err: &ClusterError) -> bool {
    matches!(err.kind, ErrorKind::Transport | ErrorKind::Timeout)
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("sidecar", &self.sidecar)
            .finish_non_exhaustive()
    }
}
