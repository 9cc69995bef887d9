//! In-process fake cluster.
//!
//! Pods follow scripted lifecycles: a list of steps, each a delay (relative
//! to the previous step, the first one relative to pod creation) and the
//! container states reached at that point. Delays run on tokio's clock, so
//! tests on a paused runtime see minutes of pod lifetime in microseconds.
//!
//! A scenario can be loaded from JSON:
//!
//! ```json
//! {
//!   "namespaces": ["bunk8s-fe"],
//!   "existingPods": [{"namespace": "bunk8s-fe", "podName": "squatter"}],
//!   "lifecycles": {
//!     "bunk8s-fe/test-runner-pod": [
//!       {"delayMs": 0,   "containers": {"*": "waiting"}},
//!       {"delayMs": 200, "containers": {"*": "running"}},
//!       {"delayMs": 800, "containers": {"integration-tests": {"terminated": 1}}}
//!     ]
//!   },
//!   "volumes": {
//!     "bunk8s-fe/test-runner-pod": {"integration-tests": {"report.txt": "b2sK"}}
//!   },
//!   "faults": [{"op": "DELETE_POD", "pod": "test-runner-pod", "kind": "FORBIDDEN", "times": 1}]
//! }
//! ```
//!
//! `"*"` in a step stands for every test container the step does not name.
//! The result sidecar starts running as soon as any test container leaves
//! `waiting`, unless a step names it explicitly. Volume files are keyed by
//! test container and path relative to its result directory, base64 encoded.
//! Pods without a lifecycle use `defaultLifecycle`, or a short all-pass one.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::archive::Tree;
use super::{
    transitions_only, ClusterBackend, ClusterError, ContainerState, ErrorKind, PodBlueprint,
    PodPhase, WatchEvent, WatchStream,
};

pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct Step {
    pub delay_ms: u64,
    pub containers: BTreeMap<String, ContainerState>,
}

impl Step {
    pub fn all(delay_ms: u64, state: ContainerState) -> Self {
        Step {
            delay_ms,
            containers: BTreeMap::from([(WILDCARD.to_string(), state)]),
        }
    }

    pub fn set(mut self, container: &str, state: ContainerState) -> Self {
        self.containers.insert(container.to_string(), state);
        self
    }
}

/// Waiting, running after 100 ms, every test container exits 0 after 500 ms.
pub fn passing_lifecycle() -> Vec<Step> {
    vec![
        Step::all(0, ContainerState::Waiting),
        Step::all(100, ContainerState::Running),
        Step::all(400, ContainerState::Terminated(0)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Op {
    NamespaceExists,
    PodExists,
    CreatePod,
    Watch,
    /// The watch is established but breaks after its first event.
    WatchStream,
    ReadFile,
    DeletePod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct Fault {
    pub op: Op,
    #[serde(default)]
    pub namespace: Option<String>,
    #[serde(default)]
    pub pod: Option<String>,
    pub kind: ErrorKind,
    /// How many calls fail; unlimited when absent.
    #[serde(default)]
    pub times: Option<u32>,
}

impl Fault {
    pub fn new(op: Op, kind: ErrorKind) -> Self {
        Fault {
            op,
            namespace: None,
            pod: None,
            kind,
            times: None,
        }
    }

    pub fn on_pod(mut self, namespace: &str, pod: &str) -> Self {
        self.namespace = Some(namespace.to_string());
        self.pod = Some(pod.to_string());
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.times = Some(n);
        self
    }

    fn matches(&self, op: Op, namespace: &str, pod: Option<&str>) -> bool {
        self.op == op
            && self.times != Some(0)
            && self.namespace.as_deref().is_none_or(|n| n == namespace)
            && self.pod.as_deref().is_none_or(|p| Some(p) == pod)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct PodRef {
    pub namespace: String,
    pub pod_name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct Scenario {
    #[serde(default)]
    pub namespaces: Vec<String>,
    #[serde(default)]
    pub existing_pods: Vec<PodRef>,
    #[serde(default)]
    pub lifecycles: BTreeMap<String, Vec<Step>>,
    #[serde(default)]
    pub default_lifecycle: Option<Vec<Step>>,
    #[serde(default)]
    pub volumes: BTreeMap<String, BTreeMap<String, BTreeMap<String, String>>>,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid pod key {0:?}, expected \"<namespace>/<pod>\"")]
    PodKey(String),
    #[error("volume file {path:?} is not valid base64: {source}")]
    Base64 {
        path: String,
        source: base64::DecodeError,
    },
    #[error("conflict faults can only be injected into CREATE_POD")]
    ConflictFault,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Backend call, as recorded by the fake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Call {
    NamespaceExists { namespace: String },
    PodExists { namespace: String, pod: String },
    CreatePod { namespace: String, pod: String },
    Watch { namespace: String, pod: String },
    ReadFile { namespace: String, pod: String, container: String, path: String },
    DeletePod { namespace: String, pod: String },
}

impl Call {
    pub fn op(&self) -> Op {
        match self {
            Call::NamespaceExists { .. } => Op::NamespaceExists,
            Call::PodExists { .. } => Op::PodExists,
            Call::CreatePod { .. } => Op::CreatePod,
            Call::Watch { .. } => Op::Watch,
            Call::ReadFile { .. } => Op::ReadFile,
            Call::DeletePod { .. } => Op::DeletePod,
        }
    }

    pub fn pod(&self) -> Option<(&str, &str)> {
        match self {
            Call::NamespaceExists { .. } => None,
            Call::PodExists { namespace, pod }
            | Call::CreatePod { namespace, pod }
            | Call::Watch { namespace, pod }
            | Call::ReadFile { namespace, pod, .. }
            | Call::DeletePod { namespace, pod } => Some((namespace, pod)),
        }
    }
}

type PodKey = (String, String);
type Timeline = Vec<(Duration, BTreeMap<String, ContainerState>)>;

#[derive(Debug)]
struct PodRecord {
    blueprint: Option<PodBlueprint>,
    created_at: Instant,
    initial: BTreeMap<String, ContainerState>,
    timeline: Arc<Timeline>,
    gone: CancellationToken,
}

impl PodRecord {
    fn states_at(&self, now: Instant) -> BTreeMap<String, ContainerState> {
        self.timeline
            .iter()
            .take_while(|(offset, _)| self.created_at + *offset <= now)
            .last()
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| self.initial.clone())
    }
}

#[derive(Debug, Default)]
struct State {
    namespaces: BTreeSet<String>,
    pods: BTreeMap<PodKey, PodRecord>,
    lifecycles: BTreeMap<PodKey, Vec<Step>>,
    default_lifecycle: Option<Vec<Step>>,
    /// (namespace, pod) → test container → relative path → bytes.
    volumes: BTreeMap<PodKey, BTreeMap<String, BTreeMap<String, Vec<u8>>>>,
    faults: Vec<Fault>,
    calls: Vec<Call>,
}

impl State {
    fn take_fault(&mut self, op: Op, namespace: &str, pod: Option<&str>) -> Result<(), ClusterError> {
        let Some(fault) = self.faults.iter_mut().find(|f| f.matches(op, namespace, pod)) else {
            return Ok(());
        };
        if let Some(n) = fault.times.as_mut() {
            *n -= 1;
        }
        let resource = match pod {
            Some(pod) => format!("pod {namespace}/{pod}"),
            None => format!("namespace {namespace}"),
        };
        Err(ClusterError::new(fault.kind, resource, format!("injected {:?} fault", op)))
    }
}

/// Scriptable in-memory cluster. Cloning shares the underlying state.
#[derive(Debug, Clone, Default)]
pub struct FakeCluster {
    state: Arc<Mutex<State>>,
}

impl FakeCluster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scenario(scenario: &Scenario) -> Result<Self, ScenarioError> {
        let fake = FakeCluster::new();
        for ns in &scenario.namespaces {
            fake.add_namespace(ns);
        }
        for pod in &scenario.existing_pods {
            fake.add_foreign_pod(&pod.namespace, &pod.pod_name);
        }
        for (key, steps) in &scenario.lifecycles {
            let (ns, pod) = split_key(key)?;
            fake.set_lifecycle(ns, pod, steps.clone());
        }
        if let Some(steps) = &scenario.default_lifecycle {
            fake.set_default_lifecycle(steps.clone());
        }
        for (key, containers) in &scenario.volumes {
            let (ns, pod) = split_key(key)?;
            for (container, files) in containers {
                for (rel, encoded) in files {
                    let bytes = base64::engine::general_purpose::STANDARD
                        .decode(encoded)
                        .map_err(|source| ScenarioError::Base64 {
                            path: format!("{key}/{container}/{rel}"),
                            source,
                        })?;
                    fake.write_result_file(ns, pod, container, rel, bytes);
                }
            }
        }
        for fault in &scenario.faults {
            if fault.kind == ErrorKind::Conflict && fault.op != Op::CreatePod {
                return Err(ScenarioError::ConflictFault);
            }
            fake.inject(fault.clone());
        }
        Ok(fake)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("fake cluster state poisoned")
    }

    pub fn add_namespace(&self, namespace: &str) -> &Self {
        self.lock().namespaces.insert(namespace.to_string());
        self
    }

    pub fn remove_namespace(&self, namespace: &str) -> &Self {
        let mut st = self.lock();
        st.namespaces.remove(namespace);
        let doomed: Vec<_> = st.pods.keys().filter(|(ns, _)| ns == namespace).cloned().collect();
        for key in doomed {
            if let Some(rec) = st.pods.remove(&key) {
                rec.gone.cancel();
            }
        }
        self
    }

    /// Adds a pod this tool did not create. It stays in its initial state.
    pub fn add_foreign_pod(&self, namespace: &str, pod: &str) -> &Self {
        self.lock().pods.insert(
            (namespace.to_string(), pod.to_string()),
            PodRecord {
                blueprint: None,
                created_at: Instant::now(),
                initial: BTreeMap::new(),
                timeline: Arc::new(Vec::new()),
                gone: CancellationToken::new(),
            },
        );
        self
    }

    /// Lifecycle applied when the pod gets created.
    pub fn set_lifecycle(&self, namespace: &str, pod: &str, steps: Vec<Step>) -> &Self {
        self.lock()
            .lifecycles
            .insert((namespace.to_string(), pod.to_string()), steps);
        self
    }

    pub fn set_default_lifecycle(&self, steps: Vec<Step>) -> &Self {
        self.lock().default_lifecycle = Some(steps);
        self
    }

    /// Places a file in a test container's result directory.
    pub fn write_result_file(&self, namespace: &str, pod: &str, container: &str, rel: &str, bytes: Vec<u8>) -> &Self {
        self.lock()
            .volumes
            .entry((namespace.to_string(), pod.to_string()))
            .or_default()
            .entry(container.to_string())
            .or_default()
            .insert(rel.trim_start_matches('/').to_string(), bytes);
        self
    }

    pub fn inject(&self, fault: Fault) -> &Self {
        self.lock().faults.push(fault);
        self
    }

    pub fn calls(&self) -> Vec<Call> {
        self.lock().calls.clone()
    }

    pub fn clear_calls(&self) {
        self.lock().calls.clear();
    }

    pub fn count_calls(&self, op: Op) -> usize {
        self.lock().calls.iter().filter(|c| c.op() == op).count()
    }

    /// Pods currently present, as (namespace, name).
    pub fn pods(&self) -> Vec<(String, String)> {
        self.lock().pods.keys().cloned().collect()
    }

    pub fn blueprint(&self, namespace: &str, pod: &str) -> Option<PodBlueprint> {
        self.lock()
            .pods
            .get(&(namespace.to_string(), pod.to_string()))
            .and_then(|r| r.blueprint.clone())
    }

    /// Current container states of a pod, without recording a call.
    pub fn pod_status(&self, namespace: &str, pod: &str) -> Option<BTreeMap<String, ContainerState>> {
        self.lock()
            .pods
            .get(&(namespace.to_string(), pod.to_string()))
            .map(|r| r.states_at(Instant::now()))
    }

    fn record(&self, call: Call) -> MutexGuard<'_, State> {
        let mut st = self.lock();
        st.calls.push(call);
        st
    }

    /// Reads a file or directory from a container's filesystem view.
    pub fn container_tree(
        &self,
        namespace: &str,
        pod_name: &str,
        container: &str,
        path: &str,
    ) -> Result<Tree, ClusterError> {
        let mut st = self.record(Call::ReadFile {
            namespace: namespace.into(),
            pod: pod_name.into(),
            container: container.into(),
            path: path.into(),
        });
        st.take_fault(Op::ReadFile, namespace, Some(pod_name))?;
        let key = (namespace.to_string(), pod_name.to_string());
        let record = st
            .pods
            .get(&key)
            .ok_or_else(|| ClusterError::not_found(format!("pod {namespace}/{pod_name}")))?;
        let container_resource = format!("container {container} in pod {namespace}/{pod_name}");
        let blueprint = record
            .blueprint
            .as_ref()
            .filter(|b| b.container_names().any(|n| n == container))
            .ok_or_else(|| ClusterError::not_found(container_resource.clone()))?;
        if record.states_at(Instant::now()).get(container) != Some(&ContainerState::Running) {
            return Err(ClusterError::new(
                ErrorKind::NotFound,
                container_resource,
                format!("container {container} is not running"),
            ));
        }

        let no_volume = BTreeMap::new();
        let volume = st.volumes.get(&key).unwrap_or(&no_volume);
        let mut files = BTreeMap::new();
        let mut dirs = BTreeSet::new();
        for (owner, mount) in blueprint.mounts() {
            if owner != container {
                continue;
            }
            let root = mount.mount_path.trim_end_matches('/').to_string();
            for (sub, contents) in volume {
                let base = match mount.sub_path.as_deref() {
                    Some(s) if s == sub => root.clone(),
                    Some(_) => continue,
                    None => format!("{root}/{sub}"),
                };
                for (rel, data) in contents {
                    files.insert(format!("{base}/{rel}"), data.clone());
                }
            }
            dirs.insert(root);
        }

        let path = path.trim_end_matches('/');
        if let Some(data) = files.get(path) {
            return Ok(Tree::File(data.clone()));
        }
        let prefix = format!("{path}/");
        let is_dir = path.is_empty()
            || dirs.iter().any(|d| d == path || d.starts_with(&prefix))
            || files.keys().any(|f| f.starts_with(&prefix));
        if !is_dir {
            return Err(ClusterError::new(
                ErrorKind::NotFound,
                format!("path {path}"),
                format!("{path}: no such file or directory in {container}"),
            ));
        }
        Ok(Tree::Dir(
            files
                .into_iter()
                .filter_map(|(f, d)| f.strip_prefix(&prefix).map(|r| (r.to_string(), d)))
                .collect(),
        ))
    }
}

fn split_key(key: &str) -> Result<(&str, &str), ScenarioError> {
    key.split_once('/')
        .filter(|(ns, pod)| !ns.is_empty() && !pod.is_empty())
        .ok_or_else(|| ScenarioError::PodKey(key.to_string()))
}

/// Expands a lifecycle against the containers of a blueprint.
fn resolve_timeline(blueprint: &PodBlueprint, steps: &[Step]) -> (BTreeMap<String, ContainerState>, Timeline) {
    let sidecar = blueprint.sidecar.name.as_str();
    let initial: BTreeMap<String, ContainerState> = blueprint
        .container_names()
        .map(|n| (n.to_string(), ContainerState::Waiting))
        .collect();
    let mut current = initial.clone();
    let mut offset = Duration::ZERO;
    let mut timeline = Vec::with_capacity(steps.len());
    for step in steps {
        offset += Duration::from_millis(step.delay_ms);
        let mut next = current.clone();
        for tc in &blueprint.test_containers {
            let scripted = step
                .containers
                .get(&tc.name)
                .or_else(|| step.containers.get(WILDCARD));
            if let Some(state) = scripted {
                next.insert(tc.name.clone(), *state);
            }
        }
        match step.containers.get(sidecar) {
            Some(state) => {
                next.insert(sidecar.to_string(), *state);
            }
            None => {
                let started = blueprint
                    .test_containers
                    .iter()
                    .any(|tc| next[&tc.name] != ContainerState::Waiting);
                if started && next[sidecar] == ContainerState::Waiting {
                    next.insert(sidecar.to_string(), ContainerState::Running);
                }
            }
        }
        for (name, state) in next.iter_mut() {
            if current[name].is_terminated() {
                *state = current[name];
            }
        }
        timeline.push((offset, next.clone()));
        current = next;
    }
    (initial, timeline)
}

fn make_event(namespace: &str, pod: &str, timestamp: Instant, states: BTreeMap<String, ContainerState>) -> WatchEvent {
    WatchEvent {
        timestamp,
        pod_name: pod.to_string(),
        namespace: namespace.to_string(),
        pod_phase: PodPhase::derive(states.values()),
        container_states: states,
    }
}

struct WatchCursor {
    namespace: String,
    pod: String,
    created_at: Instant,
    timeline: Arc<Timeline>,
    next: usize,
    first: Option<WatchEvent>,
    breaks: bool,
    gone: CancellationToken,
    done: bool,
}

impl WatchCursor {
    async fn advance(mut self) -> Option<(Result<WatchEvent, ClusterError>, Self)> {
        if self.done {
            return None;
        }
        if let Some(first) = self.first.take() {
            return Some((Ok(first), self));
        }
        let resource = format!("pod {}/{}", self.namespace, self.pod);
        if self.breaks {
            self.done = true;
            let err = ClusterError::new(ErrorKind::Transport, resource, "watch stream broken");
            return Some((Err(err), self));
        }
        if let Some((offset, states)) = self.timeline.get(self.next).cloned() {
            let at = self.created_at + offset;
            tokio::select! {
                _ = tokio::time::sleep_until(at) => {
                    self.next += 1;
                    let event = make_event(&self.namespace, &self.pod, at, states);
                    return Some((Ok(event), self));
                }
                _ = self.gone.cancelled() => {}
            }
        } else {
            self.gone.cancelled().await;
        }
        self.done = true;
        Some((Err(ClusterError::not_found(resource)), self))
    }
}

#[async_trait]
impl ClusterBackend for FakeCluster {
    async fn namespace_exists(&self, namespace: &str) -> Result<bool, ClusterError> {
        let mut st = self.record(Call::NamespaceExists {
            namespace: namespace.into(),
        });
        st.take_fault(Op::NamespaceExists, namespace, None)?;
        Ok(st.namespaces.contains(namespace))
    }

    async fn pod_exists(&self, namespace: &str, pod_name: &str) -> Result<bool, ClusterError> {
        let mut st = self.record(Call::PodExists {
            namespace: namespace.into(),
            pod: pod_name.into(),
        });
        st.take_fault(Op::PodExists, namespace, Some(pod_name))?;
        Ok(st
            .pods
            .contains_key(&(namespace.to_string(), pod_name.to_string())))
    }

    async fn create_pod(&self, blueprint: &PodBlueprint) -> Result<(), ClusterError> {
        let namespace = blueprint.namespace.as_str();
        let pod_name = blueprint.pod_name.as_str();
        let mut st = self.record(Call::CreatePod {
            namespace: namespace.into(),
            pod: pod_name.into(),
        });
        st.take_fault(Op::CreatePod, namespace, Some(pod_name))?;
        if !st.namespaces.contains(namespace) {
            return Err(ClusterError::not_found(format!("namespace {namespace}")));
        }
        let key = (namespace.to_string(), pod_name.to_string());
        if st.pods.contains_key(&key) {
            return Err(ClusterError::new(
                ErrorKind::Conflict,
                format!("pod {namespace}/{pod_name}"),
                format!("pods \"{pod_name}\" already exists"),
            ));
        }
        let steps = st
            .lifecycles
            .get(&key)
            .or(st.default_lifecycle.as_ref())
            .cloned()
            .unwrap_or_else(passing_lifecycle);
        let (initial, timeline) = resolve_timeline(blueprint, &steps);
        st.pods.insert(
            key,
            PodRecord {
                blueprint: Some(blueprint.clone()),
                created_at: Instant::now(),
                initial,
                timeline: Arc::new(timeline),
                gone: CancellationToken::new(),
            },
        );
        Ok(())
    }

    async fn watch_pod(&self, namespace: &str, pod_name: &str) -> Result<WatchStream, ClusterError> {
        let mut st = self.record(Call::Watch {
            namespace: namespace.into(),
            pod: pod_name.into(),
        });
        st.take_fault(Op::Watch, namespace, Some(pod_name))?;
        let breaks = st.take_fault(Op::WatchStream, namespace, Some(pod_name)).is_err();
        let record = st
            .pods
            .get(&(namespace.to_string(), pod_name.to_string()))
            .ok_or_else(|| ClusterError::not_found(format!("pod {namespace}/{pod_name}")))?;

        let now = Instant::now();
        let next = record
            .timeline
            .iter()
            .take_while(|(offset, _)| record.created_at + *offset <= now)
            .count();
        let cursor = WatchCursor {
            namespace: namespace.to_string(),
            pod: pod_name.to_string(),
            created_at: record.created_at,
            timeline: record.timeline.clone(),
            next,
            first: Some(make_event(namespace, pod_name, now, record.states_at(now))),
            breaks,
            gone: record.gone.clone(),
            done: false,
        };
        Ok(transitions_only(stream::unfold(cursor, WatchCursor::advance).boxed()))
    }

    async fn read_container_file(
        &self,
        namespace: &str,
        pod_name: &str,
        container_name: &str,
        path: &str,
    ) -> Result<Vec<u8>, ClusterError> {
        self.container_tree(namespace, pod_name, container_name, path)
            .map(Tree::into_bytes)
    }

    async fn delete_pod(&self, namespace: &str, pod_name: &str) -> Result<(), ClusterError> {
        let mut st = self.record(Call::DeletePod {
            namespace: namespace.into(),
            pod: pod_name.into(),
        });
        st.take_fault(Op::DeletePod, namespace, Some(pod_name))?;
        if let Some(rec) = st.pods.remove(&(namespace.to_string(), pod_name.to_string())) {
            rec.gone.cancel();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::archive;
    use crate::config::{TestContainerSpec, TestRunnerPodSpec};
    use crate::coordinator::{build_blueprint, SidecarSpec};
    use ContainerState::*;

    fn blueprint(ns: &str, pod: &str, containers: &[&str]) -> PodBlueprint {
        let spec = TestRunnerPodSpec {
            pod_name: pod.into(),
            namespace: ns.into(),
            test_timeout: Duration::from_secs(10),
            containers: containers
                .iter()
                .map(|c| TestContainerSpec {
                    container_name: c.to_string(),
                    image: "img".into(),
                    startup_commands: vec![],
                    startup_command_args: vec![],
                    test_result_path: format!("/out/{c}"),
                })
                .collect(),
        };
        build_blueprint(&spec, "run-1", &SidecarSpec::default())
    }

    async fn collect_states(fake: &FakeCluster, ns: &str, pod: &str, n: usize) -> Vec<BTreeMap<String, ContainerState>> {
        let stream = fake.watch_pod(ns, pod).await.unwrap();
        stream
            .take(n)
            .map(|e| e.unwrap().container_states)
            .collect()
            .await
    }

    #[tokio::test]
    async fn namespaces() {
        let fake = FakeCluster::new();
        fake.add_namespace("bunk8s-fe");
        assert!(fake.namespace_exists("bunk8s-fe").await.unwrap());
        assert!(!fake.namespace_exists("no-such-ns").await.unwrap());
    }

    #[tokio::test]
    async fn create_then_exists_then_delete() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns");
        assert!(!fake.pod_exists("ns", "p").await.unwrap());
        let bp = blueprint("ns", "p", &["it"]);
        fake.create_pod(&bp).await.unwrap();
        assert!(fake.pod_exists("ns", "p").await.unwrap());
        let err = fake.create_pod(&bp).await.unwrap_err();
        assert_eq!(err.kind, ErrorKind::Conflict);
        fake.delete_pod("ns", "p").await.unwrap();
        fake.delete_pod("ns", "p").await.unwrap();
        assert!(!fake.pod_exists("ns", "p").await.unwrap());
    }

    #[tokio::test]
    async fn create_into_vanished_namespace() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns");
        assert!(fake.namespace_exists("ns").await.unwrap());
        fake.remove_namespace("ns");
        let err = fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap_err();
        assert_eq!(err.kind, ErrorKind::NotFound);
    }

    #[tokio::test]
    async fn scripted_denials() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns")
            .inject(Fault::new(Op::PodExists, ErrorKind::Forbidden).times(1))
            .inject(Fault::new(Op::DeletePod, ErrorKind::Forbidden).on_pod("ns", "p"));
        assert_eq!(fake.pod_exists("ns", "p").await.unwrap_err().kind, ErrorKind::Forbidden);
        assert!(!fake.pod_exists("ns", "p").await.unwrap());
        assert_eq!(fake.delete_pod("ns", "p").await.unwrap_err().kind, ErrorKind::Forbidden);
        fake.delete_pod("ns", "other").await.unwrap();
    }

    #[tokio::test(start_paused = true)]
    async fn scripted_lifecycle_yields_each_transition() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns").set_lifecycle(
            "ns",
            "p",
            vec![
                Step::all(0, Waiting),
                Step::all(1_000, Running),
                Step::all(5_000, Terminated(0)),
            ],
        );
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();
        let states = collect_states(&fake, "ns", "p", 3).await;
        let it: Vec<_> = states.iter().map(|s| s["it"]).collect();
        assert_eq!(it, vec![Waiting, Running, Terminated(0)]);
        assert_eq!(states[1]["bunk8s-results"], Running);
        assert_eq!(states[2]["bunk8s-results"], Running);
    }

    #[tokio::test(start_paused = true)]
    async fn failing_test_leaves_sidecar_running() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns").set_lifecycle(
            "ns",
            "p",
            vec![Step::all(10, Running), Step::all(10, Terminated(1))],
        );
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();
        let last = collect_states(&fake, "ns", "p", 3).await.pop().unwrap();
        assert_eq!(last["it"], Terminated(1));
        assert_eq!(last["bunk8s-results"], Running);
    }

    #[tokio::test(start_paused = true)]
    async fn watch_starts_from_current_state() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns").set_lifecycle(
            "ns",
            "p",
            vec![Step::all(10, Running), Step::all(10_000, Terminated(0))],
        );
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();
        tokio::time::sleep(Duration::from_millis(50)).await;
        let states = collect_states(&fake, "ns", "p", 2).await;
        assert_eq!(states[0]["it"], Running);
        assert_eq!(states[1]["it"], Terminated(0));
    }

    #[tokio::test(start_paused = true)]
    async fn watch_of_absent_or_deleted_pod() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns");
        let err = fake.watch_pod("ns", "ghost").await.err().unwrap();
        assert_eq!(err.kind, ErrorKind::NotFound);

        fake.set_lifecycle("ns", "p", vec![Step::all(0, Running)]);
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();
        let mut stream = fake.watch_pod("ns", "p").await.unwrap();
        assert!(stream.next().await.unwrap().is_ok());
        fake.delete_pod("ns", "p").await.unwrap();
        let err = stream.next().await.unwrap().unwrap_err();
        assert_eq!(err.kind, ErrorKind::NotFound);
        assert!(stream.next().await.is_none());
    }

    #[tokio::test(start_paused = true)]
    async fn terminated_containers_stay_terminated() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns").set_lifecycle(
            "ns",
            "p",
            vec![
                Step::all(10, Terminated(2)),
                Step::all(10, Running),
                Step::all(10, Terminated(0)),
            ],
        );
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();
        tokio::time::sleep(Duration::from_secs(1)).await;
        assert_eq!(fake.pod_status("ns", "p").unwrap()["it"], Terminated(2));
    }

    #[tokio::test(start_paused = true)]
    async fn reads_files_and_directories_from_sidecar() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns").set_lifecycle("ns", "p", vec![Step::all(0, Running)]);
        fake.write_result_file("ns", "p", "it", "report.txt", b"ok\n".to_vec())
            .write_result_file("ns", "p", "it", "logs/a.log", vec![0, 0, 7]);
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();

        let bytes = fake
            .read_container_file("ns", "p", "bunk8s-results", "/results/it/report.txt")
            .await
            .unwrap();
        assert_eq!(bytes, b"ok\n");

        let dir = fake
            .read_container_file("ns", "p", "bunk8s-results", "/results/it")
            .await
            .unwrap();
        let files = archive::unpack_in_memory(&dir).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(files["logs/a.log"], vec![0, 0, 7]);

        // The test container sees the same files at its own result path.
        let own = fake.read_container_file("ns", "p", "it", "/out/it/report.txt").await.unwrap();
        assert_eq!(own, b"ok\n");

        let err = fake
            .read_container_file("ns", "p", "bunk8s-results", "/results/it/missing.txt")
            .await
            .unwrap_err();
        assert_eq!(err.kind, ErrorKind::NotFound);
        assert!(err.resource.contains("/results/it/missing.txt"));
    }

    #[tokio::test(start_paused = true)]
    async fn empty_result_directory_is_an_empty_archive() {
        let fake = FakeCluster::new();
        fake.add_namespace("ns").set_lifecycle("ns", "p", vec![Step::all(0, Running)]);
        fake.create_pod(&blueprint("ns", "p", &["it"])).await.unwrap();
        let bytes = fake
            .read_container_file("ns", "p", "bunk8s-results", "/results/it")
            .await
            .unwrap();
        assert!(archive::unpack_in_memory(&bytes).unwrap().is_empty());
    }

    #[test]
    fn scenario_parses() {
        let scenario = Scenario::from_json(
            r#"{
              "namespaces": ["bunk8s-fe"],
              "lifecycles": {"bunk8s-fe/p": [{"delayMs": 5, "containers": {"*": "running", "it": {"terminated": 1}}}]},
              "volumes": {"bunk8s-fe/p": {"it": {"report.txt": "b2sK"}}},
              "faults": [{"op": "DELETE_POD", "kind": "FORBIDDEN", "times": 1}]
            }"#,
        )
        .unwrap();
        assert_eq!(scenario.lifecycles["bunk8s-fe/p"][0].containers["it"], Terminated(1));
        let fake = FakeCluster::from_scenario(&scenario).unwrap();
        assert_eq!(fake.lock().volumes.values().next().unwrap()["it"]["report.txt"], b"ok\n");

        let bad = Scenario::from_json(r#"{"faults": [{"op": "DELETE_POD", "kind": "CONFLICT"}]}"#).unwrap();
        assert!(matches!(FakeCluster::from_scenario(&bad), Err(ScenarioError::ConflictFault)));
    }
}
