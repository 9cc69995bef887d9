//! Access to the Kubernetes control plane.
//!
//! The workflow only needs six primitives, captured by [`ClusterBackend`].
//! [`HttpCluster`] speaks the real REST API; [`FakeCluster`] is an in-process
//! stand-in with scriptable pod lifecycles and virtual time, and
//! [`apiserver_double`] serves a fake over the real REST paths so the HTTP
//! backend can be exercised end to end.

use std::collections::BTreeMap;
use std::fmt;

use async_trait::async_trait;
use futures::stream::{BoxStream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

pub mod apiserver_double;
pub mod archive;
mod blueprint;
pub mod fake;
pub mod http;

pub use blueprint::{PodBlueprint, RestartPolicy, Sidecar, TestContainer, VolumeMount, RUN_ID_LABEL};
pub use fake::FakeCluster;
pub use http::{HttpCluster, HttpClusterConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Forbidden,
    Timeout,
    Transport,
    Protocol,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::NotFound => "not found",
            ErrorKind::Conflict => "conflict",
            ErrorKind::Forbidden => "forbidden",
            ErrorKind::Timeout => "timeout",
            ErrorKind::Transport => "transport error",
            ErrorKind::Protocol => "protocol error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} ({resource}): {detail}")]
pub struct ClusterError {
    pub kind: ErrorKind,
    pub resource: String,
    pub detail: String,
}

impl ClusterError {
    pub fn new(kind: ErrorKind, resource: impl Into<String>, detail: impl Into<String>) -> Self {
        ClusterError {
            kind,
            resource: resource.into(),
            detail: detail.into(),
        }
    }

    pub fn not_found(resource: impl Into<String>) -> Self {
        let resource = resource.into();
        let detail = format!("{resource} not found");
        ClusterError::new(ErrorKind::NotFound, resource, detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerState {
    Waiting,
    Running,
    Terminated(i32),
}

impl ContainerState {
    pub fn is_terminated(self) -> bool {
        matches!(self, ContainerState::Terminated(_))
    }

    pub fn exit_code(self) -> Option<i32> {
        match self {
            ContainerState::Terminated(code) => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PodPhase {
    Pending,
    Running,
    Succeeded,
    Failed,
    Unknown,
}

impl PodPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            PodPhase::Pending => "Pending",
            PodPhase::Running => "Running",
            PodPhase::Succeeded => "Succeeded",
            PodPhase::Failed => "Failed",
            PodPhase::Unknown => "Unknown",
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "Pending" => PodPhase::Pending,
            "Running" => PodPhase::Running,
            "Succeeded" => PodPhase::Succeeded,
            "Failed" => PodPhase::Failed,
            _ => PodPhase::Unknown,
        }
    }

    /// Phase the kubelet would report for a set of container states.
    pub fn derive<'a>(states: impl IntoIterator<Item = &'a ContainerState>) -> Self {
        let states: Vec<_> = states.into_iter().copied().collect();
        if states.is_empty() || states.iter().all(|s| *s == ContainerState::Waiting) {
            PodPhase::Pending
        } else if states.iter().all(|s| s.is_terminated()) {
            if states.iter().all(|s| s.exit_code() == Some(0)) {
                PodPhase::Succeeded
            } else {
                PodPhase::Failed
            }
        } else {
            PodPhase::Running
        }
    }
}

/// One observed state of a pod.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchEvent {
    pub timestamp: Instant,
    pub pod_name: String,
    pub namespace: String,
    pub container_states: BTreeMap<String, ContainerState>,
    pub pod_phase: PodPhase,
}

impl WatchEvent {
    fn same_state(&self, other: &WatchEvent) -> bool {
        self.container_states == other.container_states && self.pod_phase == other.pod_phase
    }
}

pub type WatchStream = BoxStream<'static, Result<WatchEvent, ClusterError>>;

/// The cluster operations the coordinator and launcher rely on.
#[async_trait]
pub trait ClusterBackend: Send + Sync {
    async fn namespace_exists(&self, namespace: &str) -> Result<bool, ClusterError>;

    async fn pod_exists(&self, namespace: &str, pod_name: &str) -> Result<bool, ClusterError>;

    async fn create_pod(&self, blueprint: &PodBlueprint) -> Result<(), ClusterError>;

    /// Streams state transitions of a pod, starting with its current state.
    /// The stream does not end on its own while the pod exists.
    async fn watch_pod(&self, namespace: &str, pod_name: &str) -> Result<WatchStream, ClusterError>;

    /// Returns the bytes of a regular file, or a [`archive`] of a directory.
    async fn read_container_file(
        &self,
        namespace: &str,
        pod_name: &str,
        container_name: &str,
        path: &str,
    ) -> Result<Vec<u8>, ClusterError>;

    /// Deletes a pod. Deleting an absent pod succeeds.
    async fn delete_pod(&self, namespace: &str, pod_name: &str) -> Result<(), ClusterError>;
}

#[async_trait]
impl<T: ClusterBackend + ?Sized> ClusterBackend for std::sync::Arc<T> {
    async fn namespace_exists(&self, namespace: &str) -> Result<bool, ClusterError> {
        (**self).namespace_exists(namespace).await
    }
    async fn pod_exists(&self, namespace: &str, pod_name: &str) -> Result<bool, ClusterError> {
        (**self).pod_exists(namespace, pod_name).await
    }
    async fn create_pod(&self, blueprint: &PodBlueprint) -> Result<(), ClusterError> {
        (**self).create_pod(blueprint).await
    }
    async fn watch_pod(&self, namespace: &str, pod_name: &str) -> Result<WatchStream, ClusterError> {
        (**self).watch_pod(namespace, pod_name).await
    }
    async fn read_container_file(
        &self,
        namespace: &str,
        pod_name: &str,
        container_name: &str,
        path: &str,
    ) -> Result<Vec<u8>, ClusterError> {
        (**self)
            .read_container_file(namespace, pod_name, container_name, path)
            .await
    }
    async fn delete_pod(&self, namespace: &str, pod_name: &str) -> Result<(), ClusterError> {
        (**self).delete_pod(namespace, pod_name).await
    }
}

/// Drops events that repeat the previous state and pins terminated
/// containers, so a stream only ever reports real transitions and no
/// container leaves `Terminated`.
pub(crate) fn transitions_only(stream: WatchStream) -> WatchStream {
    stream
        .scan(None::<WatchEvent>, |last, item| {
            let out = match item {
                Ok(mut event) => {
                    if let Some(prev) = last.as_ref() {
                        let mut pinned = false;
                        for (name, state) in event.container_states.iter_mut() {
                            if let Some(old @ ContainerState::Terminated(_)) =
                                prev.container_states.get(name)
                            {
                                pinned |= state != old;
                                *state = *old;
                            }
                        }
                        if pinned {
                            event.pod_phase = PodPhase::derive(event.container_states.values());
                        }
                    }
                    if last.as_ref().is_some_and(|prev| prev.same_state(&event)) {
                        None
                    } else {
                        *last = Some(event.clone());
                        Some(Ok(event))
                    }
                }
                Err(e) => Some(Err(e)),
            };
            futures::future::ready(Some(out))
        })
        .filter_map(futures::future::ready)
        .boxed()
}
