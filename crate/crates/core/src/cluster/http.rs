//! Backend talking to a real kube-apiserver over its REST API.

use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, BoxStream, StreamExt};
use reqwest::{header, Client, Method, RequestBuilder, Response, StatusCode};
use serde_json::Value;
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::{self, protocol::Role, Message};
use tokio_tungstenite::WebSocketStream;

use super::archive;
use super::{
    transitions_only, ClusterBackend, ClusterError, ContainerState, ErrorKind, PodBlueprint,
    PodPhase, WatchEvent, WatchStream,
};

const SERVICE_ACCOUNT_DIR: &str = "/var/run/secrets/kubernetes.io/serviceaccount";
const EXEC_PROTOCOL: &str = "v4.channel.k8s.io";

const STDOUT_CHANNEL: u8 = 1;
const STDERR_CHANNEL: u8 = 2;
const STATUS_CHANNEL: u8 = 3;

#[derive(Debug, Clone)]
pub struct HttpClusterConfig {
    /// Base URL of the API server, e.g. `https://10.0.0.1:443`.
    pub api_url: String,
    pub token: Option<String>,
    /// PEM bundle trusted for the API server's certificate.
    pub ca_pem: Option<Vec<u8>>,
    pub insecure_skip_verify: bool,
    /// Server-side lifetime requested for each watch connection.
    pub watch_timeout: Duration,
}

impl HttpClusterConfig {
    pub fn new(api_url: impl Into<String>) -> Self {
        HttpClusterConfig {
            api_url: api_url.into(),
            token: None,
            ca_pem: None,
            insecure_skip_verify: false,
            watch_timeout: Duration::from_secs(300),
        }
    }

    /// Configuration from the service-account mount of a pod.
    pub fn in_cluster() -> std::io::Result<Self> {
        let host = std::env::var("KUBERNETES_SERVICE_HOST").map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::NotFound, "KUBERNETES_SERVICE_HOST is not set")
        })?;
        let port = std::env::var("KUBERNETES_SERVICE_PORT").unwrap_or_else(|_| "443".into());
        let host = if host.contains(':') { format!("[{host}]") } else { host };
        let dir = Path::new(SERVICE_ACCOUNT_DIR);
        let mut config = HttpClusterConfig::new(format!("https://{host}:{port}"));
        config.token = Some(std::fs::read_to_string(dir.join("token"))?.trim().to_string());
        config.ca_pem = Some(std::fs::read(dir.join("ca.crt"))?);
        Ok(config)
    }
}

#[derive(Debug, Clone)]
pub struct HttpCluster {
    client: Client,
    base: String,
    token: Option<String>,
    watch_timeout: Duration,
}

impl HttpCluster {
    pub fn new(config: HttpClusterConfig) -> Result<Self, ClusterError> {
        let mut builder = Client::builder().http1_only();
        if let Some(pem) = &config.ca_pem {
            let certs = reqwest::Certificate::from_pem_bundle(pem).map_err(|e| {
                ClusterError::new(ErrorKind::Protocol, "CA bundle", e.to_string())
            })?;
            builder = builder.tls_certs_only(certs);
        }
        if config.insecure_skip_verify {
            builder = builder.tls_danger_accept_invalid_certs(true);
        }
        let client = builder
            .build()
            .map_err(|e| ClusterError::new(ErrorKind::Transport, "http client", e.to_string()))?;
        Ok(HttpCluster {
            client,
            base: config.api_url.trim_end_matches('/').to_string(),
            token: config.token,
            watch_timeout: config.watch_timeout,
        })
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let req = self.client.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(token) => req.bearer_auth(token),
            None => req,
        }
    }

    async fn send(&self, req: RequestBuilder, resource: &str) -> Result<Response, ClusterError> {
        req.send().await.map_err(|e| transport_error(resource, e))
    }
}

fn pod_path(namespace: &str, pod: &str) -> String {
    format!("/api/v1/namespaces/{namespace}/pods/{pod}")
}

fn transport_error(resource: &str, err: reqwest::Error) -> ClusterError {
    let kind = if err.is_timeout() {
        ErrorKind::Timeout
    } else {
        ErrorKind::Transport
    };
    ClusterError::new(kind, resource, err.to_string())
}

pub(crate) fn kind_for_status(status: StatusCode) -> ErrorKind {
    match status.as_u16() {
        404 => ErrorKind::NotFound,
        409 => ErrorKind::Conflict,
        401 | 403 => ErrorKind::Forbidden,
        408 | 504 => ErrorKind::Timeout,
        502 | 503 => ErrorKind::Transport,
        _ => ErrorKind::Protocol,
    }
}

/// Turns a non-success response into an error, using the message of the
/// API server's `Status` body when there is one.
async fn status_error(resp: Response, resource: &str) -> ClusterError {
    let status = resp.status();
    let body = resp.text().await.unwrap_or_default();
    let detail = serde_json::from_str::<Value>(&body)
        .ok()
        .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_else(|| format!("HTTP {status}: {}", body.trim()));
    ClusterError::new(kind_for_status(status), resource, detail)
}

/// Reads the container states and phase out of a pod object.
pub(crate) fn watch_event_from_pod(pod: &Value) -> Option<WatchEvent> {
    let metadata = pod.get("metadata")?;
    let mut states: std::collections::BTreeMap<String, ContainerState> = pod
        .pointer("/spec/containers")?
        .as_array()?
        .iter()
        .filter_map(|c| c.get("name")?.as_str())
        .map(|n| (n.to_string(), ContainerState::Waiting))
        .collect();
    let statuses = pod
        .pointer("/status/containerStatuses")
        .and_then(Value::as_array)
        .map(Vec::as_slice)
        .unwrap_or_default();
    for status in statuses {
        let Some(name) = status.get("name").and_then(Value::as_str) else {
            continue;
        };
        let state = match status.get("state") {
            Some(s) if s.get("terminated").is_some() => ContainerState::Terminated(
                s.pointer("/terminated/exitCode")
                    .and_then(Value::as_i64)
                    .unwrap_or(-1) as i32,
            ),
            Some(s) if s.get("running").is_some() => ContainerState::Running,
            _ => ContainerState::Waiting,
        };
        states.insert(name.to_string(), state);
    }
    let phase = pod
        .pointer("/status/phase")
        .and_then(Value::as_str)
        .map(PodPhase::parse)
        .unwrap_or(PodPhase::Pending);
    Some(WatchEvent {
        timestamp: Instant::now(),
        pod_name: metadata.get("name")?.as_str()?.to_string(),
        namespace: metadata.get("namespace")?.as_str()?.to_string(),
        container_states: states,
        pod_phase: phase,
    })
}

struct WatchReader {
    cluster: HttpCluster,
    namespace: String,
    pod: String,
    body: BoxStream<'static, reqwest::Result<bytes::Bytes>>,
    buf: Vec<u8>,
    seen_any: bool,
    done: bool,
}

impl WatchReader {
    fn resource(&self) -> String {
        format!("pod {}/{}", self.namespace, self.pod)
    }

    async fn advance(mut self) -> Option<(Result<WatchEvent, ClusterError>, Self)> {
        if self.done {
            return None;
        }
        loop {
            if let Some(pos) = self.buf.iter().position(|b| *b == b'\n') {
                let line: Vec<u8> = self.buf.drain(..=pos).collect();
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match self.handle_line(&line) {
                    Some(item) => {
                        if item.is_err() {
                            self.done = true;
                        }
                        return Some((item, self));
                    }
                    None => continue,
                }
            }
            match self.body.next().await {
                Some(Ok(chunk)) => self.buf.extend_from_slice(&chunk),
                Some(Err(e)) => {
                    self.done = true;
                    let err = transport_error(&self.resource(), e);
                    return Some((Err(err), self));
                }
                None => {
                    self.done = true;
                    let resource = self.resource();
                    // A watch on an absent pod stays silent; tell the two apart.
                    let err = if !self.seen_any {
                        match self.cluster.pod_exists(&self.namespace, &self.pod).await {
                            Ok(false) => ClusterError::not_found(resource),
                            Ok(true) => ClusterError::new(ErrorKind::Transport, resource, "watch closed by server"),
                            Err(e) => e,
                        }
                    } else {
                        ClusterError::new(ErrorKind::Transport, resource, "watch closed by server")
                    };
                    return Some((Err(err), self));
                }
            }
        }
    }

    fn handle_line(&mut self, line: &[u8]) -> Option<Result<WatchEvent, ClusterError>> {
        let resource = self.resource();
        let event: Value = match serde_json::from_slice(line) {
            Ok(v) => v,
            Err(e) => {
                return Some(Err(ClusterError::new(
                    ErrorKind::Protocol,
                    resource,
                    format!("undecodable watch event: {e}"),
                )))
            }
        };
        let object = event.get("object").cloned().unwrap_or(Value::Null);
        match event.get("type").and_then(Value::as_str) {
            Some("ADDED") | Some("MODIFIED") => {
                self.seen_any = true;
                Some(watch_event_from_pod(&object).ok_or_else(|| {
                    ClusterError::new(ErrorKind::Protocol, resource, "watch event without a pod object")
                }))
            }
            Some("DELETED") => Some(Err(ClusterError::not_found(resource))),
            Some("ERROR") => {
                let code = object.get("code").and_then(Value::as_u64).unwrap_or(500);
                let message = object
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or("watch error")
                    .to_string();
                // 410 Gone: the resource version expired, a new watch fixes it.
                let kind = if code == 410 {
                    ErrorKind::Transport
                } else {
                    StatusCode::from_u16(code as u16)
                        .map(kind_for_status)
                        .unwrap_or(ErrorKind::Protocol)
                };
                Some(Err(ClusterError::new(kind, resource, message)))
            }
            _ => None,
        }
    }
}

#[async_trait]
impl ClusterBackend for HttpCluster {
    async fn namespace_exists(&self, namespace: &str) -> Result<bool, ClusterError> {
        let resource = format!("namespace {namespace}");
        let path = format!("/api/v1/namespaces/{namespace}");
        let resp = self.send(self.request(Method::GET, &path), &resource).await?;
        match resp.status() {
            s if s.is_success() => Ok(true),
            StatusCode::NOT_FOUND => Ok(false),
            _ => Err(status_error(resp, &resource).await),
        }
    }

    async fn pod_exists(&self, namespace: &str, pod_name: &str) -> Result<bool, ClusterError> {
        let resource = format!("pod {namespace}/{pod_name}");
        let req = self.request(Method::GET, &pod_path(namespace, pod_name));
        let resp = self.send(req, &resource).await?;
        match resp.status() {
            s if s.is_success() => Ok(true),
            StatusCode::NOT_FOUND => Ok(false),
            _ => Err(status_error(resp, &resource).await),
        }
    }

    async fn create_pod(&self, blueprint: &PodBlueprint) -> Result<(), ClusterError> {
        let resource = format!("pod {}/{}", blueprint.namespace, blueprint.pod_name);
        let path = format!("/api/v1/namespaces/{}/pods", blueprint.namespace);
        let req = self
            .request(Method::POST, &path)
            .json(&blueprint.to_pod_json());
        let resp = self.send(req, &resource).await?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(status_error(resp, &resource).await)
        }
    }

    async fn watch_pod(&self, namespace: &str, pod_name: &str) -> Result<WatchStream, ClusterError> {
        let resource = format!("pod {namespace}/{pod_name}");
        let path = format!("/api/v1/namespaces/{namespace}/pods");
        let req = self.request(Method::GET, &path).query(&[
            ("watch", "true".to_string()),
            ("fieldSelector", format!("metadata.name={pod_name}")),
            ("timeoutSeconds", self.watch_timeout.as_secs().max(1).to_string()),
        ]);
        let resp = self.send(req, &resource).await?;
        if !resp.status().is_success() {
            return Err(status_error(resp, &resource).await);
        }
        let reader = WatchReader {
            cluster: self.clone(),
            namespace: namespace.to_string(),
            pod: pod_name.to_string(),
            body: resp.bytes_stream().boxed(),
            buf: Vec::new(),
            seen_any: false,
            done: false,
        };
        Ok(transitions_only(stream::unfold(reader, WatchReader::advance).boxed()))
    }

    /// Runs `tar cf - <path>` in the container through the exec subresource.
    async fn read_container_file(
        &self,
        namespace: &str,
        pod_name: &str,
        container_name: &str,
        path: &str,
    ) -> Result<Vec<u8>, ClusterError> {
        let resource = format!("container {container_name} in pod {namespace}/{pod_name}");
        let key = tungstenite::handshake::client::generate_key();
        let mut query: Vec<(&str, &str)> = vec![("container", container_name)];
        for arg in ["tar", "cf", "-", path] {
            query.push(("command", arg));
        }
        query.push(("stdout", "true"));
        query.push(("stderr", "true"));
        let req = self
            .request(Method::GET, &format!("{}/exec", pod_path(namespace, pod_name)))
            .query(&query)
            .header(header::CONNECTION, "Upgrade")
            .header(header::UPGRADE, "websocket")
            .header(header::SEC_WEBSOCKET_VERSION, "13")
            .header(header::SEC_WEBSOCKET_KEY, &key)
            .header(header::SEC_WEBSOCKET_PROTOCOL, EXEC_PROTOCOL);
        let resp = self.send(req, &resource).await?;
        match resp.status() {
            StatusCode::SWITCHING_PROTOCOLS => {}
            StatusCode::BAD_REQUEST => {
                // Container unknown or not running.
                let mut err = status_error(resp, &resource).await;
                err.kind = ErrorKind::NotFound;
                return Err(err);
            }
            _ => return Err(status_error(resp, &resource).await),
        }
        let expected_accept = tungstenite::handshake::derive_accept_key(key.as_bytes());
        let accept = resp
            .headers()
            .get(header::SEC_WEBSOCKET_ACCEPT)
            .and_then(|v| v.to_str().ok());
        if accept != Some(expected_accept.as_str()) {
            return Err(ClusterError::new(
                ErrorKind::Protocol,
                resource,
                "websocket handshake returned a wrong accept key",
            ));
        }
        let upgraded = resp
            .upgrade()
            .await
            .map_err(|e| transport_error(&resource, e))?;
        let mut ws = WebSocketStream::from_raw_socket(upgraded, Role::Client, None).await;

        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let mut exit_status: Option<Value> = None;
        while let Some(msg) = ws.next().await {
            let msg = msg.map_err(|e| {
                ClusterError::new(ErrorKind::Transport, resource.clone(), e.to_string())
            })?;
            match msg {
                Message::Binary(data) if !data.is_empty() => match data[0] {
                    STDOUT_CHANNEL => stdout.extend_from_slice(&data[1..]),
                    STDERR_CHANNEL => stderr.extend_from_slice(&data[1..]),
                    STATUS_CHANNEL => exit_status = serde_json::from_slice(&data[1..]).ok(),
                    _ => {}
                },
                Message::Close(_) => break,
                _ => {}
            }
        }

        let succeeded = exit_status
            .as_ref()
            .and_then(|s| s.get("status"))
            .and_then(Value::as_str)
            == Some("Success");
        if !succeeded {
            let stderr = String::from_utf8_lossy(&stderr).trim().to_string();
            let kind = if stderr.contains("No such file") || stderr.contains("not found") {
                ErrorKind::NotFound
            } else {
                ErrorKind::Protocol
            };
            let detail = if stderr.is_empty() {
                exit_status
                    .as_ref()
                    .and_then(|s| s.get("message"))
                    .and_then(Value::as_str)
                    .unwrap_or("tar exited without a status")
                    .to_string()
            } else {
                stderr
            };
            let resource = if kind == ErrorKind::NotFound {
                format!("path {path}")
            } else {
                resource
            };
            return Err(ClusterError::new(kind, resource, detail));
        }

        let tree = archive::tree_from_tar_cli(path, &stdout).map_err(|e| {
            ClusterError::new(ErrorKind::Protocol, resource, format!("unreadable tar stream: {e}"))
        })?;
        Ok(tree.into_bytes())
    }

    async fn delete_pod(&self, namespace: &str, pod_name: &str) -> Result<(), ClusterError> {
        let resource = format!("pod {namespace}/{pod_name}");
        let req = self.request(Method::DELETE, &pod_path(namespace, pod_name));
        let resp = self.send(req, &resource).await?;
        match resp.status() {
            s if s.is_success() => Ok(()),
            StatusCode::NOT_FOUND => Ok(()),
            _ => Err(status_error(resp, &resource).await),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn pod_status_mapping() {
        let pod = json!({
            "metadata": {"name": "p", "namespace": "ns"},
            "spec": {"containers": [{"name": "it"}, {"name": "bunk8s-results"}, {"name": "slow"}]},
            "status": {
                "phase": "Running",
                "containerStatuses": [
                    {"name": "it", "state": {"terminated": {"exitCode": 1, "reason": "Error"}}},
                    {"name": "bunk8s-results", "state": {"running": {"startedAt": "x"}}}
                ]
            }
        });
        let ev = watch_event_from_pod(&pod).unwrap();
        assert_eq!(ev.container_states["it"], ContainerState::Terminated(1));
        assert_eq!(ev.container_states["bunk8s-results"], ContainerState::Running);
        assert_eq!(ev.container_states["slow"], ContainerState::Waiting);
        assert_eq!(ev.pod_phase, PodPhase::Running);
    }

    #[test]
    fn status_codes() {
        assert_eq!(kind_for_status(StatusCode::NOT_FOUND), ErrorKind::NotFound);
        assert_eq!(kind_for_status(StatusCode::FORBIDDEN), ErrorKind::Forbidden);
        assert_eq!(kind_for_status(StatusCode::CONFLICT), ErrorKind::Conflict);
        assert_eq!(kind_for_status(StatusCode::SERVICE_UNAVAILABLE), ErrorKind::Transport);
        assert_eq!(kind_for_status(StatusCode::INTERNAL_SERVER_ERROR), ErrorKind::Protocol);
    }

    #[tokio::test]
    async fn unreachable_api_is_a_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let cluster = HttpCluster::new(HttpClusterConfig::new(format!("http://{addr}"))).unwrap();
        let err = cluster.namespace_exists("bunk8s-fe").await.unwrap_err();
        assert_eq!(err.kind, ErrorKind::Transport);
    }
}
