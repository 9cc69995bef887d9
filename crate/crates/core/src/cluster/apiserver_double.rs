//! HTTP test double of the kube-apiserver, backed by a [`FakeCluster`].
//!
//! It serves the handful of REST paths [`HttpCluster`](super::HttpCluster)
//! uses, with the same status codes, watch framing and exec websocket
//! protocol as the real API server, and records every request it receives.
//! Pointing an `HttpCluster` at it runs the real client code against
//! scripted cluster behavior.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, RawQuery, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::stream::{self, StreamExt};
use futures::SinkExt;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use super::archive::{self, Tree};
use super::{ClusterBackend, ClusterError, ContainerState, ErrorKind, FakeCluster, PodBlueprint, PodPhase};

const EXEC_PROTOCOL: &str = "v4.channel.k8s.io";
const EXEC_CHUNK: usize = 32 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub query: Option<String>,
    pub body: Option<Value>,
    pub authorization: Option<String>,
}

impl RecordedRequest {
    /// Query parameters in order of appearance.
    pub fn query_pairs(&self) -> Vec<(String, String)> {
        self.query
            .as_deref()
            .map(|q| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect())
            .unwrap_or_default()
    }
}

#[derive(Clone)]
struct DoubleState {
    fake: FakeCluster,
    log: Arc<Mutex<Vec<RecordedRequest>>>,
    token: Option<String>,
}

pub struct ApiServerDouble {
    addr: SocketAddr,
    log: Arc<Mutex<Vec<RecordedRequest>>>,
    task: JoinHandle<()>,
}

impl ApiServerDouble {
    /// Serves `fake` on an ephemeral loopback port.
    pub async fn start(fake: FakeCluster) -> std::io::Result<Self> {
        Self::start_with_token(fake, None).await
    }

    /// Like [`start`](Self::start), answering 401 unless requests carry
    /// `Authorization: Bearer <token>`.
    pub async fn start_with_token(fake: FakeCluster, token: Option<String>) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        Self::serve(listener, fake, token)
    }

    pub fn serve(listener: tokio::net::TcpListener, fake: FakeCluster, token: Option<String>) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let log = Arc::new(Mutex::new(Vec::new()));
        let app = router(DoubleState {
            fake,
            log: log.clone(),
            token,
        });
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(ApiServerDouble { addr, log, task })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }

    pub fn clear_requests(&self) {
        self.log.lock().expect("request log poisoned").clear();
    }
}

impl Drop for ApiServerDouble {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn router(state: DoubleState) -> Router {
    Router::new()
        .route("/api/v1/namespaces/{ns}", get(get_namespace))
        .route("/api/v1/namespaces/{ns}/pods", get(watch_pods).post(create_pod))
        .route("/api/v1/namespaces/{ns}/pods/{name}", get(get_pod).delete(delete_pod))
        .route("/api/v1/namespaces/{ns}/pods/{name}/exec", get(exec))
        .layer(middleware::from_fn_with_state(state.clone(), record_and_authorize))
        .with_state(state)
}

async fn record_and_authorize(State(st): State<DoubleState>, req: Request, next: Next) -> Response {
    let (parts, body) = req.into_parts();
    let bytes = axum::body::to_bytes(body, usize::MAX).await.unwrap_or_default();
    let authorization = parts
        .headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    st.log.lock().expect("request log poisoned").push(RecordedRequest {
        method: parts.method.to_string(),
        path: parts.uri.path().to_string(),
        query: parts.uri.query().map(str::to_owned),
        body: serde_json::from_slice(&bytes).ok(),
        authorization: authorization.clone(),
    });
    if let Some(token) = &st.token {
        if authorization.as_deref() != Some(format!("Bearer {token}").as_str()) {
            return status_response(StatusCode::UNAUTHORIZED, "Unauthorized", "Unauthorized");
        }
    }
    next.run(Request::from_parts(parts, Body::from(bytes))).await
}

fn status_code_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::Forbidden => StatusCode::FORBIDDEN,
        ErrorKind::Timeout => StatusCode::GATEWAY_TIMEOUT,
        ErrorKind::Transport => StatusCode::SERVICE_UNAVAILABLE,
        ErrorKind::Protocol => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn status_body(code: StatusCode, reason: &str, message: &str) -> Value {
    json!({
        "kind": "Status",
        "apiVersion": "v1",
        "metadata": {},
        "status": "Failure",
        "message": message,
        "reason": reason,
        "code": code.as_u16(),
    })
}

fn status_response(code: StatusCode, reason: &str, message: &str) -> Response {
    (code, Json(status_body(code, reason, message))).into_response()
}

fn error_response(err: &ClusterError) -> Response {
    let code = status_code_for(err.kind);
    let reason = code.canonical_reason().unwrap_or("Failure").replace(' ', "");
    status_response(code, &reason, &err.detail)
}

fn pod_object(fake: &FakeCluster, ns: &str, name: &str) -> Option<Value> {
    let states = fake.pod_status(ns, name)?;
    let mut pod = match fake.blueprint(ns, name) {
        Some(bp) => bp.to_pod_json(),
        None => json!({
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {"name": name, "namespace": ns},
            "spec": {"containers": []},
        }),
    };
    pod["status"] = pod_status_json(&states);
    Some(pod)
}

fn pod_status_json(states: &std::collections::BTreeMap<String, ContainerState>) -> Value {
    let statuses: Vec<Value> = states
        .iter()
        .map(|(name, state)| {
            let state = match state {
                ContainerState::Waiting => json!({"waiting": {"reason": "ContainerCreating"}}),
                ContainerState::Running => json!({"running": {}}),
                ContainerState::Terminated(code) => json!({"terminated": {"exitCode": code}}),
            };
            json!({"name": name, "state": state})
        })
        .collect();
    json!({
        "phase": PodPhase::derive(states.values()).as_str(),
        "containerStatuses": statuses,
    })
}

async fn get_namespace(State(st): State<DoubleState>, Path(ns): Path<String>) -> Response {
    match st.fake.namespace_exists(&ns).await {
        Ok(true) => Json(json!({
            "apiVersion": "v1",
            "kind": "Namespace",
            "metadata": {"name": ns},
            "status": {"phase": "Active"},
        }))
        .into_response(),
        Ok(false) => status_response(
            StatusCode::NOT_FOUND,
            "NotFound",
            &format!("namespaces \"{ns}\" not found"),
        ),
        Err(e) => error_response(&e),
    }
}

async fn get_pod(State(st): State<DoubleState>, Path((ns, name)): Path<(String, String)>) -> Response {
    match st.fake.pod_exists(&ns, &name).await {
        Ok(true) => match pod_object(&st.fake, &ns, &name) {
            Some(pod) => Json(pod).into_response(),
            None => not_found_pod(&name),
        },
        Ok(false) => not_found_pod(&name),
        Err(e) => error_response(&e),
    }
}

fn not_found_pod(name: &str) -> Response {
    status_response(StatusCode::NOT_FOUND, "NotFound", &format!("pods \"{name}\" not found"))
}

async fn create_pod(State(st): State<DoubleState>, Path(ns): Path<String>, body: Bytes) -> Response {
    let pod: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return status_response(StatusCode::BAD_REQUEST, "BadRequest", &e.to_string()),
    };
    let blueprint = match PodBlueprint::from_pod_json(&pod) {
        Ok(bp) => bp,
        Err(e) => return status_response(StatusCode::UNPROCESSABLE_ENTITY, "Invalid", &e.detail),
    };
    if blueprint.namespace != ns {
        return status_response(
            StatusCode::BAD_REQUEST,
            "BadRequest",
            "the namespace of the object does not match the namespace of the request",
        );
    }
    match st.fake.create_pod(&blueprint).await {
        Ok(()) => {
            let body = pod_object(&st.fake, &ns, &blueprint.pod_name).unwrap_or(pod);
            (StatusCode::CREATED, Json(body)).into_response()
        }
        Err(e) => error_response(&e),
    }
}

async fn delete_pod(State(st): State<DoubleState>, Path((ns, name)): Path<(String, String)>) -> Response {
    let existed = st.fake.pod_status(&ns, &name).is_some();
    match st.fake.delete_pod(&ns, &name).await {
        Ok(()) if existed => Json(json!({
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {"name": name, "namespace": ns},
        }))
        .into_response(),
        Ok(()) => not_found_pod(&name),
        Err(e) => error_response(&e),
    }
}

fn query_pairs(query: Option<&str>) -> Vec<(String, String)> {
    query
        .map(|q| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

async fn watch_pods(State(st): State<DoubleState>, Path(ns): Path<String>, RawQuery(query): RawQuery) -> Response {
    let pairs = query_pairs(query.as_deref());
    let param = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    if param("watch").as_deref() != Some("true") {
        return status_response(StatusCode::BAD_REQUEST, "BadRequest", "only watch requests are served");
    }
    let Some(name) = param("fieldSelector").and_then(|s| s.strip_prefix("metadata.name=").map(str::to_owned)) else {
        return status_response(StatusCode::BAD_REQUEST, "BadRequest", "fieldSelector=metadata.name=<pod> is required");
    };
    let timeout = param("timeoutSeconds")
        .and_then(|s| s.parse().ok())
        .map(Duration::from_secs)
        .unwrap_or(Duration::from_secs(1800));

    let events = match st.fake.watch_pod(&ns, &name).await {
        Ok(events) => events,
        // The real API server keeps a watch on a missing object open and
        // silent; close it right away instead.
        Err(e) if e.kind == ErrorKind::NotFound => return ndjson_response(Body::empty()),
        Err(e) => return error_response(&e),
    };

    let fake = st.fake.clone();
    let mut first = true;
    let lines = events
        .take_until(tokio::time::sleep(timeout))
        .scan(false, move |finished, item| {
            if *finished {
                return futures::future::ready(None);
            }
            let line: Result<Value, std::io::Error> = match item {
                Ok(ev) => {
                    let kind = if std::mem::take(&mut first) { "ADDED" } else { "MODIFIED" };
                    let mut pod = fake
                        .blueprint(&ev.namespace, &ev.pod_name)
                        .map(|bp| bp.to_pod_json())
                        .unwrap_or_else(|| json!({"metadata": {"name": ev.pod_name, "namespace": ev.namespace}, "spec": {"containers": []}}));
                    pod["status"] = pod_status_json(&ev.container_states);
                    Ok(json!({"type": kind, "object": pod}))
                }
                Err(e) if e.kind == ErrorKind::NotFound => {
                    *finished = true;
                    Ok(json!({
                        "type": "DELETED",
                        "object": {"metadata": {"name": name.clone(), "namespace": ns.clone()}, "spec": {"containers": []}},
                    }))
                }
                Err(e) if e.kind == ErrorKind::Transport => {
                    *finished = true;
                    Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, e.detail))
                }
                Err(e) => {
                    *finished = true;
                    let code = status_code_for(e.kind);
                    Ok(json!({"type": "ERROR", "object": status_body(code, "Failure", &e.detail)}))
                }
            };
            futures::future::ready(Some(line.map(|v| {
                let mut bytes = serde_json::to_vec(&v).expect("json values serialize");
                bytes.push(b'\n');
                Bytes::from(bytes)
            })))
        });
    ndjson_response(Body::from_stream(lines))
}

fn ndjson_response(body: Body) -> Response {
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body)
        .expect("static response parts are valid")
}

async fn exec(
    State(st): State<DoubleState>,
    Path((ns, name)): Path<(String, String)>,
    RawQuery(query): RawQuery,
    method: Method,
    ws: WebSocketUpgrade,
) -> Response {
    let pairs = query_pairs(query.as_deref());
    let command: Vec<&str> = pairs
        .iter()
        .filter(|(k, _)| k == "command")
        .map(|(_, v)| v.as_str())
        .collect();
    let container = pairs
        .iter()
        .find(|(k, _)| k == "container")
        .map(|(_, v)| v.clone())
        .unwrap_or_default();
    let path = match command.as_slice() {
        ["tar", "cf", "-", path] if method == Method::GET => path.to_string(),
        _ => {
            return status_response(
                StatusCode::BAD_REQUEST,
                "BadRequest",
                "this double only runs `tar cf - <path>`",
            )
        }
    };

    let outcome = match st.fake.container_tree(&ns, &name, &container, &path) {
        Ok(tree) => Ok(tree),
        Err(e) if e.kind == ErrorKind::NotFound && e.resource.starts_with("path ") => Err(e),
        Err(e) if e.kind == ErrorKind::NotFound && e.resource.starts_with("container ") => {
            return status_response(StatusCode::BAD_REQUEST, "BadRequest", &e.detail)
        }
        Err(e) => return error_response(&e),
    };
    ws.protocols([EXEC_PROTOCOL])
        .on_upgrade(move |socket| run_tar(socket, path, outcome))
}

async fn run_tar(mut socket: WebSocket, path: String, outcome: Result<Tree, ClusterError>) {
    let framed = |channel: u8, data: &[u8]| {
        let mut frame = Vec::with_capacity(data.len() + 1);
        frame.push(channel);
        frame.extend_from_slice(data);
        Message::Binary(frame.into())
    };
    let mut frames = Vec::new();
    match outcome {
        Ok(tree) => {
            let raw = archive::pack_like_tar_cli(&path, &tree);
            frames.push(framed(2, b"tar: Removing leading `/' from member names\n"));
            frames.extend(raw.chunks(EXEC_CHUNK).map(|c| framed(1, c)));
            frames.push(framed(3, br#"{"metadata":{},"status":"Success"}"#));
        }
        Err(_) => {
            let stderr = format!(
                "tar: Removing leading `/' from member names\ntar: {path}: Cannot stat: No such file or directory\ntar: Exiting with failure status due to previous errors\n"
            );
            frames.push(framed(2, stderr.as_bytes()));
            let status = json!({
                "metadata": {},
                "status": "Failure",
                "message": "command terminated with non-zero exit code: exit status 2",
                "reason": "NonZeroExitCode",
                "details": {"causes": [{"reason": "ExitCode", "message": "2"}]},
            });
            frames.push(framed(3, status.to_string().as_bytes()));
        }
    }
    let mut frames = stream::iter(frames.into_iter().map(Ok));
    if socket.send_all(&mut frames).await.is_ok() {
        let _ = socket.send(Message::Close(None)).await;
    }
}

