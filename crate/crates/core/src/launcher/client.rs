use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;

use crate::config::LauncherConfig;
use crate::coordinator::Coordinator;
use crate::rpc::{decode_request, encode_reply, DEPLOY_PATH};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ClientError(pub String);

/// Transport to the coordinator. Takes an encoded `DeployRequest` and
/// returns the reply body exactly as received.
#[async_trait]
pub trait CoordinatorClient: Send + Sync {
    async fn deploy(&self, target: &LauncherConfig, request: Vec<u8>, timeout: Duration) -> Result<Vec<u8>, ClientError>;
}

/// Talks to a coordinator over HTTP(S).
#[derive(Debug, Clone, Default)]
pub struct HttpCoordinatorClient {
    /// Base URL used instead of the one derived from the config.
    pub url_override: Option<String>,
    pub insecure_skip_verify: bool,
}

/// `https` when a certificate is configured or the port is 443.
pub fn coordinator_url(target: &LauncherConfig) -> String {
    let scheme = if target.cert_file.is_some() || target.coordinator_port == 443 {
        "https"
    } else {
        "http"
    };
    format!("{scheme}://{}:{}", target.coordinator_host, target.coordinator_port)
}

impl HttpCoordinatorClient {
    fn client(&self, cert_file: Option<&Path>) -> Result<reqwest::Client, ClientError> {
        let mut builder = reqwest::Client::builder().http1_only();
        if let Some(path) = cert_file {
            let pem = std::fs::read(path)
                .map_err(|e| ClientError(format!("reading certificate {}: {e}", path.display())))?;
            let certs = reqwest::Certificate::from_pem_bundle(&pem)
                .map_err(|e| ClientError(format!("parsing certificate {}: {e}", path.display())))?;
            builder = builder.tls_certs_only(certs);
        }
        if self.insecure_skip_verify {
            builder = builder.tls_danger_accept_invalid_certs(true);
        }
        builder
            .build()
            .map_err(|e| ClientError(format!("building HTTP client: {e}")))
    }
}

#[async_trait]
impl CoordinatorClient for HttpCoordinatorClient {
    async fn deploy(&self, target: &LauncherConfig, request: Vec<u8>, timeout: Duration) -> Result<Vec<u8>, ClientError> {
        let base = self.url_override.clone().unwrap_or_else(|| coordinator_url(target));
        let url = format!("{}{DEPLOY_PATH}", base.trim_end_matches('/'));
        let client = self.client(target.cert_file.as_deref())?;
        tracing::info!(%url, "sending deploy request");
        let resp = client
            .post(&url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .timeout(timeout)
            .body(request)
            .send()
            .await
            .map_err(|e| ClientError(format!("POST {url}: {}", error_chain(&e))))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .await
            .map_err(|e| ClientError(format!("reading reply from {url}: {}", error_chain(&e))))?;
        if !status.is_success() {
            return Err(ClientError(format!(
                "coordinator answered {status}: {}",
                String::from_utf8_lossy(&body).trim()
            )));
        }
        Ok(body.to_vec())
    }
}

fn error_chain(err: &dyn std::error::Error) -> String {
    let mut out = err.to_string();
    let mut source = err.source();
    while let Some(e) = source {
        out.push_str(": ");
        out.push_str(&e.to_string());
        source = e.source();
    }
    out
}

/// Calls a coordinator in the same process, still going through the wire
/// encoding.
#[derive(Debug, Clone)]
pub struct InProcessClient(pub Arc<Coordinator>);

#[async_trait]
impl CoordinatorClient for InProcessClient {
    async fn deploy(&self, _target: &LauncherConfig, request: Vec<u8>, _timeout: Duration) -> Result<Vec<u8>, ClientError> {
        let req = decode_request(&request).map_err(|e| ClientError(e.to_string()))?;
        Ok(encode_reply(&self.0.deploy_test_runners(&req).await))
    }
}

/// A coordinator that cannot be reached.
#[derive(Debug, Clone, Default)]
pub struct UnreachableClient;

#[async_trait]
impl CoordinatorClient for UnreachableClient {
    async fn deploy(&self, target: &LauncherConfig, _request: Vec<u8>, _timeout: Duration) -> Result<Vec<u8>, ClientError> {
        Err(ClientError(format!("connecting to {}: connection refused", coordinator_url(target))))
    }
}
