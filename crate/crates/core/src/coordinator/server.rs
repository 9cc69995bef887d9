use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use hyper_util::rt::TokioIo;
use hyper_util::service::TowerToHyperService;
use rustls_pki_types::pem::PemObject;
use rustls_pki_types::{CertificateDer, PrivateKeyDer};
use tokio::net::TcpListener;

use super::Coordinator;
use crate::rpc::{decode_request, encode_reply, DEPLOY_PATH};

/// PEM certificate chain and private key for serving HTTPS.
#[derive(Debug, Clone)]
pub struct TlsFiles {
    pub cert: PathBuf,
    pub key: PathBuf,
}

impl TlsFiles {
    fn server_config(&self) -> std::io::Result<rustls::ServerConfig> {
        let invalid = |e: &dyn std::fmt::Display| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string());
        let certs: Vec<CertificateDer<'static>> = CertificateDer::pem_file_iter(&self.cert)
            .map_err(|e| invalid(&e))?
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(&e))?;
        let key = PrivateKeyDer::from_pem_file(&self.key).map_err(|e| invalid(&e))?;
        let provider = Arc::new(rustls::crypto::aws_lc_rs::default_provider());
        let mut config = rustls::ServerConfig::builder_with_provider(provider)
            .with_safe_default_protocol_versions()
            .map_err(|e| invalid(&e))?
            .with_no_client_auth()
            .with_single_cert(certs, key)
            .map_err(|e| invalid(&e))?;
        config.alpn_protocols = vec![b"http/1.1".to_vec()];
        Ok(config)
    }
}

pub fn router(coordinator: Arc<Coordinator>) -> Router {
    Router::new()
        .route(DEPLOY_PATH, post(deploy))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(coordinator)
}

async fn deploy(State(coordinator): State<Arc<Coordinator>>, body: Bytes) -> Response {
    let req = match decode_request(&body) {
        Ok(req) => req,
        Err(e) => {
            tracing::warn!(error = %e, "rejecting undecodable deploy request");
            return (StatusCode::BAD_REQUEST, e.to_string()).into_response();
        }
    };
    let reply = coordinator.deploy_test_runners(&req).await;
    ([(header::CONTENT_TYPE, "application/json")], encode_reply(&reply)).into_response()
}

/// Serves the coordinator API on `listener` until the task is dropped.
pub async fn serve(listener: TcpListener, coordinator: Arc<Coordinator>, tls: Option<TlsFiles>) -> std::io::Result<()> {
    let app = router(coordinator);
    let Some(tls) = tls else {
        return axum::serve(listener, app).await;
    };

    let acceptor = tokio_rustls::TlsAcceptor::from(Arc::new(tls.server_config()?));
    loop {
        let (tcp, peer) = listener.accept().await?;
        let acceptor = acceptor.clone();
        let service = TowerToHyperService::new(app.clone());
        tokio::spawn(async move {
            let stream = match acceptor.accept(tcp).await {
                Ok(s) => s,
                Err(e) => {
                    tracing::debug!(%peer, error = %e, "TLS handshake failed");
                    return;
                }
            };
            if let Err(e) = hyper::server::conn::http1::Builder::new()
                .serve_connection(TokioIo::new(stream), service)
                .await
            {
                tracing::debug!(%peer, error = %e, "connection closed with error");
            }
        });
    }
}
