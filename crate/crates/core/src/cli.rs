//! Pieces shared by the two command-line tools.

use std::path::PathBuf;

use clap::Args;

use crate::cluster::http::{HttpCluster, HttpClusterConfig};
use crate::cluster::ClusterError;

/// How to reach the Kubernetes API. Without `--kube-api` the pod's service
/// account is used.
#[derive(Debug, Clone, Args)]
pub struct KubeArgs {
    /// Base URL of the Kubernetes API server.
    #[arg(long, env = "BUNK8S_KUBE_API")]
    pub kube_api: Option<String>,
    /// File holding a bearer token for the API server.
    #[arg(long, env = "BUNK8S_KUBE_TOKEN_FILE", requires = "kube_api")]
    pub kube_token_file: Option<PathBuf>,
    /// PEM bundle to trust for the API server's certificate.
    #[arg(long, env = "BUNK8S_KUBE_CA_FILE", requires = "kube_api")]
    pub kube_ca_file: Option<PathBuf>,
    /// Skip verification of the API server's certificate.
    #[arg(long)]
    pub kube_insecure_skip_verify: bool,
}

impl KubeArgs {
    pub fn cluster(&self) -> anyhow::Result<HttpCluster> {
        let mut config = match &self.kube_api {
            Some(url) => {
                let mut config = HttpClusterConfig::new(url);
                if let Some(path) = &self.kube_token_file {
                    config.token = Some(std::fs::read_to_string(path)?.trim().to_string());
                }
                if let Some(path) = &self.kube_ca_file {
                    config.ca_pem = Some(std::fs::read(path)?);
                }
                config
            }
            None => HttpClusterConfig::in_cluster()?,
        };
        config.insecure_skip_verify |= self.kube_insecure_skip_verify;
        HttpCluster::new(config).map_err(|e: ClusterError| e.into())
    }
}

/// Logs go to standard error, filtered by `RUST_LOG` (default `info`).
pub fn init_logging() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
}
