use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use bunk8s::cli::{init_logging, KubeArgs};
use bunk8s::cluster::apiserver_double::ApiServerDouble;
use bunk8s::cluster::fake::{FakeCluster, Scenario};
use bunk8s::cluster::ClusterBackend;
use bunk8s::coordinator::{serve, Coordinator, SidecarSpec, TlsFiles};
use clap::Parser;

/// Serves the deploy endpoint and manages test runner pods in the cluster.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Address to listen on.
    #[arg(long, default_value = "0.0.0.0:8080")]
    bind: SocketAddr,
    /// PEM certificate chain; serve HTTPS together with --tls-key.
    #[arg(long, env = "BUNK8S_TLS_CERT", requires = "tls_key")]
    tls_cert: Option<PathBuf>,
    /// PEM private key.
    #[arg(long, env = "BUNK8S_TLS_KEY", requires = "tls_cert")]
    tls_key: Option<PathBuf>,
    /// Use an in-memory cluster described by this JSON scenario instead of
    /// the Kubernetes API.
    #[arg(long, conflicts_with = "kube_api")]
    fake_scenario: Option<PathBuf>,
    /// With --fake-scenario, also expose the in-memory cluster as a
    /// Kubernetes-style API on this address, so a launcher can extract
    /// results and delete pods.
    #[arg(long, requires = "fake_scenario")]
    fake_apiserver_bind: Option<SocketAddr>,
    #[command(flatten)]
    kube: KubeArgs,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    init_logging();

    let mut _double = None;
    let backend: Arc<dyn ClusterBackend> = match &cli.fake_scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let scenario = Scenario::from_json(&text)?;
            let fake = FakeCluster::from_scenario(&scenario)?;
            if let Some(addr) = cli.fake_apiserver_bind {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                let double = ApiServerDouble::serve(listener, fake.clone(), None)?;
                tracing::info!(url = %double.url(), "in-memory cluster API listening");
                _double = Some(double);
            }
            Arc::new(fake)
        }
        None => Arc::new(cli.kube.cluster()?),
    };

    let tls = match (cli.tls_cert, cli.tls_key) {
        (Some(cert), Some(key)) => Some(TlsFiles { cert, key }),
        _ => None,
    };
    let coordinator = Arc::new(Coordinator::new(backend, SidecarSpec::from_env()));
    let listener = tokio::net::TcpListener::bind(cli.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, tls = tls.is_some(), "coordinator listening");
    serve(listener, coordinator, tls).await?;
    Ok(())
}
