use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use bunk8s::cli::{init_logging, KubeArgs};
use bunk8s::launcher::{run_launcher, HttpCoordinatorClient, LaunchOptions, EXIT_COORDINATOR};
use clap::Parser;

/// Deploys integration test runner pods through the coordinator, stores
/// their results and removes the pods again.
#[derive(Debug, Parser)]
#[command(
    version,
    after_help = "Exit codes:
  0  every test container passed, results stored, pods deleted
  1  a test failed, timed out or its pod errored
  2  the config file or output directory is unusable
  3  the coordinator could not be reached or rejected the run
  4  tests passed but extracting results or deleting pods failed

Standard output carries only the path of manifest.json; logs go to standard error."
)]
struct Cli {
    /// Run configuration (YAML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for reply.json, manifest.json, report.txt and result files.
    #[arg(long)]
    output: PathBuf,
    /// Coordinator base URL, replacing the one built from the config.
    #[arg(long)]
    coordinator_url: Option<String>,
    /// Skip verification of the coordinator's TLS certificate.
    #[arg(long)]
    insecure_skip_verify: bool,
    /// Seconds added to twice the longest test timeout before giving up on
    /// the coordinator.
    #[arg(long, default_value_t = 60)]
    timeout_grace: u64,
    #[command(flatten)]
    kube: KubeArgs,
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();

    let backend = match cli.kube.cluster() {
        Ok(b) => b,
        Err(e) => {
            tracing::error!("cannot reach the Kubernetes API: {e:#}");
            return ExitCode::from(EXIT_COORDINATOR as u8);
        }
    };
    let client = HttpCoordinatorClient {
        url_override: cli.coordinator_url,
        insecure_skip_verify: cli.insecure_skip_verify,
    };
    let mut opts = LaunchOptions::new(cli.config, cli.output);
    opts.timeout_grace = Duration::from_secs(cli.timeout_grace);

    let outcome = run_launcher(&opts, &backend, &client).await;
    println!("{}", outcome.manifest_path.display());
    ExitCode::from(outcome.exit_code as u8)
}
