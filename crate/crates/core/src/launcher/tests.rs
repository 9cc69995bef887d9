use std::sync::Arc;

use super::*;
use crate::cluster::fake::{FakeCluster, Fault, Op, Step};
use crate::cluster::{ContainerState, ErrorKind};
use crate::config::{LauncherConfig, TestContainerSpec, TestRunConfig, TestRunnerPodSpec};
use crate::coordinator::{Coordinator, SidecarSpec};
use crate::results::RunManifest;

fn run_config(pods: &[(&str, &[&str])]) -> TestRunConfig {
    TestRunConfig {
        pods: pods
            .iter()
            .map(|(name, containers)| TestRunnerPodSpec {
                pod_name: name.to_string(),
                namespace: "ns".into(),
                test_timeout: Duration::from_secs(5),
                containers: containers
                    .iter()
                    .map(|c| TestContainerSpec {
                        container_name: c.to_string(),
                        image: "img:1".into(),
                        startup_commands: vec![],
                        startup_command_args: vec![],
                        test_result_path: "/out".into(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

struct Harness {
    dir: tempfile::TempDir,
    fake: FakeCluster,
    client: InProcessClient,
}

impl Harness {
    fn new(pods: &[(&str, &[&str])]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let target = LauncherConfig {
            coordinator_host: "coordinator".into(),
            coordinator_port: 8080,
            cert_file: None,
        };
        std::fs::write(dir.path().join("bunk8s.yaml"), render_config(&target, &run_config(pods))).unwrap();
        let fake = FakeCluster::new();
        fake.add_namespace("ns");
        let coordinator = Coordinator::new(Arc::new(fake.clone()), SidecarSpec::default());
        Harness {
            dir,
            fake,
            client: InProcessClient(Arc::new(coordinator)),
        }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    async fn launch(&self) -> (LaunchOutcome, RunManifest) {
        let opts = LaunchOptions::new(self.dir.path().join("bunk8s.yaml"), self.out());
        let outcome = run_launcher(&opts, &self.fake, &self.client).await;
        let manifest = serde_json::from_slice(&std::fs::read(&outcome.manifest_path).unwrap()).unwrap();
        (outcome, manifest)
    }
}

#[tokio::test(start_paused = true)]
async fn fan_out_over_two_pods() {
    let h = Harness::new(&[("a", &["t"]), ("b", &["t"])]);
    h.fake.write_result_file("ns", "a", "t", "a.xml", b"<a/>".to_vec());
    h.fake.write_result_file("ns", "b", "t", "b.xml", b"<b/>".to_vec());
    let (outcome, manifest) = h.launch().await;

    assert_eq!(outcome.exit_code, EXIT_PASSED);
    assert_eq!(std::fs::read(h.out().join("ns/a/t/a.xml")).unwrap(), b"<a/>");
    assert_eq!(std::fs::read(h.out().join("ns/b/t/b.xml")).unwrap(), b"<b/>");
    assert_eq!(h.fake.count_calls(Op::DeletePod), 2);
    assert!(h.fake.pods().is_empty());
    assert_eq!(manifest.deletions.len(), 2);
}

#[tokio::test(start_paused = true)]
async fn timed_out_pod_gets_empty_directory_and_note() {
    let h = Harness::new(&[("slow", &["t"])]);
    h.fake
        .set_lifecycle("ns", "slow", vec![Step::all(0, ContainerState::Running)]);
    let (outcome, manifest) = h.launch().await;

    assert_eq!(outcome.exit_code, EXIT_TESTS_FAILED);
    let dir = h.out().join("ns/slow/t");
    assert!(dir.is_dir());
    assert_eq!(std::fs::read_dir(&dir).unwrap().count(), 0);
    let c = &manifest.pods[0].containers[0];
    assert!(c.note.is_some());
    assert!(c.extraction_error.is_none());
    assert!(h.fake.pods().is_empty());
}

#[tokio::test(start_paused = true)]
async fn one_unreachable_sidecar_does_not_stop_the_others() {
    let h = Harness::new(&[("a", &["t"]), ("b", &["t"])]);
    h.fake.write_result_file("ns", "b", "t", "r.txt", b"ok".to_vec());
    h.fake
        .inject(Fault::new(Op::ReadFile, ErrorKind::Transport).on_pod("ns", "a"));
    let (outcome, manifest) = h.launch().await;

    assert_eq!(outcome.exit_code, EXIT_ARTIFACTS);
    assert_eq!(std::fs::read(h.out().join("ns/b/t/r.txt")).unwrap(), b"ok");
    assert!(manifest.pods[0].containers[0].extraction_error.is_some());
    assert!(manifest.pods[1].containers[0].extraction_error.is_none());
    assert!(h.fake.pods().is_empty(), "cleanup still runs");
}

#[tokio::test(start_paused = true)]
async fn cleanup_twice_is_a_no_op() {
    let h = Harness::new(&[("a", &["t"])]);
    let (_, _) = h.launch().await;
    let reply = decode_reply(&std::fs::read(h.out().join(REPLY_FILE)).unwrap()).unwrap();
    let again = cleanup(&reply, &h.fake).await;
    assert!(again.iter().all(|d| d.ok));
}

#[tokio::test(start_paused = true)]
async fn forbidden_delete_degrades_only_a_green_run() {
    let h = Harness::new(&[("a", &["t"])]);
    h.fake.inject(Fault::new(Op::DeletePod, ErrorKind::Forbidden));
    let (outcome, manifest) = h.launch().await;
    assert_eq!(outcome.exit_code, EXIT_ARTIFACTS);
    assert!(!manifest.deletions[0].ok);
    assert!(manifest.deletions[0].detail.contains("forbidden"), "{}", manifest.deletions[0].detail);

    let h = Harness::new(&[("a", &["t"])]);
    h.fake.inject(Fault::new(Op::DeletePod, ErrorKind::Forbidden));
    h.fake.set_lifecycle(
        "ns",
        "a",
        vec![Step::all(0, ContainerState::Running), Step::all(100, ContainerState::Terminated(1))],
    );
    let (outcome, _) = h.launch().await;
    assert_eq!(outcome.exit_code, EXIT_TESTS_FAILED);
}

#[tokio::test(start_paused = true)]
async fn error_pod_is_skipped_but_deleted() {
    let h = Harness::new(&[("a", &["t"])]);
    h.fake.inject(Fault::new(Op::Watch, ErrorKind::Forbidden));
    let (outcome, manifest) = h.launch().await;
    assert_eq!(outcome.exit_code, EXIT_TESTS_FAILED);
    assert_eq!(h.fake.count_calls(Op::ReadFile), 0);
    assert!(manifest.pods[0].containers[0].note.is_some());
    assert!(h.fake.pods().is_empty());
}

#[tokio::test]
async fn unreadable_config_exits_2_without_contacting_anyone() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.yaml"), "launcherConfig: [").unwrap();
    let fake = FakeCluster::new();
    let opts = LaunchOptions::new(dir.path().join("c.yaml"), dir.path().join("out"));
    let outcome = run_launcher(&opts, &fake, &UnreachableClient).await;
    assert_eq!(outcome.exit_code, EXIT_CONFIG);
    assert!(fake.calls().is_empty());
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(&outcome.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest.config_digest, None);
    assert_eq!(manifest.errors.len(), 1);
}

#[test]
fn url_scheme_follows_certificate_and_port() {
    let mut target = LauncherConfig {
        coordinator_host: "c.example".into(),
        coordinator_port: 8080,
        cert_file: None,
    };
    assert_eq!(coordinator_url(&target), "http://c.example:8080");
    target.coordinator_port = 443;
    assert_eq!(coordinator_url(&target), "https://c.example:443");
    target.coordinator_port = 8443;
    target.cert_file = Some("ca.pem".into());
    assert_eq!(coordinator_url(&target), "https://c.example:8443");
}
