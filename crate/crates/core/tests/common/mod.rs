#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bunk8s::cluster::fake::FakeCluster;
use bunk8s::config::{render_config, LauncherConfig, TestContainerSpec, TestRunConfig, TestRunnerPodSpec};
use bunk8s::coordinator::{Coordinator, SidecarSpec};
use bunk8s::launcher::{run_launcher, CoordinatorClient, InProcessClient, LaunchOptions, LaunchOutcome};
use bunk8s::results::RunManifest;
use proptest::prelude::*;

pub const EXAMPLE_CONFIG: &str = "\
launcherConfig:
  coordinatorIp: coordinator.example.com
  coordinatorPort: 443
coordinatorConfig:
  testRunnerPods:
    - podName: test-runner-pod
      namespace: bunk8s-fe
      testTimeout: 300
      containers:
        - containerName: integration-tests
          image: registry.example.com/room-tests:1.0
          testResultPath: /results
";

/// Go test output of a run that could not reach MongoDB.
pub const MONGO_FAILURE_LOG: &str = "\
=== RUN   TestMongoDBRoomAllocationEntry
     main_test.go:152: Failed to create MongoDB client: Failed to ping MongoDB: server     selection error: context deadline exceeded, current topology: { Type: Unknown, Servers:     [{ Addr: mongodb://mongo.bunk8s-fe.svc.cluster.local, Type: Unknown, Last error: connection() error occured during     connection handshake: dial tcp mongodb://mongo.bunk8s-fe.svc.cluster.local: connect: connection refused }, ] }
--- FAIL: TestMongoDBRoomAllocationEntry (10.00s)
FAIL
ok  \tshowcase\t10.101s
";

pub const MONGO_PASS_LOG: &str = "\
=== RUN   TestMongoDBRoomAllocationEntry
--- PASS: TestMongoDBRoomAllocationEntry (0.41s)
PASS
ok  \tshowcase\t0.512s
";

pub fn target() -> LauncherConfig {
    LauncherConfig {
        coordinator_host: "coordinator.test".into(),
        coordinator_port: 8080,
        cert_file: None,
    }
}

pub fn container(name: &str) -> TestContainerSpec {
    TestContainerSpec {
        container_name: name.into(),
        image: format!("registry.test/{name}:1"),
        startup_commands: vec![],
        startup_command_args: vec![],
        test_result_path: "/test-results".into(),
    }
}

pub fn pod(ns: &str, name: &str, timeout_s: u64, containers: &[&str]) -> TestRunnerPodSpec {
    TestRunnerPodSpec {
        pod_name: name.into(),
        namespace: ns.into(),
        test_timeout: Duration::from_secs(timeout_s),
        containers: containers.iter().map(|c| container(c)).collect(),
    }
}

pub fn run(pods: Vec<TestRunnerPodSpec>) -> TestRunConfig {
    TestRunConfig { pods }
}

/// A working directory with a config file and a fake cluster behind an
/// in-process coordinator.
pub struct Env {
    pub dir: tempfile::TempDir,
    pub fake: FakeCluster,
    pub coordinator: Arc<Coordinator>,
}

impl Env {
    pub fn new(namespaces: &[&str]) -> Self {
        let fake = FakeCluster::new();
        for ns in namespaces {
            fake.add_namespace(ns);
        }
        let coordinator = Arc::new(Coordinator::new(Arc::new(fake.clone()), SidecarSpec::default()));
        Env {
            dir: tempfile::tempdir().unwrap(),
            fake,
            coordinator,
        }
    }

    pub fn write_config(&self, name: &str, run: &TestRunConfig) -> PathBuf {
        let path = self.dir.path().join(name);
        std::fs::write(&path, render_config(&target(), run)).unwrap();
        path
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub async fn launch(&self, run: &TestRunConfig, out: &str) -> Launched {
        self.launch_with(run, out, &InProcessClient(self.coordinator.clone())).await
    }

    pub async fn launch_with(&self, run: &TestRunConfig, out: &str, client: &dyn CoordinatorClient) -> Launched {
        let config = self.write_config(&format!("{out}.yaml"), run);
        let opts = LaunchOptions::new(config, self.out(out));
        let outcome = run_launcher(&opts, &self.fake, client).await;
        Launched::read(outcome, self.out(out))
    }
}

pub struct Launched {
    pub outcome: LaunchOutcome,
    pub out: PathBuf,
    pub manifest: RunManifest,
    pub reply: Option<serde_json::Value>,
}

impl Launched {
    pub fn read(outcome: LaunchOutcome, out: PathBuf) -> Self {
        let manifest = serde_json::from_slice(&std::fs::read(&outcome.manifest_path).unwrap()).unwrap();
        let reply = std::fs::read(out.join("reply.json"))
            .ok()
            .map(|b| serde_json::from_slice(&b).unwrap());
        Launched {
            outcome,
            out,
            manifest,
            reply,
        }
    }

    pub fn code(&self) -> Option<&str> {
        self.reply.as_ref().and_then(|r| r["code"].as_str())
    }

    pub fn file(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.out.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

/// Relative paths of every regular file below `root`, sorted.
pub fn list_files(root: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap();
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

pub fn runtime_paused() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .unwrap()
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap()
}

// Generators for valid configurations.

pub fn dns_label() -> impl Strategy<Value = String> {
    "[a-z]([a-z0-9-]{0,14}[a-z0-9])?"
}

fn yaml_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9_./=-]{1,16}",
        "\\PC{0,16}",
        Just("yes".to_string()),
        Just("~".to_string()),
        Just("0755".to_string()),
        Just("- not a list".to_string()),
        Just("a: b".to_string()),
        Just("#comment".to_string()),
    ]
}

fn abs_path() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-zA-Z0-9_.-]{1,8}", 1..4)
        .prop_filter("no dot segments", |segs| segs.iter().all(|s| s != "." && s != ".."))
        .prop_map(|segs| format!("/{}", segs.join("/")))
}

fn container_spec(name: String) -> impl Strategy<Value = TestContainerSpec> {
    (
        "[a-z0-9][a-z0-9./:-]{0,30}",
        prop::collection::vec(yaml_text(), 0..3),
        prop::collection::vec(yaml_text(), 0..3),
        abs_path(),
    )
        .prop_map(move |(image, commands, args, path)| TestContainerSpec {
            container_name: name.clone(),
            image,
            startup_command_args: if commands.is_empty() { vec![] } else { args },
            startup_commands: commands,
            test_result_path: path,
        })
}

fn pod_spec(name: String, namespace: String) -> impl Strategy<Value = TestRunnerPodSpec> {
    (
        1u64..=86_400,
        prop::collection::btree_set(dns_label(), 1..4).prop_filter("sidecar name is reserved", |names| {
            !names.contains(bunk8s::config::SIDECAR_CONTAINER_NAME)
        }),
    )
        .prop_flat_map(move |(timeout, names)| {
            let name = name.clone();
            let namespace = namespace.clone();
            names
                .into_iter()
                .map(container_spec)
                .collect::<Vec<_>>()
                .prop_map(move |containers| TestRunnerPodSpec {
                    pod_name: name.clone(),
                    namespace: namespace.clone(),
                    test_timeout: Duration::from_secs(timeout),
                    containers,
                })
        })
}

pub fn launcher_config() -> impl Strategy<Value = LauncherConfig> {
    (
        "[a-z0-9][a-z0-9.-]{0,24}",
        1u16..=65535,
        prop::option::of(prop_oneof![abs_path(), "[a-z]{1,8}\\.pem"]),
    )
        .prop_map(|(host, port, cert)| LauncherConfig {
            coordinator_host: host,
            coordinator_port: port,
            cert_file: cert.map(PathBuf::from),
        })
}

pub fn run_config() -> impl Strategy<Value = TestRunConfig> {
    prop::collection::btree_set((dns_label(), prop_oneof![Just("ns".to_string()), dns_label()]), 1..4).prop_flat_map(
        |keys| {
            keys.into_iter()
                .map(|(name, ns)| pod_spec(name, ns))
                .collect::<Vec<_>>()
                .prop_map(|pods| TestRunConfig { pods })
        },
    )
}

pub fn valid_config() -> impl Strategy<Value = (LauncherConfig, TestRunConfig)> {
    (launcher_config(), run_config())
}
