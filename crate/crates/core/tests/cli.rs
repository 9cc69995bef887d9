mod common;

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use base64::Engine;
use bunk8s::cluster::fake::{Scenario, Step};
use bunk8s::cluster::ContainerState;
use bunk8s::config::render_config;
use common::*;

const LAUNCHER: &str = env!("CARGO_BIN_EXE_bunk8s-launcher");
const COORDINATOR: &str = env!("CARGO_BIN_EXE_bunk8s-coordinator");

fn launcher(args: &[&str]) -> Output {
    Command::new(LAUNCHER)
        .args(args)
        .env_remove("KUBERNETES_SERVICE_HOST")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

fn wait_for(addr: SocketAddr) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(addr).is_err() {
        assert!(Instant::now() < deadline, "{addr} never came up");
        std::thread::sleep(Duration::from_millis(20));
    }
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn stdout_path(out: &Output) -> PathBuf {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "stdout: {text:?}");
    PathBuf::from(text.trim_end())
}

#[test]
fn bad_config_exits_2_and_prints_only_the_manifest_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.yaml");
    std::fs::write(&config, "launcherConfig: [").unwrap();
    let out = dir.path().join("out");
    let result = launcher(&[
        "--config",
        config.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--kube-api",
        "http://127.0.0.1:9",
    ]);
    assert_eq!(result.status.code(), Some(2));
    let manifest = stdout_path(&result);
    assert_eq!(manifest, out.join("manifest.json"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
    assert!(json["configDigest"].is_null());
}

#[test]
fn help_lists_exit_codes() {
    let result = launcher(&["--help"]);
    let text = String::from_utf8(result.stdout).unwrap();
    for code in ["0  ", "1  ", "2  ", "3  ", "4  "] {
        assert!(text.contains(code), "{text}");
    }
}

#[test]
fn unreachable_coordinator_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.yaml");
    std::fs::write(&config, render_config(&target(), &run(vec![pod("ns", "p", 5, &["t"])]))).unwrap();
    let out = dir.path().join("out");
    let result = launcher(&[
        "--config",
        config.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--coordinator-url",
        &format!("http://{}", free_addr()),
        "--kube-api",
        "http://127.0.0.1:9",
        "--timeout-grace",
        "1",
    ]);
    assert_eq!(result.status.code(), Some(3));
    assert!(stdout_path(&result).exists());
    assert!(!out.join("reply.json").exists());
}

fn scenario(dir: &Path) -> PathBuf {
    let b64 = |s: &str| base64::engine::general_purpose::STANDARD.encode(s);
    let scenario = Scenario {
        namespaces: vec!["bunk8s-fe".into()],
        lifecycles: BTreeMap::from([(
            "bunk8s-fe/test-runner-pod".into(),
            vec![Step::all(0, ContainerState::Running), Step::all(300, ContainerState::Terminated(1))],
        )]),
        volumes: BTreeMap::from([(
            "bunk8s-fe/test-runner-pod".into(),
            BTreeMap::from([(
                "integration-tests".into(),
                BTreeMap::from([("test.log".to_string(), b64(MONGO_FAILURE_LOG))]),
            )]),
        )]),
        ..Scenario::default()
    };
    let path = dir.join("scenario.json");
    std::fs::write(&path, serde_json::to_string_pretty(&scenario).unwrap()).unwrap();
    path
}

#[test]
fn binaries_run_end_to_end_against_an_in_memory_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let coord = free_addr();
    let api = free_addr();
    let _coordinator = Killed(
        Command::new(COORDINATOR)
            .args(["--bind", &coord.to_string(), "--fake-apiserver-bind", &api.to_string()])
            .arg("--fake-scenario")
            .arg(scenario(dir.path()))
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    wait_for(coord);
    wait_for(api);

    let example = EXAMPLE_CONFIG.replace("coordinatorPort: 443", &format!("coordinatorPort: {}", coord.port()));
    let example = example.replace("coordinator.example.com", "127.0.0.1");
    let config = dir.path().join("example.yaml");
    std::fs::write(&config, example).unwrap();
    let out = dir.path().join("out");
    let result = launcher(&[
        "--config",
        config.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--kube-api",
        &format!("http://{api}"),
    ]);

    assert_eq!(result.status.code(), Some(1), "{}", String::from_utf8_lossy(&result.stderr));
    assert_eq!(stdout_path(&result), out.join("manifest.json"));
    let log = std::fs::read_to_string(out.join("bunk8s-fe/test-runner-pod/integration-tests/test.log")).unwrap();
    assert!(log.contains("--- FAIL: TestMongoDBRoomAllocationEntry (10.00s)"));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.ends_with("OVERALL: FAIL\n"), "{report}");

    // the pod is gone, so a second run can reuse the name
    let again = launcher(&[
        "--config",
        config.to_str().unwrap(),
        "--output",
        dir.path().join("again").to_str().unwrap(),
        "--kube-api",
        &format!("http://{api}"),
    ]);
    assert_eq!(again.status.code(), Some(1));
}
