//! Run configuration: the YAML document handed to the launcher.
//!
//! The document has two sections. `launcherConfig` tells the launcher how to
//! reach the coordinator, `coordinatorConfig` lists the test runner pods the
//! coordinator should deploy:
//!
//! ```yaml
//! launcherConfig:
//!   coordinatorIp: coordinator.example.com
//!   coordinatorPort: 443
//!   certFile: ca.pem
//! coordinatorConfig:
//!   testRunnerPods:
//!     - podName: test-runner-pod
//!       namespace: bunk8s-fe
//!       testTimeout: 300          # seconds
//!       containers:
//!         - containerName: integration-tests
//!           image: registry.example.com/room-tests:1.0
//!           startupCommands: ["go", "test"]
//!           startupCommandsArgs: ["./..."]
//!           testResultPath: /results
//! ```
//!
//! Parsing happens in three stages, each with its own error class: YAML
//! syntax, document shape (unknown or missing keys, wrong types) and the
//! semantic rules on names, paths and timeouts.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Name of the result sidecar container injected into every test runner pod.
pub const SIDECAR_CONTAINER_NAME: &str = "bunk8s-results";

const DNS_LABEL_MAX_LEN: usize = 63;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("syntax error: {message}")]
    Syntax { message: String },

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("validation error at `{field}`: {rule}")]
    Validation { field: String, rule: String },
}

impl ConfigError {
    fn validation(field: impl Into<String>, rule: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LauncherConfig {
    pub coordinator_host: String,
    pub coordinator_port: u16,
    /// PEM bundle of the certificate authority that signed the coordinator's
    /// certificate. Existence is checked when connecting.
    pub cert_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestContainerSpec {
    pub container_name: String,
    pub image: String,
    /// Replaces the image entrypoint when non-empty.
    pub startup_commands: Vec<String>,
    pub startup_command_args: Vec<String>,
    /// Absolute directory inside the container where the tests write results.
    pub test_result_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestRunnerPodSpec {
    pub pod_name: String,
    pub namespace: String,
    pub test_timeout: Duration,
    pub containers: Vec<TestContainerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestRunConfig {
    pub pods: Vec<TestRunnerPodSpec>,
}

/// Serde mirror of the configuration document. Shared with the RPC wire
/// format, which carries the `coordinatorConfig` section verbatim.
pub(crate) mod raw {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, rename_all = "camelCase")]
    pub struct Document {
        pub launcher_config: Launcher,
        pub coordinator_config: Run,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, rename_all = "camelCase")]
    pub struct Launcher {
        pub coordinator_ip: String,
        pub coordinator_port: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub cert_file: Option<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, rename_all = "camelCase")]
    pub struct Run {
        pub test_runner_pods: Vec<Pod>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, rename_all = "camelCase")]
    pub struct Pod {
        pub pod_name: String,
        pub namespace: String,
        pub test_timeout: i64,
        pub containers: Vec<Container>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, rename_all = "camelCase")]
    pub struct Container {
        pub container_name: String,
        pub image: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub startup_commands: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub startup_commands_args: Option<Vec<String>>,
        pub test_result_path: String,
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(document: &str) -> Result<(LauncherConfig, TestRunConfig), ConfigError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(document).map_err(|e| ConfigError::Syntax {
            message: e.to_string(),
        })?;
    let doc: raw::Document = from_value_with_path(value)?;
    let launcher = launcher_from_raw(doc.launcher_config)?;
    let run = run_from_raw(doc.coordinator_config, "coordinatorConfig")?;
    Ok((launcher, run))
}

/// Emits the canonical document for a configuration pair.
///
/// Keys appear in a fixed order and absent optional fields are left out, so
/// equal configurations always render to identical text.
pub fn render_config(launcher: &LauncherConfig, run: &TestRunConfig) -> String {
    let doc = raw::Document {
        launcher_config: raw::Launcher {
            coordinator_ip: launcher.coordinator_host.clone(),
            coordinator_port: i64::from(launcher.coordinator_port),
            cert_file: launcher
                .cert_file
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
        },
        coordinator_config: run_to_raw(run),
    };
    serde_yaml::to_string(&doc).expect("configuration documents always serialize")
}

fn from_value_with_path<T: serde::de::DeserializeOwned>(
    value: serde_yaml::Value,
) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|err| {
        let mut path = err.path().to_string();
        let message = err.inner().to_string();
        // Missing and unknown keys are reported against their parent; point
        // at the key itself instead.
        if let Some(key) = backticked_key(&message) {
            if path == key || path.ends_with(&format!(".{key}")) {
                // already points at the key
            } else if path == "." {
                path = key.to_string();
            } else {
                path = format!("{path}.{key}");
            }
        }
        ConfigError::Schema { path, message }
    })
}

fn backticked_key(message: &str) -> Option<&str> {
    let rest = message
        .strip_prefix("missing field `")
        .or_else(|| message.strip_prefix("unknown field `"))?;
    rest.split('`').next()
}

fn launcher_from_raw(raw: raw::Launcher) -> Result<LauncherConfig, ConfigError> {
    if raw.coordinator_ip.trim().is_empty() {
        return Err(ConfigError::validation(
            "launcherConfig.coordinatorIp",
            "must not be empty",
        ));
    }
    let port = u16::try_from(raw.coordinator_port)
        .ok()
        .filter(|p| *p >= 1)
        .ok_or_else(|| {
            ConfigError::validation(
                "launcherConfig.coordinatorPort",
                format!("must be in [1, 65535], got {}", raw.coordinator_port),
            )
        })?;
    let cert_file = match raw.cert_file {
        Some(path) if path.trim().is_empty() => {
            return Err(ConfigError::validation(
                "launcherConfig.certFile",
                "must be a non-empty path when present",
            ))
        }
        Some(path) => Some(PathBuf::from(path)),
        None => None,
    };
    Ok(LauncherConfig {
        coordinator_host: raw.coordinator_ip,
        coordinator_port: port,
        cert_file,
    })
}

pub(crate) fn run_from_raw(raw: raw::Run, prefix: &str) -> Result<TestRunConfig, ConfigError> {
    let pods_field = format!("{prefix}.testRunnerPods");
    if raw.test_runner_pods.is_empty() {
        return Err(ConfigError::validation(
            pods_field,
            "at least one test runner pod is required",
        ));
    }

    let mut seen = BTreeSet::new();
    let mut pods = Vec::with_capacity(raw.test_runner_pods.len());
    for (i, pod) in raw.test_runner_pods.into_iter().enumerate() {
        let field = format!("{pods_field}[{i}]");
        let pod = pod_from_raw(pod, &field)?;
        if !seen.insert((pod.namespace.clone(), pod.pod_name.clone())) {
            return Err(ConfigError::validation(
                field,
                format!(
                    "duplicate pod (podName {:?}, namespace {:?})",
                    pod.pod_name, pod.namespace
                ),
            ));
        }
        pods.push(pod);
    }
    Ok(TestRunConfig { pods })
}

fn pod_from_raw(raw: raw::Pod, field: &str) -> Result<TestRunnerPodSpec, ConfigError> {
    check_dns_label(&raw.pod_name, &format!("{field}.podName"))?;
    check_dns_label(&raw.namespace, &format!("{field}.namespace"))?;
    if raw.test_timeout < 1 {
        return Err(ConfigError::validation(
            format!("{field}.testTimeout"),
            format!("must be at least 1 second, got {}", raw.test_timeout),
        ));
    }
    if raw.containers.is_empty() {
        return Err(ConfigError::validation(
            format!("{field}.containers"),
            "at least one container is required",
        ));
    }

    let mut names = BTreeSet::new();
    let mut containers = Vec::with_capacity(raw.containers.len());
    for (i, c) in raw.containers.into_iter().enumerate() {
        let cfield = format!("{field}.containers[{i}]");
        let c = container_from_raw(c, &cfield)?;
        if !names.insert(c.container_name.clone()) {
            return Err(ConfigError::validation(
                format!("{cfield}.containerName"),
                format!("duplicate container name {:?} in pod", c.container_name),
            ));
        }
        containers.push(c);
    }

    Ok(TestRunnerPodSpec {
        pod_name: raw.pod_name,
        namespace: raw.namespace,
        test_timeout: Duration::from_secs(raw.test_timeout as u64),
        containers,
    })
}

fn container_from_raw(raw: raw::Container, field: &str) -> Result<TestContainerSpec, ConfigError> {
    check_dns_label(&raw.container_name, &format!("{field}.containerName"))?;
    if raw.container_name == SIDECAR_CONTAINER_NAME {
        return Err(ConfigError::validation(
            format!("{field}.containerName"),
            format!("{SIDECAR_CONTAINER_NAME:?} is reserved for the result sidecar"),
        ));
    }
    if raw.image.trim().is_empty() {
        return Err(ConfigError::validation(
            format!("{field}.image"),
            "must not be empty",
        ));
    }
    if !raw.test_result_path.starts_with('/') || raw.test_result_path.trim_end_matches('/').is_empty()
    {
        return Err(ConfigError::validation(
            format!("{field}.testResultPath"),
            "must be an absolute path other than '/'",
        ));
    }
    let startup_commands = raw.startup_commands.unwrap_or_default();
    let startup_command_args = raw.startup_commands_args.unwrap_or_default();
    if startup_commands.is_empty() && !startup_command_args.is_empty() {
        return Err(ConfigError::validation(
            format!("{field}.startupCommandsArgs"),
            "arguments require startupCommands",
        ));
    }
    Ok(TestContainerSpec {
        container_name: raw.container_name,
        image: raw.image,
        startup_commands,
        startup_command_args,
        test_result_path: raw.test_result_path,
    })
}

pub(crate) fn run_to_raw(run: &TestRunConfig) -> raw::Run {
    let non_empty = |v: &Vec<String>| (!v.is_empty()).then(|| v.clone());
    raw::Run {
        test_runner_pods: run
            .pods
            .iter()
            .map(|p| raw::Pod {
                pod_name: p.pod_name.clone(),
                namespace: p.namespace.clone(),
                test_timeout: p.test_timeout.as_secs() as i64,
                containers: p
                    .containers
                    .iter()
                    .map(|c| raw::Container {
                        container_name: c.container_name.clone(),
                        image: c.image.clone(),
                        startup_commands: non_empty(&c.startup_commands),
                        startup_commands_args: non_empty(&c.startup_command_args),
                        test_result_path: c.test_result_path.clone(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Checks the RFC 1123 label grammar Kubernetes uses for pod, namespace and
/// container names.
pub fn is_dns_label(name: &str) -> bool {
    let bytes = name.as_bytes();
    let valid_char = |b: &u8| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'-';
    let alnum = |b: &u8| b.is_ascii_lowercase() || b.is_ascii_digit();
    !bytes.is_empty()
        && bytes.len() <= DNS_LABEL_MAX_LEN
        && bytes.iter().all(valid_char)
        && alnum(&bytes[0])
        && alnum(&bytes[bytes.len() - 1])
}

fn check_dns_label(name: &str, field: &str) -> Result<(), ConfigError> {
    if is_dns_label(name) {
        Ok(())
    } else {
        Err(ConfigError::validation(
            field,
            format!(
                "{name:?} is not a DNS-1123 label (lowercase alphanumerics and '-', \
                 at most {DNS_LABEL_MAX_LEN} characters, alphanumeric at both ends)"
            ),
        ))
    }
}

impl fmt::Display for TestRunnerPodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.pod_name)
    }
}

impl TestRunConfig {
    /// Longest test timeout across all pods.
    pub fn max_timeout(&self) -> Duration {
        self.pods
            .iter()
            .map(|p| p.test_timeout)
            .max()
            .unwrap_or_default()
    }
}

// The JSON encoding of a run reuses the document's `coordinatorConfig` shape.
impl Serialize for TestRunConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        run_to_raw(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TestRunConfig {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = raw::Run::deserialize(deserializer)?;
        run_from_raw(raw, "run").map_err(serde::de::Error::custom)
    }
}
