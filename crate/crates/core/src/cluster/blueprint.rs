use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::{ClusterError, ErrorKind};

/// Label carrying the launcher's run token on every test runner pod.
pub const RUN_ID_LABEL: &str = "bunk8s/run-id";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartPolicy {
    Never,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeMount {
    pub volume: String,
    pub mount_path: String,
    pub sub_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestContainer {
    pub name: String,
    pub image: String,
    /// Empty keeps the image entrypoint.
    pub command: Vec<String>,
    pub args: Vec<String>,
    pub result_mount_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub name: String,
    pub image: String,
    pub command: Vec<String>,
    /// One mount per test container, at `/results/<container>`.
    pub mounts: Vec<VolumeMount>,
}

/// Cluster-agnostic description of a test runner pod.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodBlueprint {
    pub pod_name: String,
    pub namespace: String,
    pub test_containers: Vec<TestContainer>,
    pub sidecar: Sidecar,
    pub result_volume_name: String,
    pub restart_policy: RestartPolicy,
    pub labels: BTreeMap<String, String>,
}

impl PodBlueprint {
    /// Names of all containers, test containers first.
    pub fn container_names(&self) -> impl Iterator<Item = &str> {
        self.test_containers
            .iter()
            .map(|c| c.name.as_str())
            .chain(std::iter::once(self.sidecar.name.as_str()))
    }

    /// Mount of the shared volume inside the given test container. The
    /// volume is split per test container via `subPath`.
    fn test_mount(&self, container: &TestContainer) -> VolumeMount {
        VolumeMount {
            volume: self.result_volume_name.clone(),
            mount_path: container.result_mount_path.clone(),
            sub_path: Some(container.name.clone()),
        }
    }

    /// All (container, mount) pairs, including the sidecar's.
    pub fn mounts(&self) -> Vec<(&str, VolumeMount)> {
        let mut out: Vec<_> = self
            .test_containers
            .iter()
            .map(|c| (c.name.as_str(), self.test_mount(c)))
            .collect();
        out.extend(
            self.sidecar
                .mounts
                .iter()
                .map(|m| (self.sidecar.name.as_str(), m.clone())),
        );
        out
    }

    /// Kubernetes `v1/Pod` manifest for this blueprint.
    pub fn to_pod_json(&self) -> Value {
        let mount_json = |m: &VolumeMount| {
            let mut v = json!({ "name": m.volume, "mountPath": m.mount_path });
            if let Some(sub) = &m.sub_path {
                v["subPath"] = json!(sub);
            }
            v
        };
        let mut containers: Vec<Value> = self
            .test_containers
            .iter()
            .map(|c| {
                let mut v = json!({
                    "name": c.name,
                    "image": c.image,
                    "volumeMounts": [mount_json(&self.test_mount(c))],
                });
                if !c.command.is_empty() {
                    v["command"] = json!(c.command);
                }
                if !c.args.is_empty() {
                    v["args"] = json!(c.args);
                }
                v
            })
            .collect();
        containers.push(json!({
            "name": self.sidecar.name,
            "image": self.sidecar.image,
            "command": self.sidecar.command,
            "volumeMounts": self.sidecar.mounts.iter().map(mount_json).collect::<Vec<_>>(),
        }));
        json!({
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {
                "name": self.pod_name,
                "namespace": self.namespace,
                "labels": self.labels,
            },
            "spec": {
                "restartPolicy": "Never",
                "containers": containers,
                "volumes": [{ "name": self.result_volume_name, "emptyDir": {} }],
            }
        })
    }

    /// Reads a blueprint back from a pod manifest produced by
    /// [`to_pod_json`](Self::to_pod_json).
    pub fn from_pod_json(pod: &Value) -> Result<Self, ClusterError> {
        let bad = |what: &str| ClusterError::new(ErrorKind::Protocol, "pod", format!("invalid pod manifest: {what}"));
        let str_at = |v: &Value, key: &str| -> Result<String, ClusterError> {
            v.get(key)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| bad(key))
        };
        let strings = |v: &Value, key: &str| -> Vec<String> {
            v.get(key)
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_owned)).collect())
                .unwrap_or_default()
        };
        let mounts = |v: &Value| -> Result<Vec<VolumeMount>, ClusterError> {
            v.get("volumeMounts")
                .and_then(Value::as_array)
                .map(Vec::as_slice)
                .unwrap_or_default()
                .iter()
                .map(|m| {
                    Ok(VolumeMount {
                        volume: str_at(m, "name")?,
                        mount_path: str_at(m, "mountPath")?,
                        sub_path: m.get("subPath").and_then(Value::as_str).map(str::to_owned),
                    })
                })
                .collect()
        };

        let metadata = pod.get("metadata").ok_or_else(|| bad("metadata"))?;
        let spec = pod.get("spec").ok_or_else(|| bad("spec"))?;
        if spec.get("restartPolicy").and_then(Value::as_str) != Some("Never") {
            return Err(bad("restartPolicy must be Never"));
        }
        let labels = metadata
            .get("labels")
            .and_then(Value::as_object)
            .map(|m| {
                m.iter()
                    .filter_map(|(k, v)| v.as_str().map(|v| (k.clone(), v.to_owned())))
                    .collect()
            })
            .unwrap_or_default();
        let volume = spec
            .get("volumes")
            .and_then(Value::as_array)
            .and_then(|v| v.first())
            .ok_or_else(|| bad("volumes"))?;

        let mut test_containers = Vec::new();
        let mut sidecar = None;
        for c in spec
            .get("containers")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("containers"))?
        {
            let name = str_at(c, "name")?;
            if name == crate::config::SIDECAR_CONTAINER_NAME {
                sidecar = Some(Sidecar {
                    name,
                    image: str_at(c, "image")?,
                    command: strings(c, "command"),
                    mounts: mounts(c)?,
                });
            } else {
                let mount = mounts(c)?.into_iter().next().ok_or_else(|| bad("volumeMounts"))?;
                test_containers.push(TestContainer {
                    name,
                    image: str_at(c, "image")?,
                    command: strings(c, "command"),
                    args: strings(c, "args"),
                    result_mount_path: mount.mount_path,
                });
            }
        }

        Ok(PodBlueprint {
            pod_name: str_at(metadata, "name")?,
            namespace: str_at(metadata, "namespace")?,
            test_containers,
            sidecar: sidecar.ok_or_else(|| bad("missing result sidecar"))?,
            result_volume_name: str_at(volume, "name")?,
            restart_policy: RestartPolicy::Never,
            labels,
        })
    }
}
