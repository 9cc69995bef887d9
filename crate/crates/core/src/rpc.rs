//! Messages exchanged between launcher and coordinator.
//!
//! There is a single call, `DeployTestRunner`: the launcher posts a
//! [`DeployRequest`] and the coordinator answers with a [`DeployReply`] once
//! every test runner pod has finished or timed out. Both travel as UTF-8 JSON
//! with fixed field names; the reply bytes are also what the launcher stores
//! as `reply.json`.

use serde::{Deserialize, Serialize};

use crate::config::TestRunConfig;

/// Path of the deploy call on the coordinator's HTTP server.
pub const DEPLOY_PATH: &str = "/v1/deploy-test-runner";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct DeployRequest {
    pub run_id: String,
    pub run: TestRunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Passed,
    Failed,
    NotRun,
}

impl Verdict {
    pub fn from_exit_code(exit_code: Option<i32>) -> Self {
        match exit_code {
            Some(0) => Verdict::Passed,
            Some(_) => Verdict::Failed,
            None => Verdict::NotRun,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PodStatus {
    Succeeded,
    Failed,
    TimedOut,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplyCode {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "ERR_NAMESPACE_MISSING")]
    NamespaceMissing,
    #[serde(rename = "ERR_POD_CONFLICT")]
    PodConflict,
    #[serde(rename = "ERR_CREATE_FAILED")]
    CreateFailed,
    #[serde(rename = "ERR_INTERNAL")]
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ContainerResult {
    pub container_name: String,
    pub exit_code: Option<i32>,
    pub result_path: String,
    pub verdict: Verdict,
}

impl ContainerResult {
    pub fn new(container_name: impl Into<String>, exit_code: Option<i32>, result_path: impl Into<String>) -> Self {
        ContainerResult {
            container_name: container_name.into(),
            exit_code,
            result_path: result_path.into(),
            verdict: Verdict::from_exit_code(exit_code),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct PodResult {
    pub pod_name: String,
    pub namespace: String,
    pub sidecar_name: String,
    pub status: PodStatus,
    pub containers: Vec<ContainerResult>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct DeployReply {
    pub run_id: String,
    pub code: ReplyCode,
    pub detail: String,
    pub pods: Vec<PodResult>,
}

impl DeployReply {
    pub fn error(run_id: impl Into<String>, code: ReplyCode, detail: impl Into<String>) -> Self {
        debug_assert_ne!(code, ReplyCode::Ok);
        DeployReply {
            run_id: run_id.into(),
            code,
            detail: detail.into(),
            pods: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct DecodeError {
    /// Byte offset of the failure, when it can be tied to a position.
    pub offset: Option<usize>,
    pub reason: String,
}

impl std::fmt::Display for DecodeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.offset {
            Some(offset) => write!(f, "decode error at byte {offset}: {}", self.reason),
            None => write!(f, "decode error: {}", self.reason),
        }
    }
}

impl DecodeError {
    fn semantic(reason: impl Into<String>) -> Self {
        DecodeError {
            offset: None,
            reason: reason.into(),
        }
    }
}

pub fn encode_request(req: &DeployRequest) -> Vec<u8> {
    serde_json::to_vec(req).expect("requests always serialize")
}

pub fn decode_request(bytes: &[u8]) -> Result<DeployRequest, DecodeError> {
    let req: DeployRequest = decode_json(bytes)?;
    if req.run_id.is_empty() {
        return Err(DecodeError::semantic("runId must not be empty"));
    }
    Ok(req)
}

pub fn encode_reply(rep: &DeployReply) -> Vec<u8> {
    serde_json::to_vec_pretty(rep).expect("replies always serialize")
}

pub fn decode_reply(bytes: &[u8]) -> Result<DeployReply, DecodeError> {
    let rep: DeployReply = decode_json(bytes)?;
    check_reply(&rep).map_err(DecodeError::semantic)?;
    Ok(rep)
}

/// Checks the consistency rules between codes, statuses, verdicts and exit
/// codes that every well-formed reply satisfies.
pub fn check_reply(rep: &DeployReply) -> Result<(), String> {
    if rep.run_id.is_empty() {
        return Err("runId must not be empty".into());
    }
    match rep.code {
        ReplyCode::Ok if rep.pods.is_empty() => {
            return Err("code OK requires at least one pod result".into())
        }
        ReplyCode::Ok => {}
        _ if !rep.pods.is_empty() => {
            return Err(format!("code {:?} must not carry pod results", rep.code))
        }
        _ if rep.detail.is_empty() => {
            return Err(format!("code {:?} requires a detail", rep.code))
        }
        _ => {}
    }
    for pod in &rep.pods {
        let id = format!("{}/{}", pod.namespace, pod.pod_name);
        for c in &pod.containers {
            if c.verdict != Verdict::from_exit_code(c.exit_code) {
                return Err(format!(
                    "{id}: container {} has verdict {:?} but exit code {:?}",
                    c.container_name, c.verdict, c.exit_code
                ));
            }
        }
        let all_passed = pod.containers.iter().all(|c| c.verdict == Verdict::Passed);
        if (pod.status == PodStatus::Succeeded) != all_passed {
            return Err(format!(
                "{id}: status {:?} disagrees with container verdicts",
                pod.status
            ));
        }
        if pod.status == PodStatus::TimedOut
            && !pod.containers.iter().any(|c| c.verdict == Verdict::NotRun)
        {
            return Err(format!("{id}: TIMED_OUT without any NOT_RUN container"));
        }
        if pod.status != PodStatus::Error && pod.sidecar_name.is_empty() {
            return Err(format!("{id}: sidecarName must be set"));
        }
    }
    Ok(())
}

fn decode_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DecodeError {
        offset: Some(e.valid_up_to()),
        reason: format!("invalid UTF-8: {e}"),
    })?;
    serde_json::from_str(text).map_err(|e| DecodeError {
        offset: Some(byte_offset(text, e.line(), e.column())),
        reason: e.to_string(),
    })
}

/// Converts serde_json's 1-based line and column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
