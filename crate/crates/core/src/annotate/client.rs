//! Describer endpoints: the request/response contract, HTTP and mock
//! implementations, and retrying clients.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mock_judge_reply;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    VisualExpression,
    VisualObjective,
    AudioTone,
    Consolidator,
    Judge,
}

impl Role {
    pub const ALL: [Role; 5] =
        [Role::VisualExpression, Role::VisualObjective, Role::AudioTone, Role::Consolidator, Role::Judge];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::VisualExpression => "visual_expression",
            Role::VisualObjective => "visual_objective",
            Role::AudioTone => "audio_tone",
            Role::Consolidator => "consolidator",
            Role::Judge => "judge",
        }
    }

    /// Environment variable that overrides the configured URL.
    pub fn env_var(self) -> String {
        format!("EMOFUSE_ENDPOINT_{}", self.as_str().to_uppercase())
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wire request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    pub role: Role,
    pub sample_id: String,
    /// File reference or inline text the describer should analyze.
    pub payload: String,
}

/// Wire response body. `status` is `"ok"` on success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub text: String,
    pub status: String,
}

/// Anything that can answer a describe request. One attempt per call.
pub trait Describer: Send + Sync {
    fn describe(&self, req: &DescribeRequest) -> std::result::Result<String, String>;
}

/// POSTs JSON requests to a URL.
pub struct HttpDescriber {
    url: String,
    agent: ureq::Agent,
}

impl HttpDescriber {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.to_string(), agent }
    }
}

impl Describer for HttpDescriber {
    fn describe(&self, req: &DescribeRequest) -> std::result::Result<String, String> {
        let body = serde_json::to_string(req).expect("request serializes");
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        let parsed: DescribeResponse = serde_json::from_str(&text).map_err(|e| format!("bad response body: {e}"))?;
        if parsed.status != "ok" {
            return Err(format!("status {}", parsed.status));
        }
        Ok(parsed.text)
    }
}

/// Deterministic offline stand-in for every role.
///
/// Describer roles answer `"<role> of <payload>"`; the consolidator joins the
/// payload lines with `"; "`; the judge scores word overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockDescriber;

impl Describer for MockDescriber {
    fn describe(&self, req: &DescribeRequest) -> std::result::Result<String, String> {
        Ok(match req.role {
            Role::Consolidator => mock_consolidation(&req.payload),
            Role::Judge => mock_judge_reply(&req.payload),
            role => format!("{role} of {}", req.payload),
        })
    }
}

pub fn mock_consolidation(payload: &str) -> String {
    payload.lines().collect::<Vec<_>>().join("; ")
}

/// Always fails, as an unreachable endpoint would.
#[derive(Debug, Clone, Copy, Default)]
pub struct DownDescriber;

impl Describer for DownDescriber {
    fn describe(&self, _req: &DescribeRequest) -> std::result::Result<String, String> {
        Err("connection refused".into())
    }
}

/// Replays queued outcomes, then repeats the last one.
pub struct ScriptedDescriber {
    script: Mutex<VecDeque<std::result::Result<String, String>>>,
    calls: Mutex<usize>,
}

impl ScriptedDescriber {
    pub fn new(script: Vec<std::result::Result<String, String>>) -> Self {
        assert!(!script.is_empty(), "script needs at least one outcome");
        Self { script: Mutex::new(script.into()), calls: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("lock")
    }
}

impl Describer for ScriptedDescriber {
    fn describe(&self, _req: &DescribeRequest) -> std::result::Result<String, String> {
        *self.calls.lock().expect("lock") += 1;
        let mut q = self.script.lock().expect("lock");
        if q.len() > 1 { q.pop_front().expect("non-empty") } else { q[0].clone() }
    }
}

/// Configuration of one endpoint. `url` is an HTTP URL, `"mock"`, or
/// `"mock:down"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self { url: "mock".into(), timeout_ms: 30_000, max_retries: 3, backoff_ms: 200 }
    }
}

/// Exactly one endpoint per role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointTable {
    pub visual_expression: EndpointConfig,
    pub visual_objective: EndpointConfig,
    pub audio_tone: EndpointConfig,
    pub consolidator: EndpointConfig,
    pub judge: EndpointConfig,
}

impl EndpointTable {
    pub fn get(&self, role: Role) -> &EndpointConfig {
        match role {
            Role::VisualExpression => &self.visual_expression,
            Role::VisualObjective => &self.visual_objective,
            Role::AudioTone => &self.audio_tone,
            Role::Consolidator => &self.consolidator,
            Role::Judge => &self.judge,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut EndpointConfig {
        match role {
            Role::VisualExpression => &mut self.visual_expression,
            Role::VisualObjective => &mut self.visual_objective,
            Role::AudioTone => &mut self.audio_tone,
            Role::Consolidator => &mut self.consolidator,
            Role::Judge => &mut self.judge,
        }
    }

    /// Replaces URLs for which `lookup(role.env_var())` yields a value.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for role in Role::ALL {
            if let Some(url) = lookup(&role.env_var()) {
                self.get_mut(role).url = url;
            }
        }
    }

    pub fn apply_env_overrides(&mut self) {
        self.apply_overrides(|k| std::env::var(k).ok());
    }

    pub fn validate(&self) -> Result<()> {
        for role in Role::ALL {
            let e = self.get(role);
            let ok = matches!(e.url.as_str(), "mock" | "mock:down")
                || e.url.starts_with("http://")
                || e.url.starts_with("https://");
            if !ok {
                return Err(Error::Config(format!("endpoint {role}: unsupported url `{}`", e.url)));
            }
            if e.timeout_ms == 0 {
                return Err(Error::Config(format!("endpoint {role}: timeout_ms must be positive")));
            }
        }
        Ok(())
    }
}

/// A describer plus its retry policy.
#[derive(Clone)]
pub struct Client {
    pub role: Role,
    describer: Arc<dyn Describer>,
    max_retries: u32,
    backoff: Duration,
}

/// A successful call and how many retries it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub text: String,
    pub retries: u32,
}

impl Client {
    pub fn new(role: Role, describer: Arc<dyn Describer>, max_retries: u32, backoff: Duration) -> Self {
        Self { role, describer, max_retries, backoff }
    }

    pub fn from_config(role: Role, cfg: &EndpointConfig) -> Self {
        let describer: Arc<dyn Describer> = match cfg.url.as_str() {
            "mock" => Arc::new(MockDescriber),
            "mock:down" => Arc::new(DownDescriber),
            url => Arc::new(HttpDescriber::new(url, Duration::from_millis(cfg.timeout_ms))),
        };
        Self::new(role, describer, cfg.max_retries, Duration::from_millis(cfg.backoff_ms))
    }

    /// Tries once plus up to `max_retries` more times, doubling the pause
    /// after each failure.
    pub fn call(&self, sample_id: &str, payload: &str) -> Result<Reply> {
        let req = DescribeRequest { role: self.role, sample_id: sample_id.into(), payload: payload.into() };
        let mut pause = self.backoff;
        let mut attempt = 0;
        loop {
            match self.describer.describe(&req) {
                Ok(text) => {
                    if attempt > 0 {
                        log::info!("{} answered {sample_id} after {attempt} retries", self.role);
                    }
                    return Ok(Reply { text, retries: attempt });
                }
                Err(reason) if attempt >= self.max_retries => {
                    return Err(Error::EndpointUnavailable { role: self.role.to_string(), reason });
                }
                Err(reason) => {
                    log::warn!("{} failed on {sample_id} (attempt {}): {reason}", self.role, attempt + 1);
                    std::thread::sleep(pause);
                    pause *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// One client per role.
#[derive(Clone)]
pub struct Endpoints {
    clients: Vec<Client>,
}

impl Endpoints {
    pub fn from_table(table: &EndpointTable) -> Result<Self> {
        table.validate()?;
        Ok(Self { clients: Role::ALL.iter().map(|&r| Client::from_config(r, table.get(r))).collect() })
    }

    /// All roles served by [`MockDescriber`] without retries.
    pub fn mock() -> Self {
        Self {
            clients: Role::ALL.iter().map(|&r| Client::new(r, Arc::new(MockDescriber), 0, Duration::ZERO)).collect(),
        }
    }

    pub fn with_client(mut self, client: Client) -> Self {
        let i = Role::ALL.iter().position(|&r| r == client.role).expect("known role");
        self.clients[i] = client;
        self
    }

    pub fn client(&self, role: Role) -> &Client {
        &self.clients[Role::ALL.iter().position(|&r| r == role).expect("known role")]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_then_success() {
        let scripted = Arc::new(ScriptedDescriber::new(vec![Err("timed out".into()), Ok("fine".into())]));
        let c = Client::new(Role::Consolidator, scripted.clone(), 2, Duration::from_millis(1));
        assert_eq!(c.call("s", "p").unwrap(), Reply { text: "fine".into(), retries: 1 });
        assert_eq!(scripted.calls(), 2);
    }

    #[test]
    fn exhausted_retries_name_the_role() {
        let c = Client::new(Role::AudioTone, Arc::new(DownDescriber), 2, Duration::ZERO);
        let err = c.call("s", "p").unwrap_err();
        assert!(err.to_string().starts_with("audio_tone unavailable"));
    }

    #[test]
    fn env_overrides_replace_urls() {
        let mut t = EndpointTable::default();
        t.apply_overrides(|k| (k == "EMOFUSE_ENDPOINT_JUDGE").then(|| "http://127.0.0.1:9/judge".to_string()));
        assert_eq!(t.judge.url, "http://127.0.0.1:9/judge");
        assert_eq!(t.consolidator.url, "mock");
        t.audio_tone.url = "ftp://x".into();
        assert!(matches!(t.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn wire_format_is_snake_case_json() {
        let req = DescribeRequest { role: Role::AudioTone, sample_id: "a1".into(), payload: "x.mmef".into() };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"role":"audio_tone","sample_id":"a1","payload":"x.mmef"}"#
        );
    }

    #[test]
    fn http_unreachable_is_reported() {
        let c = Client::new(
            Role::Judge,
            Arc::new(HttpDescriber::new("http://127.0.0.1:9/", Duration::from_millis(200))),
            0,
            Duration::ZERO,
        );
        assert!(matches!(c.call("s", "p"), Err(Error::EndpointUnavailable { .. })));
    }
}
