//! Completion backends.
//!
//! A backend turns a prompt into text. Scripted backends are pure
//! functions of `(prompt, temperature, seed)`; the wire backend talks to a
//! chat-completions endpoint whose URL and key come from the environment.

use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("backend {backend}: transport error: {message}")]
    Transport { backend: String, message: String },
    #[error("backend {backend}: malformed response: {message}")]
    Protocol { backend: String, message: String },
    #[error("backend {backend}: no scripted output matches the prompt")]
    NoMatch { backend: String },
    #[error("backend {backend}: {message}")]
    Config { backend: String, message: String },
}

pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError> {
        (**self).generate(prompt, temperature, seed)
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError> {
        (**self).generate(prompt, temperature, seed)
    }
}

/// Conditions under which a scripted rule fires. All present conditions
/// must hold.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: RuleMatch,
    pub output: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub id: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
}

/// Returns the output of the first rule whose conditions match the prompt.
#[derive(Debug)]
pub struct ScriptedBackend {
    id: String,
    rules: Vec<(ScriptRule, Option<Regex>)>,
    default: Option<String>,
}

impl ScriptedBackend {
    pub fn from_script(script: Script) -> Result<Self, BackendError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for r in script.rules {
            let re = match &r.when.prompt_regex {
                Some(p) => Some(Regex::new(p).map_err(|e| BackendError::Config {
                    backend: script.id.clone(),
                    message: format!("bad regex {p:?}: {e}"),
                })?),
                None => None,
            };
            rules.push((r, re));
        }
        Ok(ScriptedBackend { id: script.id, rules, default: script.default })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let cfg = |message: String| BackendError::Config { backend: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| cfg(e.to_string()))?;
        let script: Script = serde_yaml::from_str(&text).map_err(|e| cfg(e.to_string()))?;
        Self::from_script(script)
    }

    /// Always answers `output`.
    pub fn fixed(id: impl Into<String>, output: impl Into<String>) -> Self {
        ScriptedBackend { id: id.into(), rules: Vec::new(), default: Some(output.into()) }
    }

    /// Pairs of (substring, output) tried in order, then `default`.
    pub fn by_substring(id: impl Into<String>, pairs: &[(&str, &str)], default: Option<&str>) -> Self {
        let rules = pairs
            .iter()
            .map(|(needle, out)| {
                (
                    ScriptRule {
                        when: RuleMatch { prompt_contains: Some((*needle).into()), ..Default::default() },
                        output: (*out).into(),
                    },
                    None,
                )
            })
            .collect();
        ScriptedBackend { id: id.into(), rules, default: default.map(Into::into) }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &str, temperature: f64, _seed: u64) -> Result<String, BackendError> {
        for (rule, re) in &self.rules {
            let w = &rule.when;
            let ok = w.prompt_contains.as_deref().is_none_or(|s| prompt.contains(s))
                && re.as_ref().is_none_or(|r| r.is_match(prompt))
                && w.temperature.is_none_or(|t| (t - temperature).abs() < 1e-9);
            if ok {
                return Ok(rule.output.clone());
            }
        }
        self.default.clone().ok_or_else(|| BackendError::NoMatch { backend: self.id.clone() })
    }
}

/// Connection settings for a chat-completions service. The endpoint and
/// key are read from the named environment variables at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireConfig {
    pub id: String,
    pub model: String,
    pub endpoint_env: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct WireBackend {
    id: String,
    model: String,
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    seed: u64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: Option<String>,
}

impl WireBackend {
    pub fn from_env(cfg: &WireConfig) -> Result<Self, BackendError> {
        let endpoint = std::env::var(&cfg.endpoint_env).map_err(|_| BackendError::Config {
            backend: cfg.id.clone(),
            message: format!("environment variable {} is not set", cfg.endpoint_env),
        })?;
        let api_key = cfg.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
        Ok(Self::new(&cfg.id, &cfg.model, &endpoint, api_key, Duration::from_secs(cfg.timeout_secs)))
    }

    pub fn new(id: &str, model: &str, endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        WireBackend {
            id: id.to_string(),
            model: model.to_string(),
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
            agent,
        }
    }
}

impl CompletionBackend for WireBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            temperature,
            seed,
        };
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let transport = |e: ureq::Error| BackendError::Transport { backend: self.id.clone(), message: e.to_string() };
        let mut resp = req.send_json(&body).map_err(transport)?;
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| BackendError::Protocol {
            backend: self.id.clone(),
            message: e.to_string(),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol { backend: self.id.clone(), message: "no choices".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn scripted_first_matching_rule_wins() {
        let b = ScriptedBackend::by_substring("s", &[("CORRECCIÓN", "arreglado"), ("Tarea", "inicial")], None);
        assert_eq!(b.generate("Tarea T1", 0.1, 0).unwrap(), "inicial");
        assert_eq!(b.generate("Tarea T1 CORRECCIÓN", 0.1, 0).unwrap(), "arreglado");
        assert!(matches!(b.generate("otra cosa", 0.1, 0), Err(BackendError::NoMatch { .. })));
    }

    #[test]
    fn scripted_temperature_and_regex() {
        let script: Script = serde_yaml::from_str(
            r#"
id: s
rules:
  - when: { prompt_regex: "T0[12]", temperature: 0.7 }
    output: caliente
default: frío
"#,
        )
        .unwrap();
        let b = ScriptedBackend::from_script(script).unwrap();
        assert_eq!(b.generate("T01", 0.7, 1).unwrap(), "caliente");
        assert_eq!(b.generate("T01", 0.1, 1).unwrap(), "frío");
        assert_eq!(b.generate("T03", 0.7, 1).unwrap(), "frío");
    }

    #[test]
    fn wire_backend_speaks_chat_completions() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.to_ascii_lowercase();
                if let Some(v) = l.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if l.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let reply = serde_json::json!({"choices":[{"message":{"role":"assistant","content": format!("eco: {}", req["messages"][0]["content"].as_str().unwrap())}}]}).to_string();
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}", reply.len(), reply).unwrap();
            (req, auth)
        });
        let b = WireBackend::new("w", "m1", &format!("http://{addr}/v1"), Some("k".into()), Duration::from_secs(5));
        assert_eq!(b.generate("hola", 0.1, 9).unwrap(), "eco: hola");
        let (req, auth) = server.join().unwrap();
        assert_eq!(req["model"], "m1");
        assert_eq!(req["seed"], 9);
        assert!((req["temperature"].as_f64().unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer k");
    }

    #[test]
    fn wire_backend_requires_env() {
        let cfg = WireConfig {
            id: "w".into(),
            model: "m".into(),
            endpoint_env: "ARCHIVIST_TEST_SURELY_UNSET_ENDPOINT".into(),
            api_key_env: None,
            timeout_secs: 1,
        };
        assert!(matches!(WireBackend::from_env(&cfg), Err(BackendError::Config { .. })));
    }
}
