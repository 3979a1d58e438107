//! HTTP completion client and an on-disk response cache.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenError, GenerationRequest, GenerationResponse, Generator, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    /// Sent as `"model"` when set.
    pub model: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/completions".into(),
            api_key_env: None,
            model: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionBody<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct CompletionReply {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    text: String,
}

/// Blocking client for completion-style endpoints
/// (`{"prompt", "max_tokens", "temperature", "top_p"}` in,
/// `{"choices": [{"text"}]}` out).
pub struct RemoteGenerator {
    config: RemoteConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl RemoteGenerator {
    pub fn new(config: RemoteConfig) -> Result<Self, GenError> {
        if !(config.timeout_secs > 0.0) {
            return Err(GenError::InvalidConfig(
                "timeout_secs must be positive".into(),
            ));
        }
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GenError::InvalidConfig(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            token,
        })
    }

    fn attempt(&self, prompt: &str, req: &GenerationRequest) -> Result<String, GenError> {
        let body = CompletionBody {
            prompt,
            max_tokens: req.max_new_tokens,
            temperature: req.temperature,
            top_p: req.top_p,
            model: self.config.model.as_deref(),
        };
        let mut call = self.agent.post(&self.config.url);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call.send_json(&body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if !(200..300).contains(&status) {
            return Err(GenError::Status { status, body: text });
        }
        let reply: CompletionReply =
            serde_json::from_str(&text).map_err(|e| GenError::Decode(e.to_string()))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| GenError::Decode("response has no choices".into()))
    }
}

fn map_ureq(e: ureq::Error) -> GenError {
    match e {
        ureq::Error::Timeout(t) => GenError::Timeout(t.to_string()),
        ureq::Error::StatusCode(status) => GenError::Status {
            status,
            body: String::new(),
        },
        other => GenError::Transport(other.to_string()),
    }
}

fn retryable(e: &GenError) -> bool {
    matches!(
        e,
        GenError::Transport(_) | GenError::Timeout(_) | GenError::Status { .. }
    )
}

impl Generator for RemoteGenerator {
    fn backend_id(&self) -> String {
        format!("remote:{}", self.config.url)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GenError> {
        request.validate()?;
        let prompt = match &request.prompt {
            Prompt::Text(t) => t.as_str(),
            Prompt::Tokens(_) => {
                return Err(GenError::InvalidRequest(
                    "the remote backend takes text prompts".into(),
                ))
            }
        };
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            match self.attempt(prompt, request) {
                Ok(raw_text) => {
                    return Ok(GenerationResponse {
                        token_count: raw_text.split_whitespace().count(),
                        raw_text,
                        backend_id: self.backend_id(),
                        latency: started.elapsed(),
                    })
                }
                Err(e) if retryable(&e) && attempt < self.config.max_retries => {
                    let wait = self
                        .config
                        .backoff_ms
                        .saturating_mul(1 << attempt.min(16))
                        .min(30_000);
                    log::warn!(
                        "generation attempt {} failed: {e}; retrying in {wait} ms",
                        attempt + 1
                    );
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CachedReply {
    raw_text: String,
    token_count: usize,
}

/// Directory of responses keyed by a hash of (backend, prompt, sampling
/// parameters, seed).
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, GenError> {
        fs::create_dir_all(dir).map_err(|e| GenError::Cache {
            path: dir.display().to_string(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn key(backend: &str, req: &GenerationRequest) -> String {
        let canonical = serde_json::json!({
            "backend": backend,
            "prompt": req.prompt,
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "seed": req.seed,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn get(&self, key: &str) -> Result<Option<CachedReply>, GenError> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| GenError::Decode(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GenError::Cache {
                path: path.display().to_string(),
                source: e,
            }),
        }
    }

    fn put(&self, key: &str, reply: &CachedReply) -> Result<(), GenError> {
        let path = self.path(key);
        let tmp = path.with_extension("tmp");
        let cache_err = |e| GenError::Cache {
            path: path.display().to_string(),
            source: e,
        };
        fs::write(
            &tmp,
            serde_json::to_string(reply).expect("reply serializes"),
        )
        .map_err(cache_err)?;
        fs::rename(&tmp, &path).map_err(cache_err)
    }
}

/// Serves repeated requests from a [`ResponseCache`]. In replay-only mode a
/// cache miss is an error instead of a backend call.
pub struct CachedGenerator<G> {
    inner: G,
    cache: ResponseCache,
    replay_only: bool,
}

impl<G: Generator> CachedGenerator<G> {
    pub fn new(inner: G, cache: ResponseCache, replay_only: bool) -> Self {
        Self {
            inner,
            cache,
            replay_only,
        }
    }
}

impl<G: Generator> Generator for CachedGenerator<G> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GenError> {
        let key = ResponseCache::key(&self.inner.backend_id(), request);
        if let Some(hit) = self.cache.get(&key)? {
            return Ok(GenerationResponse {
                raw_text: hit.raw_text,
                token_count: hit.token_count,
                backend_id: self.inner.backend_id(),
                latency: Duration::ZERO,
            });
        }
        if self.replay_only {
            return Err(GenError::InvalidRequest(format!(
                "no cached response for key {key}"
            )));
        }
        let resp = self.inner.generate(request)?;
        self.cache.put(
            &key,
            &CachedReply {
                raw_text: resp.raw_text.clone(),
                token_count: resp.token_count,
            },
        )?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves one canned (status, body) per connection, recording request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn config(url: String) -> RemoteConfig {
        RemoteConfig {
            url,
            timeout_secs: 5.0,
            max_retries: 2,
            backoff_ms: 1,
            ..Default::default()
        }
    }

    fn text_request() -> GenerationRequest {
        GenerationRequest {
            max_new_tokens: 16,
            top_p: 0.9,
            temperature: 0.7,
            ..GenerationRequest::new(Prompt::Text(
                "Given the user(1)'s clicked list items:5".into(),
            ))
        }
    }

    #[test]
    fn posts_completion_body_and_parses_choice() {
        let (url, server) = serve(vec![(
            200,
            r#"{"choices":[{"text":"30020, 30155"}]}"#.into(),
        )]);
        let g = RemoteGenerator::new(config(url)).unwrap();
        let resp = g.generate(&text_request()).unwrap();
        assert_eq!(resp.raw_text, "30020, 30155");
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(
            sent,
            serde_json::json!({
                "prompt": "Given the user(1)'s clicked list items:5",
                "max_tokens": 16,
                "temperature": 0.7,
                "top_p": 0.9
            })
        );
    }

    #[test]
    fn retries_server_errors() {
        let (url, server) = serve(vec![
            (503, "{}".into()),
            (200, r#"{"choices":[{"text":"7"}]}"#.into()),
        ]);
        let g = RemoteGenerator::new(config(url)).unwrap();
        assert_eq!(g.generate(&text_request()).unwrap().raw_text, "7");
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn persistent_status_error_is_surfaced() {
        let (url, server) = serve(vec![
            (500, "a".into()),
            (500, "b".into()),
            (500, "c".into()),
        ]);
        let g = RemoteGenerator::new(config(url)).unwrap();
        assert!(matches!(
            g.generate(&text_request()),
            Err(GenError::Status { status: 500, .. })
        ));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_host_is_a_transport_error() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let g = RemoteGenerator::new(config(format!("http://127.0.0.1:{port}/v1"))).unwrap();
        assert!(matches!(
            g.generate(&text_request()),
            Err(GenError::Transport(_))
        ));
    }

    #[test]
    fn missing_token_variable_is_a_config_error() {
        let cfg = RemoteConfig {
            api_key_env: Some("IDAUG_TEST_SURELY_UNSET_VAR".into()),
            ..Default::default()
        };
        assert!(matches!(
            RemoteGenerator::new(cfg),
            Err(GenError::InvalidConfig(_))
        ));
    }

    struct Counting(Arc<AtomicUsize>);

    impl Generator for Counting {
        fn backend_id(&self) -> String {
            "counting".into()
        }
        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GenError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok(GenerationResponse {
                raw_text: format!("{n}-{}", req.seed),
                token_count: 1,
                backend_id: "counting".into(),
                latency: Duration::ZERO,
            })
        }
    }

    #[test]
    fn cache_replays_responses() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let cache = ResponseCache::open(dir.path()).unwrap();
        let g = CachedGenerator::new(Counting(Arc::clone(&calls)), cache.clone(), false);
        let first = g.generate(&text_request()).unwrap();
        let again = g.generate(&text_request()).unwrap();
        assert_eq!(first.raw_text, again.raw_text);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let other_seed = GenerationRequest {
            seed: 3,
            ..text_request()
        };
        assert_ne!(g.generate(&other_seed).unwrap().raw_text, first.raw_text);

        let replay = CachedGenerator::new(Counting(Arc::new(AtomicUsize::new(0))), cache, true);
        assert_eq!(
            replay.generate(&text_request()).unwrap().raw_text,
            first.raw_text
        );
        let unseen = GenerationRequest {
            seed: 42,
            ..text_request()
        };
        assert!(replay.generate(&unseen).is_err());
    }
}
