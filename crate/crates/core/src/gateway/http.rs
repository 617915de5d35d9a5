use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendKind, CandidateSet, GatewayConfig, LlmBackend, PromptRole, RenderedPrompt};
use crate::error::{Error, Result};
use crate::ingest::CategoryVocab;

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completion client: system + user messages in, first choice's text
/// out.
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    temperature: f64,
    vocab: CategoryVocab,
    permits: Semaphore,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<set>"))
            .finish()
    }
}

fn system_message(role: PromptRole) -> &'static str {
    match role {
        PromptRole::Profile => "You write concise audience profiles.",
        PromptRole::NoveltyFt | PromptRole::NoveltyInfer => {
            "You recommend content categories. Reply with category names only, one per line."
        }
        PromptRole::RelevanceFt | PromptRole::RelevanceInfer => {
            "You score how relevant a category is to a user. Reply with a number only."
        }
    }
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable, if set.
    pub fn new(config: &GatewayConfig, vocab: CategoryVocab) -> Result<Self> {
        config.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::backend(format!("cannot build HTTP client: {e}"), false))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key,
            retries: config.retries,
            backoff: Duration::from_millis(config.backoff_ms),
            temperature: config.temperature,
            vocab,
            permits: Semaphore::new(config.max_concurrency),
        })
    }

    fn attempt(&self, body: &Value) -> Result<String> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::backend(format!("request to {} failed: {e}", self.endpoint), true))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Error::backend(format!("{} answered {status}", self.endpoint), true));
        }
        if !status.is_success() {
            return Err(Error::backend(format!("{} answered {status}", self.endpoint), false));
        }
        let value: Value = resp
            .json()
            .map_err(|e| Error::backend(format!("unreadable response body: {e}"), true))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::backend("response has no choices[0].message.content", false))
    }

    /// Sends one chat request, retrying transport failures, 429 and 5xx
    /// answers with exponential backoff.
    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_message(prompt.role)},
                {"role": "user", "content": prompt.text},
            ],
            "temperature": self.temperature,
        });
        let _permit = self.permits.acquire();
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    let wait = self.backoff * 2u32.saturating_pow(attempt);
                    log::warn!("{e}; retrying in {wait:?}");
                    thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn strip_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim();
        }
    }
    t
}

/// One category per line, matched case-insensitively; list markers are
/// ignored and unknown lines dropped.
pub fn parse_candidates(text: &str, vocab: &CategoryVocab, exclude: &[String], m_cand: usize) -> CandidateSet {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let name = strip_marker(line);
        if name.is_empty() {
            continue;
        }
        match vocab.canonical(name) {
            Some(c) => {
                if !exclude.iter().any(|e| e == c) && !out.iter().any(|o| o == c) {
                    out.push(c.to_string());
                }
            }
            None => log::warn!("dropping unknown category line {name:?}"),
        }
    }
    let truncated = out.len() < m_cand;
    out.truncate(m_cand);
    CandidateSet {
        categories: out,
        truncated,
    }
}

/// The first decimal number in the text.
pub fn parse_score(text: &str) -> Result<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let starts = c.is_ascii_digit()
            || ((c == b'-' || c == b'+' || c == b'.') && bytes.get(i + 1).is_some_and(|n| n.is_ascii_digit() || *n == b'.'));
        if starts {
            let mut j = i + 1;
            while j < bytes.len() {
                let b = bytes[j];
                let exp_sign = (b == b'-' || b == b'+') && matches!(bytes[j - 1], b'e' | b'E');
                if !(b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign) {
                    break;
                }
                j += 1;
            }
            // shrink until the prefix parses, e.g. "0.8." or "3e"
            for end in (i + 1..=j).rev() {
                if let Ok(v) = text[i..end].parse::<f64>() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite("parsed score".into()));
                    }
                    return Ok(v);
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    Err(Error::backend(format!("no score in response {text:?}"), false))
}

impl LlmBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn generate_profile(&self, prompt: &RenderedPrompt) -> Result<String> {
        self.complete(prompt)
    }

    fn generate_candidates(&self, prompt: &RenderedPrompt, m_cand: usize) -> Result<CandidateSet> {
        let text = self.complete(prompt)?;
        Ok(parse_candidates(&text, &self.vocab, &prompt.context.short_categories, m_cand))
    }

    fn score_candidate(&self, prompt: &RenderedPrompt) -> Result<f64> {
        parse_score(&self.complete(prompt)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{render_prompt, Templates};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves the canned (status, body) replies in order, then stops.
    fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        let handle = thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(format!("{head}{}", String::from_utf8_lossy(&buf)));
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen, handle)
    }

    fn chat(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    fn config(url: String) -> GatewayConfig {
        GatewayConfig {
            backend: BackendKind::Http,
            endpoint: url,
            retries: 2,
            backoff_ms: 1,
            timeout_secs: 5.0,
            api_key_env: "COEA_TEST_KEY_UNSET".into(),
            ..GatewayConfig::default()
        }
    }

    fn vocab() -> CategoryVocab {
        CategoryVocab::new(["Action", "Comedy", "Drama", "Sci-Fi"].map(String::from))
    }

    #[test]
    fn retries_server_errors_then_parses_candidates() {
        let (url, seen, h) = mock(vec![
            (503, "{}".into()),
            (200, chat("1. comedy\n- Sci-fi\nPodcasts\n* Action\nDrama")),
        ]);
        let b = HttpBackend::new(&config(url), vocab()).unwrap();
        let t = Templates::default();
        let p = render_prompt(&t, PromptRole::NoveltyInfer, None, "prof", &["Action".to_string()], None).unwrap();
        let set = b.generate_candidates(&p, 2).unwrap();
        h.join().unwrap();
        assert_eq!(set.categories, vec!["Comedy".to_string(), "Sci-Fi".to_string()]);
        let requests = seen.lock().unwrap();
        assert_eq!(requests.len(), 2);
        assert!(requests[1].contains("\"model\""));
        assert!(requests[1].contains("\"temperature\""));
        assert!(!requests[1].to_ascii_lowercase().contains("authorization"));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen, h) = mock(vec![(400, "{}".into())]);
        let b = HttpBackend::new(&config(url), vocab()).unwrap();
        let p = render_prompt(&Templates::default(), PromptRole::RelevanceInfer, None, "p", &[], Some("Drama")).unwrap();
        let err = b.score_candidate(&p).unwrap_err();
        h.join().unwrap();
        assert!(!err.is_retryable());
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn exhausted_retries_are_retryable_errors() {
        let (url, _, h) = mock(vec![(429, "{}".into()), (500, "{}".into()), (502, "{}".into())]);
        let b = HttpBackend::new(&config(url), vocab()).unwrap();
        let p = render_prompt(&Templates::default(), PromptRole::RelevanceInfer, None, "p", &[], Some("Drama")).unwrap();
        let err = b.score_candidate(&p).unwrap_err();
        h.join().unwrap();
        assert!(err.is_retryable());
    }

    #[test]
    fn scores_are_read_from_text() {
        let (url, _, h) = mock(vec![(200, chat("Score: 0.83 (high)"))]);
        let b = HttpBackend::new(&config(url), vocab()).unwrap();
        let p = render_prompt(&Templates::default(), PromptRole::RelevanceInfer, None, "p", &[], Some("Drama")).unwrap();
        assert_eq!(b.score_candidate(&p).unwrap(), 0.83);
        h.join().unwrap();
    }

    #[test]
    fn refused_connection_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/x", listener.local_addr().unwrap());
        drop(listener);
        let mut cfg = config(url);
        cfg.retries = 0;
        let b = HttpBackend::new(&cfg, vocab()).unwrap();
        let p = render_prompt(&Templates::default(), PromptRole::RelevanceInfer, None, "p", &[], Some("Drama")).unwrap();
        assert!(b.score_candidate(&p).unwrap_err().is_retryable());
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("-1.5").unwrap(), -1.5);
        assert_eq!(parse_score("about 3e-1.").unwrap(), 0.3);
        assert_eq!(parse_score("7/10").unwrap(), 7.0);
        assert!(parse_score("no idea").is_err());
    }

    #[test]
    fn candidate_parsing_excludes_and_truncates() {
        let set = parse_candidates("drama\nDRAMA\naction\n2) Comedy", &vocab(), &["Action".to_string()], 5);
        assert_eq!(set.categories, vec!["Drama".to_string(), "Comedy".to_string()]);
        assert!(set.truncated);
    }
}
