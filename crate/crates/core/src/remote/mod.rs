//! JSON-over-HTTP completion client with top-k log-probabilities.
//!
//! The first generated position of a judge request stands in for the judge's next-token
//! distribution, truncated to the `top_k` alternatives the endpoint returns. Requests can be
//! recorded to and replayed from a JSON-lines cassette keyed by the SHA-256 of the request
//! body, which keeps reward computation deterministic once responses are on disk.

pub mod mock;
pub mod prompts;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FilterDecision, ReasoningClassifier};
use crate::error::{Error, Result};
use crate::reward::{RewardBreakdown, RewardConfig};

/// Environment variable holding the bearer token, if the endpoint needs one.
pub const API_KEY_VAR: &str = "BOW_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_concurrency: usize,
    /// Total attempts per request, including the first.
    pub retry_limit: usize,
    pub top_k: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: String::new(),
            model: String::new(),
            timeout_secs: 30.0,
            max_concurrency: 4,
            retry_limit: 3,
            top_k: 100,
            backoff_ms: 200,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 {
            return Err(Error::InvalidArgument("max_concurrency must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if self.retry_limit == 0 {
            return Err(Error::InvalidArgument("retry_limit must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::InvalidArgument(format!("timeout {} must be positive", self.timeout_secs)));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub logprobs: usize,
}

impl CompletionRequest {
    /// Canonical body; field order is fixed by the struct.
    pub fn body(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub token: String,
    pub top: Vec<Alternative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobResponse {
    pub text: String,
    pub positions: Vec<Position>,
}

impl LogprobResponse {
    pub fn parse(text: &str) -> Result<Self> {
        let r: LogprobResponse = serde_json::from_str(text).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        for (i, p) in self.positions.iter().enumerate() {
            if p.top.is_empty() {
                return Err(Error::MalformedResponse(format!("position {i} has no alternatives")));
            }
            if p.top.iter().any(|a| a.logprob.is_nan() || a.logprob > 1e-9) {
                return Err(Error::MalformedResponse(format!("position {i} has an invalid log-probability")));
            }
            if p.top.windows(2).any(|w| w[0].logprob < w[1].logprob) {
                return Err(Error::MalformedResponse(format!("position {i} alternatives are not sorted")));
            }
        }
        Ok(())
    }

    pub fn first_position(&self) -> Result<&Position> {
        self.positions
            .first()
            .ok_or_else(|| Error::MalformedResponse("response has no positions".into()))
    }
}

/// Sends one request body and returns the raw response body.
pub trait Transport: Sync {
    fn send(&self, url: &str, body: &str) -> Result<String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    timeout: Duration,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EndpointConfig) -> Self {
        let timeout = Duration::from_secs_f64(cfg.timeout_secs);
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            timeout,
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, url: &str, body: &str) -> Result<String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => Error::TimeoutExceeded(self.timeout),
            other => Error::RemoteUnavailable {
                attempts: 1,
                detail: other.to_string(),
            },
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => Error::TimeoutExceeded(self.timeout),
            other => Error::MalformedResponse(other.to_string()),
        })?;
        if status != 200 {
            return Err(Error::RemoteUnavailable {
                attempts: 1,
                detail: format!("status {status}: {}", text.chars().take(200).collect::<String>()),
            });
        }
        Ok(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CassetteMode {
    Off,
    /// Serve recorded responses, call the endpoint on a miss and append the result.
    Record,
    /// Serve recorded responses only; a miss is an error.
    Replay,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteEntry {
    hash: String,
    response: LogprobResponse,
}

pub struct Cassette {
    path: PathBuf,
    mode: CassetteMode,
    entries: Mutex<HashMap<String, LogprobResponse>>,
}

impl Cassette {
    pub fn open(path: impl AsRef<Path>, mode: CassetteMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let recorded: Vec<CassetteEntry> = crate::data::read_jsonl(&path)?;
            for e in recorded {
                entries.insert(e.hash, e.response);
            }
        } else if mode == CassetteMode::Replay {
            return Err(Error::UnreadablePath {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "cassette not found"),
            });
        }
        Ok(Cassette {
            path,
            mode,
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, hash: &str) -> Option<LogprobResponse> {
        self.entries.lock().expect("cassette lock").get(hash).cloned()
    }

    fn put(&self, hash: String, response: &LogprobResponse) -> Result<()> {
        let mut entries = self.entries.lock().expect("cassette lock");
        if entries.contains_key(&hash) {
            return Ok(());
        }
        let line = serde_json::to_string(&CassetteEntry {
            hash: hash.clone(),
            response: response.clone(),
        })
        .expect("entry serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        entries.insert(hash, response.clone());
        Ok(())
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Client {
    cfg: EndpointConfig,
    transport: Box<dyn Transport + Send>,
    cassette: Option<Cassette>,
    gate: Semaphore,
    attempts: AtomicUsize,
}

impl Client {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let transport = Box::new(HttpTransport::new(&cfg));
        Self::with_transport(cfg, transport)
    }

    pub fn with_transport(cfg: EndpointConfig, transport: Box<dyn Transport + Send>) -> Result<Self> {
        cfg.validate()?;
        Ok(Client {
            gate: Semaphore::new(cfg.max_concurrency),
            cfg,
            transport,
            cassette: None,
            attempts: AtomicUsize::new(0),
        })
    }

    pub fn with_cassette(mut self, cassette: Cassette) -> Self {
        self.cassette = Some(cassette);
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Network attempts made so far, across all requests.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn request(&self, prompt: &str, max_tokens: usize, temperature: f64) -> CompletionRequest {
        CompletionRequest {
            model: self.cfg.model.clone(),
            prompt: prompt.to_string(),
            max_tokens,
            temperature,
            logprobs: self.cfg.top_k,
        }
    }

    pub fn complete_with_logprobs(&self, prompt: &str, max_tokens: usize, temperature: f64) -> Result<LogprobResponse> {
        self.send(&self.request(prompt, max_tokens, temperature))
    }

    /// Completes every prompt with at most `max_concurrency` requests in flight; results
    /// are returned in prompt order.
    pub fn complete_many(&self, prompts: &[String], max_tokens: usize, temperature: f64) -> Vec<Result<LogprobResponse>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<LogprobResponse>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.cfg.max_concurrency.min(prompts.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.complete_with_logprobs(&prompts[i], max_tokens, temperature);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }

    pub fn send(&self, req: &CompletionRequest) -> Result<LogprobResponse> {
        let hash = req.hash();
        if let Some(c) = &self.cassette {
            if let Some(r) = c.get(&hash) {
                return Ok(r);
            }
            if c.mode == CassetteMode::Replay {
                return Err(Error::CassetteMiss(hash));
            }
        }
        let response = self.send_live(req)?;
        if let Some(c) = &self.cassette {
            if c.mode == CassetteMode::Record {
                c.put(hash, &response)?;
            }
        }
        Ok(response)
    }

    fn send_live(&self, req: &CompletionRequest) -> Result<LogprobResponse> {
        let body = req.body();
        let url = self.cfg.completions_url();
        let _permit = self.gate.acquire();
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = None;
        for attempt in 1..=self.cfg.retry_limit {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.transport.send(&url, &body) {
                Ok(text) => return LogprobResponse::parse(&text),
                Err(e) => {
                    log::debug!("attempt {attempt} failed: {e}");
                    last = Some(e);
                }
            }
            if attempt < self.cfg.retry_limit {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(match last {
            Some(Error::TimeoutExceeded(d)) => Error::TimeoutExceeded(d),
            Some(e) => Error::RemoteUnavailable {
                attempts: self.cfg.retry_limit,
                detail: e.to_string(),
            },
            None => unreachable!("retry_limit is at least 1"),
        })
    }
}

/// Strips the word-boundary markers tokenizers prepend to subwords.
pub fn clean_token(token: &str) -> &str {
    token.trim_start_matches([' ', '\u{120}', '\u{2581}'])
}

/// A judge distribution known only on the endpoint's top-k alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDistribution {
    /// Cleaned token strings, in descending probability order.
    pub tokens: Vec<String>,
    /// `exp(logprob)` as returned.
    pub raw: Vec<f64>,
}

impl TruncatedDistribution {
    pub fn from_position(position: &Position) -> Self {
        TruncatedDistribution {
            tokens: position.top.iter().map(|a| clean_token(&a.token).to_string()).collect(),
            raw: position.top.iter().map(|a| a.logprob.exp()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Probabilities renormalized over the returned set.
    pub fn renormalized(&self) -> Vec<f64> {
        let z: f64 = self.raw.iter().sum();
        self.raw.iter().map(|p| p / z).collect()
    }

    /// Raw probability of `token`, zero when it was not returned. Duplicates after
    /// cleaning are merged.
    pub fn prob(&self, token: &str) -> f64 {
        self.tokens.iter().zip(&self.raw).filter(|(t, _)| t.as_str() == token).map(|(_, p)| p).sum()
    }

    /// 1-based rank of the token taken as `word`'s first token: an exact match if one was
    /// returned, otherwise the best-ranked alternative that is a prefix of `word`.
    pub fn first_token_rank(&self, word: &str) -> Option<usize> {
        let word = clean_token(word);
        self.tokens
            .iter()
            .position(|t| t == word)
            .or_else(|| self.tokens.iter().position(|t| !t.is_empty() && word.starts_with(t.as_str())))
            .map(|i| i + 1)
    }
}

/// Reward from truncated distributions. The base reward is the raw probability of the
/// gold word's first token when it ranks within `min(K, k)`; the penalty sums over the
/// reference's returned top-K, treating unreturned tokens as probability zero.
pub fn truncated_reward(
    judged: &TruncatedDistribution,
    reference: &TruncatedDistribution,
    gold_word: &str,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let k = cfg.top_k.min(judged.len());
    let rank = judged.first_token_rank(gold_word);
    let base = match rank {
        Some(r) if r <= k => judged.raw[r - 1],
        _ => 0.0,
    };
    let mut seen = std::collections::HashSet::new();
    let penalty = reference
        .tokens
        .iter()
        .take(cfg.top_k)
        .filter(|t| seen.insert(t.as_str()))
        .map(|t| (judged.prob(t) - reference.prob(t)).abs())
        .sum::<f64>();
    RewardBreakdown {
        base,
        penalty,
        reward: base - cfg.alpha * penalty,
        gold_rank: rank,
    }
}

/// How a candidate word's probability is read off the judge's truncated distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateScoring {
    /// Raw probability of the word's first token.
    FirstToken,
    /// Product of token probabilities along the word, one request per token.
    FullWord,
}

/// Judge backed by a remote instruction model and the judge prompt template.
pub struct RemoteJudge<'a> {
    pub client: &'a Client,
}

impl RemoteJudge<'_> {
    pub fn distribution_for_prompt(&self, prompt: &str, temperature: f64) -> Result<TruncatedDistribution> {
        let r = self.client.complete_with_logprobs(prompt, 1, temperature)?;
        Ok(TruncatedDistribution::from_position(r.first_position()?))
    }

    /// Next-word distribution given a reasoning trajectory.
    pub fn judge(&self, thought: &str, temperature: f64) -> Result<TruncatedDistribution> {
        self.distribution_for_prompt(&prompts::judge_prompt(thought), temperature)
    }

    /// Reference distribution: the raw context fed straight to the endpoint.
    pub fn reference(&self, context: &str, temperature: f64) -> Result<TruncatedDistribution> {
        self.distribution_for_prompt(context, temperature)
    }

    pub fn reward(&self, context: &str, thought: &str, gold_word: &str, cfg: &RewardConfig) -> Result<RewardBreakdown> {
        cfg.validate()?;
        let judged = self.judge(thought, cfg.judge_temperature)?;
        let reference = self.reference(context, cfg.judge_temperature)?;
        Ok(truncated_reward(&judged, &reference, gold_word, cfg))
    }

    /// Judge-side probability of each candidate word given a trajectory.
    pub fn candidate_scores(&self, thought: &str, candidates: &[&str], temperature: f64, scoring: CandidateScoring) -> Result<Vec<f64>> {
        let prompt = prompts::judge_prompt(thought);
        match scoring {
            CandidateScoring::FirstToken => {
                let d = self.distribution_for_prompt(&prompt, temperature)?;
                Ok(candidates.iter().map(|w| d.first_token_rank(w).map_or(0.0, |r| d.raw[r - 1])).collect())
            }
            CandidateScoring::FullWord => candidates
                .iter()
                .map(|w| self.word_probability(&prompt, clean_token(w), temperature))
                .collect(),
        }
    }

    /// Follows the returned alternatives that spell out `word`, preferring an exact match
    /// of the remainder over the best-ranked prefix. Zero once no alternative continues it.
    fn word_probability(&self, prompt: &str, word: &str, temperature: f64) -> Result<f64> {
        let mut prompt = prompt.to_string();
        let mut rest = word;
        let mut p = 1.0;
        while !rest.is_empty() {
            let response = self.client.complete_with_logprobs(&prompt, 1, temperature)?;
            let top = &response.first_position()?.top;
            let first = rest.len() == word.len();
            fn piece(a: &Alternative, first: bool) -> &str {
                if first {
                    clean_token(&a.token)
                } else {
                    &a.token
                }
            }
            let next = top
                .iter()
                .find(|a| piece(a, first) == rest)
                .or_else(|| top.iter().find(|a| !piece(a, first).is_empty() && rest.starts_with(piece(a, first))));
            let Some(a) = next else { return Ok(0.0) };
            p *= a.logprob.exp();
            rest = &rest[piece(a, first).len()..];
            prompt.push_str(&a.token);
        }
        Ok(p)
    }
}

/// Generates reasoning text from a remote policy model.
pub struct RemotePolicy<'a> {
    pub client: &'a Client,
    pub no_judge: bool,
}

impl RemotePolicy<'_> {
    pub fn generate(&self, context: &str, max_tokens: usize, temperature: f64) -> Result<String> {
        let prompt = if self.no_judge {
            prompts::no_judge_prompt(context)
        } else {
            prompts::policy_prompt(context)
        };
        Ok(self.client.complete_with_logprobs(&prompt, max_tokens, temperature)?.text)
    }
}

/// Reasoning-requirement classifier backed by the filtering prompt.
pub struct RemoteClassifier {
    pub client: Client,
    pub max_tokens: usize,
}

impl ReasoningClassifier for RemoteClassifier {
    fn classify(&self, context: &str, completion: &str) -> Result<FilterDecision> {
        let prompt = prompts::filtering_prompt(context, completion);
        let text = self.client.complete_with_logprobs(&prompt, self.max_tokens, 0.0)?.text;
        parse_decision(&text)
    }
}

/// Extracts the outermost JSON object from `text`.
pub fn parse_decision(text: &str) -> Result<FilterDecision> {
    let start = text.find('{');
    let end = text.rfind('}');
    let (Some(s), Some(e)) = (start, end) else {
        return Err(Error::UnparseableJudgment(snippet(text)));
    };
    if e < s {
        return Err(Error::UnparseableJudgment(snippet(text)));
    }
    serde_json::from_str::<FilterDecision>(&text[s..=e]).map_err(|err| Error::UnparseableJudgment(format!("{err}: {}", snippet(text))))
}

fn snippet(text: &str) -> String {
    text.chars().take(80).collect()
}

#[cfg(test)]
mod tests {
    use super::mock::{MockReply, MockServer};
    use super::*;
    use approx::assert_abs_diff_eq;

    fn response(alts: &[(&str, f64)]) -> String {
        serde_json::to_string(&LogprobResponse {
            text: alts[0].0.to_string(),
            positions: vec![Position {
                token: alts[0].0.to_string(),
                top: alts
                    .iter()
                    .map(|(t, p)| Alternative {
                        token: t.to_string(),
                        logprob: p.ln(),
                    })
                    .collect(),
            }],
        })
        .unwrap()
    }

    fn cfg(url: &str) -> EndpointConfig {
        EndpointConfig {
            base_url: url.to_string(),
            model: "m".into(),
            timeout_secs: 2.0,
            retry_limit: 3,
            backoff_ms: 1,
            top_k: 100,
            ..Default::default()
        }
    }

    #[test]
    fn gold_rank_and_base_from_mock() {
        let body = response(&[(" water", 0.7575), (" juice", 0.1), (" milk", 0.05)]);
        let server = MockServer::start(move |_| MockReply::Json(body.clone())).unwrap();
        let client = Client::new(cfg(server.url())).unwrap();
        let d = RemoteJudge { client: &client }.judge("liquid", 5.0).unwrap();
        assert_eq!(d.first_token_rank("water"), Some(1));
        let r = truncated_reward(&d, &d, "water", &RewardConfig::default());
        assert_abs_diff_eq!(r.base, 0.7575, epsilon = 1e-12);
        assert_eq!(r.penalty, 0.0);
    }

    #[test]
    fn single_alternative_is_point_mass() {
        let d = TruncatedDistribution::from_position(&Position {
            token: "a".into(),
            top: vec![Alternative {
                token: "a".into(),
                logprob: 0.3f64.ln(),
            }],
        });
        assert_eq!(d.renormalized(), vec![1.0]);
    }

    #[test]
    fn down_endpoint_exhausts_retries() {
        let server = MockServer::start(|_| MockReply::Status(503, "busy".into())).unwrap();
        let client = Client::new(cfg(server.url())).unwrap();
        let err = client.complete_with_logprobs("p", 1, 1.0).unwrap_err();
        assert!(matches!(err, Error::RemoteUnavailable { attempts: 3, .. }), "{err}");
        assert_eq!(client.attempts(), 3);
        assert_eq!(server.hits(), 3);
    }

    #[test]
    fn hangups_and_timeouts_surface() {
        let server = MockServer::start(|_| MockReply::Hangup).unwrap();
        let client = Client::new(cfg(server.url())).unwrap();
        assert!(matches!(client.complete_with_logprobs("p", 1, 1.0), Err(Error::RemoteUnavailable { .. })));
        let slow = MockServer::start(|_| MockReply::Delay(Duration::from_millis(600), "{}".into())).unwrap();
        let mut c = cfg(slow.url());
        c.timeout_secs = 0.1;
        c.retry_limit = 1;
        let client = Client::new(c).unwrap();
        assert!(matches!(client.complete_with_logprobs("p", 1, 1.0), Err(Error::TimeoutExceeded(_))));
    }

    #[test]
    fn malformed_bodies_are_rejected() {
        assert!(matches!(LogprobResponse::parse("not json"), Err(Error::MalformedResponse(_))));
        let unsorted = r#"{"text":"a","positions":[{"token":"a","top":[{"token":"a","logprob":-2.0},{"token":"b","logprob":-1.0}]}]}"#;
        assert!(matches!(LogprobResponse::parse(unsorted), Err(Error::MalformedResponse(_))));
        let empty = r#"{"text":"","positions":[]}"#;
        assert!(LogprobResponse::parse(empty).unwrap().first_position().is_err());
    }

    #[test]
    fn cassette_records_then_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tape.jsonl");
        let body = response(&[("x", 0.5), ("y", 0.25)]);
        let server = MockServer::start(move |_| MockReply::Json(body.clone())).unwrap();
        let client = Client::new(cfg(server.url()))
            .unwrap()
            .with_cassette(Cassette::open(&path, CassetteMode::Record).unwrap());
        let live = client.complete_with_logprobs("p", 1, 1.0).unwrap();
        let again = client.complete_with_logprobs("p", 1, 1.0).unwrap();
        assert_eq!(live, again);
        assert_eq!(server.hits(), 1);
        drop(server);
        let offline = Client::new(cfg("http://127.0.0.1:9"))
            .unwrap()
            .with_cassette(Cassette::open(&path, CassetteMode::Replay).unwrap());
        assert_eq!(offline.complete_with_logprobs("p", 1, 1.0).unwrap(), live);
        assert!(matches!(offline.complete_with_logprobs("q", 1, 1.0), Err(Error::CassetteMiss(_))));
        assert_eq!(offline.attempts(), 0);
    }

    #[test]
    fn concurrency_is_bounded_and_ordered() {
        let in_flight = std::sync::Arc::new(AtomicUsize::new(0));
        let peak = std::sync::Arc::new(AtomicUsize::new(0));
        let (f, p) = (in_flight.clone(), peak.clone());
        let server = MockServer::start(move |req| {
            let now = f.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            f.fetch_sub(1, Ordering::SeqCst);
            MockReply::Json(response(&[(&req.prompt, 0.9)]))
        })
        .unwrap();
        let mut c = cfg(server.url());
        c.max_concurrency = 2;
        let client = Client::new(c).unwrap();
        let prompts: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        let out = client.complete_many(&prompts, 1, 1.0);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("p{i}"));
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn candidate_scoring_modes() {
        let server = MockServer::start(|req| {
            MockReply::Json(if req.prompt.ends_with(" water") {
                response(&[("melon", 0.5), ("fall", 0.25)])
            } else {
                response(&[(" water", 0.6), (" wine", 0.2)])
            })
        })
        .unwrap();
        let client = Client::new(cfg(server.url())).unwrap();
        let judge = RemoteJudge { client: &client };
        let words = ["watermelon", "wine", "juice", "water"];
        let first = judge.candidate_scores("t", &words, 1.0, CandidateScoring::FirstToken).unwrap();
        let full = judge.candidate_scores("t", &words, 1.0, CandidateScoring::FullWord).unwrap();
        for (got, want) in first.iter().zip([0.6, 0.2, 0.0, 0.6]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in full.iter().zip([0.3, 0.2, 0.0, 0.6]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn first_token_prefix_rule() {
        let d = TruncatedDistribution {
            tokens: vec!["wat".into(), "water".into(), "w".into()],
            raw: vec![0.4, 0.3, 0.1],
        };
        assert_eq!(d.first_token_rank("watermelon"), Some(1));
        assert_eq!(d.first_token_rank("water"), Some(2));
        assert_eq!(d.first_token_rank("wine"), Some(3));
        assert_eq!(d.first_token_rank("juice"), None);
        assert_eq!(clean_token("\u{120}water"), "water");
        assert_eq!(clean_token("\u{2581}water"), "water");
    }

    #[test]
    fn decision_parsing() {
        let d = parse_decision("Sure: {\"requires_reasoning\": true, \"explanation\": \"clue\"}").unwrap();
        assert!(d.requires_reasoning);
        assert!(!parse_decision("{\"requires_reasoning\": false, \"explanation\": \"grammar\"}").unwrap().requires_reasoning);
        assert!(matches!(parse_decision("yes"), Err(Error::UnparseableJudgment(_))));
        assert!(matches!(parse_decision("{\"requires_reasoning\": \"maybe\"}"), Err(Error::UnparseableJudgment(_))));
    }

    #[test]
    fn config_rejects() {
        let mut c = EndpointConfig::default();
        c.max_concurrency = 0;
        assert!(c.validate().is_err());
        let mut c = EndpointConfig::default();
        c.top_k = 0;
        assert!(c.validate().is_err());
    }
}
