//! Policy backends: the generators of agent turns.
//!
//! - [`ScriptedPolicy`]: deterministic strategies (identity, reverse, oracle,
//!   seeded shuffle, fixed turns), optionally preceded by fixed preface turns.
//! - [`ReplayPolicy`]: returns the verbatim turns of a recorded trajectory log.
//! - [`HttpPolicy`]: a live chat-completions endpoint with inline image parts.
//!
//! Every backend derives the turn index from the number of assistant messages
//! already in the context, so scripted and replay backends are pure functions
//! of the context.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::protocol::{ContentPart, ImageSource, MessageSequence, Role};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("replay divergence: {0}")]
    Divergence(String),
    #[error("cannot attach image: {0}")]
    Image(String),
}

pub trait PolicyBackend: Send + Sync {
    fn next_turn(&self, context: &MessageSequence) -> Result<String, PolicyError>;

    fn identity(&self) -> String;

    /// Live backends are nondeterministic; the engine records wall-clock timing for them.
    fn is_live(&self) -> bool {
        false
    }
}

/// Adapts a closure into a backend. Mostly useful in tests.
pub struct FnPolicy<F> {
    name: String,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&MessageSequence) -> Result<String, PolicyError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnPolicy {
            name: name.into(),
            f,
        }
    }
}

impl<F> PolicyBackend for FnPolicy<F>
where
    F: Fn(&MessageSequence) -> Result<String, PolicyError> + Send + Sync,
{
    fn next_turn(&self, context: &MessageSequence) -> Result<String, PolicyError> {
        (self.f)(context)
    }

    fn identity(&self) -> String {
        self.name.clone()
    }
}

// ---------------------------------------------------------------------------
// Scripted

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    /// Answers `1,2,…,W`.
    Identity,
    /// Answers `W,…,2,1`.
    Reverse,
    /// Ranks relevant candidates first (in window order), then the rest.
    Oracle {
        #[serde(default)]
        relevant: BTreeMap<String, BTreeSet<String>>,
    },
    /// A permutation drawn from a generator seeded by `seed`, the query and the window.
    Shuffle {
        #[serde(default)]
        seed: u64,
    },
    /// Emits `turns[i]` on turn `i`, repeating the last one once exhausted.
    Turns { turns: Vec<String> },
}

fn default_think() -> String {
    "comparing candidates".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    #[serde(flatten)]
    pub strategy: Strategy,
    /// Verbatim turns emitted before the strategy takes over.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preface: Vec<String>,
    #[serde(default = "default_think")]
    pub think: String,
}

impl ScriptedPolicy {
    pub fn new(strategy: Strategy) -> Self {
        ScriptedPolicy {
            strategy,
            preface: Vec::new(),
            think: default_think(),
        }
    }

    pub fn with_preface(mut self, preface: Vec<String>) -> Self {
        self.preface = preface;
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn answer(&self, order: impl IntoIterator<Item = usize>) -> String {
        let list: Vec<String> = order.into_iter().map(|p| p.to_string()).collect();
        format!("<think>{}</think><answer>{}</answer>", self.think, list.join(","))
    }
}

/// Seed for [`Strategy::Shuffle`], mixing the configured seed with the episode identity.
fn episode_seed(seed: u64, ctx: &MessageSequence) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(ctx.query_id.as_bytes());
    for id in &ctx.window_ids {
        h.update([0]);
        h.update(id.as_bytes());
    }
    h.finalize().into()
}

impl PolicyBackend for ScriptedPolicy {
    fn next_turn(&self, ctx: &MessageSequence) -> Result<String, PolicyError> {
        let turn = ctx.assistant_turns();
        if let Some(t) = self.preface.get(turn) {
            return Ok(t.clone());
        }
        let w = ctx.window_ids.len();
        Ok(match &self.strategy {
            Strategy::Identity => self.answer(1..=w),
            Strategy::Reverse => self.answer((1..=w).rev()),
            Strategy::Oracle { relevant } => {
                let rel = relevant.get(&ctx.query_id);
                let is_rel = |id: &String| rel.is_some_and(|r| r.contains(id));
                let (hit, miss): (Vec<usize>, Vec<usize>) =
                    (1..=w).partition(|&p| is_rel(&ctx.window_ids[p - 1]));
                self.answer(hit.into_iter().chain(miss))
            }
            Strategy::Shuffle { seed } => {
                let mut rng = ChaCha8Rng::from_seed(episode_seed(*seed, ctx));
                let mut order: Vec<usize> = (1..=w).collect();
                order.shuffle(&mut rng);
                self.answer(order)
            }
            Strategy::Turns { turns } => {
                let i = turn - self.preface.len();
                turns
                    .get(i)
                    .or(turns.last())
                    .cloned()
                    .unwrap_or_default()
            }
        })
    }

    fn identity(&self) -> String {
        let name = match &self.strategy {
            Strategy::Identity => "identity".to_owned(),
            Strategy::Reverse => "reverse".to_owned(),
            Strategy::Oracle { .. } => "oracle".to_owned(),
            Strategy::Shuffle { seed } => format!("shuffle({seed})"),
            Strategy::Turns { turns } => format!("turns({})", turns.len()),
        };
        format!("scripted:{name}")
    }
}

// ---------------------------------------------------------------------------
// Replay

/// Key identifying one logged episode.
pub type EpisodeKey = (String, Vec<String>);

#[derive(Debug, Clone, Default)]
pub struct ReplayPolicy {
    turns: HashMap<EpisodeKey, Vec<String>>,
}

impl ReplayPolicy {
    /// Builds from `(query_id, window ids, raw turns)`; the first entry for a key wins.
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<String>, Vec<String>)>) -> Self {
        let mut turns = HashMap::new();
        for (q, w, t) in entries {
            turns.entry((q, w)).or_insert(t);
        }
        ReplayPolicy { turns }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

impl PolicyBackend for ReplayPolicy {
    fn next_turn(&self, ctx: &MessageSequence) -> Result<String, PolicyError> {
        let key = (ctx.query_id.clone(), ctx.window_ids.clone());
        let turns = self.turns.get(&key).ok_or_else(|| {
            PolicyError::Divergence(format!(
                "no logged episode for query {:?} with window {:?}",
                ctx.query_id, ctx.window_ids
            ))
        })?;
        let i = ctx.assistant_turns();
        turns.get(i).cloned().ok_or_else(|| {
            PolicyError::Divergence(format!(
                "engine requested turn {} but the log holds {} for query {:?}",
                i + 1,
                turns.len(),
                ctx.query_id
            ))
        })
    }

    fn identity(&self) -> String {
        "replay".to_owned()
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: u32,
    pub timeout: Duration,
    pub token: Option<String>,
    pub seed: Option<u64>,
    pub image_root: Option<PathBuf>,
}

pub struct HttpPolicy {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    }
}

fn data_url(mime: &str, bytes: &[u8]) -> String {
    format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}

/// Builds the chat-completions request body for a context.
pub fn chat_request_body(
    settings: &HttpSettings,
    ctx: &MessageSequence,
) -> Result<Value, PolicyError> {
    let mut messages = Vec::with_capacity(ctx.messages.len());
    for m in &ctx.messages {
        let mut parts = Vec::with_capacity(m.parts.len());
        for p in &m.parts {
            match p {
                ContentPart::Text(t) => parts.push(json!({"type": "text", "text": t})),
                ContentPart::Image(slot) => {
                    let url = match &slot.source {
                        ImageSource::Bytes { data, mime } => data_url(mime, data),
                        ImageSource::File(path) => {
                            let path = match &settings.image_root {
                                Some(root) if path.is_relative() => root.join(path),
                                _ => path.clone(),
                            };
                            let bytes = std::fs::read(&path).map_err(|e| {
                                PolicyError::Image(format!("{}: {e}", path.display()))
                            })?;
                            let mime = image::guess_format(&bytes)
                                .map(|f| f.to_mime_type())
                                .map_err(|e| {
                                    PolicyError::Image(format!("{}: {e}", path.display()))
                                })?;
                            data_url(mime, &bytes)
                        }
                    };
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
            }
        }
        // Plain-text assistant turns are sent as strings for wider endpoint compatibility.
        let content = match (m.role, parts.as_slice()) {
            (Role::Assistant, [one]) if one["type"] == "text" => one["text"].clone(),
            _ => Value::Array(parts),
        };
        messages.push(json!({"role": role_name(m.role), "content": content}));
    }
    let mut body = json!({
        "model": settings.model,
        "messages": messages,
        "temperature": settings.temperature,
        "max_tokens": settings.max_tokens,
    });
    if let Some(seed) = settings.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

/// Pulls the assistant text out of a chat-completions response.
pub fn extract_content(response: &Value) -> Result<String, PolicyError> {
    let content = &response["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(PolicyError::Protocol(
            "missing choices[0].message.content".into(),
        )),
    }
}

impl HttpPolicy {
    pub fn new(settings: HttpSettings) -> Result<Self, PolicyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(HttpPolicy { settings, client })
    }

    fn attempt(&self, body: &Value) -> Result<String, PolicyError> {
        let mut req = self.client.post(&self.settings.endpoint).json(body);
        if let Some(token) = &self.settings.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(PolicyError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        extract_content(&value)
    }
}

fn retryable(err: &PolicyError) -> bool {
    match err {
        PolicyError::Transport(_) => true,
        PolicyError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl PolicyBackend for HttpPolicy {
    fn next_turn(&self, ctx: &MessageSequence) -> Result<String, PolicyError> {
        let body = chat_request_body(&self.settings, ctx)?;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) && attempt < self.settings.retries => {
                    attempt += 1;
                    log::warn!(
                        "policy request failed (attempt {attempt}/{}): {e}",
                        self.settings.retries + 1
                    );
                    std::thread::sleep(Duration::from_millis(250 * u64::from(attempt)));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn identity(&self) -> String {
        format!("http:{}", self.settings.model)
    }

    fn is_live(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_turn, Message};

    fn ctx(query: &str, window: &[&str], assistant_turns: usize) -> MessageSequence {
        let mut messages = vec![Message::text(Role::User, "q")];
        for _ in 0..assistant_turns {
            messages.push(Message::text(Role::Assistant, "a"));
        }
        MessageSequence {
            query_id: query.into(),
            window_ids: window.iter().map(|s| s.to_string()).collect(),
            messages,
        }
    }

    fn answer(p: &dyn PolicyBackend, c: &MessageSequence) -> Vec<usize> {
        let raw = p.next_turn(c).unwrap();
        parse_turn(&raw, c.window_ids.len())
            .answer
            .unwrap()
            .as_slice()
            .to_vec()
    }

    #[test]
    fn identity_reverse_oracle() {
        let c = ctx("q1", &["a", "b", "c"], 0);
        assert_eq!(answer(&ScriptedPolicy::new(Strategy::Identity), &c), [1, 2, 3]);
        assert_eq!(answer(&ScriptedPolicy::new(Strategy::Reverse), &c), [3, 2, 1]);
        let mut relevant = BTreeMap::new();
        relevant.insert("q1".to_owned(), BTreeSet::from(["c".to_owned()]));
        let oracle = ScriptedPolicy::new(Strategy::Oracle { relevant });
        assert_eq!(answer(&oracle, &c), [3, 1, 2]);
        assert_eq!(answer(&oracle, &ctx("q2", &["a", "b", "c"], 0)), [1, 2, 3]);
    }

    #[test]
    fn shuffle_is_deterministic_per_episode() {
        let p = ScriptedPolicy::new(Strategy::Shuffle { seed: 7 });
        let ids: Vec<String> = (0..20).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let c = ctx("q", &refs, 0);
        let a = answer(&p, &c);
        assert_eq!(a, answer(&p, &c));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (1..=20).collect::<Vec<_>>());
        let other = ScriptedPolicy::new(Strategy::Shuffle { seed: 8 });
        assert_ne!(a, answer(&other, &c));
    }

    #[test]
    fn preface_then_strategy() {
        let p = ScriptedPolicy::new(Strategy::Identity).with_preface(vec!["first".into()]);
        assert_eq!(p.next_turn(&ctx("q", &["a"], 0)).unwrap(), "first");
        assert_eq!(answer(&p, &ctx("q", &["a"], 1)), [1]);
    }

    #[test]
    fn script_file_format() {
        let p: ScriptedPolicy = serde_json::from_str(
            r#"{"strategy":"turns","turns":["x","y"],"preface":["p"]}"#,
        )
        .unwrap();
        assert_eq!(p.next_turn(&ctx("q", &["a"], 0)).unwrap(), "p");
        assert_eq!(p.next_turn(&ctx("q", &["a"], 1)).unwrap(), "x");
        assert_eq!(p.next_turn(&ctx("q", &["a"], 5)).unwrap(), "y");
        let p: ScriptedPolicy = serde_json::from_str(r#"{"strategy":"oracle"}"#).unwrap();
        assert_eq!(p.identity(), "scripted:oracle");
    }

    #[test]
    fn replay_lookup_and_divergence() {
        let p = ReplayPolicy::new([(
            "q".to_owned(),
            vec!["a".to_owned(), "b".to_owned()],
            vec!["t1".to_owned(), "t2".to_owned()],
        )]);
        assert_eq!(p.next_turn(&ctx("q", &["a", "b"], 1)).unwrap(), "t2");
        assert!(matches!(
            p.next_turn(&ctx("q", &["a", "b"], 2)),
            Err(PolicyError::Divergence(_))
        ));
        assert!(matches!(
            p.next_turn(&ctx("q", &["b", "a"], 0)),
            Err(PolicyError::Divergence(_))
        ));
    }

    #[test]
    fn request_body_shape() {
        let settings = HttpSettings {
            endpoint: "http://localhost".into(),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 64,
            retries: 0,
            timeout: Duration::from_secs(1),
            token: None,
            seed: Some(3),
            image_root: None,
        };
        let mut c = ctx("q", &["a"], 1);
        c.messages.push(Message {
            role: Role::User,
            parts: vec![
                ContentPart::Text("look".into()),
                ContentPart::Image(crate::protocol::ImageSlot {
                    label: "1".into(),
                    source: ImageSource::Bytes {
                        data: std::sync::Arc::from(vec![1u8, 2, 3]),
                        mime: "image/png",
                    },
                }),
            ],
        });
        let body = chat_request_body(&settings, &c).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["seed"], 3);
        assert_eq!(body["messages"][1]["role"], "assistant");
        assert_eq!(body["messages"][1]["content"], "a");
        assert_eq!(
            body["messages"][2]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
    }

    #[test]
    fn response_extraction() {
        let v = json!({"choices":[{"message":{"role":"assistant","content":"hi"}}]});
        assert_eq!(extract_content(&v).unwrap(), "hi");
        let v = json!({"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]});
        assert_eq!(extract_content(&v).unwrap(), "ab");
        assert!(extract_content(&json!({})).is_err());
    }
}
