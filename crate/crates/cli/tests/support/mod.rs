//! Shared fixtures: synthetic pools written to disk and a minimal
//! chat-completions endpoint on a local socket.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{Rgba, RgbaImage};
use mier_cli::EngineConfig;
use mier_core::jsonl;
use mier_core::store::{cosine_topk, Candidate, EmbeddingMatrix, Modality, Pool, Query};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const DIM: usize = 8;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub cfg: EngineConfig,
    pub queries: Vec<Query>,
    pub candidates: Vec<Candidate>,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes a scripted policy file and returns its backend string.
    pub fn scripted(&self, name: &str, policy: Value) -> String {
        let path = self.path(&format!("{name}.json"));
        std::fs::write(&path, policy.to_string()).unwrap();
        format!("scripted:{}", path.display())
    }

    /// A copy of the config writing into `out/<name>` with the given backend.
    pub fn config(&self, name: &str, backend: &str) -> EngineConfig {
        let mut cfg = self.cfg.clone();
        cfg.policy.backend = backend.to_owned();
        cfg.output.dir = self.path("out").join(name);
        cfg
    }
}

/// `n` random candidates and one query per `planted` entry whose ground truth
/// sits at that 1-based first-stage rank. Every third candidate also carries a
/// PNG image when `images` is set.
pub fn fixture(n: usize, planted: &[usize], seed: u64, images: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut candidates = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = Candidate::text(format!("c{i:03}"), format!("candidate number {i}"));
        if images && i % 3 == 0 {
            let name = format!("img{i:03}.png");
            let shade = (i * 37 % 256) as u8;
            RgbaImage::from_fn(24, 18, |x, y| Rgba([shade, (x * 10) as u8, (y * 12) as u8, 255]))
                .save(dir.path().join(&name))
                .unwrap();
            c.modality = Modality::TextImage;
            c.image_ref = Some(name);
        }
        candidates.push(c);
    }
    let pool = Pool::new(candidates.clone())
        .unwrap()
        .with_embeddings(EmbeddingMatrix::from_rows(&rows).unwrap())
        .unwrap();
    let queries: Vec<Query> = planted
        .iter()
        .enumerate()
        .map(|(qi, &rank)| {
            let v: Vec<f32> = (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let hits = cosine_topk(&v, &pool, n).unwrap();
            let mut q = Query::text(format!("q{qi:03}"), format!("query text {qi}"));
            q.gt_candidate_ids = BTreeSet::from([hits[rank - 1].candidate_id.clone()]);
            q.embedding = Some(v);
            q
        })
        .collect();

    jsonl::write_file(&dir.path().join("pool.jsonl"), &candidates).unwrap();
    jsonl::write_file(&dir.path().join("queries.jsonl"), &queries).unwrap();
    let f = std::fs::File::create(dir.path().join("pool.vre")).unwrap();
    EmbeddingMatrix::from_rows(&rows).unwrap().write_to(f).unwrap();

    let mut cfg = EngineConfig::default();
    cfg.data.pool = Some(dir.path().join("pool.jsonl"));
    cfg.data.embeddings = Some(dir.path().join("pool.vre"));
    cfg.data.queries = Some(dir.path().join("queries.jsonl"));
    cfg.data.image_root = Some(dir.path().to_path_buf());
    cfg.output.dir = dir.path().join("out");
    cfg.run.parallelism = 4;
    Fixture {
        dir,
        cfg,
        queries,
        candidates,
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// mock chat endpoint

pub type Handler = dyn Fn(&Value) -> (u16, Value) + Send + Sync;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub authorization: Option<String>,
    pub body: Value,
}

pub struct MockChat {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockChat {
    pub fn start(handler: impl Fn(&Value) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = handler.clone();
                let log = log.clone();
                std::thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        MockChat { url, requests }
    }

    pub fn conformant() -> Self {
        Self::start(conformant_reply)
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Recorded>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        let mut authorization = None;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                match k.trim().to_ascii_lowercase().as_str() {
                    "content-length" => length = v.trim().parse().unwrap_or(0),
                    "authorization" => authorization = Some(v.trim().to_owned()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        log.lock().unwrap().push(Recorded {
            authorization,
            body: body.clone(),
        });
        let (status, reply) = handler(&body);
        let text = reply.to_string();
        let head = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            text.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(text.as_bytes()).is_err() {
            return;
        }
    }
}

pub fn completion(content: &str) -> Value {
    json!({
        "id": "chatcmpl-test",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }]
    })
}

/// Checks the request shape, then selects the first candidate's image on the
/// first turn and answers on the next.
pub fn conformant_reply(body: &Value) -> (u16, Value) {
    let Some(messages) = body["messages"].as_array() else {
        return (400, json!({"error": "messages missing"}));
    };
    if body["model"].as_str().is_none() || messages.first().map(|m| &m["role"]) != Some(&json!("system")) {
        return (400, json!({"error": "malformed request"}));
    }
    let assistant_turns = messages.iter().filter(|m| m["role"] == "assistant").count();
    let content = if assistant_turns == 0 {
        r#"<think>The first candidate looks promising; inspect its image.</think><tool_call>{"tool": "select_image", "indices": [1]}</tool_call>"#
    } else {
        "<think>Evidence reviewed.</think><answer>1</answer>"
    };
    (200, completion(content))
}

/// Every image part in a request body.
pub fn image_urls(body: &Value) -> Vec<String> {
    let mut out = Vec::new();
    for m in body["messages"].as_array().into_iter().flatten() {
        for p in m["content"].as_array().into_iter().flatten() {
            if let Some(u) = p["image_url"]["url"].as_str() {
                out.push(u.to_owned());
            }
        }
    }
    out
}
