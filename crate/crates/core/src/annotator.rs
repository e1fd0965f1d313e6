//! LLM evidence-span annotation: prompt template, response parsing, alignment
//! of span strings onto passage tokens, and a resumable batch driver.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedder::{tokenize, TokenizedText};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    /// Endpoint root; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f32,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "gemma-2-27b-it".into(),
            api_key_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::InvalidParameter("timeout must be > 0".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidParameter("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Chat-completions client over blocking HTTP.
pub struct HttpLlmClient {
    config: LlmClientConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(config: LlmClientConfig) -> Result<Self> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::InvalidParameter(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Llm(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        let temperature = if self.config.temperature == 0.0 {
            json!(0)
        } else {
            json!(self.config.temperature)
        };
        json!({
            "model": self.config.model,
            "temperature": temperature,
            "messages": [{"role": "user", "content": prompt}],
        })
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.http.post(&url).json(&self.request_body(prompt));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Llm(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Llm(format!("endpoint returned {status}")));
        }
        let body: Value = resp.json().map_err(|e| Error::Llm(e.without_url().to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Llm("response has no choices[0].message.content".into()))
    }
}

type Responder = dyn Fn(&str) -> Result<String> + Send + Sync;

/// Deterministic offline client.
pub struct MockLlm {
    respond: Box<Responder>,
}

impl MockLlm {
    pub fn new(respond: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            respond: Box::new(respond),
        }
    }

    /// Answers each prompt from a table keyed by `(query, passage)`; unknown
    /// pairs get `[]`.
    pub fn from_spans(table: HashMap<(String, String), Vec<String>>) -> Self {
        Self::new(move |prompt| {
            let spans = prompt_fields(prompt)
                .and_then(|(q, p)| table.get(&(q.to_string(), p.to_string())))
                .cloned()
                .unwrap_or_default();
            Ok(serde_json::to_string(&spans).expect("strings serialize"))
        })
    }

    /// Returns every maximal run of passage tokens whose lowercase form also
    /// appears among the query tokens.
    pub fn lexical() -> Self {
        Self::new(|prompt| {
            let Some((query, passage)) = prompt_fields(prompt) else {
                return Ok("[]".into());
            };
            let words: HashSet<String> = match tokenize(query) {
                Ok(t) => t.surfaces().map(str::to_lowercase).collect(),
                Err(_) => HashSet::new(),
            };
            let mut spans = Vec::new();
            if let Ok(tok) = tokenize(passage) {
                let mut run: Option<(usize, usize)> = None;
                for t in &tok.tokens {
                    let hit = t.surface.chars().any(char::is_alphanumeric) && words.contains(&t.surface.to_lowercase());
                    run = match (run, hit) {
                        (Some((b, _)), true) => Some((b, t.end)),
                        (None, true) => Some((t.start, t.end)),
                        (Some((b, e)), false) => {
                            spans.push(crate::embedder::char_slice(passage, b, e).to_string());
                            None
                        }
                        (None, false) => None,
                    };
                }
                if let Some((b, e)) = run {
                    spans.push(crate::embedder::char_slice(passage, b, e).to_string());
                }
            }
            Ok(serde_json::to_string(&spans).expect("strings serialize"))
        })
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &str) -> Result<String> {
        (self.respond)(prompt)
    }
}

/// Wraps a client so the first `failures` calls for each prompt fail.
pub struct FlakyLlm<C> {
    inner: C,
    failures: usize,
    seen: Mutex<HashMap<String, usize>>,
}

impl<C: LlmClient> FlakyLlm<C> {
    pub fn new(inner: C, failures: usize) -> Self {
        Self {
            inner,
            failures,
            seen: Mutex::new(HashMap::new()),
        }
    }
}

impl<C: LlmClient> LlmClient for FlakyLlm<C> {
    fn complete(&self, prompt: &str) -> Result<String> {
        let calls = {
            let mut seen = self.seen.lock().expect("poisoned");
            let n = seen.entry(prompt.to_string()).or_insert(0);
            *n += 1;
            *n
        };
        if calls <= self.failures {
            return Err(Error::Llm(format!("injected failure {calls}")));
        }
        self.inner.complete(prompt)
    }
}

const QUERY_OPEN: &str = "<query>\n";
const QUERY_CLOSE: &str = "\n</query>";
const PASSAGE_OPEN: &str = "<passage>\n";
const PASSAGE_CLOSE: &str = "\n</passage>";

const INSTRUCTIONS: &str = "You mark the evidence in a passage that answers a search query.\n\
Return a JSON array of verbatim substrings of the passage that answer the query. \
Copy each substring exactly as it appears, keep them short, and do not paraphrase. \
If nothing in the passage answers the query, return [].\n\
Respond with the JSON array only.\n\n\
Example\n\
Query: who wrote the origin of species\n\
Passage: On the Origin of Species was written by Charles Darwin and published in 1859.\n\
Answer: [\"written by Charles Darwin\"]\n\n";

pub fn build_prompt(query: &str, passage: &str) -> Result<String> {
    if query.trim().is_empty() || passage.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(format!(
        "{INSTRUCTIONS}{QUERY_OPEN}{query}{QUERY_CLOSE}\n{PASSAGE_OPEN}{passage}{PASSAGE_CLOSE}\n\nAnswer:"
    ))
}

/// Recovers `(query, passage)` from a prompt made by [`build_prompt`].
pub fn prompt_fields(prompt: &str) -> Option<(&str, &str)> {
    let q_start = prompt.find(QUERY_OPEN)? + QUERY_OPEN.len();
    let q_end = q_start + prompt[q_start..].find(QUERY_CLOSE)?;
    let rest = &prompt[q_end + QUERY_CLOSE.len()..];
    let p_start = rest.find(PASSAGE_OPEN)? + PASSAGE_OPEN.len();
    let p_end = p_start + rest[p_start..].rfind(PASSAGE_CLOSE)?;
    Some((&prompt[q_start..q_end], &rest[p_start..p_end]))
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    let line = line
        .strip_prefix(['-', '*', '•'])
        .map(str::trim_start)
        .unwrap_or(line);
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    let line = if digits > 0 {
        line[digits..]
            .strip_prefix(['.', ')'])
            .map(str::trim_start)
            .unwrap_or(line)
    } else {
        line
    };
    let line = line.trim_end_matches(',');
    line.strip_prefix('"')
        .and_then(|l| l.strip_suffix('"'))
        .unwrap_or(line)
}

/// Extracts span strings: the first JSON array of strings in the response,
/// else one span per non-empty line with list markers removed.
pub fn parse_spans(response: &str) -> Result<Vec<String>> {
    for (pos, _) in response.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&response[pos..]).into_iter::<Vec<String>>();
        if let Some(Ok(spans)) = stream.next() {
            return Ok(spans);
        }
    }
    if response.contains('[') {
        return Err(Error::SpanParse { raw: response.to_string() });
    }
    Ok(response
        .lines()
        .map(strip_list_marker)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn find_run(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Marks the tokens covered by each span string. A span matches at its first
/// occurrence as a contiguous run of token surfaces, trying an exact match
/// before a case-insensitive one. Spans that match nowhere are returned.
pub fn align_spans(tok: &TokenizedText, spans: &[String]) -> (Vec<u8>, Vec<String>) {
    let surfaces: Vec<String> = tok.surfaces().map(str::to_string).collect();
    let lowered: Vec<String> = surfaces.iter().map(|s| s.to_lowercase()).collect();
    let mut targets = vec![0u8; tok.len()];
    let mut unmatched = Vec::new();
    for span in spans {
        let needle: Vec<String> = match tokenize(span) {
            Ok(t) => t.surfaces().map(str::to_string).collect(),
            Err(_) => Vec::new(),
        };
        let lowered_needle: Vec<String> = needle.iter().map(|s| s.to_lowercase()).collect();
        let hit = find_run(&surfaces, &needle).or_else(|| find_run(&lowered, &lowered_needle));
        match hit {
            Some(start) => targets[start..start + needle.len()].fill(1),
            None => unmatched.push(span.clone()),
        }
    }
    (targets, unmatched)
}

/// One query-passage pair to annotate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPair {
    pub qid: String,
    pub query: String,
    pub pid: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub qid: String,
    pub pid: String,
    pub raw: String,
    pub spans: Vec<String>,
    pub targets: Vec<u8>,
    pub unmatched: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AnnotateOptions {
    pub max_retries: u32,
    pub backoff: Duration,
    pub concurrency: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(500),
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub pairs: usize,
    pub annotated: usize,
    pub skipped: usize,
    pub empty: usize,
    pub spans: usize,
    pub unmatched_spans: usize,
    pub unmatched_rate: f64,
    pub retries: usize,
    pub failures: Vec<String>,
}

fn pair_key(qid: &str, pid: &str) -> String {
    format!("{qid}/{pid}")
}

/// Loads records already written to `path`, dropping a torn final line.
fn resume(path: &Path) -> Result<HashSet<String>> {
    let Ok(content) = std::fs::read_to_string(path) else {
        return Ok(HashSet::new());
    };
    let complete = match content.rfind('\n') {
        Some(i) => &content[..=i],
        None => "",
    };
    if complete.len() != content.len() {
        log::warn!("dropping incomplete trailing record in {}", path.display());
        std::fs::write(path, complete).map_err(|e| Error::io(path, e))?;
    }
    let mut done = HashSet::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        done.insert(pair_key(&rec.qid, &rec.pid));
    }
    Ok(done)
}

enum Outcome {
    Done(AnnotationRecord, usize),
    Failed(String, usize),
}

fn annotate_pair(client: &dyn LlmClient, pair: &AnnotationPair, opts: &AnnotateOptions) -> Outcome {
    let key = pair_key(&pair.qid, &pair.pid);
    let (tok, prompt) = match tokenize(&pair.text).and_then(|t| Ok((t, build_prompt(&pair.query, &pair.text)?))) {
        Ok(v) => v,
        Err(e) => return Outcome::Failed(format!("{key}: {e}"), 0),
    };
    let mut retries = 0;
    loop {
        match client.complete(&prompt) {
            Ok(raw) => {
                return match parse_spans(&raw) {
                    Ok(spans) => {
                        let (targets, unmatched) = align_spans(&tok, &spans);
                        Outcome::Done(
                            AnnotationRecord {
                                qid: pair.qid.clone(),
                                pid: pair.pid.clone(),
                                raw,
                                spans,
                                targets,
                                unmatched,
                            },
                            retries,
                        )
                    }
                    Err(e) => Outcome::Failed(format!("{key}: {e}"), retries),
                };
            }
            Err(e) if retries as u32 >= opts.max_retries => {
                return Outcome::Failed(format!("{key}: {e}"), retries);
            }
            Err(e) => {
                log::debug!("{key}: attempt {} failed: {e}", retries + 1);
                std::thread::sleep(opts.backoff * 2u32.saturating_pow(retries as u32));
                retries += 1;
            }
        }
    }
}

/// Annotates `pairs` into a JSON-lines file, appending in input order.
///
/// Pairs already present in `out_path` are skipped, so an interrupted run can
/// be resumed. Failed pairs are reported in the summary and not written.
pub fn annotate_dataset(
    client: &dyn LlmClient,
    pairs: &[AnnotationPair],
    out_path: &Path,
    opts: &AnnotateOptions,
) -> Result<AnnotationSummary> {
    let done = resume(out_path)?;
    let todo: Vec<&AnnotationPair> = pairs
        .iter()
        .filter(|p| !done.contains(&pair_key(&p.qid, &p.pid)))
        .collect();
    let mut summary = AnnotationSummary {
        pairs: pairs.len(),
        skipped: pairs.len() - todo.len(),
        ..Default::default()
    };
    if todo.is_empty() {
        return Ok(summary);
    }
    let mut out: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_path)
        .map_err(|e| Error::io(out_path, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;

    for chunk in todo.chunks(opts.concurrency.max(1)) {
        let outcomes: Vec<Outcome> = pool.install(|| {
            use rayon::prelude::*;
            chunk.par_iter().map(|p| annotate_pair(client, p, opts)).collect()
        });
        let mut buf = Vec::new();
        for outcome in outcomes {
            match outcome {
                Outcome::Done(rec, retries) => {
                    summary.retries += retries;
                    summary.annotated += 1;
                    if rec.targets.iter().all(|&t| t == 0) {
                        summary.empty += 1;
                    }
                    summary.spans += rec.spans.len();
                    summary.unmatched_spans += rec.unmatched.len();
                    serde_json::to_writer(&mut buf, &rec).expect("record serializes");
                    buf.push(b'\n');
                }
                Outcome::Failed(reason, retries) => {
                    summary.retries += retries;
                    log::warn!("annotation failed for {reason}");
                    summary.failures.push(reason);
                }
            }
        }
        out.write_all(&buf).map_err(|e| Error::io(out_path, e))?;
        out.flush().map_err(|e| Error::io(out_path, e))?;
    }
    out.sync_all().map_err(|e| Error::io(out_path, e))?;
    if summary.spans > 0 {
        summary.unmatched_rate = summary.unmatched_spans as f64 / summary.spans as f64;
    }
    Ok(summary)
}
