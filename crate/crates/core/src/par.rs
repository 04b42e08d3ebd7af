//! Physics-aware reasoning: ask an LLM for a structured physical analysis of
//! a prompt followed by a counterfactual caption that keeps the scene but
//! breaks the governing law, then parse and vet the answer.
//!
//! The reply grammar is line-oriented:
//!
//! ```text
//! [ANALYSIS]
//! Entities: ...
//! Environment: ...
//! Interactions: ...
//! Temporal evolution: ...
//! [COUNTERFACTUAL]
//! ...
//! ```

use std::collections::{BTreeSet, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ANALYSIS_MARKER: &str = "[ANALYSIS]";
pub const COUNTERFACTUAL_MARKER: &str = "[COUNTERFACTUAL]";
pub const TEMPLATE_VERSION: &str = "par-template/1";

/// Analysis subfield labels, in the order they must appear.
pub const SUBFIELD_LABELS: [&str; 4] = [
    "Entities",
    "Environment",
    "Interactions",
    "Temporal evolution",
];

#[derive(Debug, Error)]
pub enum ParError {
    #[error("user prompt is empty")]
    EmptyPrompt,

    #[error("format violation: missing {missing}")]
    Format { missing: String },

    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("counterfactual failed validation: {}", .report.failure_reasons().join("; "))]
    Validation { report: ValidationReport },

    #[error("invalid template: {0}")]
    Template(String),

    #[error("invalid endpoint config: {0}")]
    Endpoint(String),

    #[error("store error on {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParTemplate {
    pub version: String,
    pub system_text: String,
    pub requirements: Vec<String>,
    pub worked_example: String,
    pub output_format_spec: String,
}

impl Default for ParTemplate {
    fn default() -> Self {
        let output_format_spec = format!(
            "Reply in exactly this format, with nothing before or after it:\n\
             {ANALYSIS_MARKER}\n\
             Entities: <objects and substances involved>\n\
             Environment: <setting and ambient conditions>\n\
             Interactions: <physical interactions and the governing principle>\n\
             Temporal evolution: <how the event unfolds over time under normal physics>\n\
             {COUNTERFACTUAL_MARKER}\n\
             <one caption describing the same scene with the governing law violated>"
        );
        let worked_example = [
            "Example input: A rubber ball rolls off the edge of a kitchen table.",
            "Example output:",
            ANALYSIS_MARKER,
            "Entities: rubber ball, kitchen table, floor",
            "Environment: indoor kitchen under normal gravity",
            "Interactions: gravity accelerates the ball downward once it leaves the table edge",
            "Temporal evolution: the ball follows a parabolic arc, hits the floor and bounces with decreasing height",
            COUNTERFACTUAL_MARKER,
            "The rubber ball rolls off the kitchen table and hangs motionless in mid-air beside the edge, never falling to the floor.",
        ]
        .join("\n");
        Self {
            version: TEMPLATE_VERSION.into(),
            system_text: "You analyze the physics of short video captions and write counterfactual \
                          captions for them. First reason about the physical process the caption \
                          implies, then describe a version of the same scene in which that process \
                          is violated."
                .into(),
            requirements: vec![
                "Identify the entities, the environment, their interactions and the expected temporal evolution before writing the counterfactual.".into(),
                "Keep the same subjects and the same setting as the input caption.".into(),
                "Violate the physical law that actually governs the described process, not an unrelated one.".into(),
                "The counterfactual must look visually plausible while being physically implausible.".into(),
                "Do not repeat or merely rephrase the input caption.".into(),
            ],
            worked_example,
            output_format_spec,
        }
    }
}

impl ParTemplate {
    /// The format spec must name each section marker exactly once.
    pub fn validate(&self) -> Result<(), ParError> {
        for marker in [ANALYSIS_MARKER, COUNTERFACTUAL_MARKER] {
            let n = self
                .output_format_spec
                .lines()
                .filter(|l| l.trim() == marker)
                .count();
            if n != 1 {
                return Err(ParError::Template(format!(
                    "output format spec must contain {marker} exactly once, found {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: String) -> Self {
        Self {
            role: role.into(),
            content,
        }
    }
}

pub fn build_instruction(
    template: &ParTemplate,
    user_prompt: &str,
) -> Result<Vec<ChatMessage>, ParError> {
    if user_prompt.trim().is_empty() {
        return Err(ParError::EmptyPrompt);
    }
    template.validate()?;
    let requirements: String = template
        .requirements
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}. {r}\n", i + 1))
        .collect();
    let system = format!(
        "{}\n\nRequirements:\n{requirements}\n{}\n\n{}",
        template.system_text, template.worked_example, template.output_format_spec
    );
    Ok(vec![
        ChatMessage::new("system", system),
        ChatMessage::new("user", format!("Input caption:\n{user_prompt}")),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicsAnalysis {
    pub entities: String,
    pub environment: String,
    pub interactions: String,
    pub temporal_evolution: String,
}

impl PhysicsAnalysis {
    fn fields(&self) -> [&str; 4] {
        [
            &self.entities,
            &self.environment,
            &self.interactions,
            &self.temporal_evolution,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub analysis: PhysicsAnalysis,
    pub counterfactual: String,
}

fn marker_line(lines: &[&str], marker: &str, from: usize) -> Option<usize> {
    lines[from..]
        .iter()
        .position(|l| l.trim() == marker)
        .map(|i| i + from)
}

/// Match `Label: value` at the start of a line, case-insensitively.
fn split_label(line: &str) -> Option<(usize, &str)> {
    let body = line.trim_start_matches(['-', '*', ' ', '\t']);
    SUBFIELD_LABELS.iter().enumerate().find_map(|(i, label)| {
        let head = body.get(..label.len())?;
        let rest = body[label.len()..].trim_start();
        (head.eq_ignore_ascii_case(label) && rest.starts_with(':')).then(|| (i, rest[1..].trim()))
    })
}

/// Extract the analysis and counterfactual sections. Errors name the first
/// missing marker or subfield.
pub fn parse_response(text: &str, template: &ParTemplate) -> Result<ParsedResponse, ParError> {
    template.validate()?;
    let lines: Vec<&str> = text.lines().collect();
    let missing = |what: &str| ParError::Format {
        missing: what.to_string(),
    };
    let a = marker_line(&lines, ANALYSIS_MARKER, 0).ok_or_else(|| missing(ANALYSIS_MARKER))?;
    let c = marker_line(&lines, COUNTERFACTUAL_MARKER, a + 1)
        .ok_or_else(|| missing(COUNTERFACTUAL_MARKER))?;

    let mut fields: [Option<String>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in &lines[a + 1..c] {
        if let Some((i, value)) = split_label(line) {
            fields[i] = Some(value.to_string());
            current = Some(i);
        } else if let (Some(i), false) = (current, line.trim().is_empty()) {
            let field = fields[i].get_or_insert_with(String::new);
            if !field.is_empty() {
                field.push('\n');
            }
            field.push_str(line.trim());
        }
    }
    let mut values = Vec::with_capacity(4);
    for (label, value) in SUBFIELD_LABELS.iter().zip(fields) {
        match value.map(|v| v.trim().to_string()) {
            Some(v) if !v.is_empty() => values.push(v),
            _ => return Err(missing(label)),
        }
    }

    let counterfactual = lines[c + 1..].join("\n").trim().to_string();
    if counterfactual.is_empty() {
        return Err(missing("counterfactual text"));
    }
    let mut values = values.into_iter();
    let mut next = || values.next().expect("four subfields");
    Ok(ParsedResponse {
        analysis: PhysicsAnalysis {
            entities: next(),
            environment: next(),
            interactions: next(),
            temporal_evolution: next(),
        },
        counterfactual,
    })
}

/// Inverse of [`parse_response`] for well-formed records.
pub fn render_response(analysis: &PhysicsAnalysis, counterfactual: &str) -> String {
    let mut out = String::new();
    out.push_str(ANALYSIS_MARKER);
    out.push('\n');
    for (label, value) in SUBFIELD_LABELS.iter().zip(analysis.fields()) {
        out.push_str(&format!("{label}: {value}\n"));
    }
    out.push_str(COUNTERFACTUAL_MARKER);
    out.push('\n');
    out.push_str(counterfactual);
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    /// Content hash of prompt and counterfactual; stable across runs.
    pub id: String,
    pub user_prompt: String,
    pub analysis: PhysicsAnalysis,
    pub counterfactual: String,
    pub model_id: String,
    pub template_version: String,
    pub created_at: DateTime<Utc>,
}

impl CounterfactualRecord {
    pub fn new(
        user_prompt: &str,
        parsed: ParsedResponse,
        model_id: &str,
        template_version: &str,
        created_at: DateTime<Utc>,
    ) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(user_prompt.as_bytes());
        hasher.update([0u8]);
        hasher.update(parsed.counterfactual.as_bytes());
        let id = hex::encode(hasher.finalize())[..16].to_string();
        Self {
            id,
            user_prompt: user_prompt.to_string(),
            analysis: parsed.analysis,
            counterfactual: parsed.counterfactual,
            model_id: model_id.to_string(),
            template_version: template_version.to_string(),
            created_at,
        }
    }

    pub fn render(&self) -> String {
        render_response(&self.analysis, &self.counterfactual)
    }
}

// ---------------------------------------------------------------------------
// Validation heuristics

const STOP_WORDS: &[&str] = &[
    "a",
    "about",
    "after",
    "all",
    "along",
    "also",
    "an",
    "and",
    "any",
    "are",
    "around",
    "as",
    "at",
    "be",
    "been",
    "before",
    "being",
    "between",
    "both",
    "but",
    "by",
    "can",
    "captures",
    "could",
    "during",
    "each",
    "even",
    "for",
    "from",
    "has",
    "have",
    "into",
    "its",
    "it",
    "itself",
    "more",
    "most",
    "of",
    "on",
    "onto",
    "or",
    "over",
    "revealing",
    "shows",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "them",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "under",
    "up",
    "upon",
    "very",
    "was",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "will",
    "with",
    "within",
    "would",
];

/// Phrases that signal a deliberate physical violation.
const VIOLATION_MARKERS: &[&str] = &[
    "without",
    "no",
    "not",
    "never",
    "none",
    "instead",
    "instantly",
    "immediately",
    "from the start",
    "from the beginning",
    "rather than",
    "fails",
    "refuses",
    "remains",
    "unchanged",
    "stays",
    "suddenly",
    "defying",
    "despite",
    "reverses",
    "backwards",
    "shrinks",
    "motionless",
];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn stem(word: &str) -> String {
    if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

/// Lowercased content words with stop-words removed and plurals folded.
pub fn content_words(text: &str) -> BTreeSet<String> {
    words(text)
        .into_iter()
        .filter(|w| w.len() > 2 && !STOP_WORDS.contains(&w.as_str()))
        .map(|w| stem(&w))
        .collect()
}

fn normalized(text: &str) -> String {
    words(text).join(" ")
}

fn violation_markers_in(text: &str) -> Vec<&'static str> {
    let padded = format!(" {} ", normalized(text));
    VIOLATION_MARKERS
        .iter()
        .copied()
        .filter(|m| padded.contains(&format!(" {m} ")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOptions {
    /// Minimum number of content words shared by prompt and counterfactual.
    pub min_shared_entities: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            min_shared_entities: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failure_reasons(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.reason))
            .collect()
    }
}

pub fn validate_record(rec: &CounterfactualRecord, opts: &ValidationOptions) -> ValidationReport {
    let prompt_words = content_words(&rec.user_prompt);
    let cf_words = content_words(&rec.counterfactual);
    let shared: Vec<&String> = prompt_words.intersection(&cf_words).collect();
    let fresh: Vec<&String> = cf_words.difference(&prompt_words).collect();

    let overlap = Check {
        name: "entity_overlap".into(),
        passed: shared.len() >= opts.min_shared_entities,
        reason: if shared.is_empty() {
            "counterfactual shares no content words with the prompt".into()
        } else {
            format!(
                "{} shared content word(s): {}",
                shared.len(),
                shared
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        },
    };

    let markers = violation_markers_in(&rec.counterfactual);
    let violation = Check {
        name: "violation_marker".into(),
        passed: !markers.is_empty() || !fresh.is_empty(),
        reason: if !markers.is_empty() {
            format!("violation markers: {}", markers.join(", "))
        } else if !fresh.is_empty() {
            format!("{} new content word(s) beyond the prompt", fresh.len())
        } else {
            "counterfactual is a restatement with no violation markers".into()
        },
    };

    let repeated = normalized(&rec.counterfactual) == normalized(&rec.user_prompt)
        || (cf_words == prompt_words && markers.is_empty());
    let non_repetition = Check {
        name: "non_repetition".into(),
        passed: !repeated,
        reason: if repeated {
            "counterfactual repeats the user prompt".into()
        } else {
            "counterfactual differs from the user prompt".into()
        },
    };

    let checks = vec![overlap, violation, non_repetition];
    let passed = checks.iter().all(|c| c.passed);
    ValidationReport { checks, passed }
}

// ---------------------------------------------------------------------------
// Transport

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Re-query the model when a reply violates the format.
    #[serde(default)]
    pub retry_on_format: bool,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

fn default_temperature() -> f64 {
    0.7
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            model: "unspecified".into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            temperature: default_temperature(),
            retry_on_format: false,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<(), ParError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ParError::Endpoint(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.base_url.trim().is_empty() {
            return Err(ParError::Endpoint("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.base_url.trim_end_matches('/')
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    /// Raw text of the first choice's message.
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// OpenAI-compatible `POST {base_url}/v1/chat/completions`.
pub struct HttpTransport {
    url: String,
    api_key_env: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(cfg: &LlmEndpointConfig) -> Result<Self, ParError> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            url: cfg.completions_url(),
            api_key_env: cfg.api_key_env.clone(),
            agent,
        })
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl Transport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Ok(key) = std::env::var(&self.api_key_env) {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| TransportError(format!("POST {}: {e}", self.url)))?;
        let body: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError(format!("decoding response: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError("response has no message content".into()))
    }
}

/// Canned responses for offline runs and tests.
pub struct MockTransport {
    mode: MockMode,
    calls: AtomicUsize,
}

enum MockMode {
    Fixed(String),
    Failing(String),
    Scripted(Mutex<VecDeque<Result<String, String>>>),
    /// `(prompt, response)`; a `None` prompt matches anything.
    Fixtures(Vec<(Option<String>, String)>),
}

/// Header line that binds a fixture file to a prompt.
pub const FIXTURE_PROMPT_HEADER: &str = "# prompt:";

impl MockTransport {
    fn with(mode: MockMode) -> Self {
        Self {
            mode,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self::with(MockMode::Fixed(text.into()))
    }

    pub fn failing(message: impl Into<String>) -> Self {
        Self::with(MockMode::Failing(message.into()))
    }

    /// Replies in order; `Err` entries simulate transport failures.
    pub fn scripted(replies: impl IntoIterator<Item = Result<String, String>>) -> Self {
        Self::with(MockMode::Scripted(Mutex::new(
            replies.into_iter().collect(),
        )))
    }

    /// Load every `*.txt` in `dir`. A file may start with
    /// `# prompt: <text>` to answer only requests containing that prompt.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, ParError> {
        let dir = dir.as_ref();
        let store_err = |e: std::io::Error| ParError::Store {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(store_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        let fixtures = paths
            .iter()
            .map(|p| std::fs::read_to_string(p).map(|text| parse_fixture(&text)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(store_err)?;
        Ok(Self::with(MockMode::Fixtures(fixtures)))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Split an optional prompt header from a fixture body.
pub fn parse_fixture(text: &str) -> (Option<String>, String) {
    match text.split_once('\n') {
        Some((first, rest)) if first.trim_start().starts_with(FIXTURE_PROMPT_HEADER) => {
            let prompt = first.trim_start()[FIXTURE_PROMPT_HEADER.len()..].trim();
            (Some(prompt.to_string()), rest.to_string())
        }
        _ => (None, text.to_string()),
    }
}

impl Transport for MockTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.mode {
            MockMode::Fixed(text) => Ok(text.clone()),
            MockMode::Failing(msg) => Err(TransportError(msg.clone())),
            MockMode::Scripted(queue) => queue
                .lock()
                .expect("mock queue poisoned")
                .pop_front()
                .unwrap_or_else(|| Err("script exhausted".into()))
                .map_err(TransportError),
            MockMode::Fixtures(fixtures) => {
                let user = request
                    .messages
                    .iter()
                    .rev()
                    .find(|m| m.role == "user")
                    .map(|m| m.content.as_str())
                    .unwrap_or_default();
                fixtures
                    .iter()
                    .find(|(p, _)| p.as_deref().is_some_and(|p| user.contains(p)))
                    .or_else(|| fixtures.iter().find(|(p, _)| p.is_none()))
                    .map(|(_, body)| body.clone())
                    .ok_or_else(|| TransportError("no fixture matches the prompt".into()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub record: CounterfactualRecord,
    pub reasons: Vec<String>,
}

/// Append-only JSON-lines corpus with a quarantine file next to it.
pub struct CorpusStore {
    corpus: PathBuf,
    quarantine: PathBuf,
    lock: Mutex<()>,
}

impl CorpusStore {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        let corpus = corpus.into();
        let stem = corpus
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        let quarantine = corpus.with_file_name(format!("{stem}.quarantine.jsonl"));
        Self {
            corpus,
            quarantine,
            lock: Mutex::new(()),
        }
    }

    pub fn corpus_path(&self) -> &Path {
        &self.corpus
    }

    pub fn quarantine_path(&self) -> &Path {
        &self.quarantine
    }

    fn append<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), ParError> {
        let err = |message: String| ParError::Store {
            path: path.display().to_string(),
            message,
        };
        let line = serde_json::to_string(value).map_err(|e| err(e.to_string()))?;
        let _guard = self.lock.lock().expect("store lock poisoned");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| err(e.to_string()))
    }

    pub fn append_record(&self, rec: &CounterfactualRecord) -> Result<(), ParError> {
        self.append(&self.corpus, rec)
    }

    pub fn quarantine(&self, entry: &QuarantineEntry) -> Result<(), ParError> {
        self.append(&self.quarantine, entry)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<CounterfactualRecord>, ParError> {
        let path = path.as_ref();
        let err = |message: String| ParError::Store {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| err(e.to_string())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Pipeline

pub type Clock = Box<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// build -> call (with transport retries) -> parse -> validate -> persist.
pub struct Pipeline {
    pub endpoint: LlmEndpointConfig,
    pub template: ParTemplate,
    pub validation: ValidationOptions,
    transport: Box<dyn Transport>,
    store: Option<CorpusStore>,
    clock: Clock,
}

impl Pipeline {
    pub fn new(
        endpoint: LlmEndpointConfig,
        template: ParTemplate,
        transport: Box<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            template,
            validation: ValidationOptions::default(),
            transport,
            store: None,
            clock: Box::new(Utc::now),
        }
    }

    pub fn with_store(mut self, store: CorpusStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_validation(mut self, validation: ValidationOptions) -> Self {
        self.validation = validation;
        self
    }

    pub fn store(&self) -> Option<&CorpusStore> {
        self.store.as_ref()
    }

    fn call_with_retries(&self, request: &ChatRequest) -> Result<String, ParError> {
        let attempts = 1 + self.endpoint.max_retries as usize;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && self.endpoint.backoff_ms > 0 {
                let delay = self
                    .endpoint
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.transport.complete(request) {
                Ok(text) => return Ok(text),
                Err(e) => last = e.0,
            }
        }
        Err(ParError::Transport {
            attempts,
            message: last,
        })
    }

    pub fn generate(&self, user_prompt: &str) -> Result<CounterfactualRecord, ParError> {
        self.endpoint.validate()?;
        let request = ChatRequest {
            model: self.endpoint.model.clone(),
            messages: build_instruction(&self.template, user_prompt)?,
            temperature: self.endpoint.temperature,
        };
        let format_attempts = if self.endpoint.retry_on_format {
            1 + self.endpoint.max_retries as usize
        } else {
            1
        };
        let mut parsed = None;
        let mut last_err = None;
        for _ in 0..format_attempts {
            let text = self.call_with_retries(&request)?;
            match parse_response(&text, &self.template) {
                Ok(p) => {
                    parsed = Some(p);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let parsed = match parsed {
            Some(p) => p,
            None => return Err(last_err.expect("at least one attempt")),
        };

        let record = CounterfactualRecord::new(
            user_prompt.trim(),
            parsed,
            &self.endpoint.model,
            &self.template.version,
            (self.clock)(),
        );
        let report = validate_record(&record, &self.validation);
        if !report.passed {
            if let Some(store) = &self.store {
                store.quarantine(&QuarantineEntry {
                    record,
                    reasons: report.failure_reasons(),
                })?;
            }
            return Err(ParError::Validation { report });
        }
        if let Some(store) = &self.store {
            store.append_record(&record)?;
        }
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analysis() -> PhysicsAnalysis {
        PhysicsAnalysis {
            entities: "ice cube, glass of water".into(),
            environment: "room temperature kitchen".into(),
            interactions: "heat flows from the water into the ice".into(),
            temporal_evolution: "the ice shrinks and melts over minutes".into(),
        }
    }

    fn record(prompt: &str, cf: &str) -> CounterfactualRecord {
        CounterfactualRecord::new(
            prompt,
            ParsedResponse {
                analysis: analysis(),
                counterfactual: cf.into(),
            },
            "mock",
            TEMPLATE_VERSION,
            DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
        )
    }

    #[test]
    fn default_template_is_valid() {
        ParTemplate::default().validate().unwrap();
        let bad = ParTemplate {
            output_format_spec: "just write something".into(),
            ..ParTemplate::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn instruction_embeds_prompt_and_format_once() {
        let t = ParTemplate::default();
        let msgs = build_instruction(&t, "An ice cube floats in a glass of water.").unwrap();
        let all: String = msgs
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        assert!(all.contains("An ice cube floats in a glass of water."));
        assert_eq!(all.matches(&t.output_format_spec).count(), 1);
        for r in &t.requirements {
            assert!(all.contains(r.as_str()));
        }
        assert!(matches!(
            build_instruction(&t, "  "),
            Err(ParError::EmptyPrompt)
        ));
    }

    #[test]
    fn parse_tolerates_bullets_case_and_continuations() {
        let text = "Sure, here it is.\n[ANALYSIS]\n- entities: ice\n  cube\n* ENVIRONMENT : kitchen\nInteractions: heat\nTemporal evolution: melts\n\n[COUNTERFACTUAL]\n  The ice grows.  \n";
        let p = parse_response(text, &ParTemplate::default()).unwrap();
        assert_eq!(p.analysis.entities, "ice\ncube");
        assert_eq!(p.analysis.environment, "kitchen");
        assert_eq!(p.counterfactual, "The ice grows.");
    }

    #[test]
    fn parse_names_first_missing_piece() {
        let t = ParTemplate::default();
        let missing = |text: &str| match parse_response(text, &t) {
            Err(ParError::Format { missing }) => missing,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(missing("no sections"), ANALYSIS_MARKER);
        assert_eq!(missing("[ANALYSIS]\nEntities: a"), COUNTERFACTUAL_MARKER);
        assert_eq!(
            missing("[ANALYSIS]\nEntities: a\nInteractions: b\n[COUNTERFACTUAL]\nx"),
            "Environment"
        );
        assert_eq!(
            missing("[ANALYSIS]\nEntities: a\nEnvironment: b\nInteractions: c\nTemporal evolution: d\n[COUNTERFACTUAL]\n \n"),
            "counterfactual text"
        );
        assert_eq!(
            missing("[ANALYSIS]\nEntities:\nEnvironment: b\nInteractions: c\nTemporal evolution: d\n[COUNTERFACTUAL]\nx"),
            "Entities"
        );
    }

    #[test]
    fn render_parse_roundtrip() {
        let rec = record(
            "An ice cube floats in water.",
            "The ice cube sinks like a stone.",
        );
        let parsed = parse_response(&rec.render(), &ParTemplate::default()).unwrap();
        assert_eq!(parsed.analysis, rec.analysis);
        assert_eq!(parsed.counterfactual, rec.counterfactual);
    }

    #[test]
    fn validation_flags_repetition_and_missing_overlap() {
        let opts = ValidationOptions::default();
        let prompt = "An ice cube floats in a glass of water.";
        let same = validate_record(&record(prompt, prompt), &opts);
        assert!(!same.passed);
        assert!(!same.check("non_repetition").unwrap().passed);

        let unrelated = validate_record(
            &record(prompt, "A dragon breathes fire over mountains."),
            &opts,
        );
        assert!(!unrelated.check("entity_overlap").unwrap().passed);
        assert!(!unrelated.passed);

        let good = validate_record(
            &record(
                prompt,
                "The ice cube sinks instantly to the bottom of the glass instead of floating.",
            ),
            &opts,
        );
        assert!(good.passed, "{:?}", good.failure_reasons());
    }

    #[test]
    fn content_words_fold_plurals_and_drop_stopwords() {
        let w = content_words("The droplets on the glass surfaces");
        assert!(w.contains("droplet") && w.contains("glass") && w.contains("surface"));
        assert!(!w.contains("the"));
    }

    #[test]
    fn fixture_header() {
        let (p, body) = parse_fixture("# prompt: hello there\n[ANALYSIS]\n");
        assert_eq!(p.as_deref(), Some("hello there"));
        assert_eq!(body, "[ANALYSIS]\n");
        assert_eq!(parse_fixture("[ANALYSIS]").0, None);
    }

    #[test]
    fn record_id_is_content_hash() {
        let a = record("p", "c");
        let b = record("p", "c");
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, record("p", "d").id);
        assert_eq!(a.id.len(), 16);
    }
}
