//! Knowledge identification: turn a handful of error samples into a prompt
//! for an expert judge model and read candidate knowledge types back out of
//! its reply.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{KsodError, Result};

/// Number of error samples shown to the judge by default.
pub const DEFAULT_SAMPLE_COUNT: usize = 4;
pub const API_KEY_ENV: &str = "KSOD_JUDGE_API_KEY";

const ANALYZE_PREFIX: &str = "Please analyze the errors that arise in output of";
const STEP_BY_STEP: &str =
    "Firstly, provide a step-by-step analysis for the common characteristics of the errors from all samples.";
const IDENTIFY: &str =
    "Next, identify the potential knowledge lacking in LLM that may have led to these errors.";
const MARKER_INSTRUCTION: &str =
    "Report each knowledge type on its own line, starting with \"Knowledge Type:\".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub input: String,
    /// The correct reference.
    pub target: String,
    /// The erroneous model output.
    pub output: String,
}

impl ErrorSample {
    pub fn new(input: impl Into<String>, target: impl Into<String>, output: impl Into<String>) -> Result<Self> {
        let s = ErrorSample {
            input: input.into(),
            target: target.into(),
            output: output.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("input", &self.input), ("target", &self.target), ("output", &self.output)] {
            if v.is_empty() {
                return Err(KsodError::Input(format!("error sample has an empty {field}")));
            }
        }
        Ok(())
    }
}

/// Backslashes and line breaks are escaped so every sample stays on its own
/// three lines.
fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Builds the identification prompt: task definition, the analysis request,
/// one numbered block per sample, then the two closing instructions.
pub fn build_prompt(task_definition: &str, task_name: &str, samples: &[ErrorSample]) -> Result<String> {
    if samples.is_empty() {
        return Err(KsodError::Input("at least one error sample is required".into()));
    }
    for s in samples {
        s.validate()?;
    }
    let mut out = String::new();
    let definition = task_definition.trim();
    if !definition.is_empty() {
        out.push_str(definition);
        out.push(' ');
    }
    writeln!(out, "{ANALYZE_PREFIX} {task_name} task in the given samples.").unwrap();
    for (i, s) in samples.iter().enumerate() {
        writeln!(out, "Example {}:", i + 1).unwrap();
        writeln!(out, "Input: {}", escape_field(&s.input)).unwrap();
        writeln!(out, "Target: {}", escape_field(&s.target)).unwrap();
        writeln!(out, "Output: {}", escape_field(&s.output)).unwrap();
    }
    writeln!(out, "{STEP_BY_STEP}").unwrap();
    writeln!(out, "{IDENTIFY}").unwrap();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeCandidate {
    pub name: String,
    pub rationale: String,
    pub source_judge: String,
}

fn is_markup(b: u8) -> bool {
    matches!(b, b'*' | b'_' | b'`' | b'}' | b'{' | b'#' | b'>' | b' ' | b'\t')
}

/// Extracts every `Knowledge Type: <name>` marker. Matching ignores case
/// and tolerates markdown/LaTeX emphasis around the label. The name runs to
/// the end of its line (or its first sentence); the rationale is the text
/// up to the next marker.
pub fn parse_candidates(response: &str) -> Vec<KnowledgeCandidate> {
    const LABEL: &str = "knowledge type";
    let lower = response.to_ascii_lowercase();
    let bytes = response.as_bytes();
    // (marker start, name start, name end)
    let mut markers = Vec::new();
    let mut from = 0;
    while let Some(pos) = lower[from..].find(LABEL) {
        let start = from + pos;
        from = start + LABEL.len();
        let mut i = from;
        while i < bytes.len() && is_markup(bytes[i]) && bytes[i] != b'\n' {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] != b':' {
            continue;
        }
        i += 1;
        while i < bytes.len() && is_markup(bytes[i]) {
            i += 1;
        }
        let line_end = response[i..].find('\n').map_or(response.len(), |p| i + p);
        let line = &response[i..line_end];
        let name_end = line.find(". ").map_or(line_end, |p| i + p + 1);
        let name = response[i..name_end]
            .trim_end_matches(|c: char| c == '.' || c.is_whitespace() || c.is_ascii() && is_markup(c as u8))
            .trim();
        if name.is_empty() {
            continue;
        }
        markers.push((start, i, i + name.len(), name_end));
        from = name_end;
    }
    markers
        .iter()
        .enumerate()
        .map(|(k, &(_, name_start, name_stop, name_end))| {
            let next = markers.get(k + 1).map_or(response.len(), |m| m.0);
            KnowledgeCandidate {
                name: response[name_start..name_stop].to_string(),
                rationale: response[name_end..next].trim().to_string(),
                source_judge: String::new(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JudgeClient {
    /// Replays a recorded reply from a UTF-8 file.
    FileFixture { fixture: PathBuf },
    /// POSTs `{"model", "prompt"}` as JSON and reads the reply's `text`.
    HttpEndpoint {
        endpoint: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_retries() -> u32 {
    2
}

fn default_timeout() -> u64 {
    60
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct JudgeReply {
    text: String,
}

impl JudgeClient {
    pub fn fixture(path: impl Into<PathBuf>) -> Self {
        JudgeClient::FileFixture {
            fixture: path.into(),
        }
    }

    /// Short label recorded as each candidate's source.
    pub fn label(&self) -> String {
        match self {
            JudgeClient::FileFixture { fixture } => format!(
                "fixture:{}",
                fixture.file_name().unwrap_or(fixture.as_os_str()).to_string_lossy()
            ),
            JudgeClient::HttpEndpoint { model, .. } => model.clone(),
        }
    }

    /// Relative fixture paths are taken relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let JudgeClient::FileFixture { fixture } = self {
            if fixture.is_relative() {
                *fixture = base.join(&*fixture);
            }
        }
    }

    pub fn query(&self, prompt: &str) -> Result<String> {
        match self {
            JudgeClient::FileFixture { fixture } => {
                fs::read_to_string(fixture).map_err(|e| KsodError::io(fixture, e))
            }
            JudgeClient::HttpEndpoint {
                endpoint,
                model,
                api_key_env,
                retries,
                timeout_secs,
            } => {
                let prompt = format!("{prompt}{MARKER_INSTRUCTION}\n");
                let key = std::env::var(api_key_env).ok();
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(*timeout_secs)))
                    .build()
                    .into();
                let body = JudgeRequest {
                    model,
                    prompt: &prompt,
                };
                let attempts = retries + 1;
                let mut last_error = String::new();
                for _ in 0..attempts {
                    let mut req = agent.post(endpoint.as_str());
                    if let Some(k) = &key {
                        req = req.header("Authorization", &format!("Bearer {k}"));
                    }
                    match req.send_json(&body) {
                        Ok(mut resp) => match resp.body_mut().read_json::<JudgeReply>() {
                            Ok(reply) => return Ok(reply.text),
                            Err(e) => last_error = format!("malformed reply: {e}"),
                        },
                        Err(e) => last_error = e.to_string(),
                    }
                }
                Err(KsodError::Transport {
                    attempts,
                    message: last_error,
                })
            }
        }
    }
}

/// Builds the prompt, queries the judge and parses its reply.
pub fn identify(
    client: &JudgeClient,
    task_definition: &str,
    task_name: &str,
    samples: &[ErrorSample],
) -> Result<Vec<KnowledgeCandidate>> {
    let prompt = build_prompt(task_definition, task_name, samples)?;
    let reply = client.query(&prompt)?;
    let label = client.label();
    Ok(parse_candidates(&reply)
        .into_iter()
        .map(|mut c| {
            c.source_judge = label.clone();
            c
        })
        .collect())
}

/// Candidate name → dataset path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateMapping {
    pub entries: BTreeMap<String, PathBuf>,
}

impl CandidateMapping {
    /// Loads the JSON mapping; relative dataset paths are resolved against
    /// the mapping file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| KsodError::io(path, e))?;
        let mut mapping: CandidateMapping = serde_json::from_str(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in mapping.entries.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(mapping)
    }

    /// Exact match first, then a case-insensitive one.
    pub fn resolve(&self, name: &str) -> Option<&Path> {
        self.entries
            .get(name)
            .or_else(|| {
                self.entries
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case(name.trim()))
                    .map(|(_, v)| v)
            })
            .map(PathBuf::as_path)
    }
}
