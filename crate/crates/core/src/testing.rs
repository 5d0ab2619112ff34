//! Fixture lookup and offline chat clients for tests and demos.

use std::path::PathBuf;
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::actions::Action;
use crate::llm_driver::{ChatClient, ChatRequest, ClientError};
use crate::profile::LangProfile;

/// Path of a file under the core crate's `fixtures/` directory.
pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

/// The prefix-feed step a request asks about.
#[derive(Debug, Clone, PartialEq)]
pub struct StepView {
    pub step: usize,
    pub prefix: Vec<String>,
    pub complete: bool,
    pub emitted: String,
}

impl StepView {
    pub fn from_request(request: &ChatRequest) -> Option<Self> {
        let last = request.messages.iter().rev().find(|m| m.role == "user")?;
        let v: Value = serde_json::from_str(&last.content).ok()?;
        Some(StepView {
            step: v.get("step")?.as_u64()? as usize,
            prefix: v
                .get("prefix")?
                .as_str()?
                .split_whitespace()
                .map(str::to_owned)
                .collect(),
            complete: v.get("complete")?.as_bool()?,
            emitted: v.get("emitted")?.as_str()?.to_owned(),
        })
    }

    pub fn current_word(&self) -> &str {
        self.prefix.last().map(String::as_str).unwrap_or("")
    }
}

fn bad_request() -> ClientError {
    ClientError::fatal("request is not a prefix-feed step")
}

/// Returns canned replies in order, ignoring the request.
pub struct ScriptedClient {
    replies: Mutex<Vec<String>>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        let mut v: Vec<String> = replies.into_iter().map(Into::into).collect();
        v.reverse();
        ScriptedClient { replies: Mutex::new(v) }
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, _: &ChatRequest) -> Result<String, ClientError> {
        self.replies
            .lock()
            .expect("script lock")
            .pop()
            .ok_or_else(|| ClientError::fatal("script exhausted"))
    }
}

/// Writes every incoming word, uppercased, as its own fragment.
pub struct GlossClient;

impl ChatClient for GlossClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let view = StepView::from_request(request).ok_or_else(bad_request)?;
        Ok(json!({ "action": "WRITE", "output": view.current_word().to_uppercase() }).to_string())
    }
}

/// Behaves like [`GlossClient`] until `from_step`, then restates a
/// cumulative translation that changes what was already committed.
pub struct RewritingClient {
    pub from_step: usize,
}

impl ChatClient for RewritingClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let view = StepView::from_request(request).ok_or_else(bad_request)?;
        if view.step < self.from_step {
            return GlossClient.complete(request);
        }
        let rewritten = format!("REVISED {}", view.prefix.join(" ").to_uppercase());
        Ok(json!({ "action": "WRITE", "translation": rewritten }).to_string())
    }
}

/// Emits the violation sentinel at `at_step`.
pub struct SentinelClient {
    pub at_step: usize,
}

impl ChatClient for SentinelClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let view = StepView::from_request(request).ok_or_else(bad_request)?;
        if view.step == self.at_step {
            Ok(crate::llm_driver::SENTINEL.into())
        } else {
            GlossClient.complete(request)
        }
    }
}

/// Reads the per-action lines from the system prompt.
pub fn parse_stats_lines(prompt: &str) -> Vec<(Action, f64, f64)> {
    prompt
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("- ")?;
            let (name, rest) = rest.split_once(" → AL ≈ ")?;
            let (al, bleu) = rest.split_once("s, BLEU ≈ ")?;
            Some((name.parse().ok()?, al.trim().parse().ok()?, bleu.trim().parse().ok()?))
        })
        .collect()
}

/// A model that takes the prompt statistics at face value: it commits with
/// whichever output-producing action reports the lowest AL, and waits for
/// roughly that many seconds of source (at `seconds_per_word`) between
/// commits. Without statistics it writes word by word with WRITE.
pub struct StatsObeyingClient {
    pub profile: LangProfile,
    pub seconds_per_word: f64,
}

impl StatsObeyingClient {
    pub fn new(profile: LangProfile) -> Self {
        StatsObeyingClient { profile, seconds_per_word: 0.3 }
    }

    fn policy(&self, request: &ChatRequest) -> (Action, usize) {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == "system")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        parse_stats_lines(system)
            .into_iter()
            .filter(|(a, _, _)| a.emits())
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(a, al, _)| (a, ((al / self.seconds_per_word).round() as usize).max(1)))
            .unwrap_or((Action::Write, 1))
    }
}

impl ChatClient for StatsObeyingClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let view = StepView::from_request(request).ok_or_else(bad_request)?;
        let (action, chunk) = self.policy(request);
        if view.step % chunk != 0 && !view.complete {
            return Ok(json!({ "action": "READ" }).to_string());
        }
        let from = (view.step - 1) / chunk * chunk;
        let words = &view.prefix[from..view.step];
        let fragment = self.profile.join_fragments(words);
        Ok(json!({ "action": action.short_name(), "output": fragment }).to_string())
    }
}
