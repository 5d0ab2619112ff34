//! Word-by-word decoding. The model sees source words one at a time and may
//! only append to what it has already emitted.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::{call_with_retry, ChatClient, ChatMessage, DecodingConfig, RetryPolicy};
use super::prompt::{render_prompt, PromptMode, PromptSpec, SENTINEL};
use crate::actions::{validate_trace, Action, ActionStep, ActionTrace};
use crate::error::Result;
use crate::profile::LangProfile;

/// One parsed model reply.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReply {
    pub action: Option<Action>,
    /// Incremental fragment.
    pub output: Option<String>,
    /// Cumulative translation, if the model restated it.
    pub translation: Option<String>,
    pub final_translation: Option<String>,
    pub span: Option<(usize, usize)>,
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum FailureReason {
    Sentinel,
    PrefixRewrite,
    Unparseable(String),
    StepInvalid(String),
    FinalMismatch,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::Sentinel => write!(f, "model emitted {SENTINEL}"),
            FailureReason::PrefixRewrite => f.write_str("model rewrote committed output"),
            FailureReason::Unparseable(m) => write!(f, "unparseable reply: {m}"),
            FailureReason::StepInvalid(m) => write!(f, "invalid step: {m}"),
            FailureReason::FinalMismatch => {
                f.write_str("final translation does not extend the committed output")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FeedStatus {
    Completed,
    /// `step` is 1-based; the trace holds the steps before it.
    Failed { step: usize, reason: FailureReason },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixFeedRun {
    pub trace: ActionTrace,
    pub status: FeedStatus,
    pub requests: usize,
}

impl PrefixFeedRun {
    pub fn is_complete(&self) -> bool {
        self.status == FeedStatus::Completed
    }
}

/// User turn for step `step` (1-based): the prefix so far and what has
/// already been committed.
pub fn step_user_message(step: usize, prefix: &[String], complete: bool, emitted: &str) -> String {
    json!({
        "step": step,
        "prefix": prefix.join(" "),
        "complete": complete,
        "emitted": emitted,
    })
    .to_string()
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn non_empty(v: Option<&Value>) -> Option<String> {
    v.and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
}

/// Parses a strict JSON reply, falling back to `key: value` lines.
pub fn parse_step_reply(text: &str) -> std::result::Result<StepReply, String> {
    let body = strip_fences(text);
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(body) {
        let action = match map.get("action").and_then(Value::as_str) {
            Some(a) => Some(a.trim().parse::<Action>().map_err(|e| e.to_string())?),
            None => None,
        };
        let span = match map.get("span") {
            Some(Value::Array(v)) if v.len() == 2 => match (v[0].as_u64(), v[1].as_u64()) {
                (Some(a), Some(b)) => Some((a as usize, b as usize)),
                _ => return Err("span must be two integers".into()),
            },
            Some(Value::Null) | None => None,
            Some(_) => return Err("span must be two integers".into()),
        };
        return Ok(StepReply {
            action,
            output: non_empty(map.get("output").or_else(|| map.get("out"))),
            translation: non_empty(map.get("translation")),
            final_translation: non_empty(map.get("final")),
            span,
            explanation: non_empty(map.get("why").or_else(|| map.get("explanation"))),
        });
    }

    let mut reply = StepReply::default();
    let mut any = false;
    for line in body.lines() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim().trim_start_matches(['-', '*', ' ']).to_ascii_lowercase().as_str() {
            "action" => {
                reply.action = Some(value.parse::<Action>().map_err(|e| e.to_string())?);
                any = true;
            }
            "output" | "translation" if !value.is_empty() => {
                reply.output = Some(value.to_owned());
                any = true;
            }
            "final" if !value.is_empty() => {
                reply.final_translation = Some(value.to_owned());
                any = true;
            }
            _ => {}
        }
    }
    if any {
        Ok(reply)
    } else {
        Err(format!("no action found in {:?}", truncate(text, 80)))
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// What `emitted` would become after appending `frag`.
fn appended(profile: LangProfile, emitted: &str, frag: &str) -> String {
    let mut s = emitted.to_owned();
    profile.append_fragment(&mut s, frag);
    s
}

/// The part of `full` past `emitted`, if `full` extends it.
fn extension<'a>(profile: LangProfile, emitted: &str, full: &'a str) -> Option<&'a str> {
    let rest = full.strip_prefix(emitted)?;
    Some(match profile {
        LangProfile::CharacterZh => rest,
        LangProfile::SpaceTokenized => rest.trim_start(),
    })
}

/// Drives one sentence through the endpoint, one source word per request.
/// Endpoint failures are errors; model misbehavior ends the run with a
/// `Failed` status and keeps the steps before it.
pub fn run_prefix_feed(
    sentence_id: &str,
    words: &[String],
    spec: &PromptSpec,
    client: &dyn ChatClient,
    decoding: &DecodingConfig,
    profile: LangProfile,
    retry: &RetryPolicy,
) -> Result<PrefixFeedRun> {
    let system = render_prompt(spec, PromptMode::PrefixFeed)?;
    let mut messages = vec![ChatMessage::system(system)];
    let mut steps: Vec<ActionStep> = Vec::new();
    let mut emitted = String::new();
    let mut requests = 0;

    let finish = |steps: Vec<ActionStep>, emitted: String, status, requests| PrefixFeedRun {
        trace: ActionTrace {
            sentence_id: sentence_id.to_owned(),
            steps,
            final_translation: emitted,
        },
        status,
        requests,
    };

    for t in 1..=words.len() {
        let complete = t == words.len();
        let user = step_user_message(t, &words[..t], complete, &emitted);
        messages.push(ChatMessage::user(user));
        let request = decoding.request(messages.clone());
        let text = call_with_retry(client, &request, retry)?;
        requests += 1;
        messages.push(ChatMessage::assistant(text.clone()));

        let fail = |reason| FeedStatus::Failed { step: t, reason };
        if text.contains(SENTINEL) {
            return Ok(finish(steps, emitted, fail(FailureReason::Sentinel), requests));
        }
        let reply = match parse_step_reply(&text) {
            Ok(r) => r,
            Err(m) => return Ok(finish(steps, emitted, fail(FailureReason::Unparseable(m)), requests)),
        };
        let Some(action) = reply.action else {
            let reason = FailureReason::Unparseable("reply has no action".into());
            return Ok(finish(steps, emitted, fail(reason), requests));
        };

        // a restated cumulative translation must extend what was committed
        let mut output = reply.output.clone();
        if let Some(cum) = &reply.translation {
            match extension(profile, &emitted, cum) {
                None => return Ok(finish(steps, emitted, fail(FailureReason::PrefixRewrite), requests)),
                Some(rest) if output.is_none() && !rest.is_empty() => output = Some(rest.to_owned()),
                Some(rest) => {
                    if let Some(o) = &output {
                        if appended(profile, &emitted, o) != *cum && rest != o {
                            let reason = FailureReason::PrefixRewrite;
                            return Ok(finish(steps, emitted, fail(reason), requests));
                        }
                    }
                }
            }
        }

        let mut step = ActionStep::new(t, words[t - 1].clone(), action);
        step.explanation = reply.explanation.clone();
        if let Some((a, b)) = reply.span {
            step = step.with_drop_span(a, b);
        }
        if let Some(o) = output {
            step = step.with_output(o);
        }

        let mut next = emitted.clone();
        if action.emits() {
            if let Some(frag) = step.fragment() {
                next = appended(profile, &emitted, frag);
            }
        }

        if complete {
            if let Some(fin) = &reply.final_translation {
                match extension(profile, &next, fin) {
                    None => return Ok(finish(steps, emitted, fail(FailureReason::FinalMismatch), requests)),
                    Some("") => {}
                    Some(rest) => {
                        // the closing commit happens with the whole source in view
                        if action.emits() {
                            let mut frag = step.output.clone().unwrap_or_default();
                            profile.append_fragment(&mut frag, rest);
                            step.output = Some(frag);
                        } else if action == Action::Read {
                            step.action = Action::Write;
                            step.output = Some(rest.to_owned());
                        } else {
                            let reason = FailureReason::StepInvalid(format!(
                                "{action} at the last step cannot carry the final output"
                            ));
                            return Ok(finish(steps, emitted, fail(reason), requests));
                        }
                        next = appended(profile, &next, rest);
                    }
                }
            }
        }

        let mut candidate = steps.clone();
        candidate.push(step);
        let probe = ActionTrace {
            sentence_id: sentence_id.to_owned(),
            steps: candidate,
            final_translation: next.clone(),
        };
        let verdict = validate_trace(&probe, &words[..t], profile);
        if !verdict.is_ok() {
            let reason = FailureReason::StepInvalid(verdict.to_string());
            return Ok(finish(steps, emitted, fail(reason), requests));
        }
        steps = probe.steps;
        emitted = next;
    }

    Ok(finish(steps, emitted, FeedStatus::Completed, requests))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_driver::client::{ChatRequest, ClientError};
    use std::sync::Mutex;

    struct Scripted(Mutex<Vec<String>>);

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Scripted(Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()))
        }
    }

    impl ChatClient for Scripted {
        fn complete(&self, _: &ChatRequest) -> std::result::Result<String, ClientError> {
            self.0.lock().unwrap().pop().ok_or_else(|| ClientError::fatal("script exhausted"))
        }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn run(replies: &[&str], src: &str) -> PrefixFeedRun {
        let spec = PromptSpec::new("en", "zh");
        run_prefix_feed(
            "s1",
            &words(src),
            &spec,
            &Scripted::new(replies),
            &DecodingConfig::default(),
            LangProfile::CharacterZh,
            &RetryPolicy::immediate(1),
        )
        .unwrap()
    }

    #[test]
    fn parses_json_and_fenced_json() {
        let r = parse_step_reply("```json\n{\"action\": \"write\", \"output\": \"我们\"}\n```").unwrap();
        assert_eq!(r.action, Some(Action::Write));
        assert_eq!(r.output.as_deref(), Some("我们"));
        let r = parse_step_reply("{\"action\":\"READ\"}").unwrap();
        assert_eq!(r.action, Some(Action::Read));
        assert_eq!(r.output, None);
    }

    #[test]
    fn parses_line_format() {
        let r = parse_step_reply("Action: PRONOUN\nOutput: 将其").unwrap();
        assert_eq!(r.action, Some(Action::Pronominalization));
        assert_eq!(r.output.as_deref(), Some("将其"));
        assert!(parse_step_reply("I am not sure").is_err());
        assert!(parse_step_reply("{\"action\": \"JUMP\"}").is_err());
    }

    #[test]
    fn completes_an_append_only_run() {
        let r = run(
            &[
                r#"{"action":"READ"}"#,
                r#"{"action":"WRITE","output":"我们设计"}"#,
                r#"{"action":"WRITE","output":"实验","final":"我们设计实验。"}"#,
            ],
            "we designed experiments",
        );
        assert!(r.is_complete(), "{:?}", r.status);
        assert_eq!(r.trace.final_translation, "我们设计实验。");
        assert_eq!(r.trace.steps[2].output.as_deref(), Some("实验。"));
        assert_eq!(r.requests, 3);
    }

    #[test]
    fn sentinel_keeps_earlier_steps() {
        let r = run(
            &[r#"{"action":"WRITE","output":"我们"}"#, "<VIOLATION>"],
            "we designed experiments",
        );
        assert_eq!(r.status, FeedStatus::Failed { step: 2, reason: FailureReason::Sentinel });
        assert_eq!(r.trace.steps.len(), 1);
        assert_eq!(r.trace.final_translation, "我们");
    }

    #[test]
    fn rewriting_committed_output_is_rejected() {
        let r = run(
            &[
                r#"{"action":"WRITE","output":"我们"}"#,
                r#"{"action":"WRITE","translation":"他们设计"}"#,
            ],
            "we designed experiments",
        );
        assert_eq!(r.status, FeedStatus::Failed { step: 2, reason: FailureReason::PrefixRewrite });
    }

    #[test]
    fn final_that_diverges_is_rejected() {
        let r = run(
            &[r#"{"action":"WRITE","output":"我们"}"#, r#"{"action":"READ","final":"你们好"}"#],
            "we designed",
        );
        assert_eq!(r.status, FeedStatus::Failed { step: 2, reason: FailureReason::FinalMismatch });
    }

    #[test]
    fn write_without_output_is_invalid() {
        let r = run(&[r#"{"action":"WRITE"}"#], "we");
        assert!(matches!(
            r.status,
            FeedStatus::Failed { step: 1, reason: FailureReason::StepInvalid(_) }
        ));
    }
}
