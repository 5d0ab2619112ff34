//! The interpreter action space as a validated, replayable trace grammar.
//!
//! A trace consumes exactly one source word per step. At each step the
//! policy picks one action; emitting actions append an output fragment to the
//! target stream, which is prefix-monotonic: nothing emitted earlier may be
//! changed later.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::profile::LangProfile;
use crate::timeline::{Seconds, SourceTimeline, TargetEmissions, TimedWord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Read,
    Write,
    Drop,
    Cut,
    PartialSummarization,
    Pronominalization,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Read,
        Action::Write,
        Action::Drop,
        Action::Cut,
        Action::PartialSummarization,
        Action::Pronominalization,
    ];

    /// The four actions beyond READ/WRITE, in the order prompts list them.
    pub const EXTENDED: [Action; 4] = [
        Action::Drop,
        Action::PartialSummarization,
        Action::Cut,
        Action::Pronominalization,
    ];

    pub fn is_extended(self) -> bool {
        !matches!(self, Action::Read | Action::Write)
    }

    /// Whether the action appends a target fragment.
    pub fn emits(self) -> bool {
        !matches!(self, Action::Read | Action::Drop)
    }

    pub fn canonical_name(self) -> &'static str {
        match self {
            Action::Read => "READ",
            Action::Write => "WRITE",
            Action::Drop => "DROP",
            Action::Cut => "SENTENCE_CUT",
            Action::PartialSummarization => "PARTIAL_SUMMARIZATION",
            Action::Pronominalization => "PRONOMINALIZATION",
        }
    }

    /// Short name used in prompts and trace files.
    pub fn short_name(self) -> &'static str {
        match self {
            Action::Cut => "CUT",
            Action::Pronominalization => "PRONOUN",
            other => other.canonical_name(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace([' ', '-'], "_");
        Ok(match norm.as_str() {
            "READ" => Action::Read,
            "WRITE" => Action::Write,
            "DROP" => Action::Drop,
            "CUT" | "SENTENCE_CUT" => Action::Cut,
            "PARTIAL_SUMMARIZATION" => Action::PartialSummarization,
            "PRONOUN" | "PRONOMINALIZATION" => Action::Pronominalization,
            _ => return Err(Error::UnknownAction(s.to_owned())),
        })
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.short_name())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionStep {
    /// 1-based.
    pub step_index: usize,
    pub source_word: String,
    pub action: Action,
    pub output: Option<String>,
    pub explanation: Option<String>,
    /// Inclusive 1-based range of source words a DROP removes. `None` means
    /// the word consumed at this step.
    pub drop_span: Option<(usize, usize)>,
}

impl ActionStep {
    pub fn new(step_index: usize, source_word: impl Into<String>, action: Action) -> Self {
        ActionStep {
            step_index,
            source_word: source_word.into(),
            action,
            output: None,
            explanation: None,
            drop_span: None,
        }
    }

    pub fn with_output(mut self, out: impl Into<String>) -> Self {
        self.output = Some(out.into());
        self
    }

    pub fn with_explanation(mut self, why: impl Into<String>) -> Self {
        self.explanation = Some(why.into());
        self
    }

    pub fn with_drop_span(mut self, first: usize, last: usize) -> Self {
        self.drop_span = Some((first, last));
        self
    }

    /// The fragment if present and non-empty.
    pub fn fragment(&self) -> Option<&str> {
        self.output.as_deref().filter(|f| !f.is_empty())
    }

    pub fn dropped_range(&self) -> Option<(usize, usize)> {
        (self.action == Action::Drop).then(|| self.drop_span.unwrap_or((self.step_index, self.step_index)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrace {
    pub sentence_id: String,
    pub steps: Vec<ActionStep>,
    pub final_translation: String,
}

impl ActionTrace {
    pub fn source_words(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.source_word.clone()).collect()
    }

    pub fn fragments(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter(|s| s.action.emits())
            .filter_map(|s| s.fragment())
            .collect()
    }

    /// Fragments joined by the profile's rule.
    pub fn joined_output(&self, profile: LangProfile) -> String {
        profile.join_fragments(&self.fragments())
    }

    pub fn action_counts(&self) -> BTreeMap<Action, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.steps {
            *counts.entry(s.action).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    StepIndex { step: usize, found: usize },
    SourceMismatch { step: usize, expected: String, found: String },
    StepBeyondSource { step: usize },
    MissingSteps { step: usize, expected: usize },
    MultiWordStep { step: usize },
    FragmentOnRead { step: usize },
    FragmentOnDrop { step: usize },
    MissingFragment { step: usize, action: Action },
    DropSpanInvalid { step: usize, first: usize, last: usize },
    DropNotYetRead { step: usize, word: usize },
    PrefixBroken { step: usize },
    FinalMismatch { step: usize },
}

impl Violation {
    pub fn step(&self) -> usize {
        use Violation::*;
        match self {
            StepIndex { step, .. }
            | SourceMismatch { step, .. }
            | StepBeyondSource { step }
            | MissingSteps { step, .. }
            | MultiWordStep { step }
            | FragmentOnRead { step }
            | FragmentOnDrop { step }
            | MissingFragment { step, .. }
            | DropSpanInvalid { step, .. }
            | DropNotYetRead { step, .. }
            | PrefixBroken { step }
            | FinalMismatch { step } => *step,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            StepIndex { step, found } => write!(f, "step {step} is numbered {found}"),
            SourceMismatch { step, expected, found } => {
                write!(f, "step {step} consumes {found:?}, source word is {expected:?}")
            }
            StepBeyondSource { step } => write!(f, "step {step} is past the end of the source"),
            MissingSteps { step, expected } => {
                write!(f, "trace stops before step {step} of {expected}")
            }
            MultiWordStep { step } => write!(f, "step {step} consumes more than one word"),
            FragmentOnRead { step } => write!(f, "READ at step {step} carries output"),
            FragmentOnDrop { step } => write!(f, "DROP at step {step} carries output"),
            MissingFragment { step, action } => {
                write!(f, "{action} at step {step} has no output fragment")
            }
            DropSpanInvalid { step, first, last } => {
                write!(f, "DROP at step {step} has invalid span {first}..={last}")
            }
            DropNotYetRead { step, word } => {
                write!(f, "DROP at step {step} targets word {word}, not yet read")
            }
            PrefixBroken { step } => write!(f, "prefix-monotonicity broken at step {step}"),
            FinalMismatch { step } => {
                write!(f, "final translation does not equal the fragments (last step {step})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidTrace(self))
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks a trace against its source words. Violations are data: every one
/// found is listed with the step it concerns.
pub fn validate_trace(trace: &ActionTrace, source_words: &[String], profile: LangProfile) -> Verdict {
    let mut violations = Vec::new();

    for (pos, step) in trace.steps.iter().enumerate() {
        let t = pos + 1;
        if step.step_index != t {
            violations.push(Violation::StepIndex { step: t, found: step.step_index });
        }
        match source_words.get(pos) {
            None => violations.push(Violation::StepBeyondSource { step: t }),
            Some(expected) if *expected != step.source_word => {
                violations.push(Violation::SourceMismatch {
                    step: t,
                    expected: expected.clone(),
                    found: step.source_word.clone(),
                })
            }
            Some(_) => {}
        }
        if step.source_word.split_whitespace().count() != 1 {
            violations.push(Violation::MultiWordStep { step: t });
        }
        match step.action {
            Action::Read if step.fragment().is_some() => {
                violations.push(Violation::FragmentOnRead { step: t })
            }
            Action::Drop if step.fragment().is_some() => {
                violations.push(Violation::FragmentOnDrop { step: t })
            }
            a if a.emits() && step.fragment().is_none() => {
                violations.push(Violation::MissingFragment { step: t, action: a })
            }
            _ => {}
        }
        if step.action == Action::Drop {
            if let Some((first, last)) = step.drop_span {
                if first == 0 || first > last {
                    violations.push(Violation::DropSpanInvalid { step: t, first, last });
                } else if last > t {
                    violations.push(Violation::DropNotYetRead { step: t, word: last });
                }
            }
        }
    }
    if trace.steps.len() < source_words.len() {
        violations.push(Violation::MissingSteps {
            step: trace.steps.len() + 1,
            expected: source_words.len(),
        });
    }

    // Prefix monotonicity: the running output must stay a prefix of the final.
    let mut acc = String::new();
    let mut broken = false;
    for (pos, step) in trace.steps.iter().enumerate() {
        if let (true, Some(frag)) = (step.action.emits(), step.fragment()) {
            profile.append_fragment(&mut acc, frag);
            if !trace.final_translation.starts_with(&acc) {
                violations.push(Violation::PrefixBroken { step: pos + 1 });
                broken = true;
                break;
            }
        }
    }
    if !broken && acc != trace.final_translation {
        violations.push(Violation::FinalMismatch {
            step: trace.steps.len().max(1),
        });
    }

    Verdict { violations }
}

/// Turns a trace into unit emission times: every fragment is committed at the
/// end of the source word consumed at its step plus `compute_delay`.
pub fn replay_trace(
    trace: &ActionTrace,
    timeline: &SourceTimeline,
    compute_delay: Seconds,
    profile: LangProfile,
) -> Result<TargetEmissions> {
    if trace.steps.len() > timeline.len() {
        return Err(Error::TraceTooLong {
            steps: trace.steps.len(),
            words: timeline.len(),
        });
    }
    let source = &timeline.surfaces()[..trace.steps.len()];
    validate_trace(trace, source, profile).into_result()?;

    let mut onsets = Vec::new();
    for (pos, step) in trace.steps.iter().enumerate() {
        if let (true, Some(frag)) = (step.action.emits(), step.fragment()) {
            let at = timeline.end_time(pos + 1).expect("bounded by length check") + compute_delay;
            onsets.extend(std::iter::repeat_n(at, profile.unit_count(frag)));
        }
    }
    TargetEmissions::new(onsets, profile.unit_kind())
}

/// Source words left after removing everything a DROP step covers.
pub fn effective_source(trace: &ActionTrace, profile: LangProfile) -> Result<Vec<String>> {
    validate_trace(trace, &trace.source_words(), profile).into_result()?;
    let mut keep = vec![true; trace.steps.len()];
    for step in &trace.steps {
        if let Some((first, last)) = step.dropped_range() {
            for k in first..=last {
                keep[k - 1] = false;
            }
        }
    }
    Ok(trace
        .steps
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s.source_word.clone())
        .collect())
}

/// Evenly spaced zero-gap timeline: word `j` ends at `spacing * j`.
pub fn uniform_timeline(sentence_id: &str, words: &[String], spacing: Seconds) -> Result<SourceTimeline> {
    let timed = words
        .iter()
        .enumerate()
        .map(|(i, w)| TimedWord {
            surface: w.clone(),
            start: spacing * i as f64,
            end: spacing * (i + 1) as f64,
        })
        .collect();
    SourceTimeline::new(sentence_id, timed)
}

// ---- per-action statistics -----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub al_seconds: Seconds,
    pub bleu: f64,
}

/// Dev-set quality and latency for each extended action.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionStats {
    entries: BTreeMap<Action, StatEntry>,
    pub aggregates: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub al: f64,
    pub bleu: f64,
}

impl ActionStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, action: Action, entry: StatEntry) -> Result<()> {
        if !action.is_extended() {
            return Err(Error::Config(format!("statistics are only kept for extended actions, not {action}")));
        }
        self.entries.insert(action, entry);
        Ok(())
    }

    pub fn get(&self, action: Action) -> Option<&StatEntry> {
        self.entries.get(&action)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Action, &StatEntry)> {
        self.entries.iter().map(|(a, e)| (*a, e))
    }

    pub fn with_override(&self, action: Action, entry: StatEntry) -> Result<Self> {
        let mut out = self.clone();
        out.insert(action, entry)?;
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: StatsFile = serde_json::from_str(text)?;
        let mut stats = ActionStats::new();
        for row in file.actions {
            stats.insert(row.action, StatEntry { al_seconds: row.al, bleu: row.bleu })?;
        }
        stats.aggregates = file.aggregates;
        Ok(stats)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: Some(path.to_owned()),
                line: j.line(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let file = StatsFile {
            actions: self
                .entries
                .iter()
                .map(|(a, e)| StatsRow { action: *a, al: e.al_seconds, bleu: e.bleu })
                .collect(),
            aggregates: self.aggregates.clone(),
        };
        serde_json::to_value(file).expect("stats serialize")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsRow {
    action: Action,
    al: f64,
    bleu: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsFile {
    actions: Vec<StatsRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    aggregates: Vec<AggregateRow>,
}

// ---- trace files -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub i: usize,
    pub src: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub why: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub steps: Vec<StepRecord>,
    #[serde(rename = "final")]
    pub final_translation: String,
}

impl From<TraceRecord> for ActionTrace {
    fn from(r: TraceRecord) -> Self {
        ActionTrace {
            sentence_id: r.id,
            steps: r
                .steps
                .into_iter()
                .map(|s| ActionStep {
                    step_index: s.i,
                    source_word: s.src,
                    action: s.action,
                    output: s.out,
                    explanation: s.why,
                    drop_span: s.span.map(|[a, b]| (a, b)),
                })
                .collect(),
            final_translation: r.final_translation,
        }
    }
}

impl From<&ActionTrace> for TraceRecord {
    fn from(t: &ActionTrace) -> Self {
        TraceRecord {
            id: t.sentence_id.clone(),
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    i: s.step_index,
                    src: s.source_word.clone(),
                    action: s.action,
                    out: s.output.clone(),
                    why: s.explanation.clone(),
                    span: s.drop_span.map(|(a, b)| [a, b]),
                })
                .collect(),
            final_translation: t.final_translation.clone(),
        }
    }
}

pub fn read_traces(reader: impl BufRead) -> Result<Vec<ActionTrace>> {
    Ok(jsonl::parse_lines::<TraceRecord>(reader)?
        .into_iter()
        .map(|(_, r)| r.into())
        .collect())
}

pub fn read_traces_file(path: &Path) -> Result<Vec<ActionTrace>> {
    let file = std::fs::File::open(path)?;
    read_traces(std::io::BufReader::new(file)).map_err(|e| e.with_path(path))
}
