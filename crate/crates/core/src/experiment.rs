//! Action-combination sweeps and the promoted-action experiment.
//!
//! A sweep replays one trace file per action combination against the source
//! timelines and scores each row. The adaptive experiment runs the
//! prefix-feed protocol twice over the slowest sentences, once with the
//! shipped statistics and once with one action made to look better.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::actions::{read_traces_file, replay_trace, Action, ActionStats, ActionTrace, StatEntry};
use crate::error::{Error, Result};
use crate::latency::average_lagging_sec;
use crate::llm_driver::{
    render_prompt, run_prefix_feed, ChatClient, DecodingConfig, PromptMode, PromptSpec, RetryPolicy,
};
use crate::metrics::score_corpus;
use crate::profile::LangProfile;
use crate::timeline::{read_timelines_file, Seconds, SourceTimeline, TargetEmissions};
use crate::jsonl;

/// Run header written as the first line of every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
}

impl RunHeader {
    pub fn new(command: &str, config: Value) -> Self {
        RunHeader {
            tool: "simt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
        }
    }

    pub fn to_line(&self) -> String {
        json!({ jsonl::HEADER_KEY: self }).to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub actions: BTreeSet<Action>,
    /// Replayable traces for this combination; absent means the row is a gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<PathBuf>,
}

impl Combination {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        Combination { label: None, actions: actions.into_iter().collect(), traces: None }
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let ext: Vec<Action> = Action::EXTENDED
            .into_iter()
            .filter(|a| self.actions.contains(a))
            .collect();
        match ext.len() {
            0 => "Salami only".into(),
            4 => "All actions".into(),
            _ => ext.iter().map(|a| a.short_name()).collect::<Vec<_>>().join("+"),
        }
    }

    fn check(&self) -> Result<()> {
        match self.actions.iter().find(|a| !a.is_extended()) {
            Some(a) => Err(Error::Config(format!(
                "combination {:?} lists {a}; READ and WRITE are implicit",
                self.label()
            ))),
            None => Ok(()),
        }
    }
}

/// Salami only, each single action, CUT+DROP, DROP+PS+PRON, all actions.
pub fn default_combinations() -> Vec<Combination> {
    use Action::*;
    let mut rows = vec![Combination::new([])];
    for a in [Cut, Drop, PartialSummarization, Pronominalization] {
        rows.push(Combination::new([a]));
    }
    rows.push(Combination::new([Cut, Drop]).labelled("CUT+DROP"));
    rows.push(Combination::new([Drop, PartialSummarization, Pronominalization]).labelled("DROP+PS+PRON"));
    rows.push(Combination::new(Action::EXTENDED));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub id: String,
    #[serde(rename = "ref")]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lang: LangProfile,
    #[serde(default = "default_source_lang")]
    pub source_lang: String,
    pub timelines: PathBuf,
    /// JSONL of `{"id", "ref"}`.
    pub references: PathBuf,
    pub stats: PathBuf,
    /// Seconds per spoken unit. When set, a unit cannot start before the
    /// previous one has been spoken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speak_rate: Option<Seconds>,
    #[serde(default)]
    pub compute_delay: Seconds,
    #[serde(default = "default_combinations")]
    pub combinations: Vec<Combination>,
}

fn default_source_lang() -> String {
    "en".into()
}

impl SweepConfig {
    /// Reads a JSON config; relative paths are taken from the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).with_path(path))?;
        let mut cfg: SweepConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.timelines);
        fix(&mut self.references);
        fix(&mut self.stats);
        for c in &mut self.combinations {
            if let Some(t) = &mut c.traces {
                fix(t);
            }
        }
    }

    pub fn target_lang(&self) -> &'static str {
        self.lang.code()
    }

    pub fn prompt_spec(&self, actions: &BTreeSet<Action>, stats: &ActionStats) -> PromptSpec {
        PromptSpec::new(&self.source_lang, self.target_lang())
            .with_actions(actions.iter().copied())
            .with_stats(stats.clone())
    }
}

/// Sentence inputs shared by every row.
pub struct Corpus {
    pub timelines: Vec<SourceTimeline>,
    pub references: HashMap<String, String>,
}

impl Corpus {
    pub fn load(cfg: &SweepConfig) -> Result<Self> {
        let timelines = read_timelines_file(&cfg.timelines)?;
        let references = jsonl::read_file::<ReferenceRecord>(&cfg.references)?
            .into_iter()
            .map(|(_, r)| (r.id, r.text))
            .collect();
        Ok(Corpus { timelines, references })
    }

    pub fn timeline(&self, id: &str) -> Option<&SourceTimeline> {
        self.timelines.iter().find(|t| t.sentence_id == id)
    }
}

/// Serializes speech: each unit starts at its commit time or when the
/// previous unit finishes, whichever is later.
pub fn serialize_speech(emissions: &TargetEmissions, seconds_per_unit: Seconds) -> Result<TargetEmissions> {
    let mut onsets = Vec::with_capacity(emissions.len());
    let mut free_at = f64::NEG_INFINITY;
    for &commit in &emissions.onsets {
        let start = commit.max(free_at);
        onsets.push(start);
        free_at = start + seconds_per_unit;
    }
    TargetEmissions::new(onsets, emissions.unit_kind)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceResult {
    pub id: String,
    pub hypothesis: String,
    pub al_seconds: Seconds,
}

/// Replays one trace and measures its latency.
pub fn measure_trace(
    trace: &ActionTrace,
    timeline: &SourceTimeline,
    cfg: &SweepConfig,
) -> Result<SentenceResult> {
    let mut em = replay_trace(trace, timeline, cfg.compute_delay, cfg.lang)?;
    if let Some(spu) = cfg.speak_rate {
        em = serialize_speech(&em, spu)?;
    }
    let al = if em.is_empty() {
        // nothing was emitted: the whole source elapsed
        timeline.end_time(timeline.len()).unwrap_or(0.0)
    } else {
        average_lagging_sec(timeline, &em)?.al_seconds
    };
    Ok(SentenceResult {
        id: trace.sentence_id.clone(),
        hypothesis: trace.final_translation.clone(),
        al_seconds: al,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub actions: BTreeSet<Action>,
    pub n_sentences: usize,
    pub bleu: Option<f64>,
    pub chrf: Option<f64>,
    pub ter: Option<f64>,
    pub al: Option<f64>,
    /// Why values are missing or partial.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

impl SweepRow {
    fn gap(c: &Combination, reason: String) -> Self {
        SweepRow {
            label: c.label(),
            actions: c.actions.clone(),
            n_sentences: 0,
            bleu: None,
            chrf: None,
            ter: None,
            al: None,
            missing: vec![reason],
        }
    }
}

/// Scores a set of sentence results against the references.
fn score_results(results: &[SentenceResult], corpus: &Corpus, lang: LangProfile) -> Result<(f64, f64, f64, f64)> {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for r in results {
        hyps.push(r.hypothesis.clone());
        refs.push(corpus.references.get(&r.id).cloned().unwrap_or_default());
    }
    let s = score_corpus(&hyps, &refs, lang)?;
    let al = results.iter().map(|r| r.al_seconds).sum::<f64>() / results.len() as f64;
    Ok((s.bleu, s.chrf, s.ter, al))
}

pub fn sweep_row(c: &Combination, corpus: &Corpus, cfg: &SweepConfig) -> Result<SweepRow> {
    c.check()?;
    let Some(path) = &c.traces else {
        return Ok(SweepRow::gap(c, "no traces".into()));
    };
    let traces = match read_traces_file(path) {
        Ok(t) => t,
        Err(e) => return Ok(SweepRow::gap(c, format!("unreadable traces: {e}"))),
    };
    let by_id: HashMap<&str, &ActionTrace> =
        traces.iter().map(|t| (t.sentence_id.as_str(), t)).collect();

    let mut missing = Vec::new();
    let mut results = Vec::new();
    for tl in &corpus.timelines {
        let Some(trace) = by_id.get(tl.sentence_id.as_str()) else {
            missing.push(format!("{}: no trace", tl.sentence_id));
            continue;
        };
        if let Some(step) = trace.steps.iter().find(|s| s.action.is_extended() && !c.actions.contains(&s.action)) {
            missing.push(format!(
                "{}: step {} uses {} outside the combination",
                tl.sentence_id, step.step_index, step.action
            ));
            continue;
        }
        if !corpus.references.contains_key(&tl.sentence_id) {
            missing.push(format!("{}: no reference", tl.sentence_id));
            continue;
        }
        match measure_trace(trace, tl, cfg) {
            Ok(r) => results.push(r),
            Err(e) => missing.push(format!("{}: {e}", tl.sentence_id)),
        }
    }
    if results.is_empty() {
        let mut row = SweepRow::gap(c, "no usable sentences".into());
        row.missing.extend(missing);
        return Ok(row);
    }
    let (bleu, chrf, ter, al) = score_results(&results, corpus, cfg.lang)?;
    Ok(SweepRow {
        label: c.label(),
        actions: c.actions.clone(),
        n_sentences: results.len(),
        bleu: Some(bleu),
        chrf: Some(chrf),
        ter: Some(ter),
        al: Some(al),
        missing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub header: RunHeader,
    pub rows: Vec<SweepRow>,
    /// Single-shot prompt for each row, in row order.
    pub prompts: Vec<(String, String)>,
}

impl SweepReport {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.header.to_line())?;
        jsonl::write_records(out, &self.rows)
    }

    pub fn table(&self) -> String {
        render_table(&self.rows)
    }
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let stats = ActionStats::load(&cfg.stats)?;
    let corpus = Corpus::load(cfg)?;
    let mut rows = Vec::with_capacity(cfg.combinations.len());
    let mut prompts = Vec::with_capacity(cfg.combinations.len());
    for c in &cfg.combinations {
        rows.push(sweep_row(c, &corpus, cfg)?);
        let spec = cfg.prompt_spec(&c.actions, &stats);
        prompts.push((c.label(), render_prompt(&spec, PromptMode::SingleShot)?));
    }
    let header = RunHeader::new("sweep", serde_json::to_value(cfg)?);
    Ok(SweepReport { header, rows, prompts })
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "-".into())
}

/// Aligned text table; gaps print as `-`.
pub fn render_table(rows: &[SweepRow]) -> String {
    let header = ["Combination", "BLEU", "chrF", "TER", "AL(s)", "n"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                cell(r.bleu, 2),
                cell(r.chrf, 2),
                cell(r.ter, 2),
                cell(r.al, 3),
                r.n_sentences.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                let _ = write!(out, "{c}{}", " ".repeat(pad));
            } else {
                let _ = write!(out, "  {}{c}", " ".repeat(pad));
            }
        }
        out.push('\n');
    };
    line(&mut out, &header.map(String::from));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule);
    for row in &body {
        line(&mut out, row);
    }
    out
}

// ---- promoted-action experiment ------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsOverride {
    pub action: Action,
    pub bleu: f64,
    pub al: Seconds,
}

impl StatsOverride {
    pub fn apply(&self, stats: &ActionStats) -> Result<ActionStats> {
        stats.with_override(self.action, StatEntry { al_seconds: self.al, bleu: self.bleu })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub n_sentences: usize,
    pub failed: Vec<String>,
    pub bleu: Option<f64>,
    pub chrf: Option<f64>,
    pub ter: Option<f64>,
    pub al: Option<f64>,
    pub action_counts: BTreeMap<Action, usize>,
}

impl ArmReport {
    pub fn count(&self, action: Action) -> usize {
        self.action_counts.get(&action).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub id: String,
    pub baseline_al: Seconds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveReport {
    pub header: RunHeader,
    pub selected: Vec<Selected>,
    pub baseline: ArmReport,
    pub promoted: ArmReport,
}

impl AdaptiveReport {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.header.to_line())?;
        for s in &self.selected {
            writeln!(out, "{}", json!({ "selected": s }))?;
        }
        jsonl::write_records(out, &[&self.baseline, &self.promoted])
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10}  {:>7}  {:>7}  {:>7}  {:>7}  {:>3}  actions", "arm", "BLEU", "chrF", "TER", "AL(s)", "n");
        for a in [&self.baseline, &self.promoted] {
            let counts: Vec<String> = a
                .action_counts
                .iter()
                .map(|(k, v)| format!("{}={v}", k.short_name()))
                .collect();
            let _ = writeln!(
                out,
                "{:<10}  {:>7}  {:>7}  {:>7}  {:>7}  {:>3}  {}",
                a.arm,
                cell(a.bleu, 2),
                cell(a.chrf, 2),
                cell(a.ter, 2),
                cell(a.al, 3),
                a.n_sentences,
                counts.join(" ")
            );
        }
        out
    }
}

/// The `top_n` ids with the largest AL, ties broken by id. `top_n` larger
/// than the list is clamped with a warning.
pub fn select_slowest(als: &[(String, Seconds)], top_n: usize) -> Vec<Selected> {
    if top_n > als.len() {
        log::warn!("top_n {top_n} exceeds corpus size {}; using {}", als.len(), als.len());
    }
    let mut v: Vec<&(String, Seconds)> = als.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter()
        .take(top_n)
        .map(|(id, al)| Selected { id: id.clone(), baseline_al: *al })
        .collect()
}

/// Everything the prefix-feed arms need besides the prompt.
pub struct ArmRunner<'a> {
    pub cfg: &'a SweepConfig,
    pub corpus: &'a Corpus,
    pub client: &'a dyn ChatClient,
    pub decoding: &'a DecodingConfig,
    pub retry: &'a RetryPolicy,
}

impl ArmRunner<'_> {
    fn run_one(&self, spec: &PromptSpec, tl: &SourceTimeline) -> Result<(Option<SentenceResult>, ActionTrace)> {
        let words = tl.surfaces();
        let run = run_prefix_feed(
            &tl.sentence_id,
            &words,
            spec,
            self.client,
            self.decoding,
            self.cfg.lang,
            self.retry,
        )?;
        if !run.is_complete() {
            log::warn!("{}: {:?}", tl.sentence_id, run.status);
            return Ok((None, run.trace));
        }
        Ok((Some(measure_trace(&run.trace, tl, self.cfg)?), run.trace))
    }

    /// Runs one arm over `ids` and aggregates metrics and action usage.
    pub fn run_arm(&self, arm: &str, spec: &PromptSpec, ids: &[String]) -> Result<(ArmReport, Vec<SentenceResult>)> {
        let mut results = Vec::new();
        let mut failed = Vec::new();
        let mut counts = BTreeMap::new();
        for id in ids {
            let tl = self
                .corpus
                .timeline(id)
                .ok_or_else(|| Error::Config(format!("no timeline for {id}")))?;
            let (res, trace) = self.run_one(spec, tl)?;
            for (a, n) in trace.action_counts() {
                *counts.entry(a).or_insert(0) += n;
            }
            match res {
                Some(r) => results.push(r),
                None => failed.push(id.clone()),
            }
        }
        let (bleu, chrf, ter, al) = if results.is_empty() {
            (None, None, None, None)
        } else {
            let (b, c, t, a) = score_results(&results, self.corpus, self.cfg.lang)?;
            (Some(b), Some(c), Some(t), Some(a))
        };
        let report = ArmReport {
            arm: arm.into(),
            n_sentences: results.len(),
            failed,
            bleu,
            chrf,
            ter,
            al,
            action_counts: counts,
        };
        Ok((report, results))
    }
}

/// Runs the baseline arm over the corpus, keeps the `top_n` slowest
/// sentences, and reruns them with `promote` applied to the statistics.
pub fn run_adaptive(
    runner: &ArmRunner<'_>,
    promote: &StatsOverride,
    top_n: usize,
) -> Result<AdaptiveReport> {
    let cfg = runner.cfg;
    let stats = ActionStats::load(&cfg.stats)?;
    let all: BTreeSet<Action> = Action::EXTENDED.into_iter().collect();
    let base_spec = cfg.prompt_spec(&all, &stats);
    let promoted_spec = cfg.prompt_spec(&all, &promote.apply(&stats)?);

    let ids: Vec<String> = runner.corpus.timelines.iter().map(|t| t.sentence_id.clone()).collect();
    let (_, base_all) = runner.run_arm("baseline", &base_spec, &ids)?;
    let als: Vec<(String, Seconds)> = base_all.iter().map(|r| (r.id.clone(), r.al_seconds)).collect();
    let selected = select_slowest(&als, top_n);
    let chosen: Vec<String> = selected.iter().map(|s| s.id.clone()).collect();

    let (baseline, _) = runner.run_arm("baseline", &base_spec, &chosen)?;
    let (promoted, _) = runner.run_arm("promoted", &promoted_spec, &chosen)?;
    let header = RunHeader::new(
        "adaptive",
        json!({
            "config": cfg,
            "override": promote,
            "top_n": top_n,
            "decoding": runner.decoding,
        }),
    );
    Ok(AdaptiveReport { header, selected, baseline, promoted })
}
