use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use simt_core::actions::{
    read_traces_file, replay_trace, uniform_timeline, Action, ActionStats, TraceRecord,
};
use simt_core::causal_align::{
    schedule as build_schedule, AlignmentRecord, AlignmentSet, MarkedItem, MarkedRecord,
    SpeakingModel, TimetableRecord,
};
use simt_core::experiment::{
    run_adaptive, run_sweep, ArmRunner, Corpus, RunHeader, StatsOverride, SweepConfig,
};
use simt_core::jsonl;
use simt_core::latency::{average_lagging_sec, corpus_mean, LatencyRow};
use simt_core::llm_driver::{
    build_batch, custom_id, merge_result_files, run_batch, run_prefix_feed, BatchJob, ChatClient,
    DecodingConfig, FeedStatus, HttpChatClient, PromptSpec, RecordingClient, ReplayClient,
    RetryPolicy, Shard,
};
use simt_core::metrics::score_corpus;
use simt_core::retrieval::{kmeans_fit, retrieve_by_embedding, retrieve_by_keywords, ExampleBank, KeywordRules};
use simt_core::timeline::{read_emissions, read_timelines_file, EmissionsRecord, SourceTimeline};
use simt_core::LangProfile;

use crate::output::Output;
use crate::{BatchCommand, EndpointArgs, Format, ScheduleArgs};

/// Bad flag combinations that clap cannot express; exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn to_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    jsonl::write_records(&mut buf, records)?;
    Ok(String::from_utf8(buf)?)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn timelines_by_id(path: &Path) -> Result<HashMap<String, SourceTimeline>> {
    Ok(read_timelines_file(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_iter()
        .map(|t| (t.sentence_id.clone(), t))
        .collect())
}

fn lookup<'a>(map: &'a HashMap<String, SourceTimeline>, id: &str) -> Result<&'a SourceTimeline> {
    map.get(id)
        .ok_or_else(|| simt_core::Error::Config(format!("no timeline for sentence {id:?}")).into())
}

fn parse_actions(names: &[String]) -> Result<BTreeSet<Action>> {
    let mut set = BTreeSet::new();
    for n in names.iter().filter(|n| !n.trim().is_empty()) {
        let a: Action = n.trim().parse().map_err(|_| usage(format!("unknown action {n:?}")))?;
        if a.is_extended() {
            set.insert(a);
        }
    }
    Ok(set)
}

fn prompt_spec(stats: Option<&Path>, lang: LangProfile, actions: &[String]) -> Result<PromptSpec> {
    let mut spec = PromptSpec::new("en", lang.code()).with_actions(parse_actions(actions)?);
    if let Some(p) = stats {
        spec = spec.with_stats(ActionStats::load(p)?);
    }
    spec.validate()?;
    Ok(spec)
}

// ---- scheduling -----------------------------------------------------------

struct Scheduled {
    id: String,
    marked: simt_core::causal_align::WaitMarkedTarget,
    table: simt_core::causal_align::SegmentTimetable,
    emissions: simt_core::timeline::TargetEmissions,
}

fn run_schedule(a: &ScheduleArgs) -> Result<Vec<Scheduled>> {
    let profile: LangProfile = a.lang.into();
    let model = match a.speak_rate {
        Some(r) => SpeakingModel::new(profile.unit_kind(), r)?,
        None => SpeakingModel::for_profile(profile),
    };
    let timelines = timelines_by_id(&a.src_times)?;
    let aligns = jsonl::read_file::<AlignmentRecord>(&a.align)?;
    let targets: Vec<String> = read_lines(&a.tgt)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if targets.len() != aligns.len() {
        return Err(simt_core::Error::Config(format!(
            "{} alignment records but {} target lines",
            aligns.len(),
            targets.len()
        ))
        .into());
    }
    let mut out = Vec::new();
    for ((_, rec), line) in aligns.into_iter().zip(targets) {
        let words: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        let tl = lookup(&timelines, &rec.id)?;
        let set = AlignmentSet::from_zero_based(&rec.pairs);
        let (marked, table, emissions) =
            build_schedule(&words, &set, tl, &model).with_context(|| format!("sentence {}", rec.id))?;
        out.push(Scheduled { id: rec.id, marked, table, emissions });
    }
    Ok(out)
}

fn schedule_config(a: &ScheduleArgs) -> Value {
    json!({
        "src_times": a.src_times,
        "align": a.align,
        "tgt": a.tgt,
        "lang": LangProfile::from(a.lang).code(),
        "speak_rate": a.speak_rate.unwrap_or(LangProfile::from(a.lang).default_seconds_per_unit()),
    })
}

pub fn align(out: &Output, a: &ScheduleArgs) -> Result<()> {
    let rows = run_schedule(a)?;
    let header = RunHeader::new("align", schedule_config(a));
    match out.format {
        Format::Jsonl => {
            let recs: Vec<MarkedRecord> = rows.iter().map(|r| MarkedRecord::from_marked(&r.id, &r.marked)).collect();
            out.data(&header, &to_lines(&recs)?)
        }
        Format::Text => {
            let mut text = String::new();
            for r in &rows {
                let items: Vec<String> = r
                    .marked
                    .items
                    .iter()
                    .map(|i| match i {
                        MarkedItem::Word { surface, .. } => surface.clone(),
                        MarkedItem::Wait { anchor } => format!("<WAIT:{}>", anchor - 1),
                    })
                    .collect();
                writeln!(text, "{}\t{}", r.id, items.join(" "))?;
            }
            out.report(&header, &text, "")
        }
    }
}

pub fn schedule(out: &Output, a: &ScheduleArgs, emissions: Option<&Path>) -> Result<()> {
    let rows = run_schedule(a)?;
    let header = RunHeader::new("schedule", schedule_config(a));
    if let Some(path) = emissions {
        let recs: Vec<EmissionsRecord> = rows
            .iter()
            .map(|r| EmissionsRecord {
                id: r.id.clone(),
                unit: r.emissions.unit_kind,
                onsets: r.emissions.onsets.clone(),
            })
            .collect();
        Output::new(Some(path.to_owned()), Format::Jsonl).data(&header, &to_lines(&recs)?)?;
    }
    let recs: Vec<TimetableRecord> = rows.iter().map(|r| TimetableRecord::from_table(&r.id, &r.table)).collect();
    out.data(&header, &to_lines(&recs)?)
}

// ---- latency and metrics --------------------------------------------------

pub fn al(out: &Output, src_times: &Path, emissions: &Path) -> Result<()> {
    let timelines = timelines_by_id(src_times)?;
    let file = fs::File::open(emissions).with_context(|| format!("opening {}", emissions.display()))?;
    let ems = read_emissions(std::io::BufReader::new(file)).map_err(|e| e.with_path(emissions))?;
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for (id, em) in &ems {
        let r = average_lagging_sec(lookup(&timelines, id)?, em).with_context(|| format!("sentence {id}"))?;
        rows.push(LatencyRow::new(id, &r));
        results.push(r);
    }
    let mean = corpus_mean(&results);
    let header = RunHeader::new("al", json!({ "src_times": src_times, "emissions": emissions }));

    let mut text = String::new();
    for r in &rows {
        writeln!(text, "{:<12} AL {:.3}  tau* {}  gamma {:.3}", r.id, r.al_sec, r.tau_star, r.gamma)?;
    }
    match mean {
        Some(m) => writeln!(text, "corpus AL {m:.3} over {} sentences", rows.len())?,
        None => writeln!(text, "corpus AL - over 0 sentences")?,
    }
    let mut lines = to_lines(&rows)?;
    writeln!(lines, "{}", json!({ "corpus_al_sec": mean, "n_sentences": rows.len() }))?;
    out.report(&header, &text, &lines)
}

pub fn score(out: &Output, hyp: &Path, reference: &Path, profile: LangProfile) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let report = score_corpus(&hyps, &refs, profile)?;
    let header = RunHeader::new(
        "score",
        json!({ "hyp": hyp, "ref": reference, "lang": profile.code() }),
    );
    let text = format!(
        "BLEU {:.2} / chrF {:.2} / TER {:.2}\n",
        report.bleu, report.chrf, report.ter
    );
    out.report(&header, &text, &to_lines(&[&report])?)
}

pub fn replay(
    out: &Output,
    trace: &Path,
    src_times: Option<&Path>,
    spacing: f64,
    profile: LangProfile,
    delay: f64,
) -> Result<()> {
    let traces = read_traces_file(trace).with_context(|| format!("reading {}", trace.display()))?;
    let timelines = match src_times {
        Some(p) => Some(timelines_by_id(p)?),
        None => None,
    };
    let mut recs = Vec::new();
    for t in &traces {
        let tl = match &timelines {
            Some(map) => lookup(map, &t.sentence_id)?.clone(),
            None => uniform_timeline(&t.sentence_id, &t.source_words(), spacing)?,
        };
        let em = replay_trace(t, &tl, delay, profile).with_context(|| format!("trace {}", t.sentence_id))?;
        recs.push(EmissionsRecord {
            id: t.sentence_id.clone(),
            unit: em.unit_kind,
            onsets: em.onsets,
        });
    }
    let header = RunHeader::new(
        "replay",
        json!({
            "trace": trace,
            "src_times": src_times,
            "spacing": src_times.is_none().then_some(spacing),
            "lang": profile.code(),
            "compute_delay": delay,
        }),
    );
    out.data(&header, &to_lines(&recs)?)
}

// ---- retrieval ------------------------------------------------------------

#[derive(Deserialize)]
struct QueryRecord {
    id: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    emb: Option<Vec<f64>>,
}

pub fn retrieve(
    out: &Output,
    bank: &Path,
    query: &Path,
    rules: Option<&Path>,
    k: usize,
    seed: u64,
    n: usize,
) -> Result<()> {
    let bank = ExampleBank::load(bank)?;
    let queries = jsonl::read_file::<QueryRecord>(query)?;
    let mut rows = Vec::new();
    let config = match rules {
        Some(path) => {
            let rules = KeywordRules::load(path)?;
            for (_, q) in &queries {
                let hits = retrieve_by_keywords(&q.text, &rules, &bank, n)?;
                rows.push((q.id.clone(), hits.iter().map(|e| e.id.clone()).collect::<Vec<_>>()));
            }
            json!({ "selector": "keywords", "rules": path, "n": n })
        }
        None => {
            let model = kmeans_fit(&bank, k, seed)?;
            for (line, q) in &queries {
                let emb = q
                    .emb
                    .as_deref()
                    .ok_or_else(|| simt_core::Error::Config(format!("line {line}: query {} has no embedding", q.id)))?;
                let hits = retrieve_by_embedding(emb, &model, &bank, n)?;
                rows.push((q.id.clone(), hits.iter().map(|e| e.id.clone()).collect()));
            }
            json!({ "selector": "kmeans", "k": k, "seed": seed, "n": n })
        }
    };
    let header = RunHeader::new("retrieve", config);
    let mut text = String::new();
    let mut lines = String::new();
    for (id, hits) in &rows {
        writeln!(text, "{id}\t{}", hits.join(" "))?;
        writeln!(lines, "{}", json!({ "id": id, "examples": hits }))?;
    }
    out.report(&header, &text, &lines)
}

// ---- endpoint-backed commands ---------------------------------------------

enum Backend {
    Plain(Box<dyn ChatClient>),
    Recording(RecordingClient<Box<dyn ChatClient>>, PathBuf),
}

impl Backend {
    fn open(e: &EndpointArgs) -> Result<Self> {
        let inner: Box<dyn ChatClient> = match (&e.endpoint, &e.replay) {
            (_, Some(log)) => Box::new(ReplayClient::load(log)?),
            (Some(url), None) => Box::new(HttpChatClient::new(
                url,
                Some(&e.api_key_env),
                Duration::from_secs(e.timeout),
            )),
            (None, None) => return Err(usage("one of --endpoint or --replay is required")),
        };
        Ok(match &e.record {
            Some(p) => Backend::Recording(RecordingClient::new(inner), p.clone()),
            None => Backend::Plain(inner),
        })
    }

    fn client(&self) -> &dyn ChatClient {
        match self {
            Backend::Plain(c) => c.as_ref(),
            Backend::Recording(c, _) => c,
        }
    }

    /// Saves the exchange log, if recording. Called whether or not the run
    /// succeeded so partial work is kept.
    fn finish(&self) -> Result<()> {
        if let Backend::Recording(c, path) = self {
            c.save(path)?;
            log::info!("recorded {} exchanges to {}", c.entries().len(), path.display());
        }
        Ok(())
    }
}

fn decoding(e: &EndpointArgs) -> DecodingConfig {
    DecodingConfig {
        model: e.model.clone(),
        seed: e.seed,
        max_tokens: e.max_tokens,
        ..DecodingConfig::default()
    }
}

fn retry(e: &EndpointArgs) -> RetryPolicy {
    RetryPolicy {
        max_attempts: e.max_attempts.max(1),
        ..RetryPolicy::default()
    }
}

fn endpoint_config(e: &EndpointArgs) -> Value {
    json!({
        "endpoint": e.endpoint,
        "replay": e.replay,
        "model": e.model,
        "seed": e.seed,
        "max_tokens": e.max_tokens,
    })
}

fn with_backend<T>(e: &EndpointArgs, f: impl FnOnce(&dyn ChatClient) -> Result<T>) -> Result<T> {
    let backend = Backend::open(e)?;
    let result = f(backend.client());
    backend.finish()?;
    result
}

pub fn batch(out: &Output, cmd: BatchCommand) -> Result<()> {
    match cmd {
        BatchCommand::Build { input, stats, lang, actions, shard_size, dir, model, seed } => {
            let profile: LangProfile = lang.into();
            let spec = prompt_spec(stats.as_deref(), profile, &actions)?;
            let sentences = read_lines(&input)?;
            let dec = DecodingConfig { model, seed, ..DecodingConfig::default() };
            let job = build_batch(&sentences, &spec, shard_size, &dec)?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let paths = job.write_shards(&dir)?;
            let header = RunHeader::new(
                "batch build",
                json!({
                    "input": input,
                    "lang": profile.code(),
                    "actions": spec.allowed_actions,
                    "shard_size": shard_size,
                    "model": dec.model,
                    "seed": dec.seed,
                }),
            );
            let text = format!(
                "{} requests from {} lines in {} shards under {}\n",
                job.len(),
                sentences.len(),
                paths.len(),
                dir.display()
            );
            let lines = format!(
                "{}\n",
                json!({ "requests": job.len(), "input_lines": sentences.len(), "shards": paths })
            );
            out.report(&header, &text, &lines)
        }
        BatchCommand::Run { shards, max_in_flight, endpoint } => {
            if max_in_flight == 0 {
                return Err(usage("--max-in-flight must be at least 1"));
            }
            let mut job = BatchJob { shards: Vec::new() };
            for (shard_id, p) in shards.iter().enumerate() {
                job.shards.push(Shard { shard_id, requests: BatchJob::read_shard(p)? });
            }
            let policy = retry(&endpoint);
            let results = with_backend(&endpoint, |c| Ok(run_batch(&job, c, max_in_flight, &policy)?))?;
            let mut cfg = endpoint_config(&endpoint);
            cfg["shards"] = json!(shards);
            cfg["max_in_flight"] = json!(max_in_flight);
            out.data(&RunHeader::new("batch run", cfg), &to_lines(&results)?)
        }
        BatchCommand::Merge { results } => {
            let merged = merge_result_files(&results)?;
            let header = RunHeader::new("batch merge", json!({ "results": results }));
            out.data(&header, &to_lines(&merged.records)?)?;
            for c in &merged.conflicts {
                eprintln!("conflict: {} has {} differing payloads", c.custom_id, c.payloads.len());
            }
            if !merged.conflicts.is_empty() {
                bail!(simt_core::Error::Config(format!(
                    "{} custom ids have conflicting payloads",
                    merged.conflicts.len()
                )));
            }
            Ok(())
        }
    }
}

pub fn infer(
    out: &Output,
    input: &Path,
    stats: Option<&Path>,
    profile: LangProfile,
    actions: &[String],
    endpoint: &EndpointArgs,
) -> Result<()> {
    let spec = prompt_spec(stats, profile, actions)?;
    let dec = decoding(endpoint);
    let policy = retry(endpoint);
    let sentences: Vec<String> = read_lines(input)?
        .into_iter()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .collect();

    let runs = with_backend(endpoint, |client| {
        let mut runs = Vec::new();
        for s in &sentences {
            let words: Vec<String> = s.split_whitespace().map(str::to_owned).collect();
            runs.push(run_prefix_feed(&custom_id(s), &words, &spec, client, &dec, profile, &policy)?);
        }
        Ok(runs)
    })?;

    let mut traces = Vec::new();
    for r in &runs {
        match &r.status {
            FeedStatus::Completed => traces.push(TraceRecord::from(&r.trace)),
            FeedStatus::Failed { step, reason } => {
                eprintln!("failed: {} at step {step}: {reason}", r.trace.sentence_id)
            }
        }
    }
    log::info!("{} of {} sentences completed", traces.len(), runs.len());
    let mut cfg = endpoint_config(endpoint);
    cfg["input"] = json!(input);
    cfg["lang"] = json!(profile.code());
    cfg["actions"] = json!(spec.allowed_actions);
    out.data(&RunHeader::new("infer", cfg), &to_lines(&traces)?)
}

// ---- experiments ----------------------------------------------------------

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

pub fn sweep(out: &Output, config: &Path, prompts: Option<&Path>) -> Result<()> {
    let cfg = SweepConfig::load(config)?;
    let report = run_sweep(&cfg)?;
    if let Some(dir) = prompts {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (label, prompt) in &report.prompts {
            fs::write(dir.join(format!("{}.txt", file_stem(label))), prompt)?;
        }
    }
    let mut lines = Vec::new();
    report.write_jsonl(&mut lines)?;
    let lines = String::from_utf8(lines)?;
    // write_jsonl already starts with the header
    let body = lines.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
    out.report(&report.header, &report.table(), body)
}

pub fn adaptive(
    out: &Output,
    config: &Path,
    promote: &str,
    bleu: f64,
    al: f64,
    top_n: usize,
    endpoint: &EndpointArgs,
) -> Result<()> {
    let action: Action = promote.parse().map_err(|_| usage(format!("unknown action {promote:?}")))?;
    if !action.is_extended() {
        return Err(usage(format!("{promote} has no statistics to promote")));
    }
    let cfg = SweepConfig::load(config)?;
    let corpus = Corpus::load(&cfg)?;
    let dec = decoding(endpoint);
    let policy = retry(endpoint);
    let promote = StatsOverride { action, bleu, al };
    let mut report = with_backend(endpoint, |client| {
        let runner = ArmRunner { cfg: &cfg, corpus: &corpus, client, decoding: &dec, retry: &policy };
        Ok(run_adaptive(&runner, &promote, top_n)?)
    })?;
    report.header.config["endpoint"] = endpoint_config(endpoint);

    let mut lines = Vec::new();
    report.write_jsonl(&mut lines)?;
    let lines = String::from_utf8(lines)?;
    let body = lines.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
    let mut text = String::new();
    writeln!(text, "{} sentences selected", report.selected.len())?;
    text.push_str(&report.table());
    for arm in [&report.baseline, &report.promoted] {
        if !arm.failed.is_empty() {
            writeln!(text, "{} failed: {}", arm.arm, arm.failed.join(" "))?;
        }
    }
    out.report(&report.header, &text, body)
}
