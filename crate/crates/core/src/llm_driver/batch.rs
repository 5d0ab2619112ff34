use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::client::{call_with_retry, ChatClient, ChatMessage, ChatRequest, DecodingConfig, RetryPolicy};
use super::prompt::{render_prompt, PromptMode, PromptSpec};
use crate::error::{Error, Result};
use crate::jsonl;

/// How custom ids are derived, recorded in run headers.
pub const CUSTOM_ID_DIGEST: &str = "sha256/16";

pub fn normalize_sentence(s: &str) -> &str {
    s.trim()
}

/// First 16 hex digits of the sha256 of the normalized sentence.
pub fn custom_id(sentence: &str) -> String {
    let digest = Sha256::digest(normalize_sentence(sentence).as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub custom_id: String,
    pub body: ChatRequest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub shard_id: usize,
    pub requests: Vec<BatchRequest>,
}

impl Shard {
    pub fn file_name(&self) -> String {
        format!("shard-{:05}.jsonl", self.shard_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchJob {
    pub shards: Vec<Shard>,
}

impl BatchJob {
    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.requests.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requests(&self) -> impl Iterator<Item = &BatchRequest> {
        self.shards.iter().flat_map(|s| s.requests.iter())
    }

    /// Writes one `.jsonl` file per shard and returns their paths.
    pub fn write_shards(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.shards.len());
        for shard in &self.shards {
            let path = dir.join(shard.file_name());
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            jsonl::write_records(&mut f, &shard.requests)?;
            f.flush()?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub fn read_shard(path: &Path) -> Result<Vec<BatchRequest>> {
        Ok(jsonl::read_file::<BatchRequest>(path)?.into_iter().map(|(_, r)| r).collect())
    }
}

/// Trims, drops empty and repeated sentences (first occurrence wins), and
/// splits the rest into shards of `shard_size` single-shot requests.
pub fn build_batch<S: AsRef<str>>(
    sentences: &[S],
    spec: &PromptSpec,
    shard_size: usize,
    decoding: &DecodingConfig,
) -> Result<BatchJob> {
    if shard_size == 0 {
        return Err(Error::Config("shard size must be at least 1".into()));
    }
    let system = render_prompt(spec, PromptMode::SingleShot)?;
    let mut seen = HashSet::new();
    let mut requests = Vec::new();
    for s in sentences {
        let s = normalize_sentence(s.as_ref());
        if s.is_empty() {
            continue;
        }
        let id = custom_id(s);
        if !seen.insert(id.clone()) {
            continue;
        }
        let body = decoding.request(vec![ChatMessage::system(system.clone()), ChatMessage::user(s)]);
        requests.push(BatchRequest { custom_id: id, body });
    }
    let shards = requests
        .chunks(shard_size)
        .enumerate()
        .map(|(shard_id, chunk)| Shard { shard_id, requests: chunk.to_vec() })
        .collect();
    Ok(BatchJob { shards })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub custom_id: String,
    pub response: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub custom_id: String,
    pub payloads: Vec<Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeOutcome {
    /// One record per custom id without a conflict, in first-seen order.
    pub records: Vec<ResultRecord>,
    pub conflicts: Vec<Conflict>,
}

impl MergeOutcome {
    pub fn write_records(&self, out: impl Write) -> Result<()> {
        jsonl::write_records(out, &self.records)
    }
}

/// Merges result sets by custom id. Byte-identical repeats collapse; differing
/// payloads for one id are reported and left out of `records`.
pub fn merge_results<I>(results: I) -> MergeOutcome
where
    I: IntoIterator<Item = ResultRecord>,
{
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<(String, Value)>> = BTreeMap::new();
    for r in results {
        let bytes = serde_json::to_string(&r.response).expect("value serializes");
        let entry = by_id.entry(r.custom_id.clone()).or_insert_with(|| {
            order.push(r.custom_id.clone());
            Vec::new()
        });
        if !entry.iter().any(|(b, _)| *b == bytes) {
            entry.push((bytes, r.response));
        }
    }
    let mut outcome = MergeOutcome::default();
    for id in order {
        let mut payloads = by_id.remove(&id).expect("id recorded");
        if payloads.len() == 1 {
            let (_, response) = payloads.pop().expect("one payload");
            outcome.records.push(ResultRecord { custom_id: id, response });
        } else {
            outcome.conflicts.push(Conflict {
                custom_id: id,
                payloads: payloads.into_iter().map(|(_, v)| v).collect(),
            });
        }
    }
    outcome
}

pub fn read_results(reader: impl BufRead) -> Result<Vec<ResultRecord>> {
    Ok(jsonl::parse_lines::<ResultRecord>(reader)?.into_iter().map(|(_, r)| r).collect())
}

pub fn merge_result_files(paths: &[PathBuf]) -> Result<MergeOutcome> {
    let mut all = Vec::new();
    for p in paths {
        let f = std::fs::File::open(p).map_err(|e| Error::from(e).with_path(p))?;
        all.extend(read_results(std::io::BufReader::new(f)).map_err(|e| e.with_path(p))?);
    }
    Ok(merge_results(all))
}

/// Sends every request with at most `max_in_flight` outstanding, returning
/// results in request order whatever the completion order.
pub fn run_batch(
    job: &BatchJob,
    client: &dyn ChatClient,
    max_in_flight: usize,
    retry: &RetryPolicy,
) -> Result<Vec<ResultRecord>> {
    let requests: Vec<&BatchRequest> = job.requests().collect();
    let slots: Vec<Mutex<Option<Result<String>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = max_in_flight.max(1).min(requests.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let out = call_with_retry(client, &req.body, retry);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });

    requests
        .iter()
        .zip(slots)
        .map(|(req, slot)| {
            let text = slot.into_inner().expect("slot lock").expect("every slot filled")?;
            Ok(ResultRecord {
                custom_id: req.custom_id.clone(),
                response: Value::String(text),
            })
        })
        .collect()
}
