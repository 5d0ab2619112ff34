use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn simt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simt"))
        .args(args)
        .output()
        .expect("spawn simt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Minimal chat-completions server. Prefix-feed steps get the current word
/// uppercased as a WRITE; any other user message is echoed uppercased.
/// With `status` other than 200 every request fails with that status.
fn serve(status: u16) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            thread::spawn(move || handle(stream, status));
        }
    });
    format!("http://{addr}/v1")
}

fn handle(stream: TcpStream, status: u16) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if line == "\r\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let request: Value = serde_json::from_slice(&body).unwrap();
    let user = request["messages"]
        .as_array()
        .unwrap()
        .iter()
        .rev()
        .find(|m| m["role"] == "user")
        .unwrap()["content"]
        .as_str()
        .unwrap()
        .to_owned();
    let content = match serde_json::from_str::<Value>(&user) {
        Ok(step) => {
            let word = step["prefix"].as_str().unwrap().split_whitespace().last().unwrap().to_uppercase();
            json!({ "action": "WRITE", "output": word }).to_string()
        }
        Err(_) => user.to_uppercase(),
    };
    let reply = json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string();
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
}

#[test]
fn al_on_lagged_diagonal_is_zero() {
    let o = simt(&[
        "al",
        "--src-times",
        p(&fixture("timelines/diagonal.jsonl")),
        "--emissions",
        p(&fixture("emissions/diagonal.jsonl")),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("# run_header {"), "{out}");
    assert!(out.contains("corpus AL 0.000"), "{out}");
}

#[test]
fn score_of_identical_files() {
    let o = simt(&[
        "score",
        "--hyp",
        p(&fixture("score/hyp_de.txt")),
        "--ref",
        p(&fixture("score/ref_de.txt")),
        "--lang",
        "de",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("BLEU 100.00 / chrF 100.00 / TER 0.00"));
}

#[test]
fn replay_then_al_matches_library() {
    use simt_core::actions::{read_traces_file, replay_trace};
    use simt_core::latency::average_lagging_sec;
    use simt_core::timeline::read_timelines_file;
    use simt_core::LangProfile;

    let dir = tempfile::tempdir().unwrap();
    let em = dir.path().join("em.jsonl");
    let trace = fixture("traces/loo_eval.jsonl");
    let times = fixture("timelines/examples.jsonl");
    let o = simt(&[
        "replay", "--trace", p(&trace), "--src-times", p(&times), "--lang", "zh", "--delay", "0.2",
        "--out", em.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_to_string(&em).unwrap();
    assert!(written.starts_with("{\"run_header\""));

    let o = simt(&["--format", "jsonl", "al", "--src-times", p(&times), "--emissions", em.to_str().unwrap()]);
    assert!(o.status.success());
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0].get("run_header").is_some());
    let got = lines[1]["al_sec"].as_f64().unwrap();

    let t = &read_traces_file(&trace).unwrap()[0];
    let tl = read_timelines_file(&times)
        .unwrap()
        .into_iter()
        .find(|x| x.sentence_id == t.sentence_id)
        .unwrap();
    let want = average_lagging_sec(&tl, &replay_trace(t, &tl, 0.2, LangProfile::CharacterZh).unwrap())
        .unwrap()
        .al_seconds;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn align_marks_waits() {
    let o = simt(&[
        "--format",
        "jsonl",
        "align",
        "--src-times",
        p(&fixture("align/toy_timeline.jsonl")),
        "--align",
        p(&fixture("align/toy_align.jsonl")),
        "--tgt",
        p(&fixture("align/toy_target.txt")),
        "--lang",
        "zh",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rec: Value = serde_json::from_str(out.lines().nth(1).unwrap()).unwrap();
    let kinds: Vec<&str> = rec["items"].as_array().unwrap().iter().map(|i| i["kind"].as_str().unwrap()).collect();
    assert!(kinds.iter().filter(|k| k.contains("wait")).count() >= 1, "{out}");
}

#[test]
fn exit_codes() {
    assert_eq!(simt(&["--help"]).status.code(), Some(0));
    assert_eq!(simt(&["--version"]).status.code(), Some(0));
    assert_eq!(simt(&["nonsense"]).status.code(), Some(1));
    assert_eq!(simt(&["al", "--src-times", "x"]).status.code(), Some(1));
    assert_eq!(
        simt(&["al", "--src-times", "/no/such/file", "--emissions", "/no/such/file"]).status.code(),
        Some(2)
    );
    let input = fixture("prefix_feed/sentences.txt");
    assert_eq!(simt(&["infer", "--input", p(&input), "--lang", "de"]).status.code(), Some(1));
    let url = serve(400);
    let o = simt(&["infer", "--input", p(&input), "--lang", "de", "--endpoint", &url, "--max-attempts", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn infer_records_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let first = dir.path().join("a.jsonl");
    let second = dir.path().join("b.jsonl");
    let input = fixture("prefix_feed/sentences.txt");
    let url = serve(200);

    let o = simt(&[
        "infer", "--input", p(&input), "--lang", "de", "--endpoint", &url, "--record", p(&log), "--out", p(&first),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = simt(&["infer", "--input", p(&input), "--lang", "de", "--replay", p(&log), "--out", p(&second)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let a = std::fs::read_to_string(&first).unwrap();
    let b = std::fs::read_to_string(&second).unwrap();
    let a_body: Vec<&str> = a.lines().skip(1).collect();
    let b_body: Vec<&str> = b.lines().skip(1).collect();
    assert_eq!(a_body, b_body);
    assert_eq!(a_body.len(), 20);
    let trace: Value = serde_json::from_str(a_body[0]).unwrap();
    assert_eq!(trace["final"], "SCIENTISTS MEASURED OCEAN TEMPERATURES NEAR ICELAND DURING WINTER");
}

#[test]
fn batch_build_run_merge() {
    let dir = tempfile::tempdir().unwrap();
    let shards = dir.path().join("shards");
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "  one sentence \nanother one\n\none sentence\nthird\n").unwrap();
    let o = simt(&[
        "--format", "jsonl", "batch", "build", "--input", p(&input), "--lang", "de", "--shard-size", "2", "--dir",
        p(&shards),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(stdout(&o).lines().nth(1).unwrap()).unwrap();
    assert_eq!(summary["requests"], 3);
    assert!(shards.join("shard-00000.jsonl").exists());
    assert!(shards.join("shard-00001.jsonl").exists());

    let url = serve(200);
    let results = dir.path().join("results.jsonl");
    let o = simt(&[
        "batch",
        "run",
        p(&shards.join("shard-00000.jsonl")),
        p(&shards.join("shard-00001.jsonl")),
        "--endpoint",
        &url,
        "--out",
        p(&results),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let merged = dir.path().join("merged.jsonl");
    let o = simt(&["batch", "merge", p(&results), p(&results), "--out", p(&merged)]);
    assert!(o.status.success());
    let recs: Vec<Value> = std::fs::read_to_string(&merged)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0]["response"], "ONE SENTENCE");

    let other = dir.path().join("other.jsonl");
    let id = recs[0]["custom_id"].as_str().unwrap();
    std::fs::write(&other, format!("{}\n", json!({ "custom_id": id, "response": "different" }))).unwrap();
    let o = simt(&["batch", "merge", p(&results), p(&other), "--out", p(&merged)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(id));
}

#[test]
fn sweep_writes_rows_and_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts");
    let o = simt(&[
        "--format",
        "jsonl",
        "sweep",
        "--config",
        p(&fixture("sweep/config.json")),
        "--prompts",
        p(&prompts),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0].get("run_header").is_some());
    assert_eq!(lines.len(), 9);
    assert_eq!(std::fs::read_dir(&prompts).unwrap().count(), 8);
    let cut = std::fs::read_to_string(prompts.join("cut.txt")).unwrap();
    assert!(cut.contains("Only use"));
}

#[test]
fn adaptive_reports_both_arms() {
    let url = serve(200);
    let o = simt(&[
        "--format",
        "jsonl",
        "adaptive",
        "--config",
        p(&fixture("sweep/config.json")),
        "--promote",
        "CUT",
        "--bleu",
        "70",
        "--al",
        "0.5",
        "--top-n",
        "1",
        "--endpoint",
        &url,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0].get("run_header").is_some());
    let arms: Vec<&str> = lines.iter().filter_map(|l| l["arm"].as_str()).collect();
    assert_eq!(arms, ["baseline", "promoted"]);
}
