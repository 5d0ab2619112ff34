//! `simt`: command-line front end for the simultaneous translation harness.
//!
//! Every command writes a run header before its results. Exit codes: 0 ok,
//! 1 usage, 2 data error, 3 endpoint error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use simt_core::LangProfile;

#[derive(Parser, Debug)]
#[command(name = "simt", version, about = "Simultaneous translation harness")]
struct Cli {
    /// Log level (error, warn, info, debug, trace)
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    /// Output format
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    /// Write results here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Jsonl,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Lang {
    Zh,
    De,
}

impl From<Lang> for LangProfile {
    fn from(l: Lang) -> Self {
        match l {
            Lang::Zh => LangProfile::CharacterZh,
            Lang::De => LangProfile::SpaceTokenized,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Source word timestamps (JSONL)
    #[arg(long)]
    pub src_times: PathBuf,
    /// Alignment pairs per sentence (JSONL, 0-based source/target indices)
    #[arg(long)]
    pub align: PathBuf,
    /// Target sentences, one per line, words separated by spaces
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, value_enum)]
    pub lang: Lang,
    /// Seconds per spoken unit (word for de, character for zh)
    #[arg(long)]
    pub speak_rate: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct EndpointArgs {
    /// Base URL of an OpenAI-compatible endpoint
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key
    #[arg(long, default_value = "SIMT_API_KEY")]
    pub api_key_env: String,
    /// Save every exchange to this log
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Answer from a recorded log instead of the endpoint
    #[arg(long, conflicts_with = "endpoint")]
    pub replay: Option<PathBuf>,
    #[arg(long, default_value = "qwen3-8b")]
    pub model: String,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: u32,
    /// Request timeout in seconds
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Insert WAIT markers so no target word precedes its aligned source word
    Align(ScheduleArgs),
    /// Build segment timetables and unit emission times
    Schedule {
        #[command(flatten)]
        args: ScheduleArgs,
        /// Also write unit emissions (JSONL) here
        #[arg(long)]
        emissions: Option<PathBuf>,
    },
    /// Time-based Average Lagging of emissions against source timestamps
    Al {
        #[arg(long)]
        src_times: PathBuf,
        #[arg(long)]
        emissions: PathBuf,
    },
    /// Corpus BLEU, chrF and TER
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum)]
        lang: Lang,
    },
    /// Validate action traces and turn them into emission times
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        src_times: Option<PathBuf>,
        /// Uniform word spacing in seconds when no timestamps are given
        #[arg(long, default_value_t = 0.3)]
        spacing: f64,
        #[arg(long, value_enum)]
        lang: Lang,
        /// Compute delay added to every commit, in seconds
        #[arg(long, default_value_t = 0.0)]
        delay: f64,
    },
    /// Select in-context examples by keyword category or embedding cluster
    Retrieve {
        /// Example bank (JSONL)
        #[arg(long)]
        bank: PathBuf,
        /// Queries (JSONL with id, text and optional emb)
        #[arg(long)]
        query: PathBuf,
        /// Keyword rules (JSON); without it clustering is used
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value_t = simt_core::retrieval::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = simt_core::retrieval::DEFAULT_SEED)]
        seed: u64,
        /// Examples per query
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
    /// Batch request files: build, run, merge
    #[command(subcommand)]
    Batch(BatchCommand),
    /// Word-by-word decoding against an endpoint
    Infer {
        /// Source sentences, one per line
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, value_enum)]
        lang: Lang,
        /// Extended actions to allow (comma separated)
        #[arg(long, value_delimiter = ',')]
        actions: Vec<String>,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Score one row per action combination
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Write each row's rendered prompt into this directory
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Rerun the slowest sentences with one action's statistics improved
    Adaptive {
        #[arg(long)]
        config: PathBuf,
        /// Action to promote
        #[arg(long)]
        promote: String,
        #[arg(long)]
        bleu: f64,
        /// Promoted AL in seconds
        #[arg(long)]
        al: f64,
        #[arg(long, default_value_t = 100)]
        top_n: usize,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum BatchCommand {
    /// Trim, deduplicate, hash and shard sentences into request files
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, value_enum)]
        lang: Lang,
        #[arg(long, value_delimiter = ',')]
        actions: Vec<String>,
        #[arg(long, default_value_t = 500)]
        shard_size: usize,
        /// Directory for shard files
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "qwen3-8b")]
        model: String,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Send shard requests and write one result file
    Run {
        /// Shard files
        #[arg(required = true)]
        shards: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Merge result files by custom id
    Merge {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();

    let out = output::Output::new(cli.out.clone(), cli.format);
    let result = match cli.command {
        Command::Align(a) => commands::align(&out, &a),
        Command::Schedule { args, emissions } => commands::schedule(&out, &args, emissions.as_deref()),
        Command::Al { src_times, emissions } => commands::al(&out, &src_times, &emissions),
        Command::Score { hyp, reference, lang } => commands::score(&out, &hyp, &reference, lang.into()),
        Command::Replay { trace, src_times, spacing, lang, delay } => {
            commands::replay(&out, &trace, src_times.as_deref(), spacing, lang.into(), delay)
        }
        Command::Retrieve { bank, query, rules, k, seed, n } => {
            commands::retrieve(&out, &bank, &query, rules.as_deref(), k, seed, n)
        }
        Command::Batch(b) => commands::batch(&out, b),
        Command::Infer { input, stats, lang, actions, endpoint } => {
            commands::infer(&out, &input, stats.as_deref(), lang.into(), &actions, &endpoint)
        }
        Command::Sweep { config, prompts } => commands::sweep(&out, &config, prompts.as_deref()),
        Command::Adaptive { config, promote, bleu, al, top_n, endpoint } => {
            commands::adaptive(&out, &config, &promote, bleu, al, top_n, &endpoint)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<simt_core::Error>() {
            return if core.is_endpoint() { 3 } else { 2 };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 1;
        }
    }
    2
}
