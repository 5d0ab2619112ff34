//! Prompting, the word-by-word prefix-feeding protocol, and batch jobs
//! against a chat-completion endpoint.

mod batch;
mod client;
mod prefix_feed;
mod prompt;

pub use batch::{
    build_batch, custom_id, merge_result_files, merge_results, normalize_sentence, run_batch,
    BatchJob, BatchRequest, Conflict, MergeOutcome, ResultRecord, Shard, CUSTOM_ID_DIGEST,
};
pub use client::{
    call_with_retry, request_key, ChatClient, ChatMessage, ChatRequest, ClientError, ClientErrorKind,
    DecodingConfig, HttpChatClient, LogEntry, RecordingClient, ReplayClient, ResponseFormat,
    RetryPolicy,
};
pub use prefix_feed::{
    parse_step_reply, run_prefix_feed, step_user_message, FailureReason, FeedStatus, PrefixFeedRun,
    StepReply,
};
pub use prompt::{render_prompt, stats_line, PromptMode, PromptSpec, SENTINEL};
