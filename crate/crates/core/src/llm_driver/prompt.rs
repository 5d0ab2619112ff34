use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::actions::{Action, ActionStats};
use crate::error::{Error, Result};

/// Token the model emits when it notices it would need unseen words.
pub const SENTINEL: &str = "<VIOLATION>";

const DEFAULT_CONSTRAINT: &str = "Keep to the original word order and meaning";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// The whole sentence at once; the model simulates the steps itself.
    SingleShot,
    /// One word per request; output may only be appended.
    PrefixFeed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub template_id: String,
    pub source_lang: String,
    pub target_lang: String,
    /// READ and WRITE are always available and need not be listed.
    pub allowed_actions: BTreeSet<Action>,
    pub stats: ActionStats,
    pub demonstrations: Vec<(String, String)>,
    /// Word-order and meaning constraint; empty selects the default.
    pub constraint_block: String,
}

impl PromptSpec {
    pub fn new(source_lang: &str, target_lang: &str) -> Self {
        PromptSpec {
            template_id: "simt-actions-v1".into(),
            source_lang: source_lang.into(),
            target_lang: target_lang.into(),
            allowed_actions: BTreeSet::new(),
            stats: ActionStats::new(),
            demonstrations: Vec::new(),
            constraint_block: String::new(),
        }
    }

    pub fn with_actions(mut self, actions: impl IntoIterator<Item = Action>) -> Self {
        self.allowed_actions.extend(actions);
        self
    }

    pub fn with_stats(mut self, stats: ActionStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn with_demonstrations(mut self, demos: Vec<(String, String)>) -> Self {
        self.demonstrations = demos;
        self
    }

    /// Allowed extended actions, in prompt order.
    pub fn extended_actions(&self) -> Vec<Action> {
        Action::EXTENDED
            .into_iter()
            .filter(|a| self.allowed_actions.contains(a))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for a in self.extended_actions() {
            if self.stats.get(a).is_none() {
                return Err(Error::MissingStats(a));
            }
        }
        Ok(())
    }
}

fn definition(action: Action) -> &'static str {
    match action {
        Action::Read => "Wait for the next source word (default).",
        Action::Write => "Output a target word or phrase.",
        Action::Drop => {
            "Remove previously read word(s) if they are meaningless fillers (e.g., \"uh\", \"um\"), \
             repetitions, false starts, or self-corrections. Use only when clearly justified."
        }
        Action::PartialSummarization => {
            "Merge or simplify redundant or equivalent expressions, while preserving the meaning \
             and tone (e.g., politeness, speculation)."
        }
        Action::Cut => {
            "Intentionally split the sentence into two shorter, independently translatable units. \
             Use only when the sentence is long or syntactically complex."
        }
        Action::Pronominalization => {
            "Replace a repeated noun phrase with a pronoun ONLY IF the referent is unambiguous."
        }
    }
}

/// `- DROP → AL ≈ 0.851s, BLEU ≈ 58.94`
pub fn stats_line(action: Action, al_seconds: f64, bleu: f64) -> String {
    format!("- {} → AL ≈ {al_seconds:.3}s, BLEU ≈ {bleu:.2}", action.short_name())
}

fn or_list(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => (*one).to_owned(),
        [a, b] => format!("{a} or {b}"),
        [init @ .., last] => format!("{}, or {last}", init.join(", ")),
    }
}

/// Renders the system prompt. Output is a pure function of `spec` and `mode`.
pub fn render_prompt(spec: &PromptSpec, mode: PromptMode) -> Result<String> {
    spec.validate()?;
    let extended = spec.extended_actions();
    let mut p = String::new();

    let _ = writeln!(
        p,
        "You are a simultaneous translation({}-{}) agent. Your task is to read a source sentence \
         word by word, and decide what action to take at each step to optimize the balance between \
         translation quality and latency. Keep to the original meaning and word order of the \
         sentence when doing translation. You can choose from the following actions:",
        spec.source_lang, spec.target_lang
    );
    for a in [Action::Read, Action::Write].into_iter().chain(extended.iter().copied()) {
        let _ = writeln!(p, "- {}: {}", a.short_name(), definition(a));
    }

    let constraint = if spec.constraint_block.trim().is_empty() {
        DEFAULT_CONSTRAINT
    } else {
        spec.constraint_block.trim()
    };
    if extended.is_empty() {
        let _ = writeln!(p, "{constraint}.");
    } else {
        let _ = writeln!(
            p,
            "{constraint}, and do the new actions only if it considerably improve the latency or \
             quality of interpretation. Based on dev set evaluation:"
        );
        for &a in &extended {
            let s = spec.stats.get(a).expect("validated");
            let _ = writeln!(p, "{}", stats_line(a, s.al_seconds, s.bleu));
        }
        let cheap: Vec<&str> = extended
            .iter()
            .filter(|a| matches!(a, Action::Drop | Action::PartialSummarization | Action::Cut))
            .map(|a| a.short_name())
            .collect();
        if !cheap.is_empty() {
            let _ = writeln!(
                p,
                "Only use {} if they reduce latency without hurting translation quality.",
                or_list(&cheap)
            );
        }
    }

    if !spec.demonstrations.is_empty() {
        let _ = writeln!(p, "Examples of good simultaneous translations:");
        for (i, (src, tgt)) in spec.demonstrations.iter().enumerate() {
            let _ = writeln!(p, "Example {}:\nSource: {src}\nTranslation: {tgt}", i + 1);
        }
    }

    let basis = if extended.is_empty() {
        String::new()
    } else {
        " **strictly based on the statistics provided above**".to_owned()
    };
    match mode {
        PromptMode::SingleShot => {
            let _ = writeln!(
                p,
                "--- You will receive the full source sentence. Your job is: 1. Simulate the \
                 step-by-step translation process internally; 2. Carefully choose the action to \
                 take at each step{basis}; 3. Output: action sequence of every step, explanation \
                 of choosing each action, and the full translation of the sentence."
            );
            let _ = writeln!(
                p,
                "Answer with one JSON object: {{\"steps\": [{{\"i\": <step>, \"src\": <word>, \
                 \"action\": <ACTION>, \"out\": <fragment or omitted>, \"why\": <explanation>}}], \
                 \"final\": <full translation>}}."
            );
        }
        PromptMode::PrefixFeed => {
            let _ = writeln!(
                p,
                "--- You will receive **a word at one time** Your job is: 1. Simulate the \
                 step-by-step translation process internally; 2. Carefully choose the action to \
                 take at each step{basis}; 3. Output: At each step, output the action you chose \
                 and the incremental translation. If you choose READ or other actions that don't \
                 yield a translation, do not output the translation. Just give me the action. When \
                 given the complete sentence, output the whole sentence based on previous \
                 incremental translations. You are not allowed to modify or overwrite your \
                 previous output, only incremental translations are allowed."
            );
            let _ = writeln!(
                p,
                "Answer each step with one JSON object: {{\"action\": <ACTION>, \"output\": \
                 <incremental fragment or omitted>, \"final\": <whole translation, only when the \
                 sentence is complete>}}."
            );
        }
    }
    let _ = writeln!(p, "You are given only the prefix of the source.");
    let _ = writeln!(p, "DO NOT use any information beyond the current prefix.");
    let _ = write!(
        p,
        "If you find yourself relying on unseen future words, output the token {SENTINEL} and stop."
    );
    Ok(p)
}
