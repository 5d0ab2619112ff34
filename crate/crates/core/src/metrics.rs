//! Surface-overlap quality metrics: BLEU, chrF and TER.
//!
//! Conventions (fixed, and echoed into every report through [`ScoreReport`]):
//!
//! * `character_zh`: BLEU and TER operate on non-whitespace characters.
//! * `space_tokenized`: whitespace split, with punctuation split off as
//!   separate tokens (except `.`/`,` between digits).
//! * BLEU: 4-gram, brevity penalty, effective order (orders with no
//!   hypothesis n-grams are left out). No smoothing at corpus level;
//!   exponential smoothing at sentence level.
//! * chrF: character 1..6-grams with whitespace removed, precision and
//!   recall averaged over effective orders, beta = 2.
//! * TER: word (or character) edit distance plus greedy phrase shifts, at
//!   most [`TER_MAX_SHIFTS`] per sentence and phrases up to
//!   [`TER_MAX_SHIFT_LEN`] tokens; `100 * edits / |ref|`, unbounded above.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::LangProfile;

pub const BLEU_MAX_ORDER: usize = 4;
pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
pub const TER_MAX_SHIFTS: usize = 10;
pub const TER_MAX_SHIFT_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: f64,
    pub chrf: f64,
    pub ter: f64,
    pub n_sentences: usize,
    pub profile: LangProfile,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '„' | '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '–' | '—' | '，' | '。' | '、' | '！' | '？' | '：' | '；'
        )
}

pub fn tokenize(text: &str, profile: LangProfile) -> Vec<String> {
    match profile {
        LangProfile::CharacterZh => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        LangProfile::SpaceTokenized => {
            let mut out = Vec::new();
            for word in text.split_whitespace() {
                let chars: Vec<char> = word.chars().collect();
                let mut cur = String::new();
                for (i, &c) in chars.iter().enumerate() {
                    let numeric_sep = matches!(c, '.' | ',')
                        && i > 0
                        && i + 1 < chars.len()
                        && chars[i - 1].is_ascii_digit()
                        && chars[i + 1].is_ascii_digit();
                    if is_punct(c) && !numeric_sep {
                        if !cur.is_empty() {
                            out.push(std::mem::take(&mut cur));
                        }
                        out.push(c.to_string());
                    } else {
                        cur.push(c);
                    }
                }
                if !cur.is_empty() {
                    out.push(cur);
                }
            }
            out
        }
    }
}

fn check_corpus(hypotheses: &[String], references: &[String]) -> Result<()> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and hypothesis/reference totals for one order.
fn overlap<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

// ---- BLEU ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn from_tokens(hyp: &[String], reference: &[String]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let (m, h, _) = overlap(hyp, reference, n);
            s.matches[n - 1] = m;
            s.totals[n - 1] = h;
        }
        s
    }

    fn add(&mut self, other: &BleuStats) {
        for i in 0..BLEU_MAX_ORDER {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    fn effective_order(&self) -> usize {
        self.totals.iter().take_while(|&&t| t > 0).count()
    }

    /// Unsmoothed score: zero as soon as one effective order has no match.
    pub fn score(&self) -> f64 {
        let order = self.effective_order();
        if order == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..order {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / order as f64).exp()
    }

    /// Exponentially smoothed score: the k-th order with zero matches gets
    /// precision `1 / (2^k * total)`.
    pub fn score_exp_smoothed(&self) -> f64 {
        let order = self.effective_order();
        if order == 0 {
            return 0.0;
        }
        let mut factor = 1.0;
        let mut log_sum = 0.0;
        for n in 0..order {
            let p = if self.matches[n] == 0 {
                factor *= 2.0;
                1.0 / (factor * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / order as f64).exp()
    }
}

pub fn bleu(hypotheses: &[String], references: &[String], profile: LangProfile) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::from_tokens(&tokenize(h, profile), &tokenize(r, profile)));
    }
    Ok(total.score())
}

pub fn sentence_bleu(hypothesis: &str, reference: &str, profile: LangProfile) -> f64 {
    BleuStats::from_tokens(&tokenize(hypothesis, profile), &tokenize(reference, profile))
        .score_exp_smoothed()
}

// ---- chrF ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChrfStats {
    /// (matches, hypothesis n-grams, reference n-grams) per order.
    pub orders: [(usize, usize, usize); CHRF_ORDER],
}

impl ChrfStats {
    pub fn from_texts(hyp: &str, reference: &str) -> Self {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        let mut s = ChrfStats::default();
        for n in 1..=CHRF_ORDER {
            s.orders[n - 1] = overlap(&h, &r, n);
        }
        s
    }

    fn add(&mut self, other: &ChrfStats) {
        for (a, b) in self.orders.iter_mut().zip(other.orders.iter()) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
    }

    pub fn score(&self) -> f64 {
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut effective = 0usize;
        for &(m, h, r) in &self.orders {
            if h > 0 && r > 0 {
                precision += m as f64 / h as f64;
                recall += m as f64 / r as f64;
                effective += 1;
            }
        }
        if effective == 0 {
            return 0.0;
        }
        precision /= effective as f64;
        recall /= effective as f64;
        if precision + recall == 0.0 {
            return 0.0;
        }
        let b2 = CHRF_BETA * CHRF_BETA;
        100.0 * (1.0 + b2) * precision * recall / (b2 * precision + recall)
    }
}

pub fn chrf(hypotheses: &[String], references: &[String]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut total = ChrfStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&ChrfStats::from_texts(h, r));
    }
    Ok(total.score())
}

// ---- TER ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EditOp {
    Match,
    Substitute,
    Insert, // hypothesis token missing from reference side
    Delete, // reference token missing from hypothesis
}

/// Levenshtein distance between token sequences with a backtrace.
fn edit_path<T: PartialEq>(hyp: &[T], reference: &[T]) -> (usize, Vec<EditOp>) {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == reference[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same { EditOp::Match } else { EditOp::Substitute });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Insert);
            i -= 1;
        } else {
            ops.push(EditOp::Delete);
            j -= 1;
        }
    }
    ops.reverse();
    (d[n][m], ops)
}

fn apply_shift<T: Clone>(tokens: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = Vec::with_capacity(tokens.len());
    rest.extend_from_slice(&tokens[..start]);
    rest.extend_from_slice(&tokens[start + len..]);
    let at = if dest > start { dest - len } else { dest };
    let mut out = Vec::with_capacity(tokens.len());
    out.extend_from_slice(&rest[..at]);
    out.extend_from_slice(&tokens[start..start + len]);
    out.extend_from_slice(&rest[at..]);
    out
}

/// Edit count (shifts included) turning `hyp` into `reference`.
pub fn ter_edits<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> usize {
    let mut current = hyp.to_vec();
    let mut shifts = 0usize;
    let (mut cost, mut ops) = edit_path(&current, reference);

    while cost > 0 && shifts < TER_MAX_SHIFTS {
        // Per-position match flags and, for each reference position, the
        // hypothesis position it follows in the current alignment.
        let mut hyp_ok = vec![false; current.len()];
        let mut ref_ok = vec![false; reference.len()];
        let mut hyp_after_ref = vec![0usize; reference.len()];
        let (mut hi, mut rj) = (0usize, 0usize);
        for op in &ops {
            match op {
                EditOp::Match | EditOp::Substitute => {
                    if *op == EditOp::Match {
                        hyp_ok[hi] = true;
                        ref_ok[rj] = true;
                    }
                    hi += 1;
                    hyp_after_ref[rj] = hi;
                    rj += 1;
                }
                EditOp::Insert => hi += 1,
                EditOp::Delete => {
                    hyp_after_ref[rj] = hi;
                    rj += 1;
                }
            }
        }

        let mut best: Option<(usize, Vec<T>, Vec<EditOp>)> = None;
        for start in 0..current.len() {
            let max_len = TER_MAX_SHIFT_LEN.min(current.len() - start);
            for len in 1..=max_len {
                if hyp_ok[start..start + len].iter().all(|&ok| ok) {
                    continue;
                }
                let span = &current[start..start + len];
                for j in 0..reference.len().saturating_sub(len - 1) {
                    if reference[j..j + len] != *span || ref_ok[j..j + len].iter().all(|&ok| ok) {
                        continue;
                    }
                    let dest = if j == 0 { 0 } else { hyp_after_ref[j - 1] };
                    if dest >= start && dest <= start + len {
                        continue;
                    }
                    let moved = apply_shift(&current, start, len, dest);
                    let (new_cost, new_ops) = edit_path(&moved, reference);
                    if new_cost < cost && best.as_ref().is_none_or(|(c, _, _)| new_cost < *c) {
                        best = Some((new_cost, moved, new_ops));
                    }
                }
            }
        }
        match best {
            Some((c, moved, new_ops)) => {
                current = moved;
                cost = c;
                ops = new_ops;
                shifts += 1;
            }
            None => break,
        }
    }
    shifts + cost
}

pub fn ter(hypotheses: &[String], references: &[String], profile: LangProfile) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let ht = tokenize(h, profile);
        let rt = tokenize(r, profile);
        edits += ter_edits(&ht, &rt);
        ref_len += rt.len();
    }
    Ok(if ref_len > 0 {
        100.0 * edits as f64 / ref_len as f64
    } else if edits > 0 {
        100.0
    } else {
        0.0
    })
}

pub fn score_corpus(
    hypotheses: &[String],
    references: &[String],
    profile: LangProfile,
) -> Result<ScoreReport> {
    Ok(ScoreReport {
        bleu: bleu(hypotheses, references, profile)?,
        chrf: chrf(hypotheses, references)?,
        ter: ter(hypotheses, references, profile)?,
        n_sentences: hypotheses.len(),
        profile,
    })
}
