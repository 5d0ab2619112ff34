//! Source word timings and target emission onsets.
//!
//! All times are seconds as `f64`. Word positions in this module are
//! 1-based, so `end_time(1)` is the end of the first source word.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub type Seconds = f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub surface: String,
    pub start: Seconds,
    pub end: Seconds,
}

impl TimedWord {
    pub fn new(surface: impl Into<String>, start: Seconds, end: Seconds) -> Result<Self> {
        let word = TimedWord {
            surface: surface.into(),
            start,
            end,
        };
        word.check(1)?;
        Ok(word)
    }

    fn check(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| Error::InvalidWord {
            index,
            reason: reason.to_owned(),
        };
        if !self.start.is_finite() || !self.end.is_finite() {
            return Err(bad("non-finite timestamp"));
        }
        if self.start < 0.0 {
            return Err(bad("negative start time"));
        }
        // Zero-duration words are allowed.
        if self.end < self.start {
            return Err(bad("end precedes start"));
        }
        Ok(())
    }

    pub fn duration(&self) -> Seconds {
        self.end - self.start
    }
}

/// Source words of one sentence in speaking order, end times non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTimeline {
    pub sentence_id: String,
    words: Vec<TimedWord>,
}

impl SourceTimeline {
    pub fn new(sentence_id: impl Into<String>, words: Vec<TimedWord>) -> Result<Self> {
        let mut previous: Option<Seconds> = None;
        for (i, w) in words.iter().enumerate() {
            w.check(i + 1)?;
            if let Some(prev) = previous {
                if w.end < prev {
                    return Err(Error::NonMonotoneTimeline {
                        index: i + 1,
                        end: w.end,
                        previous: prev,
                    });
                }
            }
            previous = Some(w.end);
        }
        Ok(SourceTimeline {
            sentence_id: sentence_id.into(),
            words,
        })
    }

    /// Builds a timeline of zero-gap words from end times alone; each word
    /// starts where the previous one ended (the first starts at 0).
    pub fn from_end_times(sentence_id: impl Into<String>, ends: &[Seconds]) -> Result<Self> {
        let mut words = Vec::with_capacity(ends.len());
        let mut start: Seconds = 0.0;
        for (i, &end) in ends.iter().enumerate() {
            let s = start.min(end);
            words.push(TimedWord {
                surface: format!("w{}", i + 1),
                start: s,
                end,
            });
            start = end;
        }
        SourceTimeline::new(sentence_id, words)
    }

    pub fn words(&self) -> &[TimedWord] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.words.iter().map(|w| w.surface.clone()).collect()
    }

    pub fn end_times(&self) -> Vec<Seconds> {
        self.words.iter().map(|w| w.end).collect()
    }

    /// End time of the 1-based word `j`.
    pub fn end_time(&self, j: usize) -> Option<Seconds> {
        j.checked_sub(1).and_then(|i| self.words.get(i)).map(|w| w.end)
    }

    /// Start time of the 1-based word `j`.
    pub fn start_time(&self, j: usize) -> Option<Seconds> {
        j.checked_sub(1).and_then(|i| self.words.get(i)).map(|w| w.start)
    }

    /// Maps a fractional 1-based source index onto the time axis by linear
    /// interpolation between word end times, clamped to `[t_1, t_|X|]`.
    pub fn time_at_index(&self, x: f64) -> Result<Seconds> {
        let n = self.words.len();
        if n == 0 {
            return Err(Error::EmptyTimeline);
        }
        let first = self.words[0].end;
        let last = self.words[n - 1].end;
        if x <= 1.0 {
            return Ok(first);
        }
        if x >= n as f64 {
            return Ok(last);
        }
        let i = x.floor() as usize;
        let w = x - i as f64;
        let lo = self.words[i - 1].end;
        let hi = self.words[i].end;
        Ok((1.0 - w) * lo + w * hi)
    }
}

/// Free-function form of [`SourceTimeline::time_at_index`].
pub fn time_at_index(x: f64, timeline: &SourceTimeline) -> Result<Seconds> {
    timeline.time_at_index(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Word,
    Character,
}

/// Onset time of every generated target unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEmissions {
    pub onsets: Vec<Seconds>,
    pub unit_kind: UnitKind,
}

impl TargetEmissions {
    pub fn new(onsets: Vec<Seconds>, unit_kind: UnitKind) -> Result<Self> {
        for (i, pair) in onsets.windows(2).enumerate() {
            if pair[1] < pair[0] {
                return Err(Error::Config(format!(
                    "emission onsets decrease at unit {}: {} < {}",
                    i + 2,
                    pair[1],
                    pair[0]
                )));
            }
        }
        if onsets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("non-finite emission onset".into()));
        }
        Ok(TargetEmissions { onsets, unit_kind })
    }

    pub fn empty(unit_kind: UnitKind) -> Self {
        TargetEmissions {
            onsets: Vec::new(),
            unit_kind,
        }
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    pub fn shifted(&self, delta: Seconds) -> Self {
        TargetEmissions {
            onsets: self.onsets.iter().map(|t| t + delta).collect(),
            unit_kind: self.unit_kind,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WordRecord {
    w: String,
    start: f64,
    end: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimelineRecord {
    id: String,
    words: Vec<WordRecord>,
}

/// Reads source timestamp JSONL. Errors carry the offending line number.
pub fn read_timelines(reader: impl BufRead) -> Result<Vec<SourceTimeline>> {
    jsonl::parse_lines::<TimelineRecord>(reader)?
        .into_iter()
        .map(|(line, rec)| {
            let words = rec
                .words
                .into_iter()
                .map(|w| TimedWord {
                    surface: w.w,
                    start: w.start,
                    end: w.end,
                })
                .collect();
            SourceTimeline::new(rec.id, words).map_err(|e| Error::parse(line, e.to_string()))
        })
        .collect()
}

pub fn read_timelines_file(path: &std::path::Path) -> Result<Vec<SourceTimeline>> {
    let file = std::fs::File::open(path)?;
    read_timelines(std::io::BufReader::new(file)).map_err(|e| e.with_path(path))
}

pub fn timeline_to_json(timeline: &SourceTimeline) -> serde_json::Value {
    let rec = TimelineRecord {
        id: timeline.sentence_id.clone(),
        words: timeline
            .words
            .iter()
            .map(|w| WordRecord {
                w: w.surface.clone(),
                start: w.start,
                end: w.end,
            })
            .collect(),
    };
    serde_json::to_value(rec).expect("timeline record serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionsRecord {
    pub id: String,
    pub unit: UnitKind,
    pub onsets: Vec<f64>,
}

impl EmissionsRecord {
    pub fn into_emissions(self) -> Result<(String, TargetEmissions)> {
        let em = TargetEmissions::new(self.onsets, self.unit)?;
        Ok((self.id, em))
    }
}

pub fn read_emissions(reader: impl BufRead) -> Result<Vec<(String, TargetEmissions)>> {
    jsonl::parse_lines::<EmissionsRecord>(reader)?
        .into_iter()
        .map(|(line, rec)| {
            rec.into_emissions()
                .map_err(|e| Error::parse(line, e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 1e-9;

    fn two_words() -> SourceTimeline {
        SourceTimeline::from_end_times("s", &[1.0, 2.0]).unwrap()
    }

    #[test]
    fn clamps_below_first_word() {
        assert_eq!(two_words().time_at_index(0.5).unwrap(), 1.0);
    }

    #[test]
    fn interpolates_between_words() {
        // (1 - 0.5) * 1.0 + 0.5 * 2.0
        assert!((two_words().time_at_index(1.5).unwrap() - 1.5).abs() < EPS);
    }

    #[test]
    fn clamps_above_last_word() {
        assert_eq!(two_words().time_at_index(7.0).unwrap(), 2.0);
    }

    #[test]
    fn empty_timeline_is_an_error() {
        let t = SourceTimeline::new("e", vec![]).unwrap();
        let err = t.time_at_index(1.0).unwrap_err();
        assert_eq!(err.to_string(), "empty source timeline");
    }

    #[test]
    fn zero_duration_words_are_accepted() {
        let w = TimedWord::new("uh", 1.2, 1.2).unwrap();
        assert_eq!(w.duration(), 0.0);
    }

    #[test]
    fn rejects_inverted_word() {
        assert!(TimedWord::new("x", 2.0, 1.0).is_err());
        assert!(TimedWord::new("x", -0.1, 1.0).is_err());
    }

    #[test]
    fn parser_rejects_non_monotone_with_line_number() {
        let input = concat!(
            r#"{"id":"a","words":[{"w":"x","start":0.0,"end":0.5}]}"#,
            "\n",
            r#"{"id":"b","words":[{"w":"x","start":0.0,"end":1.5},{"w":"y","start":0.2,"end":1.0}]}"#,
            "\n"
        );
        match read_timelines(input.as_bytes()).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("non-monotone"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_timeline_jsonl() {
        let input = r#"{"id":"s1","words":[{"w":"We","start":0.0,"end":0.3},{"w":"design","start":0.3,"end":0.7}]}"#;
        let tl = read_timelines(input.as_bytes()).unwrap();
        assert_eq!(tl.len(), 1);
        assert_eq!(tl[0].sentence_id, "s1");
        assert_eq!(tl[0].end_time(2), Some(0.7));
        assert_eq!(tl[0].start_time(1), Some(0.0));
        assert_eq!(tl[0].end_time(0), None);
    }

    fn monotone_ends() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..2.0, 1..10).prop_map(|gaps| {
            let mut acc = 0.0;
            gaps.into_iter()
                .map(|g| {
                    acc += g;
                    acc
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn monotone_in_index(ends in monotone_ends(), a in -1.0f64..12.0, b in -1.0f64..12.0) {
            let tl = SourceTimeline::from_end_times("p", &ends).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(tl.time_at_index(lo).unwrap() <= tl.time_at_index(hi).unwrap() + EPS);
        }

        #[test]
        fn exact_at_integer_indices(ends in monotone_ends()) {
            let tl = SourceTimeline::from_end_times("p", &ends).unwrap();
            for (j, &t) in ends.iter().enumerate() {
                prop_assert!((tl.time_at_index((j + 1) as f64).unwrap() - t).abs() < EPS);
            }
        }

        #[test]
        fn stays_within_span(ends in monotone_ends(), x in -5.0f64..20.0) {
            let tl = SourceTimeline::from_end_times("p", &ends).unwrap();
            let v = tl.time_at_index(x).unwrap();
            prop_assert!(v >= ends[0] - EPS && v <= ends[ends.len() - 1] + EPS);
        }
    }
}
