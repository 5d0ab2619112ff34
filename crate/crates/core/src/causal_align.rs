//! Causal scheduling of target words against the source timeline.
//!
//! A target word may not be spoken before the source words it is aligned to
//! have been heard. [`insert_waits`] marks the places where the target has to
//! pause, [`build_timetable`] turns those markers into speaking segments with
//! onsets, and [`emissions_from_timetable`] expands segments into per-unit
//! onsets for the latency metric.
//!
//! Speaking is modelled at a constant rate per unit ([`SpeakingModel`]). The
//! same model drives both wait insertion and segment merging, so a schedule
//! built from `insert_waits` output with the same model is causal.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::LangProfile;
use crate::timeline::{Seconds, SourceTimeline, TargetEmissions, UnitKind};

/// Source/target word links, both sides 1-based.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSet {
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    pub fn new(links: impl IntoIterator<Item = (usize, usize)>) -> Self {
        AlignmentSet {
            links: links.into_iter().collect(),
        }
    }

    /// Builds from the on-disk 0-based `[source, target]` pairs.
    pub fn from_zero_based(pairs: &[[usize; 2]]) -> Self {
        AlignmentSet::new(pairs.iter().map(|[s, t]| (s + 1, t + 1)))
    }

    pub fn to_zero_based(&self) -> Vec<[usize; 2]> {
        self.links.iter().map(|&(s, t)| [s - 1, t - 1]).collect()
    }

    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn check_bounds(&self, source_len: usize, target_len: usize) -> Result<()> {
        for &(s, t) in &self.links {
            if s == 0 || t == 0 || s > source_len || t > target_len {
                return Err(Error::AlignmentOutOfBounds {
                    source_index: s,
                    target_index: t,
                    source_len,
                    target_len,
                });
            }
        }
        Ok(())
    }

    /// All source indices linked to target word `target`.
    pub fn sources_of(&self, target: usize) -> impl Iterator<Item = usize> + '_ {
        self.links
            .iter()
            .filter(move |&&(_, t)| t == target)
            .map(|&(s, _)| s)
    }

    /// Latest source index linked to target word `target`.
    pub fn latest_source(&self, target: usize) -> Option<usize> {
        self.sources_of(target).max()
    }
}

/// Constant-rate speaking model used for merge decisions and unit onsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakingModel {
    pub unit: UnitKind,
    pub seconds_per_unit: Seconds,
}

impl SpeakingModel {
    pub fn new(unit: UnitKind, seconds_per_unit: Seconds) -> Result<Self> {
        if !(seconds_per_unit.is_finite() && seconds_per_unit >= 0.0) {
            return Err(Error::Config(format!(
                "speaking duration must be a non-negative number, got {seconds_per_unit}"
            )));
        }
        Ok(SpeakingModel {
            unit,
            seconds_per_unit,
        })
    }

    /// 0.30 s/word for space-delimited targets, 0.25 s/character for Chinese.
    pub fn for_profile(profile: LangProfile) -> Self {
        SpeakingModel {
            unit: profile.unit_kind(),
            seconds_per_unit: profile.default_seconds_per_unit(),
        }
    }

    pub fn units_in(&self, word: &str) -> usize {
        match self.unit {
            UnitKind::Word => 1,
            UnitKind::Character => word.chars().filter(|c| !c.is_whitespace()).count(),
        }
    }

    pub fn duration_of(&self, word: &str) -> Seconds {
        self.units_in(word) as f64 * self.seconds_per_unit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MarkedItem {
    /// A target word; `anchor` is its latest aligned source word, if any.
    Word { surface: String, anchor: Option<usize> },
    /// Pause until source word `anchor` has been spoken.
    Wait { anchor: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WaitMarkedTarget {
    pub items: Vec<MarkedItem>,
}

impl WaitMarkedTarget {
    /// Target words with the markers stripped.
    pub fn words(&self) -> Vec<String> {
        self.items
            .iter()
            .filter_map(|item| match item {
                MarkedItem::Word { surface, .. } => Some(surface.clone()),
                MarkedItem::Wait { .. } => None,
            })
            .collect()
    }

    pub fn wait_count(&self) -> usize {
        self.items
            .iter()
            .filter(|i| matches!(i, MarkedItem::Wait { .. }))
            .count()
    }

    pub fn wait_anchors(&self) -> Vec<usize> {
        self.items
            .iter()
            .filter_map(|i| match i {
                MarkedItem::Wait { anchor } => Some(*anchor),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub words: Vec<String>,
    pub onset: Seconds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentTimetable {
    pub segments: Vec<Segment>,
}

impl SegmentTimetable {
    pub fn words(&self) -> Vec<String> {
        self.segments
            .iter()
            .flat_map(|s| s.words.iter().cloned())
            .collect()
    }
}

fn sentence_onset(timeline: &SourceTimeline) -> Seconds {
    timeline.start_time(1).unwrap_or(0.0)
}

fn anchor_end(timeline: &SourceTimeline, anchor: usize) -> Result<Seconds> {
    timeline.end_time(anchor).ok_or(Error::AnchorOutOfBounds {
        anchor,
        len: timeline.len(),
    })
}

/// Marks where the target must pause for its aligned source words.
///
/// Speaking starts at the onset of the first source word and advances by the
/// model's duration per word. Before each aligned word the end time of its
/// latest aligned source word is compared with the running clock: if the
/// source word is still being spoken a wait anchored at it is inserted and the
/// clock jumps to that end time. Unaligned words never add a wait.
pub fn insert_waits(
    target_words: &[String],
    alignment: &AlignmentSet,
    timeline: &SourceTimeline,
    model: &SpeakingModel,
) -> Result<WaitMarkedTarget> {
    alignment.check_bounds(timeline.len(), target_words.len())?;

    let mut clock = sentence_onset(timeline);
    let mut items = Vec::with_capacity(target_words.len());
    for (k, word) in target_words.iter().enumerate() {
        let anchor = alignment.latest_source(k + 1);
        if let Some(a) = anchor {
            let ready = anchor_end(timeline, a)?;
            if ready > clock {
                items.push(MarkedItem::Wait { anchor: a });
                clock = ready;
            }
        }
        items.push(MarkedItem::Word {
            surface: word.clone(),
            anchor,
        });
        clock += model.duration_of(word);
    }
    Ok(WaitMarkedTarget { items })
}

/// Groups marked target words into speaking segments.
///
/// The words before the first wait start at the sentence onset. At each wait
/// the anchor's end time `W` is compared with the moment the previous segment
/// finishes: if `W` comes first the new words continue the previous segment,
/// otherwise a new segment starts at `W`.
pub fn build_timetable(
    marked: &WaitMarkedTarget,
    timeline: &SourceTimeline,
    model: &SpeakingModel,
) -> Result<SegmentTimetable> {
    let mut segments = Vec::new();
    let mut current = Segment {
        words: Vec::new(),
        onset: sentence_onset(timeline),
    };
    let mut clock = current.onset;

    for item in &marked.items {
        match item {
            MarkedItem::Wait { anchor } => {
                let ready = anchor_end(timeline, *anchor)?;
                if current.words.is_empty() {
                    current.onset = current.onset.max(ready);
                    clock = current.onset;
                } else if ready > clock {
                    segments.push(std::mem::replace(
                        &mut current,
                        Segment {
                            words: Vec::new(),
                            onset: ready,
                        },
                    ));
                    clock = ready;
                }
            }
            MarkedItem::Word { surface, anchor } => {
                if let Some(a) = anchor {
                    anchor_end(timeline, *a)?;
                }
                current.words.push(surface.clone());
                clock += model.duration_of(surface);
            }
        }
    }
    if !current.words.is_empty() {
        segments.push(current);
    }
    Ok(SegmentTimetable { segments })
}

/// Spreads each segment's units at a constant rate from the segment onset.
pub fn emissions_from_timetable(table: &SegmentTimetable, model: &SpeakingModel) -> TargetEmissions {
    let mut onsets = Vec::new();
    for seg in &table.segments {
        let mut pos = 0usize;
        for word in &seg.words {
            for _ in 0..model.units_in(word) {
                onsets.push(seg.onset + pos as f64 * model.seconds_per_unit);
                pos += 1;
            }
        }
    }
    TargetEmissions {
        onsets,
        unit_kind: model.unit,
    }
}

/// Onset of the first unit of every target word under a timetable.
pub fn word_onsets(table: &SegmentTimetable, model: &SpeakingModel) -> Vec<Seconds> {
    let mut out = Vec::new();
    for seg in &table.segments {
        let mut t = seg.onset;
        for word in &seg.words {
            out.push(t);
            t += model.duration_of(word);
        }
    }
    out
}

/// Runs the full chain: waits, timetable, unit emissions.
pub fn schedule(
    target_words: &[String],
    alignment: &AlignmentSet,
    timeline: &SourceTimeline,
    model: &SpeakingModel,
) -> Result<(WaitMarkedTarget, SegmentTimetable, TargetEmissions)> {
    let marked = insert_waits(target_words, alignment, timeline, model)?;
    let table = build_timetable(&marked, timeline, model)?;
    let emissions = emissions_from_timetable(&table, model);
    Ok((marked, table, emissions))
}

// ---- file records -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: String,
    pub pairs: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedItemRecord {
    pub kind: ItemKind,
    pub w: String,
    pub anchor: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Word,
    Wait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedRecord {
    pub id: String,
    pub items: Vec<MarkedItemRecord>,
}

impl MarkedRecord {
    pub fn from_marked(id: &str, marked: &WaitMarkedTarget) -> Self {
        let items = marked
            .items
            .iter()
            .map(|item| match item {
                MarkedItem::Word { surface, anchor } => MarkedItemRecord {
                    kind: ItemKind::Word,
                    w: surface.clone(),
                    anchor: anchor.map(|a| a - 1),
                },
                MarkedItem::Wait { anchor } => MarkedItemRecord {
                    kind: ItemKind::Wait,
                    w: String::new(),
                    anchor: Some(anchor - 1),
                },
            })
            .collect();
        MarkedRecord {
            id: id.to_owned(),
            items,
        }
    }

    pub fn to_marked(&self) -> Result<WaitMarkedTarget> {
        let items = self
            .items
            .iter()
            .map(|r| match r.kind {
                ItemKind::Word => Ok(MarkedItem::Word {
                    surface: r.w.clone(),
                    anchor: r.anchor.map(|a| a + 1),
                }),
                ItemKind::Wait => r
                    .anchor
                    .map(|a| MarkedItem::Wait { anchor: a + 1 })
                    .ok_or_else(|| Error::Config("wait item without anchor".into())),
            })
            .collect::<Result<_>>()?;
        Ok(WaitMarkedTarget { items })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub onset: f64,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimetableRecord {
    pub id: String,
    pub segments: Vec<SegmentRecord>,
}

impl TimetableRecord {
    pub fn from_table(id: &str, table: &SegmentTimetable) -> Self {
        TimetableRecord {
            id: id.to_owned(),
            segments: table
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    onset: s.onset,
                    words: s.words.clone(),
                })
                .collect(),
        }
    }

    pub fn to_table(&self) -> SegmentTimetable {
        SegmentTimetable {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    words: s.words.clone(),
                    onset: s.onset,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::TimedWord;
    use proptest::prelude::*;

    const EPS: f64 = 1e-9;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn word_model(rate: f64) -> SpeakingModel {
        SpeakingModel::new(UnitKind::Word, rate).unwrap()
    }

    fn timeline(spans: &[(f64, f64)]) -> SourceTimeline {
        let words = spans
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| TimedWord::new(format!("s{}", i + 1), s, e).unwrap())
            .collect();
        SourceTimeline::new("t", words).unwrap()
    }

    #[test]
    fn monotone_alignment_already_causal_needs_no_waits() {
        // Point-like source words end exactly when the matching target word
        // would be spoken at 0.3 s per word.
        let tl = timeline(&[(0.0, 0.0), (0.3, 0.3), (0.6, 0.6)]);
        let align = AlignmentSet::new([(1, 1), (2, 2), (3, 3)]);
        let marked = insert_waits(&words("a b c"), &align, &tl, &word_model(0.3)).unwrap();
        assert_eq!(marked.wait_count(), 0);
    }

    #[test]
    fn reordered_pair_waits_once() {
        // source "X Y" ends 1.0, 2.0; target "y x" with y<-Y, x<-X
        let tl = timeline(&[(0.5, 1.0), (1.5, 2.0)]);
        let align = AlignmentSet::new([(2, 1), (1, 2)]);
        let marked = insert_waits(&words("y x"), &align, &tl, &word_model(0.3)).unwrap();
        assert_eq!(
            marked.items,
            vec![
                MarkedItem::Wait { anchor: 2 },
                MarkedItem::Word {
                    surface: "y".into(),
                    anchor: Some(2)
                },
                MarkedItem::Word {
                    surface: "x".into(),
                    anchor: Some(1)
                },
            ]
        );
    }

    #[test]
    fn empty_alignment_inserts_nothing() {
        let tl = timeline(&[(0.0, 1.0), (1.0, 2.0)]);
        let marked =
            insert_waits(&words("a b c"), &AlignmentSet::default(), &tl, &word_model(0.3)).unwrap();
        assert_eq!(marked.wait_count(), 0);
        assert_eq!(marked.words(), words("a b c"));
    }

    #[test]
    fn out_of_bounds_link_names_pair() {
        let tl = timeline(&[(0.0, 1.0)]);
        let err = insert_waits(
            &words("a"),
            &AlignmentSet::new([(2, 1)]),
            &tl,
            &word_model(0.3),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::AlignmentOutOfBounds { source_index: 2, target_index: 1, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("(2, 1)"));
    }

    #[test]
    fn unmarked_target_is_one_segment_at_sentence_onset() {
        let tl = timeline(&[(0.4, 1.0), (1.0, 2.0)]);
        let marked = insert_waits(&words("a b"), &AlignmentSet::default(), &tl, &word_model(0.3))
            .unwrap();
        let table = build_timetable(&marked, &tl, &word_model(0.3)).unwrap();
        assert_eq!(table.segments.len(), 1);
        assert_eq!(table.segments[0].onset, 0.4);
    }

    #[test]
    fn early_anchor_merges_into_previous_segment() {
        // Segment 1 "a b c" starts at 1.0 and is spoken until 1.9. The wait
        // before "d" is anchored at a source word ending at 1.5 < 1.9.
        let tl = timeline(&[(0.5, 1.0), (1.2, 1.5)]);
        let marked = WaitMarkedTarget {
            items: vec![
                MarkedItem::Wait { anchor: 1 },
                MarkedItem::Word { surface: "a".into(), anchor: Some(1) },
                MarkedItem::Word { surface: "b".into(), anchor: None },
                MarkedItem::Word { surface: "c".into(), anchor: None },
                MarkedItem::Wait { anchor: 2 },
                MarkedItem::Word { surface: "d".into(), anchor: Some(2) },
            ],
        };
        let table = build_timetable(&marked, &tl, &word_model(0.3)).unwrap();
        assert_eq!(table.segments.len(), 1);
        assert_eq!(table.segments[0].onset, 1.0);
        assert_eq!(table.segments[0].words, words("a b c d"));
    }

    #[test]
    fn late_anchor_starts_new_segment() {
        // Segment 1 "a" spoken 1.0..1.3; source word 2 ends at 3.0.
        let tl = timeline(&[(0.5, 1.0), (2.5, 3.0)]);
        let marked = WaitMarkedTarget {
            items: vec![
                MarkedItem::Wait { anchor: 1 },
                MarkedItem::Word { surface: "a".into(), anchor: Some(1) },
                MarkedItem::Wait { anchor: 2 },
                MarkedItem::Word { surface: "b".into(), anchor: Some(2) },
            ],
        };
        let table = build_timetable(&marked, &tl, &word_model(0.3)).unwrap();
        assert_eq!(table.segments.len(), 2);
        assert_eq!(table.segments[0].onset, 1.0);
        assert_eq!(table.segments[1].onset, 3.0);
    }

    #[test]
    fn anchor_out_of_bounds_in_timetable() {
        let tl = timeline(&[(0.0, 1.0)]);
        let marked = WaitMarkedTarget {
            items: vec![MarkedItem::Wait { anchor: 4 }],
        };
        assert!(matches!(
            build_timetable(&marked, &tl, &word_model(0.3)),
            Err(Error::AnchorOutOfBounds { anchor: 4, len: 1 })
        ));
    }

    #[test]
    fn word_emissions_are_linear_in_position() {
        let table = SegmentTimetable {
            segments: vec![Segment { words: words("a b"), onset: 1.0 }],
        };
        let em = emissions_from_timetable(&table, &word_model(0.3));
        assert_eq!(em.onsets.len(), 2);
        assert!((em.onsets[0] - 1.0).abs() < EPS);
        assert!((em.onsets[1] - 1.3).abs() < EPS);
    }

    #[test]
    fn empty_timetable_has_no_emissions() {
        let em = emissions_from_timetable(&SegmentTimetable::default(), &word_model(0.3));
        assert!(em.is_empty());
    }

    #[test]
    fn character_emissions_expand_words() {
        let table = SegmentTimetable {
            segments: vec![Segment { words: vec!["ab".into()], onset: 2.0 }],
        };
        let model = SpeakingModel::new(UnitKind::Character, 0.3).unwrap();
        let em = emissions_from_timetable(&table, &model);
        assert_eq!(em.unit_kind, UnitKind::Character);
        assert!((em.onsets[0] - 2.0).abs() < EPS);
        assert!((em.onsets[1] - 2.3).abs() < EPS);
    }

    #[test]
    fn marked_record_round_trips_zero_based() {
        let marked = WaitMarkedTarget {
            items: vec![
                MarkedItem::Wait { anchor: 2 },
                MarkedItem::Word { surface: "y".into(), anchor: Some(2) },
                MarkedItem::Word { surface: "z".into(), anchor: None },
            ],
        };
        let rec = MarkedRecord::from_marked("s", &marked);
        assert_eq!(rec.items[0].anchor, Some(1));
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains(r#""kind":"wait""#));
        assert_eq!(rec.to_marked().unwrap(), marked);
    }

    #[derive(Debug, Clone)]
    struct Case {
        spans: Vec<(f64, f64)>,
        target: Vec<String>,
        links: Vec<(usize, usize)>,
        rate: f64,
        chars: bool,
    }

    fn case() -> impl Strategy<Value = Case> {
        (1usize..8, 1usize..9, 0.0f64..0.6, any::<bool>())
            .prop_flat_map(|(n_src, n_tgt, rate, chars)| {
                (
                    prop::collection::vec((0.0f64..0.8, 0.0f64..0.8), n_src),
                    prop::collection::vec("[a-z]{1,4}", n_tgt),
                    prop::collection::vec((1..=n_src, 1..=n_tgt), 0..12),
                    Just(rate),
                    Just(chars),
                )
            })
            .prop_map(|(gaps, target, links, rate, chars)| {
                let mut t = 0.0;
                let spans = gaps
                    .into_iter()
                    .map(|(gap, dur)| {
                        let start = t + gap;
                        t = start + dur;
                        (start, t)
                    })
                    .collect();
                Case { spans, target, links, rate, chars }
            })
    }

    proptest! {
        #[test]
        fn schedule_is_causal(c in case()) {
            let tl = timeline(&c.spans);
            let align = AlignmentSet::new(c.links.iter().copied());
            let unit = if c.chars { UnitKind::Character } else { UnitKind::Word };
            let model = SpeakingModel::new(unit, c.rate).unwrap();
            let (_, table, _) = schedule(&c.target, &align, &tl, &model).unwrap();
            let onsets = word_onsets(&table, &model);
            for k in 1..=c.target.len() {
                for s in align.sources_of(k) {
                    let end = tl.end_time(s).unwrap();
                    prop_assert!(onsets[k - 1] >= end - EPS,
                        "target {} at {} before source {} end {}", k, onsets[k - 1], s, end);
                }
            }
        }

        #[test]
        fn stripping_waits_recovers_target(c in case()) {
            let tl = timeline(&c.spans);
            let align = AlignmentSet::new(c.links.iter().copied());
            let marked = insert_waits(&c.target, &align, &tl, &word_model(c.rate)).unwrap();
            prop_assert_eq!(marked.words(), c.target.clone());
            for item in &marked.items {
                if let MarkedItem::Wait { anchor } = item {
                    prop_assert!(*anchor >= 1 && *anchor <= tl.len());
                }
            }
        }

        #[test]
        fn timetable_preserves_order_and_onsets_increase(c in case()) {
            let tl = timeline(&c.spans);
            let align = AlignmentSet::new(c.links.iter().copied());
            let model = word_model(c.rate);
            let (_, table, em) = schedule(&c.target, &align, &tl, &model).unwrap();
            prop_assert_eq!(table.words(), c.target.clone());
            for pair in table.segments.windows(2) {
                prop_assert!(pair[1].onset > pair[0].onset);
            }
            for pair in em.onsets.windows(2) {
                prop_assert!(pair[1] >= pair[0]);
            }
        }

        #[test]
        fn satisfied_constraints_insert_nothing(
            n in 1usize..8,
            links in prop::collection::vec((1usize..8, 1usize..8), 0..10),
        ) {
            // Every source word is a point at the sentence onset, so every
            // alignment is already satisfied.
            let tl = timeline(&vec![(0.0, 0.0); n]);
            let target: Vec<String> = (0..7).map(|i| format!("t{i}")).collect();
            let align = AlignmentSet::new(links.into_iter().filter(|&(s, _)| s <= n));
            let marked = insert_waits(&target, &align, &tl, &word_model(0.3)).unwrap();
            prop_assert_eq!(marked.wait_count(), 0);
        }
    }
}
