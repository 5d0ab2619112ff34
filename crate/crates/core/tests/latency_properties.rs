use proptest::prelude::*;
use simt_core::latency::{average_lagging_sec, LatencyResult};
use simt_core::timeline::{SourceTimeline, TargetEmissions, UnitKind};

fn cumulative(gaps: &[f64], start: f64) -> Vec<f64> {
    let mut acc = start;
    gaps.iter()
        .map(|g| {
            acc += g;
            acc
        })
        .collect()
}

fn run(ends: &[f64], onsets: &[f64]) -> LatencyResult {
    let tl = SourceTimeline::from_end_times("p", ends).unwrap();
    let em = TargetEmissions::new(onsets.to_vec(), UnitKind::Word).unwrap();
    average_lagging_sec(&tl, &em).unwrap()
}

fn al(ends: &[f64], onsets: &[f64]) -> f64 {
    run(ends, onsets).al_seconds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn delaying_every_onset_never_lowers_al_at_fixed_cutoff(
        src in prop::collection::vec(0.0f64..1.0, 1..8),
        tgt in prop::collection::vec(0.0f64..1.0, 1..8),
        offset in 0.0f64..3.0,
        delta in 0.0f64..2.0,
    ) {
        let ends = cumulative(&src, 0.0);
        let onsets = cumulative(&tgt, offset);
        let shifted: Vec<f64> = onsets.iter().map(|o| o + delta).collect();
        let (a, b) = (run(&ends, &onsets), run(&ends, &shifted));
        prop_assert!(b.tau_star <= a.tau_star);
        if a.tau_star == b.tau_star {
            prop_assert!(b.al_seconds >= a.al_seconds - 1e-9, "{} -> {}", a.al_seconds, b.al_seconds);
        }
    }
}

#[test]
fn delay_is_not_added_one_for_one() {
    // the policy index is a step function of the onset, so a small delay
    // that crosses no word end leaves AL unchanged
    assert_eq!(al(&[1.0, 2.0], &[1.0]), al(&[1.0, 2.0], &[1.5]));
}

#[test]
fn delay_can_lower_al_by_moving_the_cutoff_earlier() {
    // g = [0, 2, 3, ..] with tau* = 3 becomes g = [1, 3, ..] with tau* = 2;
    // the costly third step leaves the average
    let ends = [0.5, 2.0, 2.5];
    let before = run(&ends, &[0.0, 2.0, 4.5, 5.0, 5.0]);
    let after = run(&ends, &[0.5, 2.5, 5.0, 5.5, 5.5]);
    assert_eq!((before.tau_star, after.tau_star), (3, 2));
    assert!((before.al_seconds - 3.2 / 3.0).abs() < 1e-12);
    assert!((after.al_seconds - 1.0).abs() < 1e-12);
}
