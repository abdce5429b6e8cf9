//! Checks the incremental EER implementation against a deliberately naive
//! reference that recounts both rates from scratch at every candidate
//! threshold, plus invariance properties the rate definitions imply.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rhyme_core::data::ClassLabel;
use rhyme_core::metrics::{compute_eer, reliability};

/// Reference EER: candidate thresholds are the distinct scores in
/// ascending order; each rate is recounted over the whole set with no
/// shared state. Walks the same polyline, virtual everything-rejected
/// point first, exact zero taken as is, otherwise linear interpolation
/// inside the bracketing segment.
fn brute_force_eer(scored: &[(f64, ClassLabel)]) -> (f64, f64) {
    let n_bona = scored.iter().filter(|(_, l)| *l == ClassLabel::Bonafide).count();
    let n_spoof = scored.len() - n_bona;
    assert!(n_bona > 0 && n_spoof > 0);

    let mut thresholds: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let rates = |t: f64| -> (f64, f64) {
        let rejected_bona =
            scored.iter().filter(|(s, l)| *l == ClassLabel::Bonafide && *s > t).count();
        let accepted_spoof =
            scored.iter().filter(|(s, l)| *l == ClassLabel::Spoof && *s <= t).count();
        (rejected_bona as f64 / n_bona as f64, accepted_spoof as f64 / n_spoof as f64)
    };

    let mut prev = (1.0f64, 0.0f64);
    let mut prev_thr: Option<f64> = None;
    for (j, &t) in thresholds.iter().enumerate() {
        let (far, frr) = rates(t);
        let diff = far - frr;
        if diff == 0.0 {
            let thr = match thresholds.get(j + 1) {
                Some(&next) => 0.5 * (t + next),
                None => t,
            };
            return (100.0 * far, thr);
        }
        if diff < 0.0 {
            let prev_diff = prev.0 - prev.1;
            let w = prev_diff / (prev_diff - diff);
            let eer = prev.0 + w * (far - prev.0);
            let thr = match prev_thr {
                Some(pt) => pt + w * (t - pt),
                None => t,
            };
            return (100.0 * eer, thr);
        }
        prev = (far, frr);
        prev_thr = Some(t);
    }
    unreachable!("the largest score always gives FAR 0, FRR 1");
}

/// Random score set of the given size with both classes present; half the
/// time scores snap to a 1/16 grid so ties (within and across classes)
/// are common.
fn random_set(rng: &mut ChaCha8Rng, size: usize) -> Vec<(f64, ClassLabel)> {
    loop {
        let quantize = rng.gen_bool(0.5);
        let set: Vec<(f64, ClassLabel)> = (0..size)
            .map(|_| {
                let mut s: f64 = rng.gen_range(0.0..1.0);
                if quantize {
                    s = (s * 16.0).floor() / 16.0;
                }
                let label =
                    if rng.gen_bool(0.5) { ClassLabel::Bonafide } else { ClassLabel::Spoof };
                (s, label)
            })
            .collect();
        let bona = set.iter().filter(|(_, l)| *l == ClassLabel::Bonafide).count();
        if bona > 0 && bona < size {
            return set;
        }
    }
}

#[test]
fn eer_matches_the_brute_force_sweep_on_a_thousand_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    for round in 0..1000 {
        let size = rng.gen_range(2..=500);
        let set = random_set(&mut rng, size);
        let got = compute_eer(&set).unwrap();
        let (want_eer, want_thr) = brute_force_eer(&set);
        assert!(
            (got.eer_percent - want_eer).abs() <= 1e-12,
            "round {round}: eer {} vs brute force {want_eer}",
            got.eer_percent
        );
        assert!(
            (got.threshold - want_thr).abs() <= 1e-12,
            "round {round}: threshold {} vs brute force {want_thr}",
            got.threshold
        );
    }
}

#[test]
fn eer_is_symmetric_under_score_negation_with_swapped_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..300 {
        let size = rng.gen_range(2..=200);
        let set = random_set(&mut rng, size);
        let flipped: Vec<(f64, ClassLabel)> = set
            .iter()
            .map(|(s, l)| {
                let swapped = match l {
                    ClassLabel::Bonafide => ClassLabel::Spoof,
                    ClassLabel::Spoof => ClassLabel::Bonafide,
                };
                (-*s, swapped)
            })
            .collect();
        let a = compute_eer(&set).unwrap().eer_percent;
        let b = compute_eer(&flipped).unwrap().eer_percent;
        assert!((a - b).abs() <= 1e-12, "flip changed the EER: {a} vs {b}");
    }
}

#[test]
fn strictly_increasing_score_transforms_preserve_the_eer() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..200 {
        let size = rng.gen_range(2..=200);
        let set = random_set(&mut rng, size);
        let base = compute_eer(&set).unwrap();

        let affine: Vec<(f64, ClassLabel)> = set.iter().map(|(s, l)| (2.0 * s + 1.0, *l)).collect();
        let got = compute_eer(&affine).unwrap();
        assert!((got.eer_percent - base.eer_percent).abs() <= 1e-12);
        // an affine map carries the threshold along with the scores
        assert!((got.threshold - (2.0 * base.threshold + 1.0)).abs() <= 1e-9);

        let cubic: Vec<(f64, ClassLabel)> =
            set.iter().map(|(s, l)| (s * s * s + 3.0 * s, *l)).collect();
        let got = compute_eer(&cubic).unwrap();
        assert!((got.eer_percent - base.eer_percent).abs() <= 1e-12);
    }
}

#[test]
fn perfectly_calibrated_scores_have_zero_ece() {
    // two occupied bins, each with accuracy exactly equal to its mean
    // confidence: 0.85 scores that are spoof 85% of the time, 0.25 scores
    // (confidence 0.75) that are bonafide 75% of the time
    let mut set = Vec::new();
    for i in 0..100 {
        let label = if i < 85 { ClassLabel::Spoof } else { ClassLabel::Bonafide };
        set.push((0.85, label));
    }
    for i in 0..100 {
        let label = if i < 75 { ClassLabel::Bonafide } else { ClassLabel::Spoof };
        set.push((0.25, label));
    }
    let (bins, ece) = reliability(&set, 10).unwrap();
    // the mean confidence accumulates 0.85 a hundred times, so allow
    // round-off at the last ulp but nothing structural
    assert!(ece < 1e-12, "calibrated bins must contribute nothing, got {ece:e}");
    assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 2);
}

#[test]
fn ece_ignores_input_order_and_stays_within_unit_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..100 {
        let size = rng.gen_range(2..=300);
        let set = random_set(&mut rng, size);
        let (_, ece) = reliability(&set, 15).unwrap();
        assert!((0.0..=1.0).contains(&ece));
        let mut shuffled = set.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let (_, ece2) = reliability(&shuffled, 15).unwrap();
        // bin membership is order-free; accumulation order is not
        assert!((ece - ece2).abs() < 1e-12);
    }
}

#[test]
fn confidence_one_lands_in_the_top_bin() {
    let set = vec![
        (1.0, ClassLabel::Spoof),
        (0.0, ClassLabel::Bonafide),
        (0.5, ClassLabel::Bonafide),
        (0.6, ClassLabel::Spoof),
    ];
    let (bins, _) = reliability(&set, 10).unwrap();
    // confidences: 1.0, 1.0, 0.5, 0.6 so bins 9 (twice), 5, 6
    assert_eq!(bins[9].count, 2);
    assert_eq!(bins[5].count, 1);
    assert_eq!(bins[6].count, 1);
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
}
