//! Detection metrics: equal error rate with its threshold, ROC operating
//! points, reliability bins with expected calibration error, and report
//! files in JSON or CSV.
//!
//! Scoring convention, fixed so an exhaustive threshold sweep reproduces
//! these numbers exactly: a score less than or equal to the threshold
//! accepts the utterance as bonafide, a score above it rejects. FAR is the
//! fraction of bonafide rejected, FRR the fraction of spoof accepted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Result, RhymeError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TIE_CONVENTION: &str = "score <= threshold accepts as bonafide";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer_percent: f64,
    pub threshold: f64,
}

fn validate_scores(scored: &[(f64, ClassLabel)]) -> Result<(usize, usize)> {
    let mut n_bona = 0;
    let mut n_spoof = 0;
    for (s, label) in scored {
        if !s.is_finite() {
            return Err(RhymeError::InvalidArgument("score set contains a non-finite score".into()));
        }
        match label {
            ClassLabel::Bonafide => n_bona += 1,
            ClassLabel::Spoof => n_spoof += 1,
        }
    }
    if n_bona == 0 || n_spoof == 0 {
        return Err(RhymeError::DegenerateInput(
            "score set must contain both bonafide and spoof".into(),
        ));
    }
    Ok((n_bona, n_spoof))
}

/// One operating point per distinct score, thresholds ascending. Points
/// absorb all scores equal to their threshold before the rates are read,
/// which is exactly the tie convention above.
pub fn roc_points(scored: &[(f64, ClassLabel)]) -> Result<Vec<RocPoint>> {
    let (n_bona, n_spoof) = validate_scores(scored)?;
    let mut sorted: Vec<(f64, ClassLabel)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));
    let mut points = Vec::new();
    let mut bona_le = 0usize;
    let mut spoof_le = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            match sorted[i].1 {
                ClassLabel::Bonafide => bona_le += 1,
                ClassLabel::Spoof => spoof_le += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: v,
            far: (n_bona - bona_le) as f64 / n_bona as f64,
            frr: spoof_le as f64 / n_spoof as f64,
        });
    }
    Ok(points)
}

/// Equal error rate as a percentage, with the threshold that attains it.
///
/// The FAR-FRR difference is scanned over the operating points (preceded
/// by the virtual everything-rejected point at FAR 1, FRR 0). An exact
/// zero is taken as is; otherwise the two rates cross between adjacent
/// points and both are interpolated linearly. Thresholds at an exact zero
/// sit midway to the next distinct score, matching a brute-force sweep.
pub fn compute_eer(scored: &[(f64, ClassLabel)]) -> Result<EerResult> {
    let points = roc_points(scored)?;
    let mut prev_far = 1.0;
    let mut prev_frr = 0.0;
    let mut prev_thr: Option<f64> = None;
    for (j, p) in points.iter().enumerate() {
        let diff = p.far - p.frr;
        if diff == 0.0 {
            let threshold = match points.get(j + 1) {
                Some(next) => 0.5 * (p.threshold + next.threshold),
                None => p.threshold,
            };
            return Ok(EerResult { eer_percent: 100.0 * p.far, threshold });
        }
        if diff < 0.0 {
            let prev_diff = prev_far - prev_frr;
            let t = prev_diff / (prev_diff - diff);
            let eer = prev_far + t * (p.far - prev_far);
            let threshold = match prev_thr {
                Some(pt) => pt + t * (p.threshold - pt),
                // crossing before the first real point: everything below
                // the smallest score behaves the same, report that score
                None => p.threshold,
            };
            return Ok(EerResult { eer_percent: 100.0 * eer, threshold });
        }
        prev_far = p.far;
        prev_frr = p.frr;
        prev_thr = Some(p.threshold);
    }
    // the last operating point has FAR 0, FRR 1, so the scan always exits
    Err(RhymeError::numeric("eer", "no FAR/FRR crossing found"))
}

// ─── calibration ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width confidence bins over [0, 1] and the expected calibration
/// error. Confidence of a binary score is max(s, 1-s); the prediction is
/// spoof when s > 0.5. Empty bins report zeros and add nothing to the ECE.
pub fn reliability(
    scored: &[(f64, ClassLabel)],
    n_bins: usize,
) -> Result<(Vec<ReliabilityBin>, f64)> {
    if n_bins == 0 {
        return Err(RhymeError::InvalidArgument("reliability: n_bins must be positive".into()));
    }
    if scored.is_empty() {
        return Err(RhymeError::DegenerateInput("reliability: empty score set".into()));
    }
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(RhymeError::InvalidArgument("score set contains a non-finite score".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut correct = vec![0usize; n_bins];
    for &(s, label) in scored {
        let confidence = s.max(1.0 - s);
        let predicted = if s > 0.5 { ClassLabel::Spoof } else { ClassLabel::Bonafide };
        let bin = ((confidence * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += confidence;
        if predicted == label {
            correct[bin] += 1;
        }
    }
    let n = scored.len() as f64;
    let width = 1.0 / n_bins as f64;
    let mut bins = Vec::with_capacity(n_bins);
    let mut ece = 0.0;
    for b in 0..n_bins {
        let (mean_confidence, accuracy) = if count[b] > 0 {
            (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        ece += count[b] as f64 / n * (accuracy - mean_confidence).abs();
        bins.push(ReliabilityBin {
            lo: b as f64 * width,
            hi: if b + 1 == n_bins { 1.0 } else { (b + 1) as f64 * width },
            count: count[b],
            mean_confidence,
            accuracy,
        });
    }
    Ok((bins, ece))
}

// ─── reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Where the scores came from, for provenance only.
    pub model: String,
    pub manifest: String,
    /// Unix seconds; omitted when reproducible output is wanted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    pub tie_convention: String,
    pub eer_percent: f64,
    pub eer_threshold: f64,
    pub ece: f64,
    pub roc: Vec<RocPoint>,
    pub per_generator_eer: BTreeMap<String, f64>,
}

/// EER restricted to each spoof generator: all bonafide scores plus the
/// spoof scores carrying that tag.
pub fn per_generator_eer(
    scored: &[(f64, ClassLabel, String)],
) -> Result<BTreeMap<String, f64>> {
    let bona: Vec<(f64, ClassLabel)> = scored
        .iter()
        .filter(|(_, l, _)| *l == ClassLabel::Bonafide)
        .map(|(s, l, _)| (*s, *l))
        .collect();
    let mut tags: Vec<&str> = scored
        .iter()
        .filter(|(_, l, _)| *l == ClassLabel::Spoof)
        .map(|(_, _, g)| g.as_str())
        .collect();
    tags.sort_unstable();
    tags.dedup();
    let mut out = BTreeMap::new();
    for tag in tags {
        let mut subset = bona.clone();
        subset.extend(
            scored
                .iter()
                .filter(|(_, l, g)| *l == ClassLabel::Spoof && g == tag)
                .map(|(s, l, _)| (*s, *l)),
        );
        out.insert(tag.to_string(), compute_eer(&subset)?.eer_percent);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes the report. JSON keeps every field and reads back equal; CSV
/// flattens to `generator,eer_percent` rows (sorted) plus an `all` summary
/// row with the overall EER.
pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report)
                .map_err(|e| RhymeError::InvalidArgument(format!("report serialization: {e}")))?;
            text.push('\n');
            std::fs::write(path, text)?;
        }
        ReportFormat::Csv => {
            let mut text = String::from("generator,eer_percent\n");
            for (tag, eer) in &report.per_generator_eer {
                text.push_str(&format!("{tag},{eer}\n"));
            }
            text.push_str(&format!("all,{}\n", report.eer_percent));
            std::fs::write(path, text)?;
        }
    }
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| RhymeError::format(0, format!("report parse failure: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(s: f64) -> (f64, ClassLabel) {
        (s, ClassLabel::Bonafide)
    }

    fn sp(s: f64) -> (f64, ClassLabel) {
        (s, ClassLabel::Spoof)
    }

    #[test]
    fn eer_crossing_with_exact_zero() {
        let scored = vec![b(0.1), b(0.2), b(0.4), sp(0.3), sp(0.6), sp(0.9)];
        let r = compute_eer(&scored).unwrap();
        assert!((r.eer_percent - 100.0 / 3.0).abs() < 1e-9);
        assert!(r.threshold > 0.3 && r.threshold < 0.4);
        assert!((r.threshold - 0.35).abs() < 1e-12);
    }

    #[test]
    fn eer_extremes() {
        let separated = vec![b(0.1), b(0.2), sp(0.8), sp(0.9)];
        assert_eq!(compute_eer(&separated).unwrap().eer_percent, 0.0);
        let inverted = vec![b(0.9), sp(0.1)];
        let r = compute_eer(&inverted).unwrap();
        assert_eq!(r.eer_percent, 100.0);
        assert!((r.threshold - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_requires_both_classes_and_finite_scores() {
        assert!(matches!(
            compute_eer(&[b(0.1), b(0.9)]),
            Err(RhymeError::DegenerateInput(_))
        ));
        assert!(compute_eer(&[b(f64::NAN), sp(0.1)]).is_err());
    }

    #[test]
    fn roc_points_absorb_ties() {
        let scored = vec![b(0.5), sp(0.5), b(0.2), sp(0.8)];
        let pts = roc_points(&scored).unwrap();
        assert_eq!(pts.len(), 3);
        // at 0.5 both tied scores are already counted
        let mid = &pts[1];
        assert_eq!(mid.threshold, 0.5);
        assert_eq!(mid.far, 0.0);
        assert_eq!(mid.frr, 0.5);
        // thresholds ascend, FAR falls, FRR rises
        for w in pts.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[0].far >= w[1].far);
            assert!(w[0].frr <= w[1].frr);
        }
        assert_eq!(pts.last().unwrap().far, 0.0);
        assert_eq!(pts.last().unwrap().frr, 1.0);
    }

    #[test]
    fn reliability_matches_hand_cases() {
        // every prediction at confidence 0.7 and 70% of them correct
        let mut scored = Vec::new();
        for i in 0..10 {
            let label = if i < 7 { ClassLabel::Spoof } else { ClassLabel::Bonafide };
            scored.push((0.7, label));
        }
        let (bins, ece) = reliability(&scored, 10).unwrap();
        assert!(ece.abs() < 1e-12);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 10);
        assert_eq!(bins[7].count, 10);
        assert!((bins[7].mean_confidence - 0.7).abs() < 1e-12);
        assert!((bins[7].accuracy - 0.7).abs() < 1e-12);

        // single bin, confidence 0.9, half right
        let scored = vec![(0.9, ClassLabel::Spoof), (0.9, ClassLabel::Bonafide)];
        let (bins, ece) = reliability(&scored, 1).unwrap();
        assert_eq!(bins.len(), 1);
        assert!((ece - 0.4).abs() < 1e-12);

        assert!(reliability(&[], 10).is_err());
        assert!(reliability(&[(0.5, ClassLabel::Spoof)], 0).is_err());
    }

    #[test]
    fn reliability_bins_partition_unit_interval() {
        let scored = vec![(0.51, ClassLabel::Spoof), (0.99, ClassLabel::Spoof), b(0.01)];
        let (bins, _) = reliability(&scored, 7).unwrap();
        assert_eq!(bins.len(), 7);
        assert_eq!(bins[0].lo, 0.0);
        assert_eq!(bins[6].hi, 1.0);
        for w in bins.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
    }

    fn sample_report() -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            model: "model.rhym".into(),
            manifest: "manifest.jsonl".into(),
            timestamp: None,
            tie_convention: TIE_CONVENTION.into(),
            eer_percent: 7.25,
            eer_threshold: 0.4375,
            ece: 0.0125,
            roc: vec![RocPoint { threshold: 0.5, far: 0.25, frr: 0.0 }],
            per_generator_eer: BTreeMap::from([
                ("D1".to_string(), 14.14),
                ("A2".to_string(), 3.5),
            ]),
        }
    }

    #[test]
    fn report_json_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = sample_report();
        emit_report(&report, &path, ReportFormat::Json).unwrap();
        assert_eq!(read_report_json(&path).unwrap(), report);
    }

    #[test]
    fn report_csv_flattens_generators_sorted_with_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&sample_report(), &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "generator,eer_percent\nA2,3.5\nD1,14.14\nall,7.25\n");

        let mut empty = sample_report();
        empty.per_generator_eer.clear();
        emit_report(&empty, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "generator,eer_percent\nall,7.25\n");
    }

    #[test]
    fn per_generator_pools_all_bonafide() {
        let scored = vec![
            (0.1, ClassLabel::Bonafide, "none".to_string()),
            (0.2, ClassLabel::Bonafide, "none".to_string()),
            (0.9, ClassLabel::Spoof, "G1".to_string()),
            (0.8, ClassLabel::Spoof, "G2".to_string()),
            (0.05, ClassLabel::Spoof, "G2".to_string()),
        ];
        let map = per_generator_eer(&scored).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map["G1"], 0.0);
        // G2's low-scoring spoof crosses the bonafide range
        assert!((map["G2"] - 50.0).abs() < 1e-9);
    }
}
