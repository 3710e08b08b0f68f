//! Detection evaluation: temporal IoU, per-class average precision at
//! fixed IoU thresholds, and the average mAP over IoU 0.50:0.05:0.95.
//!
//! The average-precision protocol: detections are ranked by score
//! (descending; ties by video id then start), each detection greedily
//! matches the unmatched ground-truth instance of the same video with the
//! highest IoU at or above the threshold, and the precision-recall curve
//! is integrated with the all-points precision envelope. Classes with no
//! ground truth are excluded from every mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::localize::Detection;

/// One ground-truth action instance, flattened out of the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

/// Intersection-over-union of two temporal intervals; 0 when disjoint.
/// Both intervals must satisfy start < end.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    assert!(a.0 < a.1 && b.0 < b.1, "degenerate interval: {a:?} vs {b:?}");
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter / union
}

/// Ranks detections for matching: score descending, ties broken by video
/// id, then start. Shared by the evaluator and by any reimplementation
/// that wants to agree with it rank-for-rank.
pub fn rank_detections(dets: &mut [&Detection]) {
    dets.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .expect("finite scores")
            .then_with(|| x.video_id.cmp(&y.video_id))
            .then(x.start.partial_cmp(&y.start).expect("finite starts"))
    });
}

/// Average precision for one class: `dets` and `gts` are that class's
/// detections and ground truth across all videos. Returns 0 when there is
/// no ground truth or no detection.
pub fn ap_at_iou(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> f64 {
    if gts.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    rank_detections(&mut ranked);
    let mut gt_used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for det in &ranked {
        // Highest-IoU unmatched ground truth in the same video; first (i.e.
        // manifest-order) instance wins exact ties.
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] || gt.video_id != det.video_id {
                continue;
            }
            let iou = temporal_iou((det.start, det.end), (gt.start, gt.end));
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_thr => {
                gt_used[gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    ap_from_tp_flags(&tp_flags, gts.len())
}

/// All-points (precision-envelope) AP from the ranked true-positive flags:
/// `AP = Σ_k (r_k − r_{k−1}) · max_{j≥k} p_j`, summed in rank order.
pub fn ap_from_tp_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut envelope = precision.clone();
    for k in (0..n - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recall[k] - prev_recall) * envelope[k];
        prev_recall = recall[k];
    }
    ap
}

/// The protocol's IoU thresholds 0.50, 0.55, …, 0.95.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Detection/ground-truth totals that entered an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub num_videos: usize,
    /// Classes with at least one ground-truth instance.
    pub num_classes_evaluated: usize,
}

/// Evaluation result: mAP per IoU threshold (keys like "0.50"), their
/// mean, per-class AP per threshold, and input counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_iou: BTreeMap<String, f64>,
    pub average_map: f64,
    /// class index (stringified) → threshold key → AP.
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub counts: EvalCounts,
}

fn threshold_key(tau: f64) -> String {
    format!("{tau:.2}")
}

/// Flattens the manifest's annotations; every video must carry segments.
pub fn ground_truth_from_manifest(manifest: &DatasetManifest) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for video in &manifest.videos {
        let segs = video.segments.as_ref().ok_or_else(|| {
            Error::validation(format!("video '{}' has no ground-truth segments", video.id))
        })?;
        for seg in segs {
            out.push(GroundTruth {
                video_id: video.id.clone(),
                class: seg.class,
                start: seg.start,
                end: seg.end,
            });
        }
    }
    Ok(out)
}

/// Scores detections against the manifest's ground truth. `mAP(τ)` is the
/// mean AP over classes with at least one ground-truth instance, and
/// `average_map` is the mean of `mAP(τ)` over the thresholds.
pub fn evaluate(
    dets: &[Detection],
    manifest: &DatasetManifest,
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    if iou_thresholds.is_empty() {
        return Err(Error::validation("at least one IoU threshold is required"));
    }
    let gts = ground_truth_from_manifest(manifest)?;
    let known: std::collections::BTreeSet<&str> =
        manifest.videos.iter().map(|v| v.id.as_str()).collect();
    for det in dets {
        if !known.contains(det.video_id.as_str()) {
            return Err(Error::validation(format!(
                "detection references unknown video id '{}'",
                det.video_id
            )));
        }
        if det.class >= manifest.num_classes {
            return Err(Error::validation(format!(
                "detection class {} out of range [0, {})",
                det.class, manifest.num_classes
            )));
        }
    }
    let classes_with_gt: Vec<usize> = (0..manifest.num_classes)
        .filter(|&c| gts.iter().any(|g| g.class == c))
        .collect();
    if classes_with_gt.is_empty() {
        return Err(Error::validation("no ground-truth instances in the manifest"));
    }

    let mut map_at_iou = BTreeMap::new();
    let mut per_class_ap: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for &tau in iou_thresholds {
        let mut sum = 0.0;
        for &class in &classes_with_gt {
            let class_dets: Vec<Detection> =
                dets.iter().filter(|d| d.class == class).cloned().collect();
            let class_gts: Vec<GroundTruth> =
                gts.iter().filter(|g| g.class == class).cloned().collect();
            let ap = ap_at_iou(&class_dets, &class_gts, tau);
            per_class_ap
                .entry(class.to_string())
                .or_default()
                .insert(threshold_key(tau), ap);
            sum += ap;
        }
        map_at_iou.insert(threshold_key(tau), sum / classes_with_gt.len() as f64);
    }
    // Mean in ascending threshold order (the iteration order of the input).
    let average_map =
        iou_thresholds.iter().map(|&t| map_at_iou[&threshold_key(t)]).sum::<f64>()
            / iou_thresholds.len() as f64;
    Ok(EvalReport {
        map_at_iou,
        average_map,
        per_class_ap,
        counts: EvalCounts {
            num_detections: dets.len(),
            num_ground_truth: gts.len(),
            num_videos: manifest.videos.len(),
            num_classes_evaluated: classes_with_gt.len(),
        },
    })
}

/// Renders the headline rows (mAP at 0.50 / 0.75 / 0.95 and the average)
/// as percentages, one per line.
pub fn format_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    for key in ["0.50", "0.75", "0.95"] {
        if let Some(v) = report.map_at_iou.get(key) {
            out.push_str(&format!("mAP@{key}: {:6.2}%\n", v * 100.0));
        }
    }
    out.push_str(&format!(
        "Average mAP (0.50:0.05:0.95): {:6.2}%\n",
        report.average_map * 100.0
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{SegmentAnnotation, VideoMeta};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn det(id: &str, class: usize, start: f64, end: f64, score: f64) -> Detection {
        Detection { video_id: id.to_string(), class, start, end, score }
    }

    fn gt(id: &str, class: usize, start: f64, end: f64) -> GroundTruth {
        GroundTruth { video_id: id.to_string(), class, start, end }
    }

    #[test]
    fn iou_hand_values() {
        assert_eq!(temporal_iou((0.0, 2.0), (0.0, 2.0)), 1.0);
        assert_abs_diff_eq!(temporal_iou((0.0, 2.0), (1.0, 3.0)), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        // Touching intervals are disjoint (zero-length intersection).
        assert_eq!(temporal_iou((0.0, 1.0), (1.0, 2.0)), 0.0);
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let mut rng = crate::seeding::rng(31, "eval/iou");
        for _ in 0..500 {
            let a0 = rng.random_range(0.0..10.0);
            let a = (a0, a0 + rng.random_range(0.1..5.0));
            let b0 = rng.random_range(0.0..10.0);
            let b = (b0, b0 + rng.random_range(0.1..5.0));
            let ij = temporal_iou(a, b);
            assert_eq!(ij, temporal_iou(b, a));
            assert!((0.0..=1.0).contains(&ij));
        }
    }

    #[test]
    #[should_panic(expected = "degenerate interval")]
    fn iou_rejects_degenerate_intervals() {
        temporal_iou((1.0, 1.0), (0.0, 2.0));
    }

    #[test]
    fn perfect_single_detection_has_ap_one() {
        let dets = [det("v", 0, 1.0, 3.0, 0.9)];
        let gts = [gt("v", 0, 1.0, 3.0)];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5), 1.0);
    }

    #[test]
    fn no_detections_or_no_gt_gives_zero() {
        let gts = [gt("v", 0, 1.0, 3.0)];
        assert_eq!(ap_at_iou(&[], &gts, 0.5), 0.0);
        let dets = [det("v", 0, 1.0, 3.0, 0.9)];
        assert_eq!(ap_at_iou(&dets, &[], 0.5), 0.0);
    }

    #[test]
    fn false_positive_ranked_second_hand_table() {
        // Ranked: TP, FP, TP over 2 GTs. PR points: (0.5, 1), (0.5, 0.5),
        // (1.0, 2/3); envelope (1, 2/3, 2/3).
        // AP = 0.5*1 + 0*... + 0.5*(2/3) = 1/2 + 1/3 = 5/6.
        let dets = [
            det("v", 0, 0.0, 2.0, 0.9),   // matches gt1
            det("v", 0, 10.0, 12.0, 0.8), // matches nothing
            det("v", 0, 4.0, 6.0, 0.7),   // matches gt2
        ];
        let gts = [gt("v", 0, 0.0, 2.0), gt("v", 0, 4.0, 6.0)];
        assert_abs_diff_eq!(ap_at_iou(&dets, &gts, 0.5), 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn matching_is_per_video() {
        // The detection's interval matches the OTHER video's GT perfectly,
        // but cross-video matches are forbidden.
        let dets = [det("a", 0, 0.0, 2.0, 0.9)];
        let gts = [gt("b", 0, 0.0, 2.0)];
        assert_eq!(ap_at_iou(&dets, &gts, 0.5), 0.0);
    }

    #[test]
    fn each_gt_matches_at_most_once() {
        let dets = [det("v", 0, 0.0, 2.0, 0.9), det("v", 0, 0.0, 2.0, 0.8)];
        let gts = [gt("v", 0, 0.0, 2.0)];
        // Second identical detection is a false positive: PR (1,1), (1,0.5);
        // AP = 1.
        assert_eq!(ap_at_iou(&dets, &gts, 0.5), 1.0);
        // With two GTs both identical, both detections match.
        let gts2 = [gt("v", 0, 0.0, 2.0), gt("v", 0, 0.0, 2.0)];
        assert_eq!(ap_at_iou(&dets, &gts2, 0.5), 1.0);
    }

    #[test]
    fn ap_depends_only_on_score_ranks() {
        let mut rng = crate::seeding::rng(32, "eval/ranks");
        for _ in 0..50 {
            let (dets, gts) = random_instance(&mut rng);
            let transformed: Vec<Detection> = dets
                .iter()
                .map(|d| Detection { score: 3.0 * d.score + 7.0, ..d.clone() })
                .collect();
            let a = ap_at_iou(&dets, &gts, 0.5);
            let b = ap_at_iou(&transformed, &gts, 0.5);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trailing_unmatched_detection_never_raises_ap() {
        let mut rng = crate::seeding::rng(33, "eval/trailing");
        for _ in 0..50 {
            let (mut dets, gts) = random_instance(&mut rng);
            let before = ap_at_iou(&dets, &gts, 0.5);
            let min_score =
                dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min).min(0.0);
            // Far outside every GT interval, ranked strictly last.
            dets.push(det("a", 0, 900.0, 901.0, min_score - 1.0));
            let after = ap_at_iou(&dets, &gts, 0.5);
            assert!(after <= before, "{after} > {before}");
        }
    }

    // ---- independent brute-force oracle ------------------------------

    /// Recomputes the greedy match from scratch for every ranked prefix,
    /// derives the PR table point by point, and integrates the envelope.
    fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
        if gts.is_empty() || dets.is_empty() {
            return 0.0;
        }
        let mut ranked: Vec<&Detection> = dets.iter().collect();
        ranked.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then_with(|| x.video_id.cmp(&y.video_id))
                .then(x.start.partial_cmp(&y.start).unwrap())
        });
        let prefix_tp = |k: usize| -> usize {
            let mut used = vec![false; gts.len()];
            let mut tp = 0;
            for d in &ranked[..k] {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts.iter().enumerate() {
                    if used[gi] || g.video_id != d.video_id {
                        continue;
                    }
                    let iou = temporal_iou((d.start, d.end), (g.start, g.end));
                    if best.map_or(true, |(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, iou)) = best {
                    if iou >= thr {
                        used[gi] = true;
                        tp += 1;
                    }
                }
            }
            tp
        };
        let n = ranked.len();
        let pr: Vec<(f64, f64)> = (1..=n)
            .map(|k| {
                let tp = prefix_tp(k);
                (tp as f64 / gts.len() as f64, tp as f64 / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..n {
            let env = pr[k..].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            ap += (pr[k].0 - prev) * env;
            prev = pr[k].0;
        }
        ap
    }

    fn random_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
        let videos = ["a", "b", "c", "d", "e"];
        let n_videos = rng.random_range(1..=videos.len());
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for vid in &videos[..n_videos] {
            for _ in 0..rng.random_range(0..=3) {
                let start = rng.random_range(0.0..8.0);
                gts.push(gt(vid, rng.random_range(0..2), start, start + rng.random_range(0.5..4.0)));
            }
            for _ in 0..rng.random_range(0..=4) {
                let start = rng.random_range(0.0..8.0);
                dets.push(det(
                    vid,
                    rng.random_range(0..2),
                    start,
                    start + rng.random_range(0.5..4.0),
                    // Coarse scores force plenty of ties through the
                    // tie-break path.
                    f64::from(rng.random_range(0..5)) / 4.0,
                ));
            }
        }
        (dets, gts)
    }

    #[test]
    fn ap_matches_brute_force_oracle_exactly() {
        let mut rng = crate::seeding::rng(34, "eval/oracle");
        for trial in 0..200 {
            let (dets, gts) = random_instance(&mut rng);
            for &class in &[0usize, 1] {
                let cd: Vec<Detection> =
                    dets.iter().filter(|d| d.class == class).cloned().collect();
                let cg: Vec<GroundTruth> =
                    gts.iter().filter(|g| g.class == class).cloned().collect();
                for &thr in &[0.3, 0.5, 0.7] {
                    let fast = ap_at_iou(&cd, &cg, thr);
                    let slow = oracle_ap(&cd, &cg, thr);
                    assert_eq!(fast, slow, "trial {trial}, class {class}, thr {thr}");
                }
            }
        }
    }

    // ---- evaluate over a manifest -------------------------------------

    fn toy_manifest() -> DatasetManifest {
        let video = |id: &str, segs: Vec<(f64, f64, usize)>| VideoMeta {
            id: id.to_string(),
            num_snippets: 20,
            labels: segs.iter().map(|s| s.2).collect(),
            segments: Some(
                segs.into_iter()
                    .map(|(start, end, class)| SegmentAnnotation { start, end, class })
                    .collect(),
            ),
            rgb_path: format!("{id}_rgb.f32"),
            flow_path: format!("{id}_flow.f32"),
        };
        DatasetManifest {
            num_classes: 3,
            feature_dim: 4,
            snippet_seconds: 1.0,
            videos: vec![
                video("a", vec![(1.0, 4.0, 0), (8.0, 12.0, 1)]),
                video("b", vec![(2.0, 6.0, 0)]),
                video("c", vec![(0.0, 5.0, 1)]),
            ],
        }
    }

    #[test]
    fn perfect_detections_score_average_map_one_exactly() {
        let manifest = toy_manifest();
        let gts = ground_truth_from_manifest(&manifest).unwrap();
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.video_id, g.class, g.start, g.end, 0.7))
            .collect();
        let report = evaluate(&dets, &manifest, &default_iou_thresholds()).unwrap();
        assert_eq!(report.average_map, 1.0);
        assert!(report.map_at_iou.values().all(|&v| v == 1.0));
        // Class 2 has no ground truth: excluded, not zero-scored.
        assert_eq!(report.counts.num_classes_evaluated, 2);
        assert!(!report.per_class_ap.contains_key("2"));
    }

    #[test]
    fn empty_detections_score_zero() {
        let manifest = toy_manifest();
        let report = evaluate(&[], &manifest, &default_iou_thresholds()).unwrap();
        assert_eq!(report.average_map, 0.0);
        assert_eq!(report.counts.num_detections, 0);
        assert_eq!(report.counts.num_ground_truth, 4);
    }

    #[test]
    fn average_map_is_mean_of_threshold_maps() {
        let manifest = toy_manifest();
        // Slightly offset detections: matched at low IoU thresholds only.
        let dets = vec![
            det("a", 0, 1.5, 4.5, 0.9),
            det("b", 0, 2.0, 6.0, 0.8),
            det("a", 1, 9.0, 12.0, 0.7),
        ];
        let report = evaluate(&dets, &manifest, &default_iou_thresholds()).unwrap();
        let mean: f64 =
            report.map_at_iou.values().sum::<f64>() / report.map_at_iou.len() as f64;
        assert_abs_diff_eq!(report.average_map, mean, epsilon = 1e-12);
        assert!(report.average_map > 0.0 && report.average_map < 1.0);
        let m50 = report.map_at_iou["0.50"];
        let m95 = report.map_at_iou["0.95"];
        assert!(m50 >= m95, "higher thresholds cannot match more: {m50} vs {m95}");
    }

    #[test]
    fn evaluate_validates_inputs() {
        let manifest = toy_manifest();
        let unknown = [det("zz", 0, 0.0, 1.0, 0.5)];
        assert!(evaluate(&unknown, &manifest, &default_iou_thresholds()).is_err());
        let bad_class = [det("a", 7, 0.0, 1.0, 0.5)];
        assert!(evaluate(&bad_class, &manifest, &default_iou_thresholds()).is_err());
        assert!(evaluate(&[], &manifest, &[]).is_err());

        let mut missing = manifest.clone();
        missing.videos[1].segments = None;
        assert!(evaluate(&[], &missing, &default_iou_thresholds()).is_err());
    }

    #[test]
    fn threshold_grid_and_keys() {
        let taus = default_iou_thresholds();
        assert_eq!(taus.len(), 10);
        assert_eq!(threshold_key(taus[0]), "0.50");
        assert_eq!(threshold_key(taus[5]), "0.75");
        assert_eq!(threshold_key(taus[9]), "0.95");
    }

    #[test]
    fn report_table_formats_percentages() {
        let manifest = toy_manifest();
        let gts = ground_truth_from_manifest(&manifest).unwrap();
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.video_id, g.class, g.start, g.end, 0.9))
            .collect();
        let report = evaluate(&dets, &manifest, &default_iou_thresholds()).unwrap();
        let table = format_report_table(&report);
        assert!(table.contains("mAP@0.50: 100.00%"));
        assert!(table.contains("mAP@0.95: 100.00%"));
        assert!(table.contains("Average mAP (0.50:0.05:0.95): 100.00%"));
    }

    #[test]
    fn report_serializes_roundtrip() {
        let manifest = toy_manifest();
        let report = evaluate(&[], &manifest, &default_iou_thresholds()).unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
