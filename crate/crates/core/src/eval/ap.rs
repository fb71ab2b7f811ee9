//! Single-class average precision with COCO-style matching.

use std::cmp::Ordering;

use super::EvalImage;
use crate::bbox::BBox;

/// Recall sample points of the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;

/// Area bounds `[lo, hi)` of a size bucket, in square pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { lo: 0.0, hi: f64::INFINITY };
    pub const SMALL: AreaRange = AreaRange { lo: 0.0, hi: 32.0 * 32.0 };
    pub const MEDIUM: AreaRange = AreaRange { lo: 32.0 * 32.0, hi: 96.0 * 96.0 };
    pub const LARGE: AreaRange = AreaRange { lo: 96.0 * 96.0, hi: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

/// Outcome of matching one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Outcome {
    True,
    False,
    Ignored,
}

/// Greedy matching of one image at `thr`: detections in descending score
/// order (ties by input order) each take the highest-IoU unmatched
/// ground truth with IoU ≥ `thr`, preferring ground truths inside `range`.
/// Matches to out-of-range ground truths, and unmatched detections whose own
/// area is out of range, are ignored. Returns outcomes in input order and
/// the per-ground-truth matching detection.
pub(crate) fn match_image(gts: &[BBox], dets: &[(BBox, f64)], thr: f64, range: AreaRange) -> (Vec<Outcome>, Vec<Option<usize>>) {
    let order = score_order(dets);
    let ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
    let mut gt_match: Vec<Option<usize>> = vec![None; gts.len()];
    let mut out = vec![Outcome::False; dets.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, gt) in gts.iter().enumerate() {
                if ignored[g] != pass_ignored || gt_match[g].is_some() {
                    continue;
                }
                let iou = dets[d].0.iou(gt);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if best.is_some() {
                break;
            }
        }
        out[d] = match best {
            Some((g, _)) => {
                gt_match[g] = Some(d);
                if ignored[g] {
                    Outcome::Ignored
                } else {
                    Outcome::True
                }
            }
            None if !range.contains(dets[d].0.area()) => Outcome::Ignored,
            None => Outcome::False,
        };
    }
    (out, gt_match)
}

/// Indices of `dets` by descending score, ties in input order.
pub(crate) fn score_order(dets: &[(BBox, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// AP at one IoU threshold over a set of images; `None` when no ground
/// truth falls in `range`.
pub fn average_precision(images: &[&EvalImage], thr: f64, range: AreaRange) -> Option<f64> {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut positives = 0usize;
    for (i, img) in images.iter().enumerate() {
        positives += img.gts.iter().filter(|g| range.contains(g.area())).count();
        let (outcomes, _) = match_image(&img.gts, &img.dets, thr, range);
        for (d, o) in outcomes.iter().enumerate() {
            if *o != Outcome::Ignored {
                scored.push((img.dets[d].1, i, d, *o == Outcome::True));
            }
        }
    }
    if positives == 0 {
        return None;
    }
    // global ranking: score descending, then image, then detection order
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for s in &scored {
        if s.3 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / positives as f64);
        precision.push(tp / (tp + fp));
    }
    Some(interpolated_ap(&recall, &precision))
}

/// Mean over the recall grid `0, 0.01, …, 1` of the precision envelope at
/// the first point reaching each recall.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&v| v < r);
        if i < env.len() {
            total += env[i];
        }
    }
    total / RECALL_POINTS as f64
}
