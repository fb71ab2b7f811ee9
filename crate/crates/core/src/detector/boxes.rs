//! Anchors, box-delta coding, proposal-stage targets and non-maximum
//! suppression.

use std::cmp::Ordering;

use crate::bbox::BBox;
use crate::{Error, Result};

/// Log-scale clamp for decoded widths and heights.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Anchor boxes on one feature grid, ordered anchor-major then row, column
/// (matching a `[A, H, W]` prediction map).
pub fn grid_anchors(sizes: &[f64], ratios: &[f64], stride: f64, rows: usize, cols: usize) -> Vec<BBox> {
    let mut out = Vec::with_capacity(sizes.len() * ratios.len() * rows * cols);
    for &s in sizes {
        for &r in ratios {
            // r is height / width at constant area
            let w = s / r.sqrt();
            let h = s * r.sqrt();
            for i in 0..rows {
                for j in 0..cols {
                    let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                    out.push(BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h });
                }
            }
        }
    }
    out
}

/// Centre/log-size parameterization of a box relative to a reference box,
/// divided by per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub scale: [f64; 4],
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { scale: [1.0; 4] };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.centre();
        let (tx, ty) = target.centre();
        let (rw, rh) = (reference.width(), reference.height());
        [
            (tx - rx) / rw / self.scale[0],
            (ty - ry) / rh / self.scale[1],
            (target.width() / rw).ln() / self.scale[2],
            (target.height() / rh).ln() / self.scale[3],
        ]
    }

    pub fn decode(&self, reference: &BBox, d: &[f64]) -> BBox {
        let (rx, ry) = reference.centre();
        let (rw, rh) = (reference.width(), reference.height());
        let cx = rx + d[0] * self.scale[0] * rw;
        let cy = ry + d[1] * self.scale[1] * rh;
        let w = rw * (d[2] * self.scale[2]).min(MAX_LOG_SCALE).exp();
        let h = rh * (d[3] * self.scale[3]).min(MAX_LOG_SCALE).exp();
        BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }
}

/// Coordinate-wise mean of the boxes present in a clip.
pub fn mean_box(boxes: &[Option<BBox>]) -> Option<BBox> {
    let present: Vec<&BBox> = boxes.iter().flatten().collect();
    if present.is_empty() {
        return None;
    }
    let n = present.len() as f64;
    let sum = |f: fn(&BBox) -> f64| present.iter().map(|b| f(b)).sum::<f64>() / n;
    Some(BBox { x1: sum(|b| b.x1), y1: sum(|b| b.y1), x2: sum(|b| b.x2), y2: sum(|b| b.y2) })
}

/// Label of an anchor for the proposal stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Targets of the proposal stage for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Deltas to the mean box; meaningful for positives only.
    pub deltas: Vec<[f64; 4]>,
    pub mean_box: BBox,
}

impl RpnTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Negative).count()
    }
}

/// Labels anchors against the clip's mean box: positive at IoU ≥ `pos_thr`,
/// negative below `neg_thr`, ignored in between. The best-matching anchors
/// are always positive so every clip contributes a regression target.
pub fn assign_rpn_targets(anchors: &[BBox], boxes: &[Option<BBox>], pos_thr: f64, neg_thr: f64) -> Result<RpnTargets> {
    if !(0.0..=1.0).contains(&neg_thr) || !(neg_thr < pos_thr && pos_thr <= 1.0) {
        return Err(Error::InvalidArgument(format!("anchor thresholds neg {neg_thr}, pos {pos_thr}")));
    }
    let mean = mean_box(boxes).ok_or_else(|| Error::InvalidArgument("no ground truth in any frame".into()))?;
    let ious: Vec<f64> = anchors.iter().map(|a| a.iou(&mean)).collect();
    let best = ious.iter().cloned().fold(0.0, f64::max);
    let labels = ious
        .iter()
        .map(|&v| {
            if v >= pos_thr || (best > 0.0 && v == best) {
                AnchorLabel::Positive
            } else if v < neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let deltas = anchors.iter().map(|a| BoxCoder::UNIT.encode(a, &mean)).collect();
    Ok(RpnTargets { labels, deltas, mean_box: mean })
}

/// Scored box on one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub bbox: BBox,
    pub score: f64,
}

/// Order used by suppression: score descending, then `x1`, then `y1`
/// ascending.
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Greedy suppression: keep the best remaining box, drop every box whose IoU
/// with it exceeds `iou_thr`, repeat.
pub fn nms(dets: &[Scored], iou_thr: f64) -> Vec<Scored> {
    let mut order: Vec<Scored> = dets.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Scored> = Vec::new();
    for d in order {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn s(bx: BBox, score: f64) -> Scored {
        Scored { bbox: bx, score }
    }

    #[test]
    fn anchors_cover_grid() {
        let a = grid_anchors(&[12.0, 24.0], &[0.5, 1.0, 2.0], 16.0, 2, 3);
        assert_eq!(a.len(), 2 * 3 * 2 * 3);
        // anchor-major: index 1 is the first shape at row 0, column 1
        assert_eq!(a[1].centre(), (24.0, 8.0));
        let sq = a[6];
        assert!((sq.width() - 12.0).abs() < 1e-12 && (sq.height() - 12.0).abs() < 1e-12);
        let tall = a[12];
        assert!((tall.height() / tall.width() - 2.0).abs() < 1e-12);
        assert!((tall.area() - 144.0).abs() < 1e-9);
    }

    #[test]
    fn coder_round_trip_and_zero() {
        let r = b(10.0, 12.0, 30.0, 20.0);
        let t = b(14.0, 9.0, 40.0, 27.0);
        for coder in [BoxCoder::UNIT, BoxCoder { scale: [0.1, 0.1, 0.2, 0.2] }] {
            let d = coder.encode(&r, &t);
            let back = coder.decode(&r, &d);
            for (x, y) in [(back.x1, t.x1), (back.y1, t.y1), (back.x2, t.x2), (back.y2, t.y2)] {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(coder.encode(&r, &r), [0.0; 4]);
        }
    }

    #[test]
    fn mean_box_of_drifting_gt() {
        let boxes: Vec<Option<BBox>> = (0..8).map(|t| Some(b(2.0 * t as f64, 0.0, 10.0 + 2.0 * t as f64, 6.0))).collect();
        let m = mean_box(&boxes).unwrap();
        assert_eq!(m.centre().0, boxes[0].unwrap().centre().0 + 7.0);
        let same = vec![Some(b(1.0, 2.0, 3.0, 4.0)); 4];
        assert_eq!(mean_box(&same).unwrap(), b(1.0, 2.0, 3.0, 4.0));
        assert_eq!(mean_box(&[None, None]), None);
    }

    #[test]
    fn target_assignment() {
        let gt = b(16.0, 16.0, 32.0, 32.0);
        let anchors = vec![gt, b(18.0, 16.0, 34.0, 32.0), b(20.0, 20.0, 36.0, 36.0), b(40.0, 40.0, 50.0, 50.0)];
        let t = assign_rpn_targets(&anchors, &[Some(gt), None], 0.5, 0.3).unwrap();
        assert_eq!(t.labels, vec![AnchorLabel::Positive, AnchorLabel::Positive, AnchorLabel::Ignore, AnchorLabel::Negative]);
        assert_eq!(t.deltas[0], [0.0; 4]);
        assert!(assign_rpn_targets(&anchors, &[None], 0.5, 0.3).is_err());
        assert!(assign_rpn_targets(&anchors, &[Some(gt)], 0.3, 0.5).is_err());
        // the best anchor is positive even below the threshold
        let far = assign_rpn_targets(&anchors[2..], &[Some(gt)], 0.5, 0.3).unwrap();
        assert_eq!(far.labels[0], AnchorLabel::Positive);
    }

    #[test]
    fn nms_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[s(a, 0.9), s(a, 0.8)], 0.5).len(), 1);
        let far = b(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[s(a, 0.9), s(far, 0.8)], 0.5).len(), 2);
        // chain: IoU(A,B) = IoU(B,C) = 0.6, IoU(A,C) = 1/3
        let bb = b(2.5, 0.0, 12.5, 10.0);
        let c = b(5.0, 0.0, 15.0, 10.0);
        assert!(a.iou(&bb) > 0.5 && bb.iou(&c) > 0.5 && a.iou(&c) < 0.5);
        let kept = nms(&[s(c, 0.7), s(a, 0.9), s(bb, 0.8)], 0.5);
        assert_eq!(kept, vec![s(a, 0.9), s(c, 0.7)]);
    }

    #[test]
    fn nms_tie_break() {
        let a = b(1.0, 0.0, 11.0, 10.0);
        let c = b(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[s(a, 0.5), s(c, 0.5)], 0.5);
        assert_eq!(kept, vec![s(c, 0.5)]);
    }

    proptest! {
        #[test]
        fn mean_target_ignores_frame_order(seed in 0u64..500) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut boxes: Vec<Option<BBox>> = (0..6)
                .map(|_| {
                    let x = rng.random_range(0.0..40.0);
                    let y = rng.random_range(0.0..40.0);
                    Some(b(x, y, x + rng.random_range(2.0..20.0), y + rng.random_range(2.0..20.0)))
                })
                .collect();
            let anchors = grid_anchors(&[12.0, 24.0], &[1.0], 16.0, 4, 4);
            let t1 = assign_rpn_targets(&anchors, &boxes, 0.5, 0.3).unwrap();
            boxes.reverse();
            boxes.rotate_left(2);
            let t2 = assign_rpn_targets(&anchors, &boxes, 0.5, 0.3).unwrap();
            prop_assert_eq!(t1.labels, t2.labels);
            for (d1, d2) in t1.deltas.iter().zip(&t2.deltas) {
                for k in 0..4 {
                    prop_assert!((d1[k] - d2[k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn nms_survivors_are_separated(seed in 0u64..500, thr in 0.1f64..0.9) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<Scored> = (0..12)
                .map(|_| {
                    let x = rng.random_range(0.0..30.0);
                    let y = rng.random_range(0.0..30.0);
                    s(b(x, y, x + rng.random_range(3.0..15.0), y + rng.random_range(3.0..15.0)), rng.random_range(0.0..1.0))
                })
                .collect();
            let kept = nms(&dets, thr);
            for (i, a) in kept.iter().enumerate() {
                for c in &kept[i + 1..] {
                    prop_assert!(a.bbox.iou(&c.bbox) <= thr);
                }
            }
            prop_assert_eq!(kept[0].score, dets.iter().map(|d| d.score).fold(f64::MIN, f64::max));
        }
    }
}
