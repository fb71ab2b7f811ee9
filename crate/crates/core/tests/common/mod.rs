//! Shared helpers of the integration tests: a brute-force detection metric
//! and random micro evaluation instances.
#![allow(dead_code)]

use gasvsf::bbox::BBox;
use gasvsf::eval::EvalImage;
use rand::{Rng, RngExt};

pub fn iou_direct(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

fn in_range(area: f64, lo: f64, hi: f64) -> bool {
    lo <= area && area < hi
}

/// Per-detection result at `thr`: Some(true) true positive, Some(false)
/// false positive, None ignored.
fn label_image(img: &EvalImage, thr: f64, lo: f64, hi: f64) -> Vec<Option<bool>> {
    let n = img.dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable insertion sort by descending score
    for i in 1..n {
        let mut j = i;
        while j > 0 && img.dets[order[j]].1 > img.dets[order[j - 1]].1 {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut taken = vec![false; img.gts.len()];
    let mut out = vec![Some(false); n];
    for &d in &order {
        let det = &img.dets[d].0;
        let mut pick: Option<usize> = None;
        // in-range ground truths first, ignored ones only as a fallback
        for want_ignored in [false, true] {
            let mut best = -1.0;
            for (g, gt) in img.gts.iter().enumerate() {
                let ignored = !in_range(gt.area(), lo, hi);
                if ignored != want_ignored || taken[g] {
                    continue;
                }
                let v = iou_direct(det, gt);
                if v >= thr && v > best {
                    best = v;
                    pick = Some(g);
                }
            }
            if pick.is_some() {
                break;
            }
        }
        out[d] = match pick {
            Some(g) => {
                taken[g] = true;
                if in_range(img.gts[g].area(), lo, hi) {
                    Some(true)
                } else {
                    None
                }
            }
            None if !in_range(det.area(), lo, hi) => None,
            None => Some(false),
        };
    }
    out
}

/// Brute-force AP: every detection ranked, precision at each rank, and at
/// each of the 101 recall levels the best precision reached at or beyond it.
pub fn brute_ap(images: &[EvalImage], thr: f64, lo: f64, hi: f64) -> Option<f64> {
    let npos = images.iter().flat_map(|i| &i.gts).filter(|g| in_range(g.area(), lo, hi)).count();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (d, l) in label_image(img, thr, lo, hi).into_iter().enumerate() {
            if let Some(tp) = l {
                ranked.push((img.dets[d].1, i, d, tp));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, r) in ranked.iter().enumerate() {
        tp += r.3 as usize;
        points.push((tp as f64 / npos as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for step in 0..101 {
        let level = step as f64 / 100.0;
        let best = points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

pub fn brute_map(images: &[EvalImage], lo: f64, hi: f64) -> Option<f64> {
    let mut sum = 0.0;
    for k in 0..10 {
        sum += brute_ap(images, 0.5 + 0.05 * k as f64, lo, hi)?;
    }
    Some(sum / 10.0)
}

/// Detections left unmatched by greedy matching at `thr` (all sizes).
pub fn brute_unmatched(img: &EvalImage, thr: f64) -> usize {
    label_image(img, thr, 0.0, f64::INFINITY).iter().filter(|l| **l == Some(false)).count()
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    // sides straddling the 32 and 96 pixel bucket edges
    const SIDES: [f64; 7] = [8.0, 24.0, 32.0, 40.0, 90.0, 96.0, 120.0];
    let w = SIDES[rng.random_range(0..SIDES.len())];
    let h = SIDES[rng.random_range(0..SIDES.len())];
    let x = rng.random_range(0..12) as f64 * 8.0;
    let y = rng.random_range(0..12) as f64 * 8.0;
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// One to three images, each with at most three ground truths and five
/// detections; detections are often jittered copies of ground truths and
/// scores are drawn from a coarse grid so ties occur.
pub fn micro_instance<R: Rng>(rng: &mut R) -> Vec<EvalImage> {
    (0..rng.random_range(1..=3))
        .map(|_| {
            let gts: Vec<BBox> = (0..rng.random_range(0..=3)).map(|_| random_box(rng)).collect();
            let dets = (0..rng.random_range(0..=5))
                .map(|_| {
                    let b = if !gts.is_empty() && rng.random_bool(0.6) {
                        let g = gts[rng.random_range(0..gts.len())];
                        let j = |r: &mut R| rng_jitter(r);
                        let (a, b2, c, d) = (j(rng), j(rng), j(rng), j(rng));
                        BBox::new(g.x1 + a, g.y1 + b2, g.x2 + c.max(a - g.width() + 1.0), g.y2 + d.max(b2 - g.height() + 1.0)).unwrap()
                    } else {
                        random_box(rng)
                    };
                    (b, rng.random_range(1..=6) as f64 / 6.0)
                })
                .collect();
            EvalImage { gts, dets, clear: rng.random_bool(0.5), clip: 0 }
        })
        .collect()
}

fn rng_jitter<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-3..=3) as f64 * 2.0
}
