//! Error taxonomy of unmatched detections and the IoU density of the
//! top-scoring detection per ground truth.

use serde::Serialize;

use super::ap::{match_image, AreaRange, Outcome};
use super::EvalImage;
use crate::{Error, Result};

/// Counts of the four error categories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TideCounts {
    /// Best IoU in `[bg, fg)`.
    pub loc: usize,
    /// Best IoU ≥ fg with an already matched ground truth.
    pub dupe: usize,
    /// Best IoU below bg.
    pub bkgd: usize,
    /// Ground truths neither matched nor covered by a localization error.
    pub miss: usize,
}

impl TideCounts {
    pub fn add(&mut self, o: &TideCounts) {
        self.loc += o.loc;
        self.dupe += o.dupe;
        self.bkgd += o.bkgd;
        self.miss += o.miss;
    }

    pub fn false_positives(&self) -> usize {
        self.loc + self.dupe + self.bkgd
    }
}

/// Classifies one image's detections after greedy matching at `fg`.
/// Returns the counts and the number of unmatched detections.
pub fn tide_classify(img: &EvalImage, fg: f64, bg: f64) -> Result<(TideCounts, usize)> {
    if !(0.0 < bg && bg < fg && fg < 1.0) {
        return Err(Error::InvalidArgument(format!("TIDE thresholds need 0 < bg < fg < 1, got bg {bg}, fg {fg}")));
    }
    let (outcomes, gt_match) = match_image(&img.gts, &img.dets, fg, AreaRange::ALL);
    let mut counts = TideCounts::default();
    let mut covered = vec![false; img.gts.len()];
    let mut unmatched = 0;
    for (d, o) in outcomes.iter().enumerate() {
        if *o == Outcome::True {
            continue;
        }
        unmatched += 1;
        let best = img
            .gts
            .iter()
            .enumerate()
            .map(|(g, gt)| (g, img.dets[d].0.iou(gt)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((g, v)),
            });
        match best {
            Some((_, v)) if v >= fg => counts.dupe += 1,
            Some((g, v)) if v >= bg => {
                counts.loc += 1;
                covered[g] = true;
            }
            _ => counts.bkgd += 1,
        }
    }
    counts.miss = gt_match
        .iter()
        .zip(&covered)
        .filter(|(m, c)| m.is_none() && !**c)
        .count();
    Ok((counts, unmatched))
}

/// Normalized histogram over `[0, 1]` of, for each ground truth, the IoU of
/// the highest-scoring detection overlapping it (0 when none does).
pub fn iou_density(images: &[&EvalImage], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("iou_density needs at least one bin".into()));
    }
    let mut hist = vec![0.0; bins];
    let mut n = 0usize;
    for img in images {
        for gt in &img.gts {
            let mut best: Option<(f64, f64)> = None;
            for (b, s) in &img.dets {
                let v = b.iou(gt);
                if v > 0.0 && best.is_none_or(|(bs, _)| *s > bs) {
                    best = Some((*s, v));
                }
            }
            let v = best.map_or(0.0, |p| p.1);
            hist[((v * bins as f64) as usize).min(bins - 1)] += 1.0;
            n += 1;
        }
    }
    if n > 0 {
        for h in &mut hist {
            *h /= n as f64;
        }
    }
    Ok(hist)
}
