//! Detection metrics: IoU, the AP family with size and visibility buckets,
//! the error taxonomy, IoU density and the objectness measures.

mod ap;
pub mod objectness;
mod tide;

use std::fmt::Write as _;

use serde::Serialize;

use crate::bbox::BBox;
use crate::{Error, Result};

pub use ap::{average_precision, interpolated_ap, AreaRange, RECALL_POINTS};
pub use objectness::{cc_score, ed_score, hog_descriptor, ms_score, objectness, ss_score, ObjectnessScores};
pub use tide::{iou_density, tide_classify, TideCounts};

/// IoU of two non-degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate box in iou: {a:?}, {b:?}")));
    }
    Ok(a.iou(b))
}

/// Ground truth and scored detections of one frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalImage {
    pub gts: Vec<BBox>,
    pub dets: Vec<(BBox, f64)>,
    /// Visibility of the clip the frame belongs to.
    pub clear: bool,
    /// Clip index, for per-clip aggregation.
    pub clip: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub density_bins: usize,
    pub tide_fg: f64,
    pub tide_bg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { density_bins: 10, tide_fg: 0.5, tide_bg: 0.1 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.density_bins == 0 || !(0.0 < self.tide_bg && self.tide_bg < self.tide_fg && self.tide_fg < 1.0) {
            return Err(Error::InvalidArgument(format!("eval: invalid settings {self:?}")));
        }
        Ok(())
    }
}

/// Metric summary. AP values are fractions in `[0, 1]`; a bucket without
/// ground truth reports 0 and is listed in `empty`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ap_clear: Option<f64>,
    pub ap_vague: Option<f64>,
    pub tide: TideCounts,
    pub iou_density: Vec<f64>,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub empty: Vec<String>,
}

fn mean_ap(images: &[&EvalImage], range: AreaRange) -> Option<f64> {
    let v: Vec<f64> = (0..10)
        .map(|k| average_precision(images, 0.5 + 0.05 * k as f64, range))
        .collect::<Option<_>>()?;
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Full report over `images`. Visibility buckets are present only when both
/// clear and vague frames occur.
pub fn coco_ap(images: &[EvalImage], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let all: Vec<&EvalImage> = images.iter().collect();
    let mut empty = Vec::new();
    let mut take = |name: &str, v: Option<f64>| {
        v.unwrap_or_else(|| {
            empty.push(name.to_string());
            0.0
        })
    };
    let ap50 = take("ap50", average_precision(&all, 0.5, AreaRange::ALL));
    let ap75 = take("ap75", average_precision(&all, 0.75, AreaRange::ALL));
    let ap = take("ap", mean_ap(&all, AreaRange::ALL));
    let ap_s = take("ap_s", mean_ap(&all, AreaRange::SMALL));
    let ap_m = take("ap_m", mean_ap(&all, AreaRange::MEDIUM));
    let ap_l = take("ap_l", mean_ap(&all, AreaRange::LARGE));
    let clear: Vec<&EvalImage> = images.iter().filter(|i| i.clear).collect();
    let vague: Vec<&EvalImage> = images.iter().filter(|i| !i.clear).collect();
    let (ap_clear, ap_vague) = if clear.is_empty() || vague.is_empty() {
        (None, None)
    } else {
        (
            Some(take("ap_clear", average_precision(&clear, 0.5, AreaRange::ALL))),
            Some(take("ap_vague", average_precision(&vague, 0.5, AreaRange::ALL))),
        )
    };
    let mut tide = TideCounts::default();
    for img in images {
        tide.add(&tide_classify(img, cfg.tide_fg, cfg.tide_bg)?.0);
    }
    Ok(EvalReport {
        ap50,
        ap75,
        ap,
        ap_s,
        ap_m,
        ap_l,
        ap_clear,
        ap_vague,
        tide,
        iou_density: iou_density(&all, cfg.density_bins)?,
        images: images.len(),
        ground_truths: images.iter().map(|i| i.gts.len()).sum(),
        detections: images.iter().map(|i| i.dets.len()).sum(),
        empty,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: AP columns in percent, then the error counts.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let cols = [
            ("AP50", pct(Some(self.ap50))),
            ("AP75", pct(Some(self.ap75))),
            ("AP_clear", pct(self.ap_clear)),
            ("AP_vague", pct(self.ap_vague)),
            ("AP_s", pct(Some(self.ap_s))),
            ("AP_m", pct(Some(self.ap_m))),
            ("AP_l", pct(Some(self.ap_l))),
            ("AP", pct(Some(self.ap))),
        ];
        let mut head = String::new();
        let mut row = String::new();
        for (name, v) in &cols {
            let w = name.len().max(v.len()) + 2;
            let _ = write!(head, "{name:>w$}");
            let _ = write!(row, "{v:>w$}");
        }
        let t = &self.tide;
        format!(
            "{head}\n{row}\n\nerrors: Loc {} Dupe {} Bkgd {} Miss {}\n",
            t.loc, t.dupe, t.bkgd, t.miss
        )
    }
}
