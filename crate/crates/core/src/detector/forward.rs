//! Forward pass, proposal extraction and training loss.

use std::collections::HashMap;

use super::boxes::{assign_rpn_targets, grid_anchors, nms, AnchorLabel, BoxCoder, Scored};
use super::{Model, ModelConfig, Params};
use crate::bbox::BBox;
use crate::radiometry::ClipSample;
use crate::tensor::{Roi, Tape, Tensor, Var};
use crate::vsf::{bias_table, vsf_block, BlockConfig, OffsetField, Schedule, VsfVars};
use crate::{Error, Result};

/// Delta scaling of the refinement heads.
pub(crate) const HEAD_CODER: BoxCoder = BoxCoder { scale: [0.1, 0.1, 0.2, 0.2] };

/// Consecutive frames of one clip at network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `T × S × S` normalized gray values.
    pub pixels: Vec<f64>,
    /// Ground truth per frame in network-input pixels.
    pub boxes: Vec<Option<BBox>>,
    /// Index of the window's first frame within its clip.
    pub first_frame: usize,
}

/// Splits a clip into non-overlapping windows of `cfg.window()` frames.
pub fn prepare_windows(clip: &ClipSample, cfg: &ModelConfig) -> Result<Vec<Window>> {
    let (w, h) = (clip.meta.width, clip.meta.height);
    if w != h || w != cfg.input_size * cfg.downsample {
        return Err(Error::Shape(format!(
            "clip is {w}x{h}; the model takes {}x{} downsampled by {}",
            cfg.input_size * cfg.downsample,
            cfg.input_size * cfg.downsample,
            cfg.downsample
        )));
    }
    let t = cfg.window();
    if clip.frames.len() < t {
        return Err(Error::Shape(format!("clip has {} frames, windows need {t}", clip.frames.len())));
    }
    let scale = 1.0 / cfg.downsample as f64;
    let mut out = Vec::new();
    for first in (0..=clip.frames.len() - t).step_by(t) {
        let mut pixels = Vec::with_capacity(t * cfg.input_size * cfg.input_size);
        for f in &clip.frames[first..first + t] {
            let (_, _, v) = f.downsample(cfg.downsample)?;
            pixels.extend(v.iter().map(|&p| (p - cfg.input_mean) / cfg.input_scale));
        }
        let boxes = clip.boxes[first..first + t].iter().map(|b| b.map(|b| b.scale(scale))).collect();
        out.push(Window { pixels, boxes, first_frame: first });
    }
    Ok(out)
}

/// A minibatch of windows as a `[B·T, 3, S, S]` input.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub input: Tensor,
    pub boxes: Vec<Vec<Option<BBox>>>,
}

impl BatchInput {
    pub fn new(windows: &[&Window], cfg: &ModelConfig) -> Result<Self> {
        let t = cfg.window();
        let plane = cfg.input_size * cfg.input_size;
        let mut data = Vec::with_capacity(windows.len() * t * 3 * plane);
        for w in windows {
            if w.pixels.len() != t * plane || w.boxes.len() != t {
                return Err(Error::Shape(format!("window of {} values for {t} frames of {plane}", w.pixels.len())));
            }
            for frame in w.pixels.chunks(plane) {
                // grayscale replicated to three channels
                for _ in 0..3 {
                    data.extend_from_slice(frame);
                }
            }
        }
        Ok(Self {
            input: Tensor::new(&[windows.len() * t, 3, cfg.input_size, cfg.input_size], data)?,
            boxes: windows.iter().map(|w| w.boxes.clone()).collect(),
        })
    }

    pub fn windows(&self) -> usize {
        self.boxes.len()
    }
}

/// Parameters bound to tape variables.
pub(crate) struct Net<'a> {
    cfg: &'a ModelConfig,
    vars: HashMap<&'a str, Var>,
}

impl<'a> Net<'a> {
    pub(crate) fn bind(cfg: &'a ModelConfig, params: &'a Params, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Shape(format!("{} variables for {} parameters", vars.len(), params.len())));
        }
        Ok(Self {
            cfg,
            vars: params.names().iter().map(String::as_str).zip(vars.iter().copied()).collect(),
        })
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?);
        tape.conv2d(x, w, Some(b), stride)
    }

    fn dense(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?);
        tape.linear(x, w, Some(b))
    }
}

/// Tape variables produced by the shared part of the network.
pub(crate) struct Trunk {
    /// `[B, A, h, w]` objectness probabilities.
    pub rpn_scores: Var,
    /// `[B, 4A, h, w]` deltas to the mean box.
    pub rpn_deltas: Var,
    /// `[B·T, C3, h3, w3]` features pooled by the heads.
    pub stage3: Var,
    /// Learned offsets per stage, `[B, 3, H, W, T]`.
    pub offsets: Vec<(usize, Var)>,
}

pub(crate) fn trunk(tape: &mut Tape, net: &Net, input: Var) -> Result<Trunk> {
    let cfg = net.cfg;
    let t = cfg.window();
    let n = tape.shape(input)[0];
    let b = n / t;
    let mut h = input;
    if cfg.variant.data_shift() {
        h = vsf_block(tape, h, &BlockConfig::data(t), None)?.out;
    }
    let mut stage3 = None;
    let mut offsets = Vec::new();
    for s in 1..=4 {
        let c = net.conv(tape, h, &format!("s{s}.conv"), 2)?;
        let c = tape.relu(c);
        let r = net.conv(tape, c, &format!("s{s}.reduce"), 1)?;
        let mut r = tape.relu(r);
        if cfg.has_block(s) {
            let vars = VsfVars {
                offset_w: net.p(&format!("s{s}.vsf.offset_w"))?,
                offset_b: net.p(&format!("s{s}.vsf.offset_b"))?,
                gate_w: net.p(&format!("s{s}.vsf.gate_w"))?,
                gate_b: net.p(&format!("s{s}.vsf.gate_b"))?,
            };
            let block = BlockConfig { frames: t, schedule: cfg.feature_schedule, mask: cfg.shift_mask };
            let o = vsf_block(tape, r, &block, Some(&vars))?;
            r = o.out;
            offsets.extend(o.learned_offsets.map(|v| (s, v)));
        }
        let e = net.conv(tape, r, &format!("s{s}.expand"), 1)?;
        let sum = tape.add(c, e)?;
        h = tape.relu(sum);
        if s == 3 {
            stage3 = Some(h);
        }
    }
    let r = net.conv(tape, h, "rpn.reduce", 1)?;
    let r = tape.relu(r);
    let (fh, fw) = (tape.shape(r)[2], tape.shape(r)[3]);
    // [B·T, R, h, w] is laid out as [B, T·R, h, w]: frames concatenated on channels
    let cat = tape.reshape(r, &[b, t * cfg.rpn_reduce, fh, fw])?;
    let hid = net.conv(tape, cat, "rpn.conv", 1)?;
    let hid = tape.relu(hid);
    let logits = net.conv(tape, hid, "rpn.cls", 1)?;
    let rpn_scores = tape.sigmoid(logits);
    let rpn_deltas = net.conv(tape, hid, "rpn.reg", 1)?;
    Ok(Trunk {
        rpn_scores,
        rpn_deltas,
        stage3: stage3.expect("four stages"),
        offsets,
    })
}

/// Anchors of the proposal grid in network-input pixels.
pub(crate) fn anchors(cfg: &ModelConfig) -> Vec<BBox> {
    let side = cfg.feature_size(4);
    let stride = cfg.input_size as f64 / side as f64;
    grid_anchors(&cfg.anchor_sizes, &cfg.anchor_ratios, stride, side, side)
}

/// Decoded, clipped and suppressed proposals per window.
pub(crate) fn proposals(cfg: &ModelConfig, scores: &Tensor, deltas: &Tensor) -> Vec<Vec<Scored>> {
    let anchors = anchors(cfg);
    let na = anchors.len();
    let cells = cfg.feature_size(4) * cfg.feature_size(4);
    let size = cfg.input_size as f64;
    let b = scores.shape()[0];
    (0..b)
        .map(|bi| {
            let s = &scores.data()[bi * na..(bi + 1) * na];
            let d = &deltas.data()[bi * 4 * na..(bi + 1) * 4 * na];
            let cands: Vec<Scored> = anchors
                .iter()
                .enumerate()
                .filter_map(|(k, a)| {
                    let (ai, cell) = (k / cells, k % cells);
                    let dk: Vec<f64> = (0..4).map(|c| d[(4 * ai + c) * cells + cell]).collect();
                    let bx = BoxCoder::UNIT.decode(a, &dk).clip(size, size)?;
                    (bx.width() >= 1.0 && bx.height() >= 1.0).then_some(Scored { bbox: bx, score: s[k] })
                })
                .collect();
            let mut kept = nms(&cands, cfg.proposal_nms);
            kept.truncate(cfg.proposals);
            kept
        })
        .collect()
}

/// Head outputs for frame `t` over every window's proposals (concatenated
/// window by window): scores `[K, 1]` and deltas `[K, 4]`.
pub(crate) fn head(tape: &mut Tape, net: &Net, stage3: Var, props: &[Vec<BBox>], t: usize) -> Result<(Var, Var)> {
    let cfg = net.cfg;
    let frames = cfg.window();
    let stride = cfg.input_size as f64 / cfg.feature_size(3) as f64;
    let rois: Vec<Roi> = props
        .iter()
        .enumerate()
        .flat_map(|(bi, ps)| {
            ps.iter().map(move |p| Roi {
                image: bi * frames + t,
                x1: p.x1 / stride,
                y1: p.y1 / stride,
                x2: p.x2 / stride,
                y2: p.y2 / stride,
            })
        })
        .collect();
    let pooled = tape.roi_pool(stage3, &rois, cfg.roi_bins)?;
    let hid = net.dense(tape, pooled, &format!("head{t}.fc"))?;
    let hid = tape.relu(hid);
    let logits = net.dense(tape, hid, &format!("head{t}.cls"))?;
    let scores = tape.sigmoid(logits);
    let deltas = net.dense(tape, hid, &format!("head{t}.reg"))?;
    Ok((scores, deltas))
}

/// Loss components as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
}

/// Balanced class weights: positives and negatives each carry half of
/// `scale` (all of it when the other class is absent).
fn balanced(labels: &[Option<bool>], scale: f64) -> Vec<f64> {
    let pos = labels.iter().filter(|l| **l == Some(true)).count();
    let neg = labels.iter().filter(|l| **l == Some(false)).count();
    let (wp, wn) = match (pos, neg) {
        (0, 0) => (0.0, 0.0),
        (0, n) => (0.0, scale / n as f64),
        (p, 0) => (scale / p as f64, 0.0),
        (p, n) => (0.5 * scale / p as f64, 0.5 * scale / n as f64),
    };
    labels
        .iter()
        .map(|l| match l {
            Some(true) => wp,
            Some(false) => wn,
            None => 0.0,
        })
        .collect()
}

/// Training loss `L_cls + λ·L_reg` of the proposal stage plus the same form
/// for every per-frame head. `vars` are the parameters bound in order.
/// `fixed_proposals` replaces the proposals drawn from the network (used by
/// gradient checks, where proposal selection must not move). Returns the
/// loss and the proposals used.
pub fn forward_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &Params,
    vars: &[Var],
    batch: &BatchInput,
    fixed_proposals: Option<&[Vec<BBox>]>,
) -> Result<(LossParts, Vec<Vec<BBox>>)> {
    let net = Net::bind(cfg, params, vars)?;
    let b = batch.windows();
    let frames = cfg.window();
    let input = tape.constant(batch.input.clone());
    let tr = trunk(tape, &net, input)?;

    // proposal stage against the mean box of each window
    let anchors = anchors(cfg);
    let na = anchors.len();
    let cells = cfg.feature_size(4) * cfg.feature_size(4);
    let mut cls_target = Vec::with_capacity(b * na);
    let mut cls_weight = Vec::with_capacity(b * na);
    let mut reg_target = vec![0.0; b * 4 * na];
    let mut reg_weight = vec![0.0; b * 4 * na];
    for (bi, boxes) in batch.boxes.iter().enumerate() {
        let labels: Vec<Option<bool>> = if boxes.iter().any(Option::is_some) {
            let tg = assign_rpn_targets(&anchors, boxes, cfg.pos_iou, cfg.neg_iou)?;
            let pos = tg.positives() as f64;
            for (k, l) in tg.labels.iter().enumerate() {
                if *l == AnchorLabel::Positive {
                    let (ai, cell) = (k / cells, k % cells);
                    for c in 0..4 {
                        let idx = bi * 4 * na + (4 * ai + c) * cells + cell;
                        reg_target[idx] = tg.deltas[k][c];
                        reg_weight[idx] = cfg.lambda / (pos * b as f64);
                    }
                }
            }
            tg.labels
                .iter()
                .map(|l| match l {
                    AnchorLabel::Positive => Some(true),
                    AnchorLabel::Negative => Some(false),
                    AnchorLabel::Ignore => None,
                })
                .collect()
        } else {
            vec![Some(false); na]
        };
        cls_weight.extend(balanced(&labels, 1.0 / b as f64));
        cls_target.extend(labels.iter().map(|l| if *l == Some(true) { 1.0 } else { 0.0 }));
    }
    let rpn_cls = tape.bce(tr.rpn_scores, &cls_target, &cls_weight)?;
    let rpn_reg = tape.smooth_l1(tr.rpn_deltas, &reg_target, &reg_weight)?;

    // shared proposals, plus the ground truth while training
    let props: Vec<Vec<BBox>> = match fixed_proposals {
        Some(p) => {
            if p.len() != b || p.iter().any(Vec::is_empty) {
                return Err(Error::Shape("fixed proposals must list at least one box per window".into()));
            }
            p.to_vec()
        }
        None => {
            let scored = proposals(cfg, tape.value(tr.rpn_scores), tape.value(tr.rpn_deltas));
            scored
                .into_iter()
                .zip(&batch.boxes)
                .map(|(ps, gts)| {
                    let mut v: Vec<BBox> = ps.into_iter().map(|s| s.bbox).collect();
                    v.extend(gts.iter().flatten().copied());
                    if v.is_empty() {
                        let side = cfg.input_size as f64;
                        v.push(BBox { x1: 0.0, y1: 0.0, x2: side, y2: side });
                    }
                    v
                })
                .collect()
        }
    };

    let norm = 1.0 / (b * frames) as f64;
    let mut head_cls = Vec::with_capacity(frames);
    let mut head_reg = Vec::with_capacity(frames);
    for t in 0..frames {
        let (scores, deltas) = head(tape, &net, tr.stage3, &props, t)?;
        let mut target = Vec::new();
        let mut weight = Vec::new();
        let mut dt = Vec::new();
        let mut dw = Vec::new();
        for (bi, ps) in props.iter().enumerate() {
            let gt = batch.boxes[bi][t];
            let labels: Vec<Option<bool>> = ps
                .iter()
                .map(|p| Some(gt.is_some_and(|g| p.iou(&g) >= cfg.head_fg_iou)))
                .collect();
            let pos = labels.iter().filter(|l| **l == Some(true)).count() as f64;
            weight.extend(balanced(&labels, norm));
            for (p, l) in ps.iter().zip(&labels) {
                target.push(if *l == Some(true) { 1.0 } else { 0.0 });
                match (l, gt) {
                    (Some(true), Some(g)) => {
                        dt.extend(HEAD_CODER.encode(p, &g));
                        dw.extend([cfg.lambda * norm / pos; 4]);
                    }
                    _ => {
                        dt.extend([0.0; 4]);
                        dw.extend([0.0; 4]);
                    }
                }
            }
        }
        head_cls.push(tape.bce(scores, &target, &weight)?);
        head_reg.push(tape.smooth_l1(deltas, &dt, &dw)?);
    }
    let head_cls = sum_vars(tape, &head_cls)?;
    let head_reg = sum_vars(tape, &head_reg)?;
    let rpn = tape.add(rpn_cls, rpn_reg)?;
    let heads = tape.add(head_cls, head_reg)?;
    let total = tape.add(rpn, heads)?;
    Ok((LossParts { total, rpn_cls, rpn_reg, head_cls, head_reg }, props))
}

fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Per-window, per-frame detections in network-input pixels.
pub(crate) fn detect(cfg: &ModelConfig, params: &Params, batch: &BatchInput) -> Result<Vec<Vec<Vec<Scored>>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let net = Net::bind(cfg, params, &vars)?;
    let input = tape.constant(batch.input.clone());
    let tr = trunk(&mut tape, &net, input)?;
    let scored = proposals(cfg, tape.value(tr.rpn_scores), tape.value(tr.rpn_deltas));
    let frames = cfg.window();
    let size = cfg.input_size as f64;
    let mut out: Vec<Vec<Vec<Scored>>> = vec![Vec::with_capacity(frames); batch.windows()];
    if scored.iter().all(Vec::is_empty) {
        for w in &mut out {
            w.resize(frames, Vec::new());
        }
        return Ok(out);
    }
    // windows without proposals get a placeholder that is dropped below
    let props: Vec<Vec<BBox>> = scored
        .iter()
        .map(|ps| {
            if ps.is_empty() {
                vec![BBox { x1: 0.0, y1: 0.0, x2: size, y2: size }]
            } else {
                ps.iter().map(|s| s.bbox).collect()
            }
        })
        .collect();
    for t in 0..frames {
        let (scores, deltas) = head(&mut tape, &net, tr.stage3, &props, t)?;
        let (sv, dv) = (tape.value(scores).data(), tape.value(deltas).data());
        let mut k = 0;
        for (bi, ps) in props.iter().enumerate() {
            let mut dets = Vec::new();
            for p in ps {
                if !scored[bi].is_empty() {
                    if let Some(bx) = HEAD_CODER.decode(p, &dv[4 * k..4 * k + 4]).clip(size, size) {
                        dets.push(Scored { bbox: bx, score: sv[k] });
                    }
                }
                k += 1;
            }
            let mut kept = nms(&dets, cfg.det_nms);
            kept.truncate(cfg.max_detections);
            out[bi].push(kept);
        }
    }
    Ok(out)
}

/// Offsets applied to window `window` of `clip`, for feature channel
/// `channel` (clamped per stage): the data-level shift as `"data"` and each
/// learned block as `"stage<s>"`, at the resolution it acts on.
pub fn offset_fields(model: &Model, clip: &ClipSample, window: usize, channel: usize) -> Result<Vec<(String, OffsetField)>> {
    let cfg = &model.config;
    let windows = prepare_windows(clip, cfg)?;
    let w = windows
        .get(window)
        .ok_or_else(|| Error::InvalidArgument(format!("window {window} of {}", windows.len())))?;
    let t = cfg.window();
    let mut out = Vec::new();
    if cfg.variant.data_shift() {
        let bias = bias_table(Schedule::Data, 3, t)?;
        let dims = [cfg.input_size, cfg.input_size, t];
        out.push(("data".to_string(), OffsetField::resolve(None, &bias, dims, 0, channel.min(2), BlockConfig::data(t).mask)?));
    }
    let batch = BatchInput::new(&[w], cfg)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params.tensors().iter().map(|p| tape.constant(p.clone())).collect();
    let net = Net::bind(cfg, &model.params, &vars)?;
    let input = tape.constant(batch.input);
    let tr = trunk(&mut tape, &net, input)?;
    for (s, v) in tr.offsets {
        let reduced = cfg.channels[s - 1] / 2;
        let side = cfg.feature_size(s);
        let bias = bias_table(cfg.feature_schedule, reduced, t)?;
        let field = OffsetField::resolve(Some(tape.value(v)), &bias, [side, side, t], 0, channel.min(reduced - 1), cfg.shift_mask)?;
        out.push((format!("stage{s}"), field));
    }
    Ok(out)
}
