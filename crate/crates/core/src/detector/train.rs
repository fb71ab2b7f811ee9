//! SGD training, clip inference and the CSV formats of both.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use super::forward::{detect, forward_loss, prepare_windows, BatchInput, Window};
use super::Model;
use crate::bbox::BBox;
use crate::radiometry::ClipSample;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Optimizer schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// First (1-based) epoch trained at the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Windows per step.
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 9,
            decay_epoch: 8,
            decay_factor: 0.1,
            batch_size: 2,
            weight_decay: 1e-4,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.epochs > 0
            && self.decay_epoch > 0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("train: invalid schedule {self:?}")))
        }
    }

    /// Learning rate of a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLoss>,
}

impl TrainReport {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch).max().unwrap_or(0);
        (1..=epochs)
            .map(|e| {
                let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.total).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

/// Trains `model` in place on every window of `clips`. Batch order is drawn
/// from the seed's `train/shuffle` stream; `on_step` sees every step.
pub fn train(
    model: &mut Model,
    clips: &[ClipSample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.check()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    let mut windows: Vec<Window> = Vec::new();
    for c in clips {
        windows.extend(prepare_windows(c, &model.config)?);
    }
    let mut velocity: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng::indexed_stream(seed, "train/shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch_windows: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = BatchInput::new(&batch_windows, &model.config)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = model.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
            let (loss, _) = forward_loss(&mut tape, &model.config, &model.params, &vars, &batch, None)?;
            let value = |v: Var| tape.value(v).item();
            let mut rec = StepLoss {
                epoch,
                step,
                lr,
                total: value(loss.total),
                rpn_cls: value(loss.rpn_cls),
                rpn_reg: value(loss.rpn_reg),
                head_cls: value(loss.head_cls),
                head_reg: value(loss.head_reg),
                grad_norm: 0.0,
            };
            if !rec.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, step {step}: loss {} (first non-finite value from '{}')",
                    rec.total,
                    tape.nonfinite().unwrap_or("unknown")
                )));
            }
            let grads = tape.backward(loss.total)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
            let norm = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("non-finite gradient at epoch {epoch}, step {step}")));
            }
            rec.grad_norm = norm;
            let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            for ((p, gt), vel) in model.params.tensors_mut().iter_mut().zip(&g).zip(&mut velocity) {
                let mut data = p.to_vec();
                for ((w, &gr), v) in data.iter_mut().zip(gt.data()).zip(vel.iter_mut()) {
                    *v = cfg.momentum * *v + clip * gr + cfg.weight_decay * *w;
                    *w -= lr * *v;
                }
                *p = Tensor::new(p.shape(), data)?;
            }
            on_step(&rec);
            report.steps.push(rec);
        }
    }
    Ok(report)
}

/// Scored box on a clip frame, in native clip pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Runs every window of `clip` and applies per-frame suppression.
pub fn infer_clip(model: &Model, clip: &ClipSample) -> Result<Vec<Detection>> {
    let windows = prepare_windows(clip, &model.config)?;
    let refs: Vec<&Window> = windows.iter().collect();
    let batch = BatchInput::new(&refs, &model.config)?;
    let per_window = detect(&model.config, &model.params, &batch)?;
    let up = model.config.downsample as f64;
    let mut out = Vec::new();
    for (w, frames) in windows.iter().zip(per_window) {
        for (t, dets) in frames.into_iter().enumerate() {
            out.extend(dets.into_iter().map(|d| Detection {
                frame: w.first_frame + t,
                bbox: d.bbox.scale(up),
                score: d.score,
            }));
        }
    }
    Ok(out)
}

pub fn write_loss_csv<W: Write>(mut w: W, report: &TrainReport) -> std::io::Result<()> {
    writeln!(w, "epoch,step,lr,loss,rpn_cls,rpn_reg,head_cls,head_reg,grad_norm")?;
    for s in &report.steps {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.epoch, s.step, s.lr, s.total, s.rpn_cls, s.rpn_reg, s.head_cls, s.head_reg, s.grad_norm
        )?;
    }
    Ok(())
}

pub fn write_detections_csv<W: Write>(mut w: W, dets: &[Detection]) -> std::io::Result<()> {
    writeln!(w, "frame,x1,y1,x2,y2,score")?;
    for d in dets {
        writeln!(w, "{},{},{},{},{},{}", d.frame, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score)?;
    }
    Ok(())
}

pub fn read_detections_csv<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::format("detections", e.to_string()))?;
        if n == 0 {
            if line.trim() != "frame,x1,y1,x2,y2,score" {
                return Err(Error::format("detections", format!("unexpected header '{line}'")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format("detections", format!("line {}: '{line}'", n + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let frame = f[0].trim().parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..].iter().map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|_| bad())?;
        if !v[4].is_finite() {
            return Err(bad());
        }
        out.push(Detection { frame, bbox, score: v[4] });
    }
    Ok(out)
}
