//! Finite-difference gradient suite over every differentiable operation,
//! the voxel-shift operators and the end-to-end micro detector loss.

use std::sync::Arc;

use rand::RngExt;

use crate::detector::{build_model, forward_loss, prepare_windows, BatchInput, ModelConfig, Variant};
use crate::radiometry::{generate_clip, GeneratorConfig};
use crate::rng;
use crate::tensor::{check_gradients, GradCheckConfig, GradCheckReport, Roi, ShiftBias, Tape, Tensor, Var};
use crate::vsf::{differential_attention_fuse, vsf_block, vsf_shift, BlockConfig, Offsets, VsfVars};
use crate::{Error, Result};

/// Largest accepted relative error of single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Largest accepted relative error of the end-to-end detector loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Tensorcore,
    Vsf,
    Detector,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Tensorcore, Scope::Vsf, Scope::Detector];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensorcore => "tensorcore",
            Scope::Vsf => "vsf",
            Scope::Detector => "detector",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck scope '{s}' (tensorcore, vsf, detector)")))
    }
}

/// Outcome of one checked operation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::indexed_stream(seed, "gradcheck", shape.len() as u64);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Offsets kept at least 0.2 away from the integer lattice.
fn fractional(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| 0.6 * v + if v >= 0.0 { 0.2 } else { -0.2 })
}

struct Suite {
    cfg: GradCheckConfig,
    out: Vec<OpCheck>,
}

impl Suite {
    fn new(tolerance: f64) -> Self {
        Self {
            cfg: GradCheckConfig { tolerance, ..GradCheckConfig::default() },
            out: Vec::new(),
        }
    }

    /// Checks `build`, scalarized against fixed pseudo-random weights.
    fn op(&mut self, name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<()> {
        self.scalar(name, inputs, |t, v| {
            let y = build(t, v)?;
            let w = random(t.shape(y), 0xD07).to_vec();
            t.dot_const(y, &w)
        })
    }

    fn scalar(&mut self, name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<()> {
        let report = check_gradients(inputs, &self.cfg, f)?;
        self.out.push(OpCheck { name: name.to_string(), report });
        Ok(())
    }
}

fn tensorcore() -> Result<Vec<OpCheck>> {
    let mut s = Suite::new(OP_TOLERANCE);
    let (a, b) = (random(&[2, 3, 4], 1), random(&[2, 3, 4], 2));
    s.op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
    s.op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
    s.op("mul", &[a.clone(), b], |t, v| t.mul(v[0], v[1]))?;
    s.op("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -2.5)))?;
    s.op("sigmoid", &[a.clone()], |t, v| Ok(t.sigmoid(v[0])))?;
    s.op("relu", &[a.clone()], |t, v| Ok(t.relu(v[0])))?;
    s.op("reshape", &[a.clone()], |t, v| t.reshape(v[0], &[4, 6]))?;
    s.scalar("sum", &[a.clone()], |t, v| Ok(t.sum(v[0])))?;
    let w = random(&[24], 3).to_vec();
    s.scalar("dot_const", &[a], |t, v| t.dot_const(v[0], &w))?;
    let (x, w, b) = (random(&[2, 2, 4, 4], 4), random(&[3, 2, 3, 3], 5), random(&[3], 6));
    s.op("conv2d", &[x.clone(), w.clone(), b.clone()], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1))?;
    s.op("conv2d_stride2", &[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2))?;
    let (x, w, b) = (random(&[1, 2, 4, 4, 3], 7), random(&[2, 2, 3, 3, 3], 8), random(&[2], 9));
    s.op("conv3d", &[x.clone(), w, b], |t, v| t.conv3d(v[0], v[1], Some(v[2])))?;
    s.op("global_avg_pool", &[x.clone()], |t, v| t.global_avg_pool(v[0]))?;
    s.op("mul_channel", &[x.clone(), random(&[1, 2], 10)], |t, v| t.mul_channel(v[0], v[1]))?;
    s.op("from_volume", &[x.clone()], |t, v| t.from_volume(v[0]))?;
    s.op("to_volume", &[random(&[3, 2, 4, 4], 11)], |t, v| t.to_volume(v[0], 3))?;
    s.op("linear", &[random(&[3, 5], 12), random(&[4, 5], 13), random(&[4], 14)], |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?;
    let bias = Arc::new(ShiftBias::new(2, 3, vec![0.0, -1.0, 1.0, 0.5, 0.0, -0.5])?);
    s.op("shift", &[x.clone(), fractional(&[1, 3, 4, 4, 3], 15)], |t, v| {
        t.shift(v[0], Some(v[1]), bias.clone(), [true; 3])
    })?;
    let rois = [
        Roi { image: 0, x1: 0.3, y1: 0.7, x2: 3.1, y2: 2.9 },
        Roi { image: 1, x1: 1.2, y1: 0.1, x2: 3.6, y2: 3.8 },
    ];
    s.op("roi_pool", &[random(&[2, 2, 4, 4], 16)], |t, v| t.roi_pool(v[0], &rois, 2))?;
    let p = random(&[6], 17).map(|v| 0.5 + 0.45 * v);
    let (y, wt) = ([1.0, 0.0, 1.0, 0.0, 0.0, 1.0], [1.0, 0.5, 2.0, 1.0, 0.0, 0.25]);
    s.scalar("bce", &[p], |t, v| t.bce(v[0], &y, &wt))?;
    let target = [0.1, -0.4, 2.0, 0.0, 1.5, -2.0];
    s.scalar("smooth_l1", &[random(&[6], 18).map(|v| 3.0 * v)], |t, v| t.smooth_l1(v[0], &target, &[1.0; 6]))?;
    Ok(s.out)
}

fn vsf() -> Result<Vec<OpCheck>> {
    let mut s = Suite::new(OP_TOLERANCE);
    let f = random(&[1, 2, 4, 4, 3], 20);
    let zero = Arc::new(ShiftBias::zeros(2, 3));
    s.op("vsf_shift", &[f.clone(), fractional(&[1, 3, 4, 4, 3], 21)], |t, v| {
        vsf_shift(t, v[0], &Offsets { learned: Some(v[1]), bias: zero.clone() }, [true; 3])
    })?;
    let inputs = [f, random(&[1, 2, 4, 4, 3], 22), random(&[2, 2], 23), random(&[2], 24)];
    s.op("differential_attention_fuse", &inputs, |t, v| differential_attention_fuse(t, v[0], v[1], v[2], v[3]))?;
    // the feature bias needs channels divisible by eight
    let inputs = [
        random(&[3, 8, 4, 4], 25),
        random(&[3, 8, 3, 3, 3], 26).map(|v| 0.1 * v),
        Tensor::new(&[3], vec![0.23, -0.31, 0.17])?,
        random(&[8, 8], 27),
        random(&[8], 28),
    ];
    let cfg = BlockConfig::feature(3);
    s.op("vsf_block", &inputs, |t, v| {
        let vars = VsfVars { offset_w: v[1], offset_b: v[2], gate_w: v[3], gate_b: v[4] };
        Ok(vsf_block(t, v[0], &cfg, Some(&vars))?.out)
    })?;
    Ok(s.out)
}

/// Smallest detector configuration exercising every part of the network.
pub fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        frames: 2,
        input_size: 16,
        downsample: 2,
        channels: [16, 16, 16, 16],
        rpn_hidden: 8,
        roi_bins: 2,
        head_hidden: 8,
        anchor_sizes: vec![6.0, 12.0],
        proposals: 8,
        ..ModelConfig::default()
    }
}

fn detector() -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let g = GeneratorConfig { width: 32, height: 32, frames: 2, ..GeneratorConfig::default() };
    let clip = generate_clip(13, 0, &g)?;
    for variant in Variant::ALL {
        let cfg = micro_config(variant);
        let mut model = build_model(&cfg, 4)?;
        // zero-initialized weights would sit exactly on the shift lattice
        let mut r = rng::stream(11, "gradcheck/perturb");
        for t in model.params.tensors_mut() {
            let moved = Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.05 * r.random_range(-1.0..1.0));
            *t = moved;
        }
        let windows = prepare_windows(&clip, &cfg)?;
        let batch = BatchInput::new(&[&windows[0]], &cfg)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let (_, props) = forward_loss(&mut tape, &cfg, &model.params, &vars, &batch, None)?;
        let gc = GradCheckConfig {
            tolerance: END_TO_END_TOLERANCE,
            max_entries_per_input: Some(4),
            max_skip_fraction: 0.05,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(model.params.tensors(), &gc, |t, v| {
            Ok(forward_loss(t, &cfg, &model.params, v, &batch, Some(&props))?.0.total)
        })?;
        out.push(OpCheck { name: format!("detector_loss[{}]", variant.name()), report });
    }
    Ok(out)
}

/// Runs the checks of one scope.
pub fn gradient_suite(scope: Scope) -> Result<Vec<OpCheck>> {
    match scope {
        Scope::Tensorcore => tensorcore(),
        Scope::Vsf => vsf(),
        Scope::Detector => detector(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes() {
        for scope in Scope::ALL {
            for c in gradient_suite(scope).unwrap() {
                assert!(c.report.passed, "{}: {:?}", c.name, c.report);
            }
        }
        assert!(Scope::from_name("optimizer").is_err());
    }
}
