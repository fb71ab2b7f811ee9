//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; `backward` walks it once in reverse.

use std::sync::Arc;

use super::kernels::{self, Conv2dGeom, Conv3dGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis-aligned region on a feature map, in feature-map cell units
/// (cell `(i, j)` spans `[j, j+1) × [i, i+1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub image: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Fixed temporal offset per (channel, frame), added to the `dt` component of
/// a voxel shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftBias {
    channels: usize,
    frames: usize,
    dt: Vec<f64>,
}

impl ShiftBias {
    pub fn new(channels: usize, frames: usize, dt: Vec<f64>) -> Result<Self> {
        if dt.len() != channels * frames {
            return Err(Error::Shape(format!(
                "bias table needs {channels}x{frames} entries, got {}",
                dt.len()
            )));
        }
        Ok(Self { channels, frames, dt })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        Self {
            channels,
            frames,
            dt: vec![0.0; channels * frames],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, channel: usize, frame: usize) -> f64 {
        self.dt[channel * self.frames + frame]
    }
}

enum Op {
    Leaf,
    Constant,
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        cols: Vec<f64>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv3dGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MulChannel {
        x: Var,
        g: Var,
    },
    ToVolume {
        x: Var,
        frames: usize,
    },
    FromVolume {
        x: Var,
        frames: usize,
    },
    Shift {
        x: Var,
        offsets: Option<Var>,
        bias: Arc<ShiftBias>,
        mask: [bool; 3],
    },
    RoiPool {
        x: Var,
        rois: Vec<Roi>,
        bins: usize,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    DotConst {
        x: Var,
        w: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf feeds this value.
    tracked: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Reshape(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::GlobalAvgPool(x)
            | Op::ToVolume { x, .. }
            | Op::FromVolume { x, .. }
            | Op::RoiPool { x, .. }
            | Op::Bce { p: x, .. }
            | Op::SmoothL1 { x, .. }
            | Op::DotConst { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulChannel { x: a, g: b } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::Conv3d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::Shift { x, offsets, .. } => {
                let mut v = vec![*x];
                v.extend(*offsets);
                v
            }
        }
    }
}

/// Lower/upper clamp for cross-entropy inputs.
pub const BCE_EPS: f64 = 1e-7;

/// Number of bilinear samples per RoI bin along each axis.
const ROI_SAMPLES: usize = 2;

/// Single-owner record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: Option<u64>,
    nonfinite: Option<String>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient or zeros when the value did not influence the scalar.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that also hashes every discrete branch taken during the forward
    /// pass (ReLU masks, interpolation cells, clamps). Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn with_signature() -> Self {
        Self {
            signature: Some(0xcbf2_9ce4_8422_2325),
            ..Self::default()
        }
    }

    pub fn signature(&self) -> Option<u64> {
        self.signature
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn note(&mut self, bits: u64) {
        if let Some(s) = self.signature.as_mut() {
            *s = (*s ^ bits).wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name.to_string());
        }
        let tracked = match op {
            Op::Leaf => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push("leaf", t, Op::Leaf)
    }

    /// Input that receives no gradient; work that depends only on constants
    /// is skipped in the reverse sweep.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push("reshape", value, Op::Reshape(x)))
    }

    /// 2-D convolution, input `[N, Cin, H, W]`, kernel `[Cout, Cin, k, k]`
    /// with odd `k`, zero padding `k/2`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride 0".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let geom = Conv2dGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
        };
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let (ho, wo) = geom.out_hw();
        let value = Tensor::from_parts(vec![xs[0], ws[0], ho, wo], out);
        Ok(self.push("conv2d", value, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Stride-1 "same" 3-D convolution, input `[N, Cin, D0, D1, D2]`, kernel
    /// `[Cout, Cin, k0, k1, k2]` with odd extents.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::Shape(format!("conv3d: input {xs:?}, kernel {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("conv3d bias {:?}", self.shape(b))));
            }
        }
        let geom = Conv3dGeom {
            batch: xs[0],
            in_ch: xs[1],
            dims: [xs[2], xs[3], xs[4]],
            out_ch: ws[0],
            kernel: [ws[2], ws[3], ws[4]],
        };
        let (out, cols) = kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(vec![xs[0], ws[0], xs[2], xs[3], xs[4]], out);
        Ok(self.push("conv3d", value, Op::Conv3d { x, w, b, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        if self.signature.is_some() {
            let mut h = 0u64;
            for (i, &v) in self.value(x).data().iter().enumerate() {
                if v > 0.0 {
                    h = h.rotate_left(5) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                }
            }
            self.note(h);
        }
        self.push("relu", value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push("add", value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push("sub", value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push("mul", value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c))
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::Shape(format!("global_avg_pool: {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::from_parts(vec![xs[0], xs[1]], data);
        Ok(self.push("global_avg_pool", value, Op::GlobalAvgPool(x)))
    }

    /// `y = x · Wᵀ + b` with `x: [N, In]`, `W: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm_acc(
            n,
            din,
            dout,
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, dout], out);
        Ok(self.push("linear", value, Op::Linear { x, w, b }))
    }

    /// Per-(sample, channel) gate: `x: [N, C, ...]`, `g: [N, C]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(g) != &xs[..2] {
            return Err(Error::Shape(format!(
                "mul_channel: {xs:?} vs gate {:?}",
                self.shape(g)
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let gv = self.value(g).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(gv)
            .flat_map(|(c, &s)| c.iter().map(move |&v| v * s))
            .collect();
        let value = Tensor::from_parts(xs, data);
        Ok(self.push("mul_channel", value, Op::MulChannel { x, g }))
    }

    /// `[B·T, C, H, W] -> [B, C, H, W, T]`.
    pub fn to_volume(&mut self, x: Var, frames: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || frames == 0 || xs[0] % frames != 0 {
            return Err(Error::Shape(format!("to_volume: {xs:?} with {frames} frames")));
        }
        let (b, c, h, w) = (xs[0] / frames, xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let hw = h * w;
        for bi in 0..b {
            for t in 0..frames {
                for ci in 0..c {
                    let s = ((bi * frames + t) * c + ci) * hw;
                    let d = (bi * c + ci) * hw * frames;
                    for p in 0..hw {
                        out[d + p * frames + t] = src[s + p];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, h, w, frames], out);
        Ok(self.push("to_volume", value, Op::ToVolume { x, frames }))
    }

    /// `[B, C, H, W, T] -> [B·T, C, H, W]`.
    pub fn from_volume(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::Shape(format!("from_volume: {xs:?}")));
        }
        let (b, c, h, w, frames) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let hw = h * w;
        for bi in 0..b {
            for t in 0..frames {
                for ci in 0..c {
                    let d = ((bi * frames + t) * c + ci) * hw;
                    let s = (bi * c + ci) * hw * frames;
                    for p in 0..hw {
                        out[d + p] = src[s + p * frames + t];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b * frames, c, h, w], out);
        Ok(self.push("from_volume", value, Op::FromVolume { x, frames }))
    }

    /// Voxel shift with trilinear sampling.
    ///
    /// `x: [B, C, H, W, T]`; `offsets: [B, 3, H, W, T]` holds the learned
    /// `(dx, dy, dt)` shared by all channels; `bias` adds a per-(channel,
    /// frame) temporal offset; `mask` enables the (x, y, t) components.
    pub fn shift(
        &mut self,
        x: Var,
        offsets: Option<Var>,
        bias: Arc<ShiftBias>,
        mask: [bool; 3],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::Shape(format!("shift: input {xs:?}")));
        }
        if bias.channels() != xs[1] || bias.frames() != xs[4] {
            return Err(Error::Shape(format!(
                "shift: bias table {}x{} for input {xs:?}",
                bias.channels(),
                bias.frames()
            )));
        }
        if let Some(o) = offsets {
            let os = self.shape(o);
            if os != [xs[0], 3, xs[2], xs[3], xs[4]] {
                return Err(Error::Shape(format!("shift: offsets {os:?} for input {xs:?}")));
            }
        }
        let dims = [xs[2], xs[3], xs[4]];
        let vox: usize = dims.iter().product();
        let src = self.value(x).data();
        let off = offsets.map(|o| self.value(o).data());
        let mut out = vec![0.0; src.len()];
        let mut sig = 0u64;
        for b in 0..xs[0] {
            for c in 0..xs[1] {
                let vol = &src[(b * xs[1] + c) * vox..(b * xs[1] + c + 1) * vox];
                let dst = &mut out[(b * xs[1] + c) * vox..(b * xs[1] + c + 1) * vox];
                for v in 0..vox {
                    let (pos, exact) = sample_position(dims, v, off.map(|o| &o[b * 3 * vox..(b + 1) * 3 * vox]), &bias, c, mask);
                    dst[v] = if let Some(ip) = exact {
                        kernels::voxel_index(dims, ip).map_or(0.0, |i| vol[i])
                    } else {
                        let s = kernels::trilinear(dims, pos);
                        sig = sig.rotate_left(3) ^ (s.base[0] as u64 ^ (s.base[1] as u64) << 20 ^ (s.base[2] as u64) << 40);
                        s.corners[..s.count].iter().map(|&(i, wgt)| wgt * vol[i]).sum()
                    };
                }
            }
        }
        self.note(sig);
        let value = Tensor::from_parts(xs, out);
        Ok(self.push("shift", value, Op::Shift { x, offsets, bias, mask }))
    }

    /// Average-pools each RoI into `bins × bins` cells from `x: [N, C, H, W]`;
    /// every cell averages `2 × 2` bilinear samples. Output `[K, C·bins²]`.
    pub fn roi_pool(&mut self, x: Var, rois: &[Roi], bins: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || bins == 0 || rois.is_empty() {
            return Err(Error::Shape(format!("roi_pool: {xs:?}, {} rois", rois.len())));
        }
        if let Some(r) = rois.iter().find(|r| r.image >= xs[0]) {
            return Err(Error::InvalidArgument(format!("roi_pool: image {} of {}", r.image, xs[0])));
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let feat = c * bins * bins;
        let src = self.value(x).data();
        let mut out = vec![0.0; rois.len() * feat];
        for (k, roi) in rois.iter().enumerate() {
            let samples = roi_samples(roi, bins, h, w);
            let img = &src[roi.image * c * h * w..(roi.image + 1) * c * h * w];
            for ch in 0..c {
                let plane = &img[ch * h * w..(ch + 1) * h * w];
                for (bin, taps) in samples.iter().enumerate() {
                    let v: f64 = taps.iter().map(|&(i, wgt)| wgt * plane[i]).sum();
                    out[k * feat + ch * bins * bins + bin] = v;
                }
            }
        }
        let value = Tensor::from_parts(vec![rois.len(), feat], out);
        Ok(self.push("roi_pool", value, Op::RoiPool { x, rois: rois.to_vec(), bins }))
    }

    /// Weighted binary cross-entropy `Σ wᵢ·CE(pᵢ, yᵢ)`; `p` clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let n = self.value(p).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::Shape(format!(
                "bce: {n} predictions, {} targets, {} weights",
                target.len(),
                weight.len()
            )));
        }
        let mut total = 0.0;
        let mut clamps = 0u64;
        for (i, ((&pv, &y), &wv)) in self.value(p).data().iter().zip(target).zip(weight).enumerate() {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if pc != pv {
                clamps ^= (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            }
            total += wv * -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        self.note(clamps);
        let value = Tensor::scalar(total);
        Ok(self.push(
            "bce",
            value,
            Op::Bce {
                p,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
        ))
    }

    /// Weighted smooth-L1 (transition at 1): `Σ wᵢ·sl1(xᵢ - tᵢ)`.
    pub fn smooth_l1(&mut self, x: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let n = self.value(x).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::Shape(format!(
                "smooth_l1: {n} predictions, {} targets, {} weights",
                target.len(),
                weight.len()
            )));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&v, &t), &w)| w * smooth_l1(v - t))
            .sum();
        Ok(self.push(
            "smooth_l1",
            Tensor::scalar(total),
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
        ))
    }

    /// `Σ xᵢ·wᵢ` against constant weights.
    pub fn dot_const(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "dot_const: {} weights for {:?}",
                w.len(),
                self.shape(x)
            )));
        }
        let total = self.value(x).data().iter().zip(w).map(|(a, b)| a * b).sum();
        Ok(self.push("dot_const", Tensor::scalar(total), Op::DotConst { x, w: w.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = vec![1.0; self.value(x).numel()];
        self.dot_const(x, &w).expect("weights sized from input")
    }

    /// Reverse sweep from a single-element value. The seed gradient is 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Conv2d { x, w, b, geom, cols } => {
                let wv = self.value(*w).data();
                acc(*x, &mut |d| kernels::conv2d_backward(geom, g, cols, wv, Some(d), None, None));
                acc(*w, &mut |d| kernels::conv2d_backward(geom, g, cols, wv, None, Some(d), None));
                if let Some(b) = b {
                    acc(*b, &mut |d| kernels::conv2d_backward(geom, g, cols, wv, None, None, Some(d)));
                }
            }
            Op::Conv3d { x, w, b, geom, cols } => {
                let wv = self.value(*w).data();
                acc(*x, &mut |d| kernels::conv3d_backward(geom, g, cols, wv, Some(d), None, None));
                acc(*w, &mut |d| kernels::conv3d_backward(geom, g, cols, wv, None, Some(d), None));
                if let Some(b) = b {
                    acc(*b, &mut |d| kernels::conv3d_backward(geom, g, cols, wv, None, None, Some(d)));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, &gv), &s) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                acc(*x, &mut |d| {
                    for (chunk, &gv) in d.chunks_mut(inner).zip(g) {
                        let share = gv / inner as f64;
                        chunk.iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |d| {
                    kernels::gemm_acc(n, dout, din, g, (dout as isize, 1), wv, (din as isize, 1), d)
                });
                acc(*w, &mut |d| {
                    kernels::gemm_acc(dout, n, din, g, (1, dout as isize), xv, (din as isize, 1), d)
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::MulChannel { x, g: gate } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                acc(*x, &mut |d| {
                    for ((dc, gc), &s) in d.chunks_mut(inner).zip(g.chunks(inner)).zip(gv) {
                        for (dv, &u) in dc.iter_mut().zip(gc) {
                            *dv += u * s;
                        }
                    }
                });
                acc(*gate, &mut |d| {
                    for ((dv, gc), xc) in d.iter_mut().zip(g.chunks(inner)).zip(xv.chunks(inner)) {
                        *dv += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::ToVolume { x, frames } => {
                let s = node.value.shape();
                let (b, c, hw, t) = (s[0], s[1], s[2] * s[3], *frames);
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for ci in 0..c {
                                let dst = ((bi * t + ti) * c + ci) * hw;
                                let src = (bi * c + ci) * hw * t;
                                for p in 0..hw {
                                    d[dst + p] += g[src + p * t + ti];
                                }
                            }
                        }
                    }
                });
            }
            Op::FromVolume { x, frames } => {
                let s = self.shape(*x);
                let (b, c, hw, t) = (s[0], s[1], s[2] * s[3], *frames);
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for ci in 0..c {
                                let src = ((bi * t + ti) * c + ci) * hw;
                                let dst = (bi * c + ci) * hw * t;
                                for p in 0..hw {
                                    d[dst + p * t + ti] += g[src + p];
                                }
                            }
                        }
                    }
                });
            }
            Op::Shift { x, offsets, bias, mask } => {
                let xs = self.shape(*x).to_vec();
                let dims = [xs[2], xs[3], xs[4]];
                let vox: usize = dims.iter().product();
                let src = self.value(*x).data();
                let off = offsets.map(|o| self.value(o).data());
                acc(*x, &mut |d| {
                    for b in 0..xs[0] {
                        for c in 0..xs[1] {
                            let base = (b * xs[1] + c) * vox;
                            let dvol = &mut d[base..base + vox];
                            for v in 0..vox {
                                let gv = g[base + v];
                                if gv == 0.0 {
                                    continue;
                                }
                                let (pos, exact) = sample_position(dims, v, off.map(|o| &o[b * 3 * vox..(b + 1) * 3 * vox]), bias, c, *mask);
                                if let Some(ip) = exact {
                                    if let Some(i) = kernels::voxel_index(dims, ip) {
                                        dvol[i] += gv;
                                    }
                                } else {
                                    let s = kernels::trilinear(dims, pos);
                                    for &(i, wgt) in &s.corners[..s.count] {
                                        dvol[i] += gv * wgt;
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(o) = offsets {
                    let ov = self.value(*o).data();
                    acc(*o, &mut |d| {
                        for b in 0..xs[0] {
                            let ob = &ov[b * 3 * vox..(b + 1) * 3 * vox];
                            for c in 0..xs[1] {
                                let base = (b * xs[1] + c) * vox;
                                let vol = &src[base..base + vox];
                                for v in 0..vox {
                                    let gv = g[base + v];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let (pos, _) = sample_position(dims, v, Some(ob), bias, c, *mask);
                                    let s = kernels::trilinear(dims, pos);
                                    let pg = kernels::trilinear_position_grad(vol, dims, &s);
                                    // offset components are (dx, dy, dt); position is (y, x, t)
                                    let comp = [pg[1], pg[0], pg[2]];
                                    for (a, &on) in mask.iter().enumerate() {
                                        if on {
                                            d[b * 3 * vox + a * vox + v] += gv * comp[a];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::RoiPool { x, rois, bins } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let feat = c * bins * bins;
                acc(*x, &mut |d| {
                    for (k, roi) in rois.iter().enumerate() {
                        let samples = roi_samples(roi, *bins, h, w);
                        let img = &mut d[roi.image * c * h * w..(roi.image + 1) * c * h * w];
                        for ch in 0..c {
                            let plane = &mut img[ch * h * w..(ch + 1) * h * w];
                            for (bin, taps) in samples.iter().enumerate() {
                                let gv = g[k * feat + ch * bins * bins + bin];
                                for &(i, wgt) in taps {
                                    plane[i] += gv * wgt;
                                }
                            }
                        }
                    }
                });
            }
            Op::Bce { p, target, weight } => {
                let pv = self.value(*p).data();
                let up = g[0];
                acc(*p, &mut |d| {
                    for (((dv, &pr), &y), &wv) in d.iter_mut().zip(pv).zip(target).zip(weight) {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pr) {
                            *dv += up * wv * (-y / pr + (1.0 - y) / (1.0 - pr));
                        }
                    }
                });
            }
            Op::SmoothL1 { x, target, weight } => {
                let xv = self.value(*x).data();
                let up = g[0];
                acc(*x, &mut |d| {
                    for (((dv, &v), &t), &wv) in d.iter_mut().zip(xv).zip(target).zip(weight) {
                        *dv += up * wv * smooth_l1_grad(v - t);
                    }
                });
            }
            Op::DotConst { x, w } => {
                let up = g[0];
                acc(*x, &mut |d| {
                    for (dv, &wv) in d.iter_mut().zip(w) {
                        *dv += up * wv;
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (a, &b) in d.iter_mut().zip(g) {
        *a += b;
    }
}

/// Sampling position of voxel `v` for channel `c`, and the integer position
/// when no interpolation is needed.
fn sample_position(
    dims: [usize; 3],
    v: usize,
    offsets: Option<&[f64]>,
    bias: &ShiftBias,
    c: usize,
    mask: [bool; 3],
) -> ([f64; 3], Option<[isize; 3]>) {
    let vox = dims[0] * dims[1] * dims[2];
    let t = v % dims[2];
    let xcol = (v / dims[2]) % dims[1];
    let y = v / (dims[1] * dims[2]);
    let (mut dx, mut dy, mut dt) = (0.0, 0.0, 0.0);
    if let Some(o) = offsets {
        if mask[0] {
            dx = o[v];
        }
        if mask[1] {
            dy = o[vox + v];
        }
        if mask[2] {
            dt = o[2 * vox + v];
        }
    }
    if mask[2] {
        dt += bias.get(c, t);
    }
    let pos = [y as f64 + dy, xcol as f64 + dx, t as f64 + dt];
    let exact = if pos.iter().all(|p| p.fract() == 0.0) {
        Some([pos[0] as isize, pos[1] as isize, pos[2] as isize])
    } else {
        None
    };
    (pos, exact)
}

/// Bilinear taps `(flat index, weight)` for every bin of a RoI, weights
/// already divided by the sample count.
fn roi_samples(roi: &Roi, bins: usize, h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
    let bw = (roi.x2 - roi.x1) / bins as f64;
    let bh = (roi.y2 - roi.y1) / bins as f64;
    let share = 1.0 / (ROI_SAMPLES * ROI_SAMPLES) as f64;
    let mut out = Vec::with_capacity(bins * bins);
    for by in 0..bins {
        for bx in 0..bins {
            let mut taps = Vec::with_capacity(16);
            for sy in 0..ROI_SAMPLES {
                for sx in 0..ROI_SAMPLES {
                    let yc = roi.y1 + bh * (by as f64 + (sy as f64 + 0.5) / ROI_SAMPLES as f64);
                    let xc = roi.x1 + bw * (bx as f64 + (sx as f64 + 0.5) / ROI_SAMPLES as f64);
                    // cell centres sit at half-integers
                    let yi = (yc - 0.5).clamp(0.0, (h - 1) as f64);
                    let xi = (xc - 0.5).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (yi.floor() as usize, xi.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (yi - y0 as f64, xi - x0 as f64);
                    taps.push((y0 * w + x0, share * (1.0 - fy) * (1.0 - fx)));
                    taps.push((y0 * w + x1, share * (1.0 - fy) * fx));
                    taps.push((y1 * w + x0, share * fy * (1.0 - fx)));
                    taps.push((y1 * w + x1, share * fy * fx));
                }
            }
            out.push(taps);
        }
    }
    out
}
