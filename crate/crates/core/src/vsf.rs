//! Voxel shift field: offset prediction, trilinear spatio-temporal sampling,
//! temporal bias schedules and differential-attention fusion.
//!
//! Volumes use the `[B, C, H, W, T]` layout of [`Tape::to_volume`]; offset
//! fields are `[B, 3, H, W, T]` with components `(dx, dy, dt)` in voxel units.

use std::io::Write;
use std::sync::Arc;

use crate::tensor::{ShiftBias, Tape, Tensor, Var};
use crate::{Error, Result};

/// Temporal offset of the data-level schedule for channel `i` at frame `t`.
///
/// Channel 0 looks one frame back, channel 2 one frame ahead; the end frames
/// wrap around so the shift is a circular roll.
pub fn bias_data(i: usize, t: usize, frames: usize) -> Result<f64> {
    if t >= frames {
        return Err(Error::InvalidArgument(format!("frame {t} of {frames}")));
    }
    let last = frames as f64 - 1.0;
    Ok(match i {
        0 if t == 0 => last,
        0 => -1.0,
        1 => 0.0,
        2 if t == frames - 1 => -last,
        2 => 1.0,
        _ => return Err(Error::InvalidArgument(format!("data-level bias is defined on channels 0..3, got {i}"))),
    })
}

/// Temporal offset of the feature-level schedule for channel `i` of
/// `channels`: eighths shifted by -2, -1, +1, +2, the second half unshifted.
pub fn bias_fea(i: usize, channels: usize) -> Result<f64> {
    if channels == 0 || channels % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "feature-level bias needs a channel count divisible by 8, got {channels}"
        )));
    }
    if i >= channels {
        return Err(Error::InvalidArgument(format!("channel {i} of {channels}")));
    }
    let eighth = channels / 8;
    Ok(match i / eighth {
        0 => -2.0,
        1 => -1.0,
        2 => 1.0,
        3 => 2.0,
        _ => 0.0,
    })
}

/// Which fixed temporal bias seeds the shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Data,
    Feature,
    None,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Data => "data",
            Schedule::Feature => "feature",
            Schedule::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(Schedule::Data),
            "feature" => Ok(Schedule::Feature),
            "none" => Ok(Schedule::None),
            _ => Err(Error::InvalidArgument(format!("unknown bias schedule '{s}'"))),
        }
    }
}

/// Per-(channel, frame) bias table for a schedule.
pub fn bias_table(schedule: Schedule, channels: usize, frames: usize) -> Result<ShiftBias> {
    if frames == 0 {
        return Err(Error::InvalidArgument("zero frames".into()));
    }
    let mut dt = Vec::with_capacity(channels * frames);
    for c in 0..channels {
        for t in 0..frames {
            dt.push(match schedule {
                Schedule::Data => {
                    if channels != 3 {
                        return Err(Error::Shape(format!("data-level bias needs 3 channels, got {channels}")));
                    }
                    bias_data(c, t, frames)?
                }
                Schedule::Feature => bias_fea(c, channels)?,
                Schedule::None => 0.0,
            });
        }
    }
    ShiftBias::new(channels, frames, dt)
}

/// Learnable parameters of one block, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct VsfVars {
    /// `[3, C, 3, 3, 3]`
    pub offset_w: Var,
    /// `[3]`
    pub offset_b: Var,
    /// `[C, C]`
    pub gate_w: Var,
    /// `[C]`
    pub gate_b: Var,
}

/// Names and shapes of a block's parameters, in [`VsfVars`] field order.
pub fn param_shapes(channels: usize) -> [(&'static str, Vec<usize>); 4] {
    [
        ("offset_w", vec![3, channels, 3, 3, 3]),
        ("offset_b", vec![3]),
        ("gate_w", vec![channels, channels]),
        ("gate_b", vec![channels]),
    ]
}

/// Offsets predicted for a volume: the learned, channel-shared part plus the
/// channel-specific bias added to `dt`.
#[derive(Clone, Debug)]
pub struct Offsets {
    pub learned: Option<Var>,
    pub bias: Arc<ShiftBias>,
}

/// `O = conv3d(F) + bias`. Without weights the learned term is absent, which
/// is how the data-level schedule is applied.
pub fn predict_offsets(
    tape: &mut Tape,
    f: Var,
    weights: Option<(Var, Var)>,
    schedule: Schedule,
) -> Result<Offsets> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 5 {
        return Err(Error::Shape(format!("predict_offsets: input {fs:?}")));
    }
    let learned = match weights {
        Some((w, b)) => {
            let ws = tape.shape(w);
            if ws != [3, fs[1], 3, 3, 3] {
                return Err(Error::Shape(format!("offset conv weight {ws:?} for {} channels", fs[1])));
            }
            Some(tape.conv3d(f, w, Some(b))?)
        }
        None => None,
    };
    let bias = Arc::new(bias_table(schedule, fs[1], fs[4])?);
    Ok(Offsets { learned, bias })
}

/// Samples `f` at every voxel displaced by its offset.
pub fn vsf_shift(tape: &mut Tape, f: Var, offsets: &Offsets, mask: [bool; 3]) -> Result<Var> {
    tape.shift(f, offsets.learned, offsets.bias.clone(), mask)
}

/// `F' + σ(FC(GAP(F' - F))) ⊗ F`.
pub fn differential_attention_fuse(
    tape: &mut Tape,
    f: Var,
    shifted: Var,
    gate_w: Var,
    gate_b: Var,
) -> Result<Var> {
    if tape.shape(f) != tape.shape(shifted) {
        return Err(Error::Shape(format!(
            "fuse: {:?} vs {:?}",
            tape.shape(f),
            tape.shape(shifted)
        )));
    }
    let diff = tape.sub(shifted, f)?;
    let pooled = tape.global_avg_pool(diff)?;
    let logits = tape.linear(pooled, gate_w, Some(gate_b))?;
    let gate = tape.sigmoid(logits);
    let gated = tape.mul_channel(f, gate)?;
    tape.add(shifted, gated)
}

/// Static configuration of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub frames: usize,
    pub schedule: Schedule,
    /// Enabled shift components `(x, y, t)`.
    pub mask: [bool; 3],
}

impl BlockConfig {
    /// The fixed data-level shift on replicated grayscale input.
    pub fn data(frames: usize) -> Self {
        Self {
            frames,
            schedule: Schedule::Data,
            mask: [false, false, true],
        }
    }

    pub fn feature(frames: usize) -> Self {
        Self {
            frames,
            schedule: Schedule::Feature,
            mask: [true; 3],
        }
    }
}

/// Output of a block with the learned offsets it used (for export).
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub learned_offsets: Option<Var>,
}

/// Reshape to a volume, predict offsets, shift, fuse and reshape back.
/// Without `vars` the block is the parameter-free shift of the schedule.
pub fn vsf_block(tape: &mut Tape, x: Var, cfg: &BlockConfig, vars: Option<&VsfVars>) -> Result<BlockOutput> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || cfg.frames == 0 || xs[0] % cfg.frames != 0 {
        return Err(Error::Shape(format!("vsf_block: input {xs:?} with {} frames", cfg.frames)));
    }
    let vol = tape.to_volume(x, cfg.frames)?;
    let offsets = predict_offsets(tape, vol, vars.map(|v| (v.offset_w, v.offset_b)), cfg.schedule)?;
    let shifted = vsf_shift(tape, vol, &offsets, cfg.mask)?;
    let fused = match vars {
        Some(v) => differential_attention_fuse(tape, vol, shifted, v.gate_w, v.gate_b)?,
        None => shifted,
    };
    Ok(BlockOutput {
        out: tape.from_volume(fused)?,
        learned_offsets: offsets.learned,
    })
}

/// Offsets of one (batch, channel) volume, stored `H × W × T × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl OffsetField {
    pub fn zeros(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            values: vec![0.0; height * width * frames * 3],
        }
    }

    /// Total offset seen by `channel` of `batch`: masked learned components
    /// plus the bias on `dt`. `learned` is `[B, 3, H, W, T]`.
    pub fn resolve(
        learned: Option<&Tensor>,
        bias: &ShiftBias,
        dims: [usize; 3],
        batch: usize,
        channel: usize,
        mask: [bool; 3],
    ) -> Result<Self> {
        let vox = dims[0] * dims[1] * dims[2];
        if let Some(l) = learned {
            if l.rank() != 5 || l.shape()[1..] != [3, dims[0], dims[1], dims[2]] || batch >= l.shape()[0] {
                return Err(Error::Shape(format!("offsets {:?} for volume {dims:?}", l.shape())));
            }
        }
        if channel >= bias.channels() || bias.frames() != dims[2] {
            return Err(Error::Shape(format!("channel {channel} with bias table {}x{}", bias.channels(), bias.frames())));
        }
        let mut field = Self::zeros(dims[0], dims[1], dims[2]);
        for v in 0..vox {
            for (k, &on) in mask.iter().enumerate() {
                if !on {
                    continue;
                }
                let mut d = learned.map_or(0.0, |l| l.data()[(batch * 3 + k) * vox + v]);
                if k == 2 {
                    d += bias.get(channel, v % dims[2]);
                }
                field.values[v * 3 + k] = d;
            }
        }
        Ok(field)
    }

    /// `[H, W, T, 3]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.frames, 3], self.values.clone()).expect("sized at construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, f, 3] => Ok(Self {
                height: h,
                width: w,
                frames: f,
                values: t.to_vec(),
            }),
            _ => Err(Error::Shape(format!("offset field needs [H, W, T, 3], got {:?}", t.shape()))),
        }
    }

    /// One `dx,dy,dt` row per voxel in `(y, x, t)` row-major order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dx,dy,dt")?;
        for v in self.values.chunks(3) {
            writeln!(w, "{},{},{}", v[0], v[1], v[2])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn shift_plain(f: &Tensor, o: Option<&Tensor>, bias: ShiftBias, mask: [bool; 3]) -> Tensor {
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let ov = o.map(|o| tape.leaf(o.clone()));
        let out = tape.shift(fv, ov, Arc::new(bias), mask).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn bias_examples() {
        assert_eq!(bias_data(0, 0, 8).unwrap(), 7.0);
        assert_eq!(bias_data(1, 5, 8).unwrap(), 0.0);
        assert_eq!(bias_data(2, 7, 8).unwrap(), -7.0);
        assert_eq!(bias_fea(0, 64).unwrap(), -2.0);
        assert_eq!(bias_fea(20, 64).unwrap(), 1.0);
        assert_eq!(bias_fea(40, 64).unwrap(), 0.0);
        assert!(bias_data(3, 0, 8).is_err());
        assert!(bias_fea(0, 12).is_err());
        assert!(bias_table(Schedule::Data, 4, 8).is_err());
    }

    #[test]
    fn data_bias_is_a_roll() {
        // t + bias lands on (t + i - 1) mod T
        for frames in 1..10 {
            for i in 0..3 {
                for t in 0..frames {
                    let target = (t as i64 + i as i64 - 1).rem_euclid(frames as i64);
                    if frames > 1 {
                        assert_eq!(t as f64 + bias_data(i, t, frames).unwrap(), target as f64, "T={frames} i={i} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_offsets_preserve_input() {
        let f = random(&[1, 2, 4, 4, 3], 1);
        let o = Tensor::zeros(&[1, 3, 4, 4, 3]);
        let out = shift_plain(&f, Some(&o), ShiftBias::zeros(2, 3), [true; 3]);
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn integer_offsets_gather() {
        let f = random(&[1, 1, 4, 5, 3], 2);
        let mut o = Tensor::zeros(&[1, 3, 4, 5, 3]).to_vec();
        let vox = 60;
        for v in 0..vox {
            o[v] = 1.0; // dx
            o[vox + v] = -1.0; // dy
            o[2 * vox + v] = if v % 3 == 0 { 2.0 } else { 0.0 };
        }
        let o = Tensor::new(&[1, 3, 4, 5, 3], o).unwrap();
        let out = shift_plain(&f, Some(&o), ShiftBias::zeros(1, 3), [true; 3]);
        for y in 0..4 {
            for x in 0..5 {
                for t in 0..3 {
                    let (sy, sx, st) = (y as i64 - 1, x as i64 + 1, t as i64 + if t == 0 { 2 } else { 0 });
                    let want = if sy >= 0 && sx < 5 { f.at(&[0, 0, sy as usize, sx as usize, st as usize]) } else { 0.0 };
                    assert_eq!(out.at(&[0, 0, y, x, t]), want);
                }
            }
        }
    }

    #[test]
    fn half_voxel_probe_and_outside() {
        // values 0 and 1 at adjacent x positions
        let f = Tensor::new(&[1, 1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        let mut o = vec![0.0; 6];
        o[0] = 0.5;
        o[1] = 5.0;
        let o = Tensor::new(&[1, 3, 1, 2, 1], o).unwrap();
        let out = shift_plain(&f, Some(&o), ShiftBias::zeros(1, 1), [true; 3]);
        assert_eq!(out.data(), &[0.5, 0.0]);
    }

    #[test]
    fn zero_conv_feature_schedule_offsets() {
        let mut tape = Tape::new();
        let f = tape.leaf(random(&[2, 16, 3, 3, 4], 3));
        let w = tape.leaf(Tensor::zeros(&[3, 16, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let o = predict_offsets(&mut tape, f, Some((w, b)), Schedule::Feature).unwrap();
        let learned = tape.value(o.learned.unwrap()).clone();
        assert!(learned.data().iter().all(|&v| v == 0.0));
        for c in 0..16 {
            let field = OffsetField::resolve(Some(&learned), &o.bias, [3, 3, 4], 1, c, [true; 3]).unwrap();
            for v in field.values.chunks(3) {
                assert_eq!(v, &[0.0, 0.0, bias_fea(c, 16).unwrap()]);
            }
        }
    }

    #[test]
    fn nonzero_weights_zero_bias_is_conv() {
        let x = random(&[1, 2, 3, 3, 2], 4);
        let wt = random(&[3, 2, 3, 3, 3], 5);
        let bt = Tensor::zeros(&[3]);
        let mut tape = Tape::new();
        let f = tape.leaf(x);
        let w = tape.leaf(wt);
        let b = tape.leaf(bt);
        let o = predict_offsets(&mut tape, f, Some((w, b)), Schedule::None).unwrap();
        let direct = tape.conv3d(f, w, None).unwrap();
        assert_eq!(tape.value(o.learned.unwrap()).data(), tape.value(direct).data());
        assert!(predict_offsets(&mut tape, f, None, Schedule::Data).is_err());
    }

    fn fuse_value(f: &Tensor, fs: &Tensor, gate_bias: f64) -> Tensor {
        let c = f.shape()[1];
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let sv = tape.leaf(fs.clone());
        let w = tape.leaf(Tensor::zeros(&[c, c]));
        let b = tape.leaf(Tensor::full(&[c], gate_bias));
        let out = differential_attention_fuse(&mut tape, fv, sv, w, b).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn fuse_hand_cases() {
        let f = random(&[1, 2, 2, 2, 3], 6);
        let out = fuse_value(&f, &f, 0.0);
        for (a, b) in out.data().iter().zip(f.data()) {
            assert_eq!(*a, 1.5 * b);
        }
        let fs = random(&[1, 2, 2, 2, 3], 7);
        let zero = Tensor::zeros(&[1, 2, 2, 2, 3]);
        assert_eq!(fuse_value(&zero, &fs, 0.3).data(), fs.data());
        assert!(fuse_value(&f, &fs, -60.0).max_abs_diff(&fs) < 1e-20);
    }

    fn block_vars(tape: &mut Tape, c: usize, gate_bias: f64) -> VsfVars {
        VsfVars {
            offset_w: tape.leaf(Tensor::zeros(&[3, c, 3, 3, 3])),
            offset_b: tape.leaf(Tensor::zeros(&[3])),
            gate_w: tape.leaf(Tensor::zeros(&[c, c])),
            gate_b: tape.leaf(Tensor::full(&[c], gate_bias)),
        }
    }

    #[test]
    fn block_identity_configuration() {
        let x = random(&[6, 8, 4, 4], 8);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = block_vars(&mut tape, 8, -800.0);
        let cfg = BlockConfig {
            frames: 3,
            schedule: Schedule::None,
            mask: [true; 3],
        };
        let out = vsf_block(&mut tape, xv, &cfg, Some(&vars)).unwrap();
        assert_eq!(tape.shape(out.out), x.shape());
        assert_eq!(tape.value(out.out).data(), x.data());
        assert!(vsf_block(&mut tape, xv, &BlockConfig::feature(4), Some(&vars)).is_err());
    }

    #[test]
    fn data_schedule_rolls_channels() {
        for frames in [2, 3, 8] {
            let x = random(&[2 * frames, 3, 5, 4], frames as u64);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = vsf_block(&mut tape, xv, &BlockConfig::data(frames), None).unwrap();
            let got = tape.value(out.out);
            for b in 0..2 {
                for t in 0..frames {
                    for c in 0..3 {
                        let src = (t + frames + c - 1) % frames;
                        for y in 0..5 {
                            for xx in 0..4 {
                                assert_eq!(
                                    got.at(&[b * frames + t, c, y, xx]).to_bits(),
                                    x.at(&[b * frames + src, c, y, xx]).to_bits()
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn feature_bias_does_not_wrap() {
        // channel 0 of 8 looks two frames back; the first two frames read zero padding
        let x = Tensor::full(&[4, 8, 1, 1], 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let cfg = BlockConfig {
            frames: 4,
            schedule: Schedule::Feature,
            mask: [false, false, true],
        };
        let out = vsf_block(&mut tape, xv, &cfg, None).unwrap();
        let got = tape.value(out.out);
        let col: Vec<f64> = (0..4).map(|t| got.at(&[t, 0, 0, 0])).collect();
        assert_eq!(col, vec![0.0, 0.0, 1.0, 1.0]);
        let col: Vec<f64> = (0..4).map(|t| got.at(&[t, 3, 0, 0])).collect();
        assert_eq!(col, vec![1.0, 1.0, 0.0, 0.0]);
    }

    fn fractional_offsets(seed: u64) -> Tensor {
        // keep samples away from integer coordinates so no probe crosses a cell
        random(&[1, 3, 4, 4, 3], seed).map(|v| 0.6 * v + if v >= 0.0 { 0.2 } else { -0.2 })
    }

    #[test]
    fn shift_gradients() {
        let f = random(&[1, 2, 4, 4, 3], 9);
        let o = fractional_offsets(10);
        let r = check_gradients(&[f, o], &GradCheckConfig::default(), |t, v| {
            let s = t.shift(v[0], Some(v[1]), Arc::new(ShiftBias::zeros(2, 3)), [true; 3])?;
            let w: Vec<f64> = (0..t.value(s).numel()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            t.dot_const(s, &w)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn fuse_gradients() {
        let inputs = [
            random(&[1, 2, 4, 4, 3], 11),
            random(&[1, 2, 4, 4, 3], 12),
            random(&[2, 2], 13),
            random(&[2], 14),
        ];
        let r = check_gradients(&inputs, &GradCheckConfig::default(), |t, v| {
            let out = differential_attention_fuse(t, v[0], v[1], v[2], v[3])?;
            let w: Vec<f64> = (0..t.value(out).numel()).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
            t.dot_const(out, &w)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn block_gradients() {
        let inputs = [
            random(&[3, 8, 4, 4], 15),
            random(&[3, 8, 3, 3, 3], 16).map(|v| 0.1 * v),
            Tensor::new(&[3], vec![0.23, -0.31, 0.17]).unwrap(),
            random(&[8, 8], 17),
            random(&[8], 18),
        ];
        let cfg = BlockConfig::feature(3);
        let r = check_gradients(&inputs, &GradCheckConfig::default(), |t, v| {
            let vars = VsfVars {
                offset_w: v[1],
                offset_b: v[2],
                gate_w: v[3],
                gate_b: v[4],
            };
            let out = vsf_block(t, v[0], &cfg, Some(&vars))?;
            Ok(t.sum(out.out))
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.skipped * 100 <= r.checked);
    }

    #[test]
    fn offset_field_csv() {
        let z = OffsetField::zeros(2, 2, 2);
        let mut buf = Vec::new();
        z.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| *r == "0,0,0"));
        assert_eq!(OffsetField::from_tensor(&z.to_tensor()).unwrap(), z);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shift_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let f1 = random(&[1, 2, 3, 4, 3], seed);
            let f2 = random(&[1, 2, 3, 4, 3], seed + 1);
            let o = random(&[1, 3, 3, 4, 3], seed + 2).map(|v| 2.0 * v);
            let bias = || ShiftBias::new(2, 3, vec![0.5, -1.0, 0.25, 0.0, 1.5, -0.75]).unwrap();
            let mix = Tensor::new(f1.shape(), f1.data().iter().zip(f2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = shift_plain(&mix, Some(&o), bias(), [true; 3]);
            let s1 = shift_plain(&f1, Some(&o), bias(), [true; 3]);
            let s2 = shift_plain(&f2, Some(&o), bias(), [true; 3]);
            for ((l, x), y) in lhs.data().iter().zip(s1.data()).zip(s2.data()) {
                prop_assert!((l - (a * x + b * y)).abs() <= 1e-10);
            }
        }

        #[test]
        fn integer_shift_matches_gather(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [3usize, 4, 3];
            let f = random(&[1, 1, 3, 4, 3], seed);
            let vox = 36;
            let mut o = vec![0.0; 3 * vox];
            let mut src = vec![0usize; vox];
            for v in 0..vox {
                let (y, x, t) = (v / 12, (v / 3) % 4, v % 3);
                let (ty, tx, tt) = (rng.random_range(0..dims[0]), rng.random_range(0..dims[1]), rng.random_range(0..dims[2]));
                o[v] = tx as f64 - x as f64;
                o[vox + v] = ty as f64 - y as f64;
                o[2 * vox + v] = tt as f64 - t as f64;
                src[v] = (ty * 4 + tx) * 3 + tt;
            }
            let o = Tensor::new(&[1, 3, 3, 4, 3], o).unwrap();
            let out = shift_plain(&f, Some(&o), ShiftBias::zeros(1, 3), [true; 3]);
            for v in 0..vox {
                prop_assert_eq!(out.data()[v], f.data()[src[v]]);
            }
        }
    }
}
