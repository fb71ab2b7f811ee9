//! Toy spatio-temporal detector: a four-stage convolutional backbone with
//! optional voxel-shift blocks, a multi-frame proposal stage regressing the
//! clip's mean box, and one refinement head per frame.

pub mod boxes;
mod forward;
mod params;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng;
use crate::tensor::Tensor;
use crate::vsf::{self, Schedule};
use crate::{Error, Result};

pub use boxes::{assign_rpn_targets, grid_anchors, mean_box, nms, AnchorLabel, BoxCoder, RpnTargets, Scored};
pub use forward::{forward_loss, offset_fields, prepare_windows, BatchInput, LossParts, Window};
pub use params::{load_model, save_model};
pub use train::{
    infer_clip, read_detections_csv, train, write_detections_csv, write_loss_csv, Detection, StepLoss, TrainConfig,
    TrainReport,
};

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Frames processed independently (windows of one frame).
    FrameBaseline,
    /// Per-frame features concatenated before the proposal stage.
    ConcatBaseline,
    /// Concat baseline plus the fixed temporal shift on the input.
    VsfData,
    /// Data-level shift plus learned shift blocks in the backbone.
    VsfFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FrameBaseline, Variant::ConcatBaseline, Variant::VsfData, Variant::VsfFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FrameBaseline => "frame_baseline",
            Variant::ConcatBaseline => "concat_baseline",
            Variant::VsfData => "vsf_data",
            Variant::VsfFull => "vsf_full",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant '{s}'")))
    }

    pub fn data_shift(self) -> bool {
        matches!(self, Variant::VsfData | Variant::VsfFull)
    }

    pub fn feature_shift(self) -> bool {
        self == Variant::VsfFull
    }
}

/// Architecture and detection hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Frames per window (the temporal extent seen by the network).
    pub frames: usize,
    /// Side of the square network input, pixels.
    pub input_size: usize,
    /// Native-to-input downsampling factor.
    pub downsample: usize,
    /// Gray level mapped to zero and the divisor applied after.
    pub input_mean: f64,
    pub input_scale: f64,
    pub channels: [usize; 4],
    /// Stages (1-based) that carry a learned shift block.
    pub vsf_stages: Vec<usize>,
    /// Enabled shift components `(x, y, t)` of the learned blocks.
    pub shift_mask: [bool; 3],
    /// Fixed temporal bias of the learned blocks.
    pub feature_schedule: Schedule,
    pub rpn_reduce: usize,
    pub rpn_hidden: usize,
    pub anchor_sizes: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub lambda: f64,
    pub proposals: usize,
    pub proposal_nms: f64,
    pub roi_bins: usize,
    pub head_hidden: usize,
    pub head_fg_iou: f64,
    pub det_nms: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::VsfFull,
            frames: 8,
            input_size: 64,
            downsample: 2,
            input_mean: 128.0,
            input_scale: 8.0,
            channels: [16, 32, 64, 64],
            vsf_stages: vec![1, 2, 3, 4],
            shift_mask: [true; 3],
            feature_schedule: Schedule::Feature,
            rpn_reduce: 8,
            rpn_hidden: 64,
            anchor_sizes: vec![12.0, 24.0, 48.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pos_iou: 0.5,
            neg_iou: 0.3,
            lambda: 1.0,
            proposals: 64,
            proposal_nms: 0.7,
            roi_bins: 4,
            head_hidden: 64,
            head_fg_iou: 0.5,
            det_nms: 0.5,
            max_detections: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model: {m}")));
        if ![1, 2, 4, 8, 16].contains(&self.frames) {
            return bad(format!("frames must be one of 1, 2, 4, 8, 16, got {}", self.frames));
        }
        if self.input_size < 8 || self.downsample == 0 {
            return bad("input size must be at least 8 and downsampling positive".into());
        }
        if self.channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return bad(format!("stage channels must be even, got {:?}", self.channels));
        }
        if self.variant.feature_shift() {
            if let Some(&s) = self.vsf_stages.iter().find(|&&s| !(1..=4).contains(&s)) {
                return bad(format!("stage {s} out of 1..4"));
            }
            if self.feature_schedule == Schedule::Data {
                return bad("learned blocks take the feature or none schedule".into());
            }
            for &s in &self.vsf_stages {
                let reduced = self.channels[s - 1] / 2;
                if self.feature_schedule == Schedule::Feature && reduced % 8 != 0 {
                    return bad(format!("stage {s} reduces to {reduced} channels, not divisible by 8"));
                }
            }
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() {
            return bad("no anchors".into());
        }
        if self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchor sizes and ratios must be positive".into());
        }
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return bad(format!("anchor thresholds neg {} pos {}", self.neg_iou, self.pos_iou));
        }
        for (name, v) in [("proposal_nms", self.proposal_nms), ("det_nms", self.det_nms), ("head_fg_iou", self.head_fg_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if self.rpn_reduce == 0 || self.rpn_hidden == 0 || self.head_hidden == 0 || self.roi_bins == 0 {
            return bad("zero-width layer".into());
        }
        if self.proposals == 0 || self.max_detections == 0 {
            return bad("proposal and detection budgets must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.input_scale > 0.0) {
            return bad("negative lambda or non-positive input scale".into());
        }
        Ok(())
    }

    /// Frames per network window: one for the frame baseline.
    pub fn window(&self) -> usize {
        if self.variant == Variant::FrameBaseline {
            1
        } else {
            self.frames
        }
    }

    /// Spatial side after `stage` stride-2 stages.
    pub fn feature_size(&self, stage: usize) -> usize {
        (0..stage).fold(self.input_size, |s, _| s.div_ceil(2))
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    fn has_block(&self, stage: usize) -> bool {
        self.variant.feature_shift() && self.vsf_stages.contains(&stage)
    }

    /// Names, shapes and initial standard deviations of all parameters, in
    /// storage order. A zero deviation means zero initialization.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, f64)> {
        let mut specs = Vec::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            let s = i + 1;
            let r = c / 2;
            specs.push((format!("s{s}.conv.w"), vec![c, cin, 3, 3], he(cin * 9)));
            specs.push((format!("s{s}.conv.b"), vec![c], 0.0));
            specs.push((format!("s{s}.reduce.w"), vec![r, c, 1, 1], he(c)));
            specs.push((format!("s{s}.reduce.b"), vec![r], 0.0));
            if self.has_block(s) {
                for (name, shape) in vsf::param_shapes(r) {
                    specs.push((format!("s{s}.vsf.{name}"), shape, 0.0));
                }
            }
            specs.push((format!("s{s}.expand.w"), vec![c, r, 1, 1], he(r)));
            specs.push((format!("s{s}.expand.b"), vec![c], 0.0));
            cin = c;
        }
        let a = self.anchors_per_cell();
        let t = self.window();
        let c4 = self.channels[3];
        specs.push(("rpn.reduce.w".into(), vec![self.rpn_reduce, c4, 1, 1], he(c4)));
        specs.push(("rpn.reduce.b".into(), vec![self.rpn_reduce], 0.0));
        let cat = self.rpn_reduce * t;
        specs.push(("rpn.conv.w".into(), vec![self.rpn_hidden, cat, 3, 3], he(cat * 9)));
        specs.push(("rpn.conv.b".into(), vec![self.rpn_hidden], 0.0));
        specs.push(("rpn.cls.w".into(), vec![a, self.rpn_hidden, 1, 1], 0.01));
        specs.push(("rpn.cls.b".into(), vec![a], 0.0));
        specs.push(("rpn.reg.w".into(), vec![4 * a, self.rpn_hidden, 1, 1], 0.01));
        specs.push(("rpn.reg.b".into(), vec![4 * a], 0.0));
        let roi = self.channels[2] * self.roi_bins * self.roi_bins;
        for h in 0..t {
            specs.push((format!("head{h}.fc.w"), vec![self.head_hidden, roi], he(roi)));
            specs.push((format!("head{h}.fc.b"), vec![self.head_hidden], 0.0));
            specs.push((format!("head{h}.cls.w"), vec![1, self.head_hidden], 0.01));
            specs.push((format!("head{h}.cls.b"), vec![1], 0.0));
            specs.push((format!("head{h}.reg.w"), vec![4, self.head_hidden], 0.01));
            specs.push((format!("head{h}.reg.b"), vec![4], 0.0));
        }
        specs
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (n, t) in entries {
            if names.contains(&n) {
                return Err(Error::InvalidArgument(format!("duplicate parameter '{n}'")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::Shape(format!("{name}: {:?} vs {:?}", self.tensors[i].shape(), t.shape())));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Checks that the parameters match the configuration's layout.
    pub fn check(&self) -> Result<()> {
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "model expects {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for ((name, shape, _), (n, t)) in specs.iter().zip(self.params.names.iter().zip(&self.params.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!("parameter {n} {:?}, expected {name} {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Initializes a model: He-normal convolutions, small-normal output layers,
/// zero biases and zero shift-block weights.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init");
    let entries = cfg
        .param_specs()
        .into_iter()
        .map(|(name, shape, std)| {
            let t = normal_tensor(&shape, std, &mut rng);
            (name, t)
        })
        .collect();
    Ok(Model { config: cfg.clone(), params: Params::new(entries)? })
}

fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("positive deviation");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
