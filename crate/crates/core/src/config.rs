//! Plain `key = value` run configuration with dotted section keys.
//!
//! Every tunable of the generator, scene, model, training and evaluation is
//! addressable as `section.field`. Unknown keys are errors; the resolved
//! configuration renders back to text that parses to the same values.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::detector::{ModelConfig, TrainConfig, Variant};
use crate::dispersion::StabilityClass;
use crate::eval::EvalConfig;
use crate::radiometry::{GeneratorConfig, SceneConfig};
use crate::vsf::Schedule;
use crate::{Error, Result};

/// Value types that can appear on the right of `=`.
trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

impl Value for f64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = parse_num(s)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("not finite".into())
        }
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl Value for usize {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        parse_num(s)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        split_list(s).map(T::parse).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

impl<T: Value + Copy, const N: usize> Value for [T; N] {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<T> = Value::parse(s)?;
        v.try_into().map_err(|v: Vec<T>| format!("expected {N} values, got {}", v.len()))
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

impl Value for StabilityClass {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        StabilityClass::from_letter(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.letter().to_string()
    }
}

impl Value for Variant {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Variant::from_name(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for Schedule {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Schedule::from_name(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

/// Shift directions written as a subset of `xyt`.
#[derive(Clone, Copy)]
struct Mask([bool; 3]);

impl Value for Mask {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut m = [false; 3];
        for c in s.chars() {
            let i = "xyt".find(c).ok_or_else(|| format!("shift directions take x, y, t; got '{c}'"))?;
            m[i] = true;
        }
        Ok(Mask(m))
    }
    fn render(&self) -> String {
        "xyt".chars().zip(self.0).filter(|p| p.1).map(|p| p.0).collect()
    }
}

/// A group of fields addressed as `<prefix>.<field>`.
pub trait Section {
    /// Sets `key`; `Ok(false)` if the key does not belong to this section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

fn bad_value(key: &str, value: &str, why: String) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

macro_rules! section {
    ($ty:ty { $($key:literal => $($field:ident).+ $(as $wrap:ident)?),* $(,)? }) => {
        impl Section for $ty {
            fn set(&mut self, key: &str, value: &str) -> Result<bool> {
                match key {
                    $($key => {
                        section!(@set self, key, value, $($field).+ $(, $wrap)?);
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, section!(@get self, $($field).+ $(, $wrap)?))),*]
            }
        }
    };
    (@set $s:ident, $k:ident, $v:ident, $($field:ident).+) => {
        $s.$($field).+ = Value::parse($v).map_err(|e| bad_value($k, $v, e))?
    };
    (@set $s:ident, $k:ident, $v:ident, $($field:ident).+, $wrap:ident) => {
        $s.$($field).+ = <$wrap as Value>::parse($v).map_err(|e| bad_value($k, $v, e))?.0
    };
    (@get $s:ident, $($field:ident).+) => {
        Value::render(&$s.$($field).+)
    };
    (@get $s:ident, $($field:ident).+, $wrap:ident) => {
        $wrap($s.$($field).+).render()
    };
}

section!(SceneConfig {
    "t_background" => t_background,
    "t_gas" => t_gas,
    "eps_background" => eps_background,
    "tau_atm" => tau_atm,
    "eps_atm" => eps_atm,
    "t_atm" => t_atm,
    "gray_per_kelvin" => gray_per_kelvin,
    "background_level" => background_level,
    "noise_sigma" => noise_sigma,
    "jitter" => jitter,
    "frame_rate" => frame_rate,
    "path_depth" => path_depth,
    "vis_threshold" => vis_threshold,
});

section!(GeneratorConfig {
    "width" => width,
    "height" => height,
    "frames" => frames,
    "size_weights" => size_weights,
    "dynamic_fraction" => dynamic_fraction,
    "wind_min" => wind_min,
    "wind_max" => wind_max,
    "wind_meander" => wind_meander,
    "stability" => stability,
    "virtual_distance" => virtual_distance,
    "max_source_height" => max_source_height,
    "emission_interval" => emission_interval,
    "release_fluctuation" => release_fluctuation,
    "warmup_min" => warmup_min,
    "warmup_max" => warmup_max,
    "strength_min" => strength_min,
    "strength_max" => strength_max,
    "contrast_min" => contrast_min,
    "contrast_max" => contrast_max,
    "texture" => texture,
    "max_blobs" => max_blobs,
    "blob_depth" => blob_depth,
    "horizon" => horizon,
    "clear_threshold" => clear_threshold,
});

section!(ModelConfig {
    "variant" => variant,
    "frames" => frames,
    "input_size" => input_size,
    "downsample" => downsample,
    "input_mean" => input_mean,
    "input_scale" => input_scale,
    "channels" => channels,
    "vsf_stages" => vsf_stages,
    "shift_directions" => shift_mask as Mask,
    "feature_bias" => feature_schedule,
    "rpn_reduce" => rpn_reduce,
    "rpn_hidden" => rpn_hidden,
    "anchor_sizes" => anchor_sizes,
    "anchor_ratios" => anchor_ratios,
    "pos_iou" => pos_iou,
    "neg_iou" => neg_iou,
    "lambda" => lambda,
    "proposals" => proposals,
    "proposal_nms" => proposal_nms,
    "roi_bins" => roi_bins,
    "head_hidden" => head_hidden,
    "head_fg_iou" => head_fg_iou,
    "det_nms" => det_nms,
    "max_detections" => max_detections,
});

section!(TrainConfig {
    "lr" => lr,
    "momentum" => momentum,
    "epochs" => epochs,
    "decay_epoch" => decay_epoch,
    "decay_factor" => decay_factor,
    "batch_size" => batch_size,
    "weight_decay" => weight_decay,
    "grad_clip" => grad_clip,
});

section!(EvalConfig {
    "density_bins" => density_bins,
    "tide_fg" => tide_fg,
    "tide_bg" => tide_bg,
});

/// Split sizes of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train: 200, test: 50 }
    }
}

section!(DatasetConfig {
    "train" => train,
    "test" => test,
});

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies `key = value` lines to a single section (keys without prefix).
pub fn apply_section<S: Section>(s: &mut S, text: &str) -> Result<()> {
    for (k, v) in parse_pairs(text)? {
        if !s.set(&k, &v)? {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
    }
    Ok(())
}

/// Renders a single section without prefix.
pub fn render_section<S: Section>(s: &S) -> String {
    s.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

impl RunConfig {
    fn sections(&self) -> [(&'static str, &dyn Section); 6] {
        [
            ("dataset", &self.dataset),
            ("generator", &self.generator),
            ("scene", &self.generator.scene),
            ("model", &self.model),
            ("train", &self.train),
            ("eval", &self.eval),
        ]
    }

    fn section_mut(&mut self, name: &str) -> Option<&mut dyn Section> {
        Some(match name {
            "dataset" => &mut self.dataset,
            "generator" => &mut self.generator,
            "scene" => &mut self.generator.scene,
            "model" => &mut self.model,
            "train" => &mut self.train,
            "eval" => &mut self.eval,
            _ => return None,
        })
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (prefix, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key '{key}' (expected section.field)")))?;
        if let Some(s) = self.section_mut(prefix) {
            if s.set(field, value)? {
                return Ok(());
            }
        }
        Err(Error::Config(format!("unknown key '{key}'")))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Fully resolved configuration, one `section.field = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, s) in self.sections() {
            for (k, v) in s.entries() {
                out.push_str(&format!("{name}.{k} = {v}\n"));
            }
        }
        out
    }
}
