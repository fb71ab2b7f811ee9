//! Synthetic annotated clips and their on-disk layout.
//!
//! A clip is rendered at native resolution. The pixel scale (metres per pixel)
//! is chosen per clip so the mean ground-truth box lands in a sampled size
//! class: the plume is first annotated on a coarse metric grid, the scale is
//! derived from the metric box area, and the full render is retried with a
//! corrected scale if the measured class misses.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{Background, Jitter, Renderer};
use super::spectrum::GasSpectrum;
use super::SceneConfig;
use crate::bbox::BBox;
use crate::dispersion::{
    superpose_field, Grid, PuffParams, ReleaseSchedule, Spread, StabilityClass, SuperposeOptions, WindSample,
};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::indexed_stream;

/// COCO size bucket of a box area in native pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const SMALL_MAX: f64 = 32.0 * 32.0;
    pub const LARGE_MIN: f64 = 96.0 * 96.0;

    pub fn of_area(a: f64) -> Self {
        if a < Self::SMALL_MAX {
            Self::Small
        } else if a > Self::LARGE_MIN {
            Self::Large
        } else {
            Self::Medium
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "small" => Some(Self::Small),
            "medium" => Some(Self::Medium),
            "large" => Some(Self::Large),
            _ => None,
        }
    }

    /// Target area range used when sampling a clip of this class.
    fn target_range(self) -> (f64, f64) {
        match self {
            Self::Small => (150.0, 900.0),
            Self::Medium => (1300.0, 8000.0),
            Self::Large => (9800.0, 14000.0),
        }
    }
}

/// Knobs of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub scene: SceneConfig,
    /// Relative weights of the small / medium / large size classes.
    pub size_weights: [f64; 3],
    /// Fraction of clips with a moving camera.
    pub dynamic_fraction: f64,
    pub wind_min: f64,
    pub wind_max: f64,
    /// Wind-direction random walk, rad per square-root second, stepped at
    /// every emission.
    pub wind_meander: f64,
    pub stability: Vec<StabilityClass>,
    /// Virtual source distance added to each puff's travel, m.
    pub virtual_distance: f64,
    pub max_source_height: f64,
    pub emission_interval: f64,
    /// Standard deviation of the log release strength of each puff; the
    /// multiplier has mean one.
    pub release_fluctuation: f64,
    pub warmup_min: f64,
    pub warmup_max: f64,
    /// Peak CL of a fresh puff as a multiple of the visibility CL.
    pub strength_min: f64,
    pub strength_max: f64,
    /// Range of `T_b − T_gas`, K.
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Amplitude of the smooth background temperature texture, K.
    pub texture: f64,
    /// Up to this many static cold patches shaped like gas.
    pub max_blobs: usize,
    /// Cooling at a patch centre, K.
    pub blob_depth: f64,
    pub horizon: f64,
    /// Mean in-box absorptance at or above which a clip counts as clear.
    pub clear_threshold: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 8,
            scene: SceneConfig::default(),
            size_weights: [0.35, 0.4, 0.25],
            dynamic_fraction: 0.3,
            wind_min: 1.0,
            wind_max: 3.0,
            wind_meander: 0.4,
            stability: vec![StabilityClass::B, StabilityClass::C, StabilityClass::D],
            virtual_distance: 8.0,
            max_source_height: 2.0,
            emission_interval: 0.25,
            release_fluctuation: 0.8,
            warmup_min: 6.0,
            warmup_max: 20.0,
            strength_min: 4.0,
            strength_max: 20.0,
            contrast_min: 4.0,
            contrast_max: 10.0,
            texture: 0.8,
            max_blobs: 2,
            blob_depth: 2.0,
            horizon: 120.0,
            clear_threshold: 0.3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(format!("generator: {m}")));
        if self.width < 8 || self.height < 8 || self.frames == 0 {
            return bad("frame size must be ≥ 8 and frames ≥ 1");
        }
        if self.size_weights.iter().any(|&w| !(w >= 0.0)) || self.size_weights.iter().sum::<f64>() <= 0.0 {
            return bad("size weights must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.dynamic_fraction) {
            return bad("dynamic fraction outside [0, 1]");
        }
        if !(self.wind_min > 0.0 && self.wind_min <= self.wind_max) {
            return bad("wind range");
        }
        if self.stability.is_empty() {
            return bad("no stability classes");
        }
        if !(self.wind_meander >= 0.0 && self.release_fluctuation >= 0.0) {
            return bad("negative wind meander or release fluctuation");
        }
        if !(self.emission_interval > 0.0 && self.warmup_min >= 0.0 && self.warmup_min <= self.warmup_max) {
            return bad("emission interval or warm-up range");
        }
        if !(self.strength_min > 0.0 && self.strength_min <= self.strength_max) {
            return bad("strength range");
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= self.contrast_max) {
            return bad("temperature contrast range");
        }
        if !(self.virtual_distance >= 0.0 && self.texture >= 0.0 && self.blob_depth >= 0.0 && self.horizon > 0.0) {
            return bad("negative texture, blob depth, virtual distance or horizon");
        }
        Ok(())
    }
}

/// Everything needed to describe (and regenerate) one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub seed: u64,
    pub index: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target_class: SizeClass,
    pub size_class: SizeClass,
    pub dynamic_camera: bool,
    pub clear: bool,
    pub contrast: f64,
    pub pixel_scale: f64,
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub stability: StabilityClass,
    pub source_height: f64,
    pub q0: f64,
    pub warmup: f64,
    pub t_background: f64,
    pub t_gas: f64,
    pub frame_rate: f64,
    pub noise_sigma: f64,
    pub attempts: u32,
}

impl ClipMeta {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("index", self.index.to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("frames", self.frames.to_string());
        kv("target_class", self.target_class.name().into());
        kv("size_class", self.size_class.name().into());
        kv("dynamic_camera", self.dynamic_camera.to_string());
        kv("clear", self.clear.to_string());
        kv("contrast", self.contrast.to_string());
        kv("pixel_scale", self.pixel_scale.to_string());
        kv("wind_speed", self.wind_speed.to_string());
        kv("wind_direction", self.wind_direction.to_string());
        kv("stability", self.stability.letter().to_string());
        kv("source_height", self.source_height.to_string());
        kv("q0", self.q0.to_string());
        kv("warmup", self.warmup.to_string());
        kv("t_background", self.t_background.to_string());
        kv("t_gas", self.t_gas.to_string());
        kv("frame_rate", self.frame_rate.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("attempts", self.attempts.to_string());
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("meta.txt", d);
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing key {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::format("meta.txt", format!("bad value for {k}: {v}")))
        }
        let class = |k: &str| -> Result<SizeClass> {
            let v = get(k)?;
            SizeClass::parse(&v).ok_or_else(|| bad(format!("bad size class {v}")))
        };
        Ok(Self {
            seed: num("seed", get("seed")?)?,
            index: num("index", get("index")?)?,
            width: num("width", get("width")?)?,
            height: num("height", get("height")?)?,
            frames: num("frames", get("frames")?)?,
            target_class: class("target_class")?,
            size_class: class("size_class")?,
            dynamic_camera: num("dynamic_camera", get("dynamic_camera")?)?,
            clear: num("clear", get("clear")?)?,
            contrast: num("contrast", get("contrast")?)?,
            pixel_scale: num("pixel_scale", get("pixel_scale")?)?,
            wind_speed: num("wind_speed", get("wind_speed")?)?,
            wind_direction: num("wind_direction", get("wind_direction")?)?,
            stability: StabilityClass::from_letter(&get("stability")?)?,
            source_height: num("source_height", get("source_height")?)?,
            q0: num("q0", get("q0")?)?,
            warmup: num("warmup", get("warmup")?)?,
            t_background: num("t_background", get("t_background")?)?,
            t_gas: num("t_gas", get("t_gas")?)?,
            frame_rate: num("frame_rate", get("frame_rate")?)?,
            noise_sigma: num("noise_sigma", get("noise_sigma")?)?,
            attempts: num("attempts", get("attempts")?)?,
        })
    }
}

/// Rendered frames with per-frame ground truth in native pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub frames: Vec<GrayImage>,
    pub boxes: Vec<Option<BBox>>,
    pub meta: ClipMeta,
}

/// Physical draw of one clip, independent of the pixel scale.
struct Draw {
    target_class: SizeClass,
    target_area: f64,
    dynamic: bool,
    scene: SceneConfig,
    schedule: ReleaseSchedule,
    times: Vec<f64>,
    stability: StabilityClass,
    q0: f64,
    warmup: f64,
    wind_speed: f64,
    wind_direction: f64,
    placement: (f64, f64),
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn draw<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R, vis_cl: f64) -> Draw {
    let class_idx = pick_weighted(rng, &cfg.size_weights);
    let target_class = [SizeClass::Small, SizeClass::Medium, SizeClass::Large][class_idx];
    let (a0, a1) = target_class.target_range();
    let target_area = (a0.ln() + rng.random_range(0.0..1.0) * (a1.ln() - a0.ln())).exp();
    let dynamic = rng.random_range(0.0..1.0) < cfg.dynamic_fraction;
    let wind_speed = rng.random_range(cfg.wind_min..=cfg.wind_max);
    let wind_direction = rng.random_range(-PI..PI);
    let stability = cfg.stability[rng.random_range(0..cfg.stability.len())];
    let h = rng.random_range(0.0..=cfg.max_source_height);
    let warmup = rng.random_range(cfg.warmup_min..=cfg.warmup_max);
    let strength = rng.random_range(cfg.strength_min..=cfg.strength_max);
    let dt = rng.random_range(cfg.contrast_min..=cfg.contrast_max);
    let scene = SceneConfig { t_gas: cfg.scene.t_background - dt, ..cfg.scene.clone() };

    let t_end = warmup + (cfg.frames - 1) as f64 / scene.frame_rate;
    let n_emit = (t_end / cfg.emission_interval).floor() as usize + 1;
    let emissions: Vec<f64> = (0..n_emit).map(|k| k as f64 * cfg.emission_interval).collect();
    let mut wind = Vec::with_capacity(emissions.len());
    let mut theta = wind_direction;
    let meander = Normal::new(0.0, cfg.wind_meander * cfg.emission_interval.sqrt()).expect("finite meander");
    for &t in &emissions {
        wind.push(WindSample { time: t, u: wind_speed, theta });
        if cfg.wind_meander > 0.0 {
            theta += meander.sample(rng);
        }
    }
    let fluct = cfg.release_fluctuation;
    let log_q = Normal::new(-0.5 * fluct * fluct, fluct).expect("finite fluctuation");
    let pulses: Vec<f64> = emissions
        .iter()
        .map(|_| if fluct > 0.0 { log_q.sample(rng).exp() } else { 1.0 })
        .collect();
    let spread = Spread::Stability { class: stability, virtual_distance: cfg.virtual_distance };
    let fresh = PuffParams { q0: 1.0, u: wind_speed, theta: wind_direction, h, spread };
    let (sx, sy, sz) = fresh.sigmas(0.0);
    let bracket = 2.0 * (-h * h / (2.0 * sz * sz)).exp();
    let unit_peak = bracket / (2.0 * PI.powf(1.5) * sx * sy * sz);
    let q0 = strength * vis_cl / (scene.path_depth * unit_peak);
    let schedule = ReleaseSchedule {
        source_x: 0.0,
        source_y: 0.0,
        h,
        spread,
        q0: pulses.iter().map(|p| p * q0).collect(),
        emissions,
        wind,
    };
    let times = (0..cfg.frames).map(|k| warmup + k as f64 / scene.frame_rate).collect();
    let placement = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    Draw {
        target_class,
        target_area,
        dynamic,
        scene,
        schedule,
        times,
        stability,
        q0,
        warmup,
        wind_speed,
        wind_direction,
        placement,
    }
}

/// Metric region covered by all live puffs within 3σ over the clip.
fn plume_extent(d: &Draw, horizon: f64) -> (f64, f64, f64, f64) {
    let (mut x0, mut y0, mut x1, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &t in &d.times {
        for (k, &te) in d.schedule.emissions.iter().enumerate() {
            let age = t - te;
            if !(0.0..=horizon).contains(&age) {
                continue;
            }
            let p = d.schedule.puff(k);
            let (sx, sy, _) = p.sigmas(age);
            let r = 3.0 * sx.max(sy);
            let (cx, cy) = (p.u * age * p.theta.cos(), p.u * age * p.theta.sin());
            x0 = x0.min(cx - r);
            y0 = y0.min(cy - r);
            x1 = x1.max(cx + r);
            y1 = y1.max(cy + r);
        }
    }
    (x0, y0, x1, y1)
}

struct Frames {
    boxes: Vec<Option<BBox>>,
    cl: Vec<Vec<f64>>,
}

fn annotate_on(d: &Draw, grid: &Grid, renderer: &Renderer, horizon: f64) -> Result<Frames> {
    let opts = SuperposeOptions { horizon, cutoff_sigmas: Some(4.0) };
    let slices = superpose_field(&d.schedule, grid, 0.0, &d.times, &opts)?;
    let mut boxes = Vec::with_capacity(slices.len());
    let mut cl = Vec::with_capacity(slices.len());
    for s in slices {
        let c: Vec<f64> = s.values.iter().map(|v| v * d.scene.path_depth).collect();
        boxes.push(renderer.annotate(&c, d.scene.vis_threshold)?);
        cl.push(c);
    }
    Ok(Frames { boxes, cl })
}

fn mean_area(boxes: &[Option<BBox>]) -> Option<f64> {
    let areas: Vec<f64> = boxes.iter().flatten().map(BBox::area).collect();
    (!areas.is_empty()).then(|| areas.iter().sum::<f64>() / areas.len() as f64)
}

fn union(boxes: &[Option<BBox>]) -> Option<BBox> {
    boxes.iter().flatten().copied().reduce(|a, b| a.union(&b))
}

fn smooth_texture<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.random_range(1.0..5.0) * 2.0 * PI / w.max(h) as f64;
            let a = rng.random_range(-PI..PI);
            (f * a.cos(), f * a.sin(), rng.random_range(-PI..PI))
        })
        .collect();
    let norm = 1.0 / (waves.len() as f64 / 2.0).sqrt();
    (0..w * h)
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            norm * waves.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).cos()).sum::<f64>()
        })
        .collect()
}

fn background<R: Rng + ?Sized>(cfg: &GeneratorConfig, d: &Draw, rng: &mut R) -> Background {
    let (w, h) = (cfg.width, cfg.height);
    let tex = smooth_texture(rng, w, h);
    let mut temps: Vec<f64> = tex.iter().map(|t| d.scene.t_background + cfg.texture * t).collect();
    let blobs = rng.random_range(0..=cfg.max_blobs);
    for _ in 0..blobs {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let len = rng.random_range(0.08..0.35) * w as f64;
        let wid = len * rng.random_range(0.25..0.6);
        let ang = rng.random_range(-PI..PI);
        let depth = cfg.blob_depth * rng.random_range(0.5..1.0);
        let (s, c) = ang.sin_cos();
        for (p, t) in temps.iter_mut().enumerate() {
            let (x, y) = ((p % w) as f64 - cx, (p / w) as f64 - cy);
            let (a, b) = (x * c + y * s, y * c - x * s);
            *t -= depth * (-(a * a) / (2.0 * len * len / 4.0) - (b * b) / (2.0 * wid * wid / 4.0)).exp();
        }
    }
    let floor = d.scene.t_gas + 0.5;
    for t in &mut temps {
        *t = t.max(floor);
    }
    Background { width: w, height: h, temps }
}

/// Deterministic clip number `index` of the benchmark drawn from `seed`.
pub fn generate_clip(seed: u64, index: u64, cfg: &GeneratorConfig) -> Result<ClipSample> {
    cfg.validate()?;
    let spectrum = GasSpectrum::longwave_default();
    let (w, h) = (cfg.width, cfg.height);
    let probe = Renderer::new(&cfg.scene, &spectrum, &Background::uniform(1, 1, cfg.scene.t_background))?;
    let vis_cl = probe.visibility_cl(cfg.scene.vis_threshold);

    const MAX_DRAWS: u64 = 8;
    const MAX_RESCALES: u32 = 3;
    let mut attempts = 0u32;
    let mut fallback: Option<(Draw, Frames, f64, Grid)> = None;
    for draw_no in 0..MAX_DRAWS {
        let mut rng = indexed_stream(seed, &format!("clip/draw{draw_no}"), index);
        let d = draw(cfg, &mut rng, vis_cl);
        let coarse_r = Renderer::new(&d.scene, &spectrum, &Background::uniform(64, 64, d.scene.t_background))?;
        let (ex0, ey0, ex1, ey1) = plume_extent(&d, cfg.horizon);
        let spacing = (ex1 - ex0).max(ey1 - ey0) / 64.0;
        let coarse = Grid { x0: ex0, y0: ey0, spacing, rows: 64, cols: 64 };
        let est = annotate_on(&d, &coarse, &coarse_r, cfg.horizon)?;
        let (Some(area_m_cells), Some(u_cells)) = (mean_area(&est.boxes), union(&est.boxes)) else {
            attempts += 1;
            continue;
        };
        let area_m = area_m_cells * spacing * spacing;
        let u_m = u_cells.scale(spacing).translate(ex0, ey0);
        let mut scale = (area_m / d.target_area).sqrt();
        let full_r = Renderer::new(&d.scene, &spectrum, &Background::uniform(w, h, d.scene.t_background))?;
        for _ in 0..MAX_RESCALES {
            attempts += 1;
            // fit the union box inside the frame, then place it with the drawn slack
            scale = scale.max(u_m.width() / (0.97 * w as f64)).max(u_m.height() / (0.97 * h as f64));
            let slack_x = (w as f64 * scale - u_m.width()).max(0.0);
            let slack_y = (h as f64 * scale - u_m.height()).max(0.0);
            let grid = Grid {
                x0: u_m.x1 - d.placement.0 * slack_x,
                y0: u_m.y1 - d.placement.1 * slack_y,
                spacing: scale,
                rows: h,
                cols: w,
            };
            let frames = annotate_on(&d, &grid, &full_r, cfg.horizon)?;
            let Some(area) = mean_area(&frames.boxes) else { break };
            if SizeClass::of_area(area) == d.target_class {
                return finish(cfg, seed, index, d, frames, scale, attempts, &spectrum);
            }
            let corrected = scale * (area / d.target_area).sqrt();
            if fallback.is_none() {
                fallback = Some((d.clone_light(), frames, scale, grid));
            }
            scale = corrected;
        }
    }
    match fallback {
        Some((d, frames, scale, _)) => finish(cfg, seed, index, d, frames, scale, attempts, &spectrum),
        None => Err(Error::Check(format!("clip {index}: no visible gas after {attempts} attempts"))),
    }
}

impl Draw {
    fn clone_light(&self) -> Draw {
        Draw {
            target_class: self.target_class,
            target_area: self.target_area,
            dynamic: self.dynamic,
            scene: self.scene.clone(),
            schedule: self.schedule.clone(),
            times: self.times.clone(),
            stability: self.stability,
            q0: self.q0,
            warmup: self.warmup,
            wind_speed: self.wind_speed,
            wind_direction: self.wind_direction,
            placement: self.placement,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &GeneratorConfig,
    seed: u64,
    index: u64,
    d: Draw,
    frames: Frames,
    scale: f64,
    attempts: u32,
    spectrum: &GasSpectrum,
) -> Result<ClipSample> {
    let (w, h) = (cfg.width, cfg.height);
    let mut bg_rng = indexed_stream(seed, "clip/background", index);
    let bg = background(cfg, &d, &mut bg_rng);
    let renderer = Renderer::new(&d.scene, spectrum, &bg)?;
    let mut noise_rng = indexed_stream(seed, "clip/noise", index);
    let mut jit_rng = indexed_stream(seed, "clip/jitter", index);
    let j = cfg.scene.jitter as i32;

    // clear/vague from the mean absorptance inside the untranslated boxes
    let uniform = Renderer::new(&d.scene, spectrum, &Background::uniform(1, 1, d.scene.t_background))?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (b, cl) in frames.boxes.iter().zip(&frames.cl) {
        if let Some(b) = b {
            for y in b.y1 as usize..b.y2 as usize {
                for x in b.x1 as usize..b.x2 as usize {
                    sum += uniform.absorptance(cl[y * w + x]);
                    n += 1;
                }
            }
        }
    }
    let contrast = if n > 0 { sum / n as f64 } else { 0.0 };

    let mut images = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for (b, cl) in frames.boxes.iter().zip(&frames.cl) {
        let jitter = if d.dynamic && j > 0 {
            Jitter { dx: jit_rng.random_range(-j..=j), dy: jit_rng.random_range(-j..=j) }
        } else {
            Jitter::default()
        };
        images.push(renderer.render(cl, jitter, d.scene.noise_sigma, &mut noise_rng)?);
        boxes.push(b.and_then(|b| b.translate(jitter.dx as f64, jitter.dy as f64).clip(w as f64, h as f64)));
    }
    let size_class = SizeClass::of_area(mean_area(&boxes).unwrap_or(0.0));
    let meta = ClipMeta {
        seed,
        index,
        width: w,
        height: h,
        frames: cfg.frames,
        target_class: d.target_class,
        size_class,
        dynamic_camera: d.dynamic,
        clear: contrast >= cfg.clear_threshold,
        contrast,
        pixel_scale: scale,
        wind_speed: d.wind_speed,
        wind_direction: d.wind_direction,
        stability: d.stability,
        source_height: d.schedule.h,
        q0: d.q0,
        warmup: d.warmup,
        t_background: d.scene.t_background,
        t_gas: d.scene.t_gas,
        frame_rate: d.scene.frame_rate,
        noise_sigma: d.scene.noise_sigma,
        attempts,
    };
    Ok(ClipSample { frames: images, boxes, meta })
}

#[derive(Serialize, Deserialize)]
struct BoxLine {
    frame: usize,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
}

/// Writes `meta.txt`, `frames/%06d.pgm` and `boxes.jsonl` under `dir`.
pub fn write_clip(dir: &Path, clip: &ClipSample) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let meta = dir.join("meta.txt");
    fs::write(&meta, clip.meta.to_text()).map_err(|e| Error::io(&meta, e))?;
    for (i, f) in clip.frames.iter().enumerate() {
        f.write_pgm(&frames_dir.join(format!("{i:06}.pgm")))?;
    }
    let mut lines = String::new();
    for (i, b) in clip.boxes.iter().enumerate() {
        let line = BoxLine { frame: i, bbox: b.map(|b| [b.x1, b.y1, b.x2, b.y2]) };
        lines.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
        lines.push('\n');
    }
    let path = dir.join("boxes.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))
}

pub fn read_clip(dir: &Path) -> Result<ClipSample> {
    let meta_path = dir.join("meta.txt");
    let meta = ClipMeta::from_text(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let mut frames = Vec::with_capacity(meta.frames);
    for i in 0..meta.frames {
        let f = GrayImage::read_pgm(&dir.join("frames").join(format!("{i:06}.pgm")))?;
        if f.width() != meta.width || f.height() != meta.height {
            return Err(Error::format("clip", format!("frame {i} size differs from meta.txt")));
        }
        frames.push(f);
    }
    let box_path = dir.join("boxes.jsonl");
    let text = fs::read_to_string(&box_path).map_err(|e| Error::io(&box_path, e))?;
    let mut boxes = vec![None; meta.frames];
    let mut seen = vec![false; meta.frames];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bl: BoxLine = serde_json::from_str(line).map_err(|e| Error::format("boxes.jsonl", e.to_string()))?;
        if bl.frame >= meta.frames || seen[bl.frame] {
            return Err(Error::format("boxes.jsonl", format!("unexpected frame {}", bl.frame)));
        }
        seen[bl.frame] = true;
        if let Some([x1, y1, x2, y2]) = bl.bbox {
            let b = BBox::new(x1, y1, x2, y2).map_err(|e| Error::format("boxes.jsonl", e.to_string()))?;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > meta.width as f64 || b.y2 > meta.height as f64 {
                return Err(Error::format("boxes.jsonl", format!("box outside the frame: {b:?}")));
            }
            boxes[bl.frame] = Some(b);
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::format("boxes.jsonl", "missing frame records"));
    }
    Ok(ClipSample { frames, boxes, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig { width: 64, height: 64, frames: 4, ..GeneratorConfig::default() }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let cfg = small_cfg();
        let a = generate_clip(3, 1, &cfg).unwrap();
        let b = generate_clip(3, 1, &cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), &a).unwrap();
        assert_eq!(read_clip(dir.path()).unwrap(), a);
        assert_ne!(generate_clip(3, 2, &cfg).unwrap(), a);
    }

    #[test]
    fn boxes_stay_inside_frames() {
        let cfg = small_cfg();
        for i in 0..6 {
            let c = generate_clip(11, i, &cfg).unwrap();
            assert_eq!(c.boxes.len(), c.frames.len());
            assert!(c.boxes.iter().any(Option::is_some));
            for b in c.boxes.iter().flatten() {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0 && b.is_valid());
            }
        }
    }

    #[test]
    fn steady_wind_moves_boxes_downwind() {
        let cfg = GeneratorConfig {
            frames: 8,
            wind_meander: 0.0,
            warmup_min: 3.0,
            warmup_max: 3.0,
            dynamic_fraction: 0.0,
            size_weights: [0.0, 1.0, 0.0],
            ..GeneratorConfig::default()
        };
        let c = generate_clip(5, 0, &cfg).unwrap();
        let (s, co) = c.meta.wind_direction.sin_cos();
        let along: Vec<f64> = c
            .boxes
            .iter()
            .map(|b| {
                let (x, y) = b.unwrap().centre();
                x * co + y * s
            })
            .collect();
        for w in along.windows(2) {
            assert!(w[1] >= w[0], "{along:?}");
        }
        assert!(along[7] > along[0]);
    }

    #[test]
    fn malformed_directories_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_clip(dir.path()).is_err());
        let c = generate_clip(1, 0, &small_cfg()).unwrap();
        write_clip(dir.path(), &c).unwrap();
        fs::write(dir.path().join("boxes.jsonl"), "{\"frame\": 0, \"box\": [3, 3, 1, 5]}\n").unwrap();
        assert!(read_clip(dir.path()).is_err());
    }
}
