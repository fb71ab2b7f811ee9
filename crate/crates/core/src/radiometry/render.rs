//! Per-pixel band radiometry, camera response and box annotation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::spectrum::{planck, GasSpectrum};
use super::SceneConfig;
use crate::bbox::BBox;
use crate::dispersion::ConcentrationSlice;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Linear map from band radiance (W/m²) to gray levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub gain: f64,
    pub offset: f64,
}

fn off_band(scene: &SceneConfig, nodes: &[(f64, f64)], t_b: f64) -> f64 {
    nodes
        .iter()
        .map(|&(l, w)| w * (scene.tau_atm * scene.eps_background * planck(l, t_b) + scene.eps_atm * planck(l, scene.t_atm)))
        .sum()
}

impl Camera {
    /// Gain from `gray_per_kelvin` at the nominal background temperature;
    /// offset puts the nominal gas-free background at `background_level`.
    pub fn calibrate(scene: &SceneConfig, spectrum: &GasSpectrum) -> Result<Self> {
        scene.validate()?;
        let nodes = spectrum.band_nodes()?;
        let h = 0.05;
        let slope = (off_band(scene, &nodes, scene.t_background + h) - off_band(scene, &nodes, scene.t_background - h)) / (2.0 * h);
        if !(slope > 0.0) {
            return Err(Error::InvalidArgument("scene has no thermal contrast to calibrate against".into()));
        }
        let gain = scene.gray_per_kelvin / slope;
        Ok(Self {
            gain,
            offset: scene.background_level - gain * off_band(scene, &nodes, scene.t_background),
        })
    }
}

/// Per-pixel background temperature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub width: usize,
    pub height: usize,
    pub temps: Vec<f64>,
}

impl Background {
    pub fn uniform(width: usize, height: usize, t: f64) -> Self {
        Self { width, height, temps: vec![t; width * height] }
    }

    fn is_uniform(&self) -> bool {
        self.temps.windows(2).all(|w| w[0] == w[1])
    }
}

/// Whole-frame integer camera translation; content moves by `(dx, dy)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Jitter {
    pub dx: i32,
    pub dy: i32,
}

/// Precomputed band quadrature for one scene, spectrum and background.
pub struct Renderer {
    width: usize,
    height: usize,
    alpha: Vec<f64>,
    /// Quadrature weights divided by band width (band-averaged absorptance).
    absorb_w: Vec<f64>,
    /// `τ₂·wᵢ·(ε_b M(λᵢ, T_b(p)) − M(λᵢ, T_gas))`, one row per pixel or a
    /// single shared row for a uniform background.
    contrast_w: Vec<f64>,
    per_pixel: bool,
    /// Gas-free gray level per pixel.
    base_gray: Vec<f64>,
    camera: Camera,
}

impl Renderer {
    pub fn new(scene: &SceneConfig, spectrum: &GasSpectrum, background: &Background) -> Result<Self> {
        let camera = Camera::calibrate(scene, spectrum)?;
        let (w, h) = (background.width, background.height);
        if w == 0 || h == 0 || background.temps.len() != w * h || background.temps.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("background map is malformed".into()));
        }
        let nodes = spectrum.band_nodes()?;
        let width_band: f64 = nodes.iter().map(|n| n.1).sum();
        let alpha = nodes.iter().map(|&(l, _)| spectrum.alpha_at(l)).collect();
        let absorb_w = nodes.iter().map(|&(_, wt)| wt / width_band).collect();
        let m_gas: Vec<f64> = nodes.iter().map(|&(l, _)| planck(l, scene.t_gas)).collect();
        let row = |t_b: f64| {
            nodes
                .iter()
                .zip(&m_gas)
                .map(move |(&(l, wt), &mg)| scene.tau_atm * wt * (scene.eps_background * planck(l, t_b) - mg))
        };
        let per_pixel = !background.is_uniform();
        let contrast_w = if per_pixel {
            background.temps.iter().flat_map(|&t| row(t)).collect()
        } else {
            row(background.temps[0]).collect()
        };
        let base_gray = if per_pixel {
            background.temps.iter().map(|&t| camera.gain * off_band(scene, &nodes, t) + camera.offset).collect()
        } else {
            vec![camera.gain * off_band(scene, &nodes, background.temps[0]) + camera.offset; w * h]
        };
        Ok(Self { width: w, height: h, alpha, absorb_w, contrast_w, per_pixel, base_gray, camera })
    }

    pub fn camera(&self) -> Camera {
        self.camera
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Band-integrated `ΔM` at pixel `p` for path concentration `cl`.
    pub fn delta_m(&self, p: usize, cl: f64) -> f64 {
        if cl == 0.0 {
            return 0.0;
        }
        let n = self.alpha.len();
        let row = if self.per_pixel { &self.contrast_w[p * n..(p + 1) * n] } else { &self.contrast_w[..] };
        row.iter().zip(&self.alpha).map(|(&c, &a)| -c * (-a * cl).exp_m1()).sum()
    }

    /// Band-averaged absorptance `1 − τ_band`.
    pub fn absorptance(&self, cl: f64) -> f64 {
        if cl == 0.0 {
            return 0.0;
        }
        self.absorb_w.iter().zip(&self.alpha).map(|(&w, &a)| -w * (-a * cl).exp_m1()).sum()
    }

    /// Smallest CL whose absorptance reaches `threshold` (bisection to one
    /// ulp).
    pub fn visibility_cl(&self, threshold: f64) -> f64 {
        let mut hi = 1.0;
        while self.absorptance(hi) < threshold {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                return hi;
            }
            if self.absorptance(mid) < threshold {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    fn check_len(&self, cl: &[f64]) -> Result<()> {
        if cl.len() != self.width * self.height {
            return Err(Error::Shape(format!("{} CL values for a {}x{} frame", cl.len(), self.width, self.height)));
        }
        if cl.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("CL must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Gray level before translation, noise and quantization.
    pub fn noise_free(&self, cl: &[f64]) -> Result<Vec<f64>> {
        self.check_len(cl)?;
        Ok(cl
            .iter()
            .enumerate()
            .map(|(p, &c)| self.base_gray[p] - self.camera.gain * self.delta_m(p, c))
            .collect())
    }

    /// Full camera model: translate (edge-clamped), add Gaussian noise,
    /// round and clamp to 8 bits. No random draws when `noise_sigma == 0`.
    pub fn render<R: Rng + ?Sized>(&self, cl: &[f64], jitter: Jitter, noise_sigma: f64, rng: &mut R) -> Result<GrayImage> {
        let clean = self.noise_free(cl)?;
        let moved = translate(&clean, self.width, self.height, jitter);
        let noise = if noise_sigma > 0.0 {
            Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        let pixels = moved
            .iter()
            .map(|&g| {
                let v = match &noise {
                    Some(n) => g + n.sample(rng),
                    None => g,
                };
                v.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        GrayImage::new(self.width, self.height, pixels)
    }

    /// Tight box around pixels with absorptance `≥ threshold`, in frame
    /// coordinates before camera translation.
    pub fn annotate(&self, cl: &[f64], threshold: f64) -> Result<Option<BBox>> {
        self.check_len(cl)?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("visibility threshold {threshold}")));
        }
        // absorptance is increasing in CL, so compare against its inverse
        let cl_star = self.visibility_cl(threshold);
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (p, &c) in cl.iter().enumerate() {
            if c >= cl_star {
                let (x, y) = (p % self.width, p / self.width);
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        Ok(b.map(|(x0, y0, x1, y1)| BBox { x1: x0 as f64, y1: y0 as f64, x2: (x1 + 1) as f64, y2: (y1 + 1) as f64 }))
    }
}

fn translate(src: &[f64], w: usize, h: usize, j: Jitter) -> Vec<f64> {
    if j == Jitter::default() {
        return src.to_vec();
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let sy = (y as i64 - j.dy as i64).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 - j.dx as i64).clamp(0, w as i64 - 1) as usize;
            out[y * w + x] = src[sy * w + sx];
        }
    }
    out
}

fn slice_cl(slice: &ConcentrationSlice, scene: &SceneConfig) -> Vec<f64> {
    slice.values.iter().map(|&c| c * scene.path_depth).collect()
}

/// One frame over a uniform background; the slice grid is the pixel grid.
pub fn render_frame<R: Rng + ?Sized>(
    slice: &ConcentrationSlice,
    scene: &SceneConfig,
    spectrum: &GasSpectrum,
    jitter: Jitter,
    rng: &mut R,
) -> Result<GrayImage> {
    let bg = Background::uniform(slice.grid.cols, slice.grid.rows, scene.t_background);
    Renderer::new(scene, spectrum, &bg)?.render(&slice_cl(slice, scene), jitter, scene.noise_sigma, rng)
}

pub fn annotate_bbox(
    slice: &ConcentrationSlice,
    scene: &SceneConfig,
    spectrum: &GasSpectrum,
    threshold: f64,
) -> Result<Option<BBox>> {
    let bg = Background::uniform(slice.grid.cols, slice.grid.rows, scene.t_background);
    Renderer::new(scene, spectrum, &bg)?.annotate(&slice_cl(slice, scene), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::{slice_concentration, Grid, PuffParams, Spread};
    use proptest::prelude::*;

    fn quiet() -> SceneConfig {
        SceneConfig { noise_sigma: 0.0, ..SceneConfig::default() }
    }

    fn plume_slice(q0: f64) -> ConcentrationSlice {
        let grid = Grid { x0: -8.0, y0: -8.0, spacing: 0.5, rows: 32, cols: 40 };
        let p = PuffParams { q0, u: 1.0, theta: 0.3, h: 0.5, spread: Spread::Fixed { sx: 2.0, sy: 1.5, sz: 1.0 } };
        slice_concentration(&p, &grid, 0.0, 3.0)
    }

    #[test]
    fn zero_gas_renders_constant_background() {
        let s = plume_slice(1.0);
        let empty = ConcentrationSlice { values: vec![0.0; s.values.len()], ..s };
        let mut rng = crate::rng::stream(0, "t");
        let img = render_frame(&empty, &quiet(), &GasSpectrum::longwave_default(), Jitter::default(), &mut rng).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 128));
        assert_eq!(annotate_bbox(&empty, &quiet(), &GasSpectrum::longwave_default(), 0.05).unwrap(), None);
    }

    #[test]
    fn gas_is_darker_than_background() {
        let s = plume_slice(6000.0);
        let mut rng = crate::rng::stream(0, "t");
        let sp = GasSpectrum::longwave_default();
        let img = render_frame(&s, &quiet(), &sp, Jitter::default(), &mut rng).unwrap();
        let b = annotate_bbox(&s, &quiet(), &sp, 0.05).unwrap().unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = img.get(x, y) as f64;
                if (x as f64) >= b.x1 && (x as f64) < b.x2 && (y as f64) >= b.y1 && (y as f64) < b.y2 {
                    inside += v;
                    n_in += 1;
                } else {
                    outside += v;
                    n_out += 1;
                }
            }
        }
        assert!(inside / (n_in as f64) < outside / (n_out as f64));
    }

    #[test]
    fn single_pixel_box() {
        let sp = GasSpectrum::longwave_default();
        let r = Renderer::new(&quiet(), &sp, &Background::uniform(6, 5, 295.0)).unwrap();
        let mut cl = vec![0.0; 30];
        cl[3 * 6 + 4] = 1e5;
        assert_eq!(r.annotate(&cl, 0.05).unwrap(), Some(BBox { x1: 4.0, y1: 3.0, x2: 5.0, y2: 4.0 }));
    }

    #[test]
    fn lower_threshold_never_shrinks_box() {
        let s = plume_slice(3000.0);
        let sp = GasSpectrum::longwave_default();
        let mut prev: Option<BBox> = None;
        for thr in [0.3, 0.2, 0.1, 0.05, 0.02, 0.01] {
            let b = annotate_bbox(&s, &quiet(), &sp, thr).unwrap();
            if let (Some(p), Some(b)) = (prev, b) {
                assert!(b.x1 <= p.x1 && b.y1 <= p.y1 && b.x2 >= p.x2 && b.y2 >= p.y2);
            }
            assert!(prev.is_none() || b.is_some());
            prev = b.or(prev);
        }
        assert!(prev.is_some());
    }

    #[test]
    fn jitter_translates_content() {
        let sp = GasSpectrum::longwave_default();
        let r = Renderer::new(&quiet(), &sp, &Background::uniform(8, 8, 295.0)).unwrap();
        let mut cl = vec![0.0; 64];
        cl[2 * 8 + 2] = 1e5;
        let mut rng = crate::rng::stream(0, "t");
        let a = r.render(&cl, Jitter::default(), 0.0, &mut rng).unwrap();
        let b = r.render(&cl, Jitter { dx: 3, dy: -1 }, 0.0, &mut rng).unwrap();
        assert_eq!(a.get(2, 2), b.get(5, 1));
        assert!(a.get(2, 2) < 128);
    }

    #[test]
    fn camera_calibration_hits_level_and_slope() {
        let sc = quiet();
        let sp = GasSpectrum::longwave_default();
        let warm = Background::uniform(1, 1, sc.t_background + 1.0);
        let r = Renderer::new(&sc, &sp, &warm).unwrap();
        let g = r.noise_free(&[0.0]).unwrap()[0];
        assert!((g - 128.0 - sc.gray_per_kelvin).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn doubling_cl_never_brightens(q0 in 10.0f64..20000.0, tb in 290.0f64..300.0) {
            let s = plume_slice(q0);
            let sc = SceneConfig { t_background: tb, ..quiet() };
            let sp = GasSpectrum::longwave_default();
            let mut tex = Background::uniform(s.grid.cols, s.grid.rows, tb);
            for (i, t) in tex.temps.iter_mut().enumerate() {
                *t += (i % 7) as f64 * 0.3;
            }
            let r = Renderer::new(&sc, &sp, &tex).unwrap();
            let cl: Vec<f64> = s.values.clone();
            let cl2: Vec<f64> = cl.iter().map(|v| 2.0 * v).collect();
            let mut rng = crate::rng::stream(0, "t");
            let a = r.render(&cl, Jitter::default(), 0.0, &mut rng).unwrap();
            let b = r.render(&cl2, Jitter::default(), 0.0, &mut rng).unwrap();
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                prop_assert!(y <= x);
            }
            let fa = r.noise_free(&cl).unwrap();
            let fb = r.noise_free(&cl2).unwrap();
            for (x, y) in fa.iter().zip(&fb) {
                prop_assert!(y <= x);
            }
        }
    }
}
