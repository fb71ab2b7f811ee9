//! Grayscale objectness measures of a box: spectral-residual saliency (MS),
//! histogram contrast (CC), edge density (ED), superpixel straddling (SS) and
//! a HOG descriptor.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::bbox::BBox;
use crate::image::GrayImage;
use crate::{Error, Result};

/// Working resolutions of the saliency map.
const MS_SCALES: [usize; 3] = [32, 64, 128];
const HIST_BINS: usize = 16;
/// Fraction of the box size added on each side for the surrounding ring.
const RING_DILATION: f64 = 0.5;
/// Inner-ring thickness as a fraction of the box size.
const INNER_RING: f64 = 0.1;
const SEG_K: f64 = 100.0;
const SEG_MIN_SIZE: usize = 20;
const SEG_SIGMA: f64 = 0.8;
const HOG_CELL: usize = 8;
const HOG_BINS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectnessScores {
    pub ms: f64,
    pub cc: f64,
    pub ed: f64,
    pub ss: f64,
    pub hog: Vec<f64>,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` of pixels whose centres lie in `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

fn pixel_rect(img: &GrayImage, b: &BBox) -> Result<Rect> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
        return Err(Error::InvalidArgument(format!("box {b:?} outside the {w}x{h} image")));
    }
    let r = Rect {
        x0: b.x1.round() as usize,
        y0: b.y1.round() as usize,
        x1: b.x2.round() as usize,
        y1: b.y2.round() as usize,
    };
    if r.x1 <= r.x0 || r.y1 <= r.y0 {
        return Err(Error::InvalidArgument(format!("box {b:?} covers no pixel centre")));
    }
    Ok(r)
}

fn dilate(r: Rect, frac: f64, w: usize, h: usize) -> Rect {
    let dx = (frac * (r.x1 - r.x0) as f64).round() as usize;
    let dy = (frac * (r.y1 - r.y0) as f64).round() as usize;
    Rect {
        x0: r.x0.saturating_sub(dx),
        y0: r.y0.saturating_sub(dy),
        x1: (r.x1 + dx).min(w),
        y1: (r.y1 + dy).min(h),
    }
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
fn resample(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh];
    let (fx, fy) = (sw as f64 / dw as f64, sh as f64 / dh as f64);
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (y0, ty) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(sh - 1);
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
            let (x0, tx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(sw - 1);
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + at(x as isize + k as isize - radius, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[at(y as isize + k as isize - radius, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Spectral-residual saliency at one square working size.
fn spectral_residual(img: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let small = resample(img, w, h, size, size);
    let mut spec: Vec<Complex<f64>> = small.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spec, size, size, false);
    // ln(1 + A) keeps exact spectral zeros of synthetic shapes finite
    let log_amp: Vec<f64> = spec.iter().map(|c| c.norm().ln_1p()).collect();
    let mut residual = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, size as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, size as isize - 1) as usize;
                    acc += log_amp[yy * size + xx];
                }
            }
            residual[y * size + x] = log_amp[y * size + x] - acc / 9.0;
        }
    }
    let mut back: Vec<Complex<f64>> = spec
        .iter()
        .zip(&residual)
        .map(|(c, &r)| Complex::from_polar(r.exp(), c.arg()))
        .collect();
    fft2(&mut back, size, size, true);
    let sal: Vec<f64> = back.iter().map(|c| c.norm_sqr()).collect();
    let sal = gaussian_blur(&sal, size, size, size as f64 / 24.0);
    resample(&sal, size, size, w, h)
}

/// Multi-scale spectral-residual saliency normalized to a maximum of 1.
pub fn saliency_map(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let src = img.to_f64();
    let mut acc = vec![0.0; w * h];
    for s in MS_SCALES {
        for (a, v) in acc.iter_mut().zip(spectral_residual(&src, w, h, s)) {
            *a += v;
        }
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for a in &mut acc {
            *a /= max;
        }
    }
    acc
}

fn mean_in(map: &[f64], w: usize, r: Rect) -> f64 {
    let mut s = 0.0;
    for y in r.y0..r.y1 {
        s += map[y * w + r.x0..y * w + r.x1].iter().sum::<f64>();
    }
    s / r.area() as f64
}

/// Mean normalized saliency inside the box.
pub fn ms_score(img: &GrayImage, b: &BBox) -> Result<f64> {
    let r = pixel_rect(img, b)?;
    Ok(mean_in(&saliency_map(img), img.width(), r).clamp(0.0, 1.0))
}

/// Chi-squared distance between the intensity histograms inside the box and
/// in the surrounding ring (half of a chi-squared sum of normalized
/// histograms, hence in `[0, 1]`).
pub fn cc_score(img: &GrayImage, b: &BBox) -> Result<f64> {
    let r = pixel_rect(img, b)?;
    let outer = dilate(r, RING_DILATION, img.width(), img.height());
    let mut inside = [0.0; HIST_BINS];
    let mut ring = [0.0; HIST_BINS];
    for y in outer.y0..outer.y1 {
        for x in outer.x0..outer.x1 {
            let bin = img.get(x, y) as usize * HIST_BINS / 256;
            if r.contains(x, y) {
                inside[bin] += 1.0;
            } else {
                ring[bin] += 1.0;
            }
        }
    }
    let (ni, nr): (f64, f64) = (inside.iter().sum(), ring.iter().sum());
    if nr == 0.0 {
        return Ok(0.0);
    }
    let chi: f64 = inside
        .iter()
        .zip(&ring)
        .map(|(a, b)| {
            let (p, q) = (a / ni, b / nr);
            if p + q > 0.0 {
                (p - q) * (p - q) / (p + q)
            } else {
                0.0
            }
        })
        .sum();
    Ok((0.5 * chi).clamp(0.0, 1.0))
}

/// Sobel gradient magnitude with edge clamping.
fn gradient_magnitude(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let px = |x: isize, y: isize| img.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize) as f64;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1) - px(x - 1, y - 1) - 2.0 * px(x - 1, y) - px(x - 1, y + 1);
            let gy = px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1) - px(x - 1, y - 1) - 2.0 * px(x, y - 1) - px(x + 1, y - 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Mean gradient magnitude over the box's inner ring, relative to the
/// image's largest gradient.
pub fn ed_score(img: &GrayImage, b: &BBox) -> Result<f64> {
    let r = pixel_rect(img, b)?;
    let mag = gradient_magnitude(img);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    let tx = ((INNER_RING * (r.x1 - r.x0) as f64).floor() as usize).max(1);
    let ty = ((INNER_RING * (r.y1 - r.y0) as f64).floor() as usize).max(1);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let edge = x < r.x0 + tx || x + tx >= r.x1 || y < r.y0 + ty || y + ty >= r.y1;
            if edge {
                sum += mag[y * img.width() + x];
                n += 1;
            }
        }
    }
    Ok((sum / n as f64 / max).clamp(0.0, 1.0))
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) {
        let (a, b) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[b] = a;
        self.size[a] += self.size[b];
        self.internal[a] = w;
    }
}

/// Graph-based segmentation (8-connected, intensity-difference weights)
/// returning a segment label per pixel.
pub fn segment(img: &GrayImage, k: f64, min_size: usize) -> Vec<usize> {
    let (w, h) = (img.width(), img.height());
    let smooth = gaussian_blur(&img.to_f64(), w, h, SEG_SIGMA);
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut link = |q: usize| edges.push(((smooth[p] - smooth[q]).abs(), p, q));
            if x + 1 < w {
                link(p + 1);
            }
            if y + 1 < h {
                link(p + w);
                if x + 1 < w {
                    link(p + w + 1);
                }
                if x > 0 {
                    link(p + w - 1);
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ds = DisjointSets::new(w * h);
    for &(wt, p, q) in &edges {
        let (a, b) = (ds.find(p), ds.find(q));
        if a != b && wt <= (ds.internal[a] + k / ds.size[a] as f64).min(ds.internal[b] + k / ds.size[b] as f64) {
            ds.union(a, b, wt);
        }
    }
    for &(_, p, q) in &edges {
        let (a, b) = (ds.find(p), ds.find(q));
        if a != b && (ds.size[a] < min_size || ds.size[b] < min_size) {
            ds.union(a, b, ds.internal[a].max(ds.internal[b]));
        }
    }
    (0..w * h).map(|p| ds.find(p)).collect()
}

/// `1 − Σ_s min(|s \ box|, |s ∩ box|) / |box|` over graph-based segments.
pub fn ss_score(img: &GrayImage, b: &BBox) -> Result<f64> {
    let r = pixel_rect(img, b)?;
    let labels = segment(img, SEG_K, SEG_MIN_SIZE);
    let n = labels.len();
    let mut inside = vec![0usize; n];
    let mut outside = vec![0usize; n];
    for (p, &l) in labels.iter().enumerate() {
        if r.contains(p % img.width(), p / img.width()) {
            inside[l] += 1;
        } else {
            outside[l] += 1;
        }
    }
    let straddle: usize = inside.iter().zip(&outside).map(|(&i, &o)| i.min(o)).sum();
    Ok((1.0 - straddle as f64 / r.area() as f64).clamp(0.0, 1.0))
}

/// Unsigned-orientation histograms of `8 × 8` cells over the box, grouped
/// in blocks of up to `2 × 2` cells (stride one cell), each block scaled to
/// unit L2 norm (left at zero when flat).
pub fn hog_descriptor(img: &GrayImage, b: &BBox) -> Result<Vec<f64>> {
    let r = pixel_rect(img, b)?;
    let (bw, bh) = (r.x1 - r.x0, r.y1 - r.y0);
    if bw < HOG_CELL || bh < HOG_CELL {
        return Err(Error::InvalidArgument(format!("box of {bw}x{bh} pixels is smaller than one {HOG_CELL}x{HOG_CELL} cell")));
    }
    let (cx, cy) = (bw / HOG_CELL, bh / HOG_CELL);
    let px = |x: isize, y: isize| {
        let x = x.clamp(r.x0 as isize, r.x1 as isize - 1) as usize;
        let y = y.clamp(r.y0 as isize, r.y1 as isize - 1) as usize;
        img.get(x, y) as f64
    };
    let mut cells = vec![[0.0; HOG_BINS]; cx * cy];
    for j in 0..cy * HOG_CELL {
        for i in 0..cx * HOG_CELL {
            let (x, y) = ((r.x0 + i) as isize, (r.y0 + j) as isize);
            let gx = px(x + 1, y) - px(x - 1, y);
            let gy = px(x, y + 1) - px(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            // linear vote between the two nearest bin centres
            let pos = angle / std::f64::consts::PI * HOG_BINS as f64 - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as isize).rem_euclid(HOG_BINS as isize) as usize;
            let b1 = (b0 + 1) % HOG_BINS;
            let cell = &mut cells[(j / HOG_CELL) * cx + i / HOG_CELL];
            cell[b0] += mag * (1.0 - frac);
            cell[b1] += mag * frac;
        }
    }
    let (kx, ky) = (cx.min(2), cy.min(2));
    let mut out = Vec::new();
    for by in 0..=cy - ky {
        for bx in 0..=cx - kx {
            let mut block = Vec::with_capacity(kx * ky * HOG_BINS);
            for y in by..by + ky {
                for x in bx..bx + kx {
                    block.extend_from_slice(&cells[y * cx + x]);
                }
            }
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut block {
                    *v /= norm;
                }
            }
            out.extend(block);
        }
    }
    Ok(out)
}

/// All measures for one box (HOG empty when the box is below one cell).
pub fn objectness(img: &GrayImage, b: &BBox) -> Result<ObjectnessScores> {
    Ok(ObjectnessScores {
        ms: ms_score(img, b)?,
        cc: cc_score(img, b)?,
        ed: ed_score(img, b)?,
        ss: ss_score(img, b)?,
        hog: hog_descriptor(img, b).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> (GrayImage, BBox) {
        let mut img = GrayImage::filled(64, 64, 0);
        for y in 20..40 {
            for x in 16..44 {
                img.pixels_mut()[y * 64 + x] = 255;
            }
        }
        (img, BBox::new(16.0, 20.0, 44.0, 40.0).unwrap())
    }

    #[test]
    fn uniform_image_has_no_contrast_or_edges() {
        let img = GrayImage::filled(40, 30, 90);
        let b = BBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        assert_eq!(ed_score(&img, &b).unwrap(), 0.0);
        assert_eq!(cc_score(&img, &b).unwrap(), 0.0);
        assert!(hog_descriptor(&img, &b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_square_scores() {
        let (img, b) = square_image();
        assert_eq!(cc_score(&img, &b).unwrap(), 1.0);
        assert_eq!(ss_score(&img, &b).unwrap(), 1.0);
        assert!(ed_score(&img, &b).unwrap() > 0.3);
    }

    #[test]
    fn small_blob_is_salient() {
        let mut img = GrayImage::filled(64, 64, 0);
        for y in 12..20 {
            for x in 40..48 {
                img.pixels_mut()[y * 64 + x] = 255;
            }
        }
        let ms = ms_score(&img, &BBox::new(38.0, 10.0, 50.0, 22.0).unwrap()).unwrap();
        let off = ms_score(&img, &BBox::new(4.0, 40.0, 16.0, 52.0).unwrap()).unwrap();
        assert!(ms > 2.0 * off, "{ms} vs {off}");
    }

    #[test]
    fn scores_lie_in_unit_interval() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pixels = (0..48 * 40).map(|_| rng.random_range(0..=255u8)).collect();
        let img = GrayImage::new(48, 40, pixels).unwrap();
        // 6 x 5 cells in 2 x 2 blocks, then 3 x 1 cells in 2 x 1 blocks
        for (b, block) in [(BBox::new(0.0, 0.0, 48.0, 40.0).unwrap(), 4), (BBox::new(3.2, 7.9, 30.1, 21.0).unwrap(), 2)] {
            let s = objectness(&img, &b).unwrap();
            for v in [s.ms, s.cc, s.ed, s.ss] {
                assert!((0.0..=1.0).contains(&v), "{s:?}");
            }
            assert!(!s.hog.is_empty());
            for block in s.hog.chunks(block * HOG_BINS) {
                let n: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12 || n == 0.0);
            }
        }
    }

    #[test]
    fn hog_layout() {
        let (img, _) = square_image();
        let h = hog_descriptor(&img, &BBox::new(8.0, 8.0, 40.0, 32.0).unwrap()).unwrap();
        // 4 x 3 cells -> 3 x 2 blocks of 4 cells
        assert_eq!(h.len(), 3 * 2 * 4 * HOG_BINS);
    }

    #[test]
    fn invalid_boxes() {
        let (img, _) = square_image();
        assert!(ms_score(&img, &BBox::new(50.0, 50.0, 70.0, 60.0).unwrap()).is_err());
        assert!(hog_descriptor(&img, &BBox::new(0.0, 0.0, 6.0, 20.0).unwrap()).is_err());
        assert!(cc_score(&img, &BBox { x1: 3.0, y1: 3.0, x2: 3.2, y2: 9.0 }).is_err());
    }

    #[test]
    fn segmentation_separates_square() {
        let (img, _) = square_image();
        let l = segment(&img, SEG_K, SEG_MIN_SIZE);
        assert_ne!(l[0], l[30 * 64 + 30]);
        assert_eq!(l[24 * 64 + 20], l[30 * 64 + 30]);
    }
}
