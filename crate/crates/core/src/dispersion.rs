//! Gaussian puff dispersion.
//!
//! A puff released at the origin at `t = 0` drifts with the wind and spreads
//! with Pasquill-Gifford coefficients; a continuous leak is a superposition of
//! puffs released on a schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Pasquill-Gifford stability class, `A` (very unstable) to `F` (very stable).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StabilityClass {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl StabilityClass {
    pub const ALL: [StabilityClass; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn from_letter(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            "D" | "d" => Ok(Self::D),
            "E" | "e" => Ok(Self::E),
            "F" | "f" => Ok(Self::F),
            other => Err(Error::InvalidArgument(format!("stability class {other:?}"))),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
            Self::E => 'E',
            Self::F => 'F',
        }
    }
}

/// Briggs open-country coefficients `(σx, σy, σz)` at downwind distance `x`
/// metres, with `σx = σy`.
pub fn pg_coefficients(class: StabilityClass, x: f64) -> Result<(f64, f64, f64)> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("downwind distance {x}")));
    }
    let lateral = |a: f64| a * x / (1.0 + 0.0001 * x).sqrt();
    let (sy, sz) = match class {
        StabilityClass::A => (lateral(0.22), 0.20 * x),
        StabilityClass::B => (lateral(0.16), 0.12 * x),
        StabilityClass::C => (lateral(0.11), 0.08 * x / (1.0 + 0.0002 * x).sqrt()),
        StabilityClass::D => (lateral(0.08), 0.06 * x / (1.0 + 0.0015 * x).sqrt()),
        StabilityClass::E => (lateral(0.06), 0.03 * x / (1.0 + 0.0003 * x)),
        StabilityClass::F => (lateral(0.04), 0.016 * x / (1.0 + 0.0003 * x)),
    };
    Ok((sy, sy, sz))
}

/// Travel distance floor used when coefficients follow a stability class, so
/// a freshly released puff has a finite size.
pub const MIN_TRAVEL: f64 = 1.0;

/// How the dispersion coefficients are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spread {
    /// Constant `(σx, σy, σz)` in metres.
    Fixed { sx: f64, sy: f64, sz: f64 },
    /// Briggs coefficients at the travel distance
    /// `max(u·t + virtual_distance, MIN_TRAVEL)`; a positive virtual distance
    /// gives the source a finite initial size.
    Stability { class: StabilityClass, virtual_distance: f64 },
}

/// One puff released from the origin at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PuffParams {
    pub q0: f64,
    /// Wind speed, m/s.
    pub u: f64,
    /// Wind direction against the x axis, radians.
    pub theta: f64,
    /// Effective release height, m.
    pub h: f64,
    pub spread: Spread,
}

impl PuffParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q0 > 0.0) || !(self.u >= 0.0) || !self.theta.is_finite() || !self.h.is_finite() {
            return Err(Error::InvalidArgument(format!("puff parameters {self:?}")));
        }
        if let Spread::Fixed { sx, sy, sz } = self.spread {
            if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
                return Err(Error::InvalidArgument(format!("dispersion coefficients {sx}, {sy}, {sz}")));
            }
        }
        if let Spread::Stability { virtual_distance, .. } = self.spread {
            if !(virtual_distance >= 0.0) {
                return Err(Error::InvalidArgument(format!("virtual distance {virtual_distance}")));
            }
        }
        Ok(())
    }

    /// Dispersion coefficients at puff age `t`.
    pub fn sigmas(&self, t: f64) -> (f64, f64, f64) {
        match self.spread {
            Spread::Fixed { sx, sy, sz } => (sx, sy, sz),
            Spread::Stability { class, virtual_distance } => {
                pg_coefficients(class, (self.u * t + virtual_distance).max(MIN_TRAVEL))
                    .expect("travel distance is at least MIN_TRAVEL")
            }
        }
    }
}

/// Concentration of a single puff at `(x, y, z)` and age `t`, including the
/// ground-reflection term.
pub fn puff_concentration(p: &PuffParams, x: f64, y: f64, z: f64, t: f64) -> f64 {
    let (sx, sy, sz) = p.sigmas(t);
    let (s, c) = p.theta.sin_cos();
    let along = x * c + y * s - p.u * t;
    let cross = y * c - x * s;
    let norm = p.q0 / (2.0 * PI.powf(1.5) * sx * sy * sz);
    let reflect =
        (-(z + p.h).powi(2) / (2.0 * sz * sz)).exp() + (-(z - p.h).powi(2) / (2.0 * sz * sz)).exp();
    norm * (-along * along / (2.0 * sx * sx)).exp() * (-cross * cross / (2.0 * sy * sy)).exp() * reflect
}

/// Regular horizontal sampling grid; cell `(r, c)` samples the point
/// `(x0 + c·spacing, y0 + r·spacing)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub x0: f64,
    pub y0: f64,
    pub spacing: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument(format!("grid {self:?}")));
        }
        Ok(())
    }

    pub fn point(&self, r: usize, c: usize) -> (f64, f64) {
        (self.x0 + c as f64 * self.spacing, self.y0 + r as f64 * self.spacing)
    }
}

/// Concentration over a grid at height `z0` and time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationSlice {
    pub grid: Grid,
    pub z0: f64,
    pub t: f64,
    /// Row-major, `rows × cols`.
    pub values: Vec<f64>,
}

impl ConcentrationSlice {
    pub fn zeros(grid: Grid, z0: f64, t: f64) -> Self {
        Self {
            grid,
            z0,
            t,
            values: vec![0.0; grid.rows * grid.cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.grid.cols + c]
    }

    /// Cell with the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.grid.cols, best % self.grid.cols)
    }

    /// Riemann sum `Σ ζ · spacing²`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.spacing * self.grid.spacing
    }
}

pub fn slice_concentration(p: &PuffParams, grid: &Grid, z0: f64, t: f64) -> ConcentrationSlice {
    let mut out = ConcentrationSlice::zeros(*grid, z0, t);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (x, y) = grid.point(r, c);
            out.values[r * grid.cols + c] = puff_concentration(p, x, y, z0, t);
        }
    }
    out
}

/// Displacement `(dx, dy)` that carries the puff pattern forward by `dt`:
/// the unique solution of `dx·cosθ + dy·sinθ = u·dt`, `dy·cosθ − dx·sinθ = 0`.
pub fn shift_offsets(u: f64, theta: f64, dt: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (u * dt * c, u * dt * s)
}

/// Residuals of both shift conditions for a candidate `(dx, dy)`.
pub fn shift_residuals(u: f64, theta: f64, dt: f64, dx: f64, dy: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dx * c + dy * s - u * dt, dy * c - dx * s)
}

/// `|ζ(x, y, t) − ζ(x + dx, y + dy, t + dt)| / ζ(x, y, t)` at height `z0`, with
/// `(dx, dy)` from [`shift_offsets`].
pub fn verify_approximation(p: &PuffParams, x: f64, y: f64, z0: f64, t: f64, dt: f64) -> Result<f64> {
    let base = puff_concentration(p, x, y, z0, t);
    if !(base > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "zero concentration at ({x}, {y}, {z0}, {t})"
        )));
    }
    let (dx, dy) = shift_offsets(p.u, p.theta, dt);
    let moved = puff_concentration(p, x + dx, y + dy, z0, t + dt);
    Ok((base - moved).abs() / base)
}

/// Piecewise-constant wind sample: holds from `time` until the next sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindSample {
    pub time: f64,
    pub u: f64,
    pub theta: f64,
}

/// A train of puffs from one source at `(source_x, source_y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReleaseSchedule {
    pub source_x: f64,
    pub source_y: f64,
    pub h: f64,
    pub spread: Spread,
    /// Strictly increasing, non-negative.
    pub emissions: Vec<f64>,
    pub q0: Vec<f64>,
    /// Sorted by time; the first sample must cover the first emission.
    pub wind: Vec<WindSample>,
}

impl ReleaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.emissions.len() != self.q0.len() {
            return Err(Error::InvalidArgument(format!(
                "{} emission times, {} strengths",
                self.emissions.len(),
                self.q0.len()
            )));
        }
        if self.emissions.iter().any(|&t| !(t >= 0.0)) || self.emissions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("emission times must be non-negative and strictly increasing".into()));
        }
        if self.wind.is_empty() || self.wind.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::InvalidArgument("wind series must be non-empty and sorted".into()));
        }
        if let Some(&first) = self.emissions.first() {
            if self.wind[0].time > first {
                return Err(Error::InvalidArgument("wind series starts after the first emission".into()));
            }
        }
        Ok(())
    }

    pub fn wind_at(&self, t: f64) -> WindSample {
        let i = self.wind.partition_point(|w| w.time <= t);
        self.wind[i.saturating_sub(1)]
    }

    /// Puff `k` in its own frame (origin at the source, age 0 at emission);
    /// the wind is frozen at its emission-time value.
    pub fn puff(&self, k: usize) -> PuffParams {
        let w = self.wind_at(self.emissions[k]);
        PuffParams {
            q0: self.q0[k],
            u: w.u,
            theta: w.theta,
            h: self.h,
            spread: self.spread,
        }
    }
}

/// Cost controls for [`superpose_field`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuperposeOptions {
    /// Puffs older than this many seconds are dropped.
    pub horizon: f64,
    /// Evaluate each puff only within this many horizontal σ of its centre.
    /// Outside `k` σ the along/cross factors are below `exp(−k²/2)`.
    pub cutoff_sigmas: Option<f64>,
}

impl Default for SuperposeOptions {
    fn default() -> Self {
        Self {
            horizon: 120.0,
            cutoff_sigmas: None,
        }
    }
}

/// Sum of all puffs released at or before each requested time.
pub fn superpose_field(
    s: &ReleaseSchedule,
    grid: &Grid,
    z0: f64,
    times: &[f64],
    opts: &SuperposeOptions,
) -> Result<Vec<ConcentrationSlice>> {
    s.validate()?;
    grid.validate()?;
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("slice times must be sorted".into()));
    }
    let puffs: Vec<PuffParams> = (0..s.emissions.len()).map(|k| s.puff(k)).collect();
    for p in &puffs {
        p.validate()?;
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut slice = ConcentrationSlice::zeros(*grid, z0, t);
        for (k, p) in puffs.iter().enumerate() {
            let age = t - s.emissions[k];
            if age < 0.0 || age > opts.horizon {
                continue;
            }
            add_puff(&mut slice, p, s.source_x, s.source_y, age, opts.cutoff_sigmas);
        }
        out.push(slice);
    }
    Ok(out)
}

fn add_puff(slice: &mut ConcentrationSlice, p: &PuffParams, sx0: f64, sy0: f64, age: f64, cutoff: Option<f64>) {
    let g = slice.grid;
    let (mut r0, mut r1, mut c0, mut c1) = (0, g.rows, 0, g.cols);
    if let Some(k) = cutoff {
        let (sx, sy, _) = p.sigmas(age);
        let reach = k * sx.max(sy);
        let (dx, dy) = shift_offsets(p.u, p.theta, age);
        let (cx, cy) = (sx0 + dx, sy0 + dy);
        let lo = |v: f64, origin: f64, n: usize| (((v - reach - origin) / g.spacing).floor().max(0.0) as usize).min(n);
        let hi = |v: f64, origin: f64, n: usize| (((v + reach - origin) / g.spacing).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        c0 = lo(cx, g.x0, g.cols);
        c1 = hi(cx, g.x0, g.cols);
        r0 = lo(cy, g.y0, g.rows);
        r1 = hi(cy, g.y0, g.rows);
    }
    // puff_concentration with the per-puff factors hoisted out of the loop
    let (sx, sy, sz) = p.sigmas(age);
    let (s, c) = p.theta.sin_cos();
    let reflect = (-(slice.z0 + p.h).powi(2) / (2.0 * sz * sz)).exp() + (-(slice.z0 - p.h).powi(2) / (2.0 * sz * sz)).exp();
    let amp = p.q0 / (2.0 * PI.powf(1.5) * sx * sy * sz) * reflect;
    let (ax, ay) = (1.0 / (2.0 * sx * sx), 1.0 / (2.0 * sy * sy));
    for r in r0..r1 {
        for col in c0..c1 {
            let (x, y) = g.point(r, col);
            let (x, y) = (x - sx0, y - sy0);
            let along = x * c + y * s - p.u * age;
            let cross = y * c - x * s;
            slice.values[r * g.cols + col] += amp * (-along * along * ax - cross * cross * ay).exp();
        }
    }
}
