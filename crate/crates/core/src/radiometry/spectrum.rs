//! Blackbody exitance, synthetic gas absorption spectra, Beer-Lambert
//! transmittance and the two-layer radiance difference.

use super::SceneConfig;
use crate::error::{Error, Result};

/// First radiation constant, W·m².
pub const C1: f64 = 3.74e-16;
/// Second radiation constant, m·K.
pub const C2: f64 = 1.44e-2;

pub(crate) fn planck(lambda: f64, t: f64) -> f64 {
    C1 / lambda.powi(5) / (C2 / (lambda * t)).exp_m1()
}

/// Spectral exitance `M(λ, T)` of a blackbody, W/m³.
pub fn planck_radiance(lambda: f64, t: f64) -> Result<f64> {
    if !(lambda > 0.0) || !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("planck at λ={lambda}, T={t}")));
    }
    Ok(planck(lambda, t))
}

/// Gaussian absorption line `height · exp(−(λ−centre)²/2·width²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbsorptionPeak {
    pub centre: f64,
    pub width: f64,
    pub height: f64,
}

/// Sampled absorption coefficient `α(λ)` per ppm·m over a camera band.
#[derive(Clone, Debug, PartialEq)]
pub struct GasSpectrum {
    lambda: Vec<f64>,
    alpha: Vec<f64>,
    band: (f64, f64),
}

impl GasSpectrum {
    pub fn new(lambda: Vec<f64>, alpha: Vec<f64>, band: (f64, f64)) -> Result<Self> {
        if lambda.len() != alpha.len() || lambda.len() < 2 {
            return Err(Error::InvalidArgument("spectrum needs ≥ 2 aligned samples".into()));
        }
        if lambda.windows(2).any(|w| !(w[1] > w[0])) || lambda[0] <= 0.0 {
            return Err(Error::InvalidArgument("wavelengths must be positive and strictly increasing".into()));
        }
        if alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument("absorption coefficients must be finite and ≥ 0".into()));
        }
        if !(band.0 < band.1) {
            return Err(Error::InvalidArgument(format!("band {band:?}")));
        }
        Ok(Self { lambda, alpha, band })
    }

    /// `samples` evenly spaced wavelengths across `band`, absorption from a
    /// flat `continuum` plus Gaussian peaks.
    pub fn synthetic(band: (f64, f64), samples: usize, continuum: f64, peaks: &[AbsorptionPeak]) -> Result<Self> {
        if samples < 2 {
            return Err(Error::InvalidArgument("need at least 2 spectral samples".into()));
        }
        let step = (band.1 - band.0) / (samples - 1) as f64;
        let lambda: Vec<f64> = (0..samples).map(|i| band.0 + i as f64 * step).collect();
        let alpha = lambda
            .iter()
            .map(|&l| {
                continuum
                    + peaks
                        .iter()
                        .map(|p| p.height * (-(l - p.centre).powi(2) / (2.0 * p.width * p.width)).exp())
                        .sum::<f64>()
            })
            .collect();
        Self::new(lambda, alpha, band)
    }

    /// Long-wave default: 8–12 µm with two broad lines and a weak continuum.
    pub fn longwave_default() -> Self {
        Self::synthetic(
            (8e-6, 12e-6),
            41,
            4e-5,
            &[
                AbsorptionPeak { centre: 9.2e-6, width: 0.45e-6, height: 1e-3 },
                AbsorptionPeak { centre: 10.6e-6, width: 0.3e-6, height: 6e-4 },
            ],
        )
        .expect("default spectrum is well formed")
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn band(&self) -> (f64, f64) {
        self.band
    }

    /// Linear interpolation of `α`, zero outside the sampled range.
    pub fn alpha_at(&self, lambda: f64) -> f64 {
        let n = self.lambda.len();
        if lambda < self.lambda[0] || lambda > self.lambda[n - 1] {
            return 0.0;
        }
        let i = self.lambda.partition_point(|&l| l <= lambda).clamp(1, n - 1);
        let (l0, l1) = (self.lambda[i - 1], self.lambda[i]);
        let f = (lambda - l0) / (l1 - l0);
        self.alpha[i - 1] * (1.0 - f) + self.alpha[i] * f
    }

    /// Trapezoid weights of the band-restricted sampling grid:
    /// `∫_band f ≈ Σ wᵢ f(λᵢ)` over the returned nodes.
    pub fn band_nodes(&self) -> Result<Vec<(f64, f64)>> {
        band_nodes(&self.lambda, self.band)
    }
}

/// Quadrature nodes `(λ, weight)` for the trapezoid rule on `lambda`
/// restricted to `band`; band edges between samples become extra nodes.
fn band_nodes(lambda: &[f64], band: (f64, f64)) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = (band.0.max(lambda[0]), band.1.min(lambda[lambda.len() - 1]));
    let mut pts: Vec<f64> = Vec::new();
    if lo < hi {
        pts.push(lo);
        pts.extend(lambda.iter().copied().filter(|&l| l > lo && l < hi));
        pts.push(hi);
    }
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(format!("band {band:?} holds no spectral interval")));
    }
    let mut nodes: Vec<(f64, f64)> = pts.iter().map(|&l| (l, 0.0)).collect();
    for i in 0..pts.len() - 1 {
        let h = 0.5 * (pts[i + 1] - pts[i]);
        nodes[i].1 += h;
        nodes[i + 1].1 += h;
    }
    Ok(nodes)
}

/// Trapezoid integral of samples `f(λᵢ)` over `band`, interpolating linearly
/// at band edges that fall between samples.
pub fn band_integrate(lambda: &[f64], values: &[f64], band: (f64, f64)) -> Result<f64> {
    if lambda.len() != values.len() || lambda.len() < 2 {
        return Err(Error::InvalidArgument("band integral needs ≥ 2 aligned samples".into()));
    }
    let nodes = band_nodes(lambda, band)?;
    let interp = |l: f64| {
        let i = lambda.partition_point(|&x| x <= l).clamp(1, lambda.len() - 1);
        let f = (l - lambda[i - 1]) / (lambda[i] - lambda[i - 1]);
        values[i - 1] * (1.0 - f) + values[i] * f
    };
    Ok(nodes.iter().map(|&(l, w)| w * interp(l)).sum())
}

/// Beer-Lambert transmittance `exp(−α(λ)·CL)`.
pub fn gas_transmittance(spectrum: &GasSpectrum, lambda: f64, cl: f64) -> Result<f64> {
    if !(cl >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative path concentration {cl}")));
    }
    Ok((-spectrum.alpha_at(lambda) * cl).exp())
}

/// On-plume radiance `τ₂τ_g M_BG + τ₂ε_g M_gas + ε₂ M(T₂)`.
pub fn on_plume_radiance(scene: &SceneConfig, spectrum: &GasSpectrum, lambda: f64, cl: f64) -> Result<f64> {
    let tg = gas_transmittance(spectrum, lambda, cl)?;
    Ok(scene.tau_atm * tg * scene.eps_background * planck(lambda, scene.t_background)
        + scene.tau_atm * (1.0 - tg) * planck(lambda, scene.t_gas)
        + scene.eps_atm * planck(lambda, scene.t_atm))
}

/// Off-plume radiance `τ₂ M_BG + ε₂ M(T₂)`.
pub fn off_plume_radiance(scene: &SceneConfig, lambda: f64) -> f64 {
    scene.tau_atm * scene.eps_background * planck(lambda, scene.t_background)
        + scene.eps_atm * planck(lambda, scene.t_atm)
}

/// `ΔM = τ₂(1 − τ_g)(ε_b M(T_b) − M(T_gas))`, off-plume minus on-plume.
pub fn radiance_difference(scene: &SceneConfig, spectrum: &GasSpectrum, lambda: f64, cl: f64) -> Result<f64> {
    let tg = gas_transmittance(spectrum, lambda, cl)?;
    Ok(scene.tau_atm
        * (1.0 - tg)
        * (scene.eps_background * planck(lambda, scene.t_background) - planck(lambda, scene.t_gas)))
}
