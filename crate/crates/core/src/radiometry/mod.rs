//! Infrared rendering of concentration fields with a two-layer (gas plus
//! atmosphere) radiative-transfer model, and packaging into annotated clips.

mod clip;
mod render;
mod spectrum;

pub use clip::{generate_clip, read_clip, write_clip, ClipMeta, ClipSample, GeneratorConfig, SizeClass};
pub use render::{annotate_bbox, render_frame, Background, Camera, Jitter, Renderer};
pub use spectrum::{
    band_integrate, gas_transmittance, off_plume_radiance, on_plume_radiance, planck_radiance,
    radiance_difference, AbsorptionPeak, GasSpectrum, C1, C2,
};

use crate::error::{Error, Result};

/// Scene radiometry and camera response. Temperatures in kelvin.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub t_background: f64,
    pub t_gas: f64,
    pub eps_background: f64,
    /// Grey atmospheric transmittance and emissivity.
    pub tau_atm: f64,
    pub eps_atm: f64,
    pub t_atm: f64,
    /// Camera gain expressed as gray levels per kelvin of background change.
    pub gray_per_kelvin: f64,
    /// Gray level of the nominal background.
    pub background_level: f64,
    /// Gaussian pixel noise, gray levels.
    pub noise_sigma: f64,
    /// Maximum camera translation per frame for dynamic clips, pixels.
    pub jitter: usize,
    pub frame_rate: f64,
    /// Line-of-sight depth turning concentration into CL (ppm·m).
    pub path_depth: f64,
    /// Band absorptance `1 − τ_band` marking annotated gas.
    pub vis_threshold: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            t_background: 295.0,
            t_gas: 287.0,
            eps_background: 0.98,
            tau_atm: 0.9,
            eps_atm: 0.1,
            t_atm: 290.0,
            gray_per_kelvin: 4.0,
            background_level: 128.0,
            noise_sigma: 1.5,
            jitter: 2,
            frame_rate: 1.0,
            path_depth: 1.0,
            vis_threshold: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.t_background > 0.0
            && self.t_gas > 0.0
            && self.t_atm > 0.0
            && unit(self.eps_background)
            && unit(self.tau_atm)
            && unit(self.eps_atm)
            && self.gray_per_kelvin > 0.0
            && self.noise_sigma >= 0.0
            && self.frame_rate > 0.0
            && self.path_depth > 0.0
            && self.vis_threshold > 0.0
            && self.vis_threshold < 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("scene {self:?}")));
        }
        Ok(())
    }
}
