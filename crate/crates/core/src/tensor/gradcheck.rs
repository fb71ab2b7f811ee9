//! Central finite-difference check of tape adjoints.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Probe at most this many entries of each input (evenly strided).
    pub max_entries_per_input: Option<usize>,
    /// Probes whose `±step` evaluations cross a kink (ReLU mask, interpolation
    /// cell or clamp change) are skipped; at most this fraction may be.
    pub max_skip_fraction: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
            max_entries_per_input: None,
            max_skip_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for each input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Option<u64>, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::with_signature();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Shape("gradient check needs a scalar output".into()));
        }
        Ok((tape.value(out).item(), tape.signature(), tape, vars, out))
    };

    let (_, base_sig, tape, vars, out) = eval(inputs)?;
    if let Some(op) = tape.nonfinite() {
        return Err(Error::NonFinite(op.to_string()));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        let n = input.numel();
        let stride = cfg
            .max_entries_per_input
            .map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(stride) {
            let mut data = input.to_vec();
            let x0 = data[i];
            data[i] = x0 + cfg.step;
            probe[k] = Tensor::from_parts(input.shape().to_vec(), data.clone());
            let (fp, sp, ..) = eval(&probe)?;
            data[i] = x0 - cfg.step;
            probe[k] = Tensor::from_parts(input.shape().to_vec(), data);
            let (fm, sm, ..) = eval(&probe)?;
            probe[k] = input.clone();
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((k, i));
            }
        }
    }
    let total = report.checked + report.skipped;
    report.passed = report.max_rel_error < cfg.tolerance
        && report.checked > 0
        && (report.skipped as f64) <= cfg.max_skip_fraction * total as f64;
    Ok(report)
}
