//! Central finite-difference check of the analytic parameter gradient.

use crate::model::Model;

use super::{evaluate, PreparedSample, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, floor · max(1, |L|))` over checked
    /// coordinates, where `L` is the loss at the unperturbed parameters. The
    /// loss-scaled floor keeps round-off in `L(x ± h)` from dominating
    /// coordinates whose true gradient is zero.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
    /// Coordinates whose ±step changed a non-smooth branch (ReLU sign,
    /// clamp, winner) and therefore have no meaningful central difference.
    pub skipped: usize,
}

/// Compares the gradient of the total loss of `sample` with central
/// differences of step `h` for every parameter coordinate.
pub fn check_gradients(model: &Model, sample: &PreparedSample, h: f64, floor: f64) -> Result<GradCheckReport, TrainError> {
    let mut grads = model.params().zeros_like();
    let base = evaluate(model, sample, Some(&mut grads))?;
    let floor = floor * base.loss.l_total.abs().max(1.0);
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (String::new(), 0), checked: 0, skipped: 0 };
    for p in 0..grads.len() {
        for idx in 0..grads[p].len() {
            let orig = probe.values_mut()[p].as_slice().expect("contiguous")[idx];
            probe.values_mut()[p].as_slice_mut().expect("contiguous")[idx] = orig + h;
            let plus = evaluate(&probe, sample, None)?;
            probe.values_mut()[p].as_slice_mut().expect("contiguous")[idx] = orig - h;
            let minus = evaluate(&probe, sample, None)?;
            probe.values_mut()[p].as_slice_mut().expect("contiguous")[idx] = orig;
            if plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss.l_total - minus.loss.l_total) / (2.0 * h);
            let analytic = grads[p].as_slice().expect("contiguous")[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (model.params().names[p].clone(), idx);
            }
        }
    }
    Ok(report)
}
