//! Loss terms and mode-selection rules. Mode indices are 0-based.

use crate::codec::{Manoeuvre, NO_TRANSITION};
use crate::model::{GaussianParams, ManoeuvrePrediction};

use super::TrainError;

/// Probabilities are clamped to this value before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

/// Partial derivatives of [`bvn_nll`] with respect to its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BvnGrad {
    pub d_mu: [f64; 2],
    pub d_sigma: [f64; 2],
    pub d_rho: f64,
}

/// Negative log-density and its gradient; no input checks.
pub fn bvn_nll_with_grad(g: &GaussianParams, point: [f64; 2]) -> (f64, BvnGrad) {
    let (sx, sy, rho) = (g.sigma_long, g.sigma_lat, g.rho);
    let q = 1.0 - rho * rho;
    let a = (point[0] - g.mu_long) / sx;
    let b = (point[1] - g.mu_lat) / sy;
    let z = a * a + b * b - 2.0 * rho * a * b;
    let nll = LN_2PI + sx.ln() + sy.ln() + 0.5 * q.ln() + z / (2.0 * q);
    let ea = a - rho * b;
    let eb = b - rho * a;
    let grad = BvnGrad {
        d_mu: [-ea / (q * sx), -eb / (q * sy)],
        d_sigma: [1.0 / sx - a * ea / (q * sx), 1.0 / sy - b * eb / (q * sy)],
        d_rho: -rho / q - a * b / q + rho * z / (q * q),
    };
    (nll, grad)
}

/// `-log f(point)` for the bivariate normal `g`, evaluated in log space.
pub fn bvn_nll(g: &GaussianParams, point: [f64; 2]) -> Result<f64, TrainError> {
    let finite = [g.mu_long, g.mu_lat, g.sigma_long, g.sigma_lat, g.rho, point[0], point[1]]
        .iter()
        .all(|v| v.is_finite());
    if !finite || !g.is_valid() {
        return Err(TrainError::NonFinite("bivariate normal input".into()));
    }
    Ok(bvn_nll_with_grad(g, point).0)
}

/// Sum of per-step NLLs of the ground-truth positions.
pub fn traj_loss(params: &[GaussianParams], gt: &[[f64; 2]]) -> Result<f64, TrainError> {
    if params.len() != gt.len() {
        return Err(TrainError::LengthMismatch { expected: gt.len(), got: params.len() });
    }
    params.iter().zip(gt).map(|(g, p)| bvn_nll(g, *p)).sum()
}

/// `-Σ_c log q_c` of the ground-truth type in every slot.
pub fn manoeuvre_type_nll(type_probs: &[[f64; 3]], gt_types: &[Manoeuvre]) -> f64 {
    assert_eq!(type_probs.len(), gt_types.len());
    -type_probs.iter().zip(gt_types).map(|(q, m)| q[m.index()].max(LOG_CLAMP).ln()).sum::<f64>()
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|b| v < b.1) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |b| b.0)
}

/// Mode with the lowest manoeuvre-type NLL; ties go to the lowest index.
pub fn select_mode_mmp(pred: &ManoeuvrePrediction, gt_types: &[Manoeuvre]) -> usize {
    argmin(pred.type_probs.iter().map(|q| manoeuvre_type_nll(q, gt_types)))
}

/// Mode whose final mean position is nearest (L1) to the ground-truth
/// endpoint; ties go to the lowest index.
pub fn select_mode_mtp(mode_mean_trajs: &[Vec<[f64; 2]>], gt_traj: &[[f64; 2]]) -> usize {
    let end = *gt_traj.last().expect("non-empty ground truth");
    argmin(mode_mean_trajs.iter().map(|tr| {
        let p = tr.last().expect("non-empty mode trajectory");
        (p[0] - end[0]).abs() + (p[1] - end[1]).abs()
    }))
}

/// Euclidean norm of the transition-time error over periods that contain a
/// ground-truth transition.
pub fn transition_time_loss(v_hat: &[f64], gt_v: &[f64]) -> f64 {
    assert_eq!(v_hat.len(), gt_v.len());
    v_hat
        .iter()
        .zip(gt_v)
        .filter(|(_, &g)| g != NO_TRANSITION)
        .map(|(v, g)| (v - g) * (v - g))
        .sum::<f64>()
        .sqrt()
}
