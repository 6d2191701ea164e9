//! Multimodal evaluation: minRMSE-K, meanNLL, maxACC-K, div_K, collision
//! and off-road rates.
//!
//! "Top-K" always means the K most probable modes; equal probabilities keep
//! the input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_manoeuvre_vector, CodecError, HorizonConfig, LabelSequence};
use crate::model::{Model, ModelError, ModePrediction};
use crate::scene::dataset::DatasetSample;
use crate::scene::{Aabb, Scene, VehicleId};
use crate::training::loss::bvn_nll_with_grad;
use crate::training::PreparedSample;

/// Endpoint overlap thresholds used by div_K (m).
pub const OVERLAP_LAT: f64 = 2.0;
pub const OVERLAP_LONG: f64 = 5.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("K = {k} exceeds the {n} available modes")]
    KTooLarge { k: usize, n: usize },
    #[error("K must be at least {min}, got {k}")]
    KTooSmall { k: usize, min: usize },
    #[error("sample {0} has no scene context")]
    MissingScene(usize),
    #[error("horizon {0} s is not a positive multiple of the time step within the prediction horizon")]
    BadHorizon(f64),
    #[error("inconsistent batch: {0}")]
    Inconsistent(String),
    #[error("vehicle {0} missing from its scene")]
    MissingVehicle(VehicleId),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Geometry needed for collision and off-road checks, in road coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    /// Absolute TV position at the last observed step; predictions are relative to it.
    pub origin: [f64; 2],
    pub tv_length: f64,
    pub tv_width: f64,
    pub road_bounds: (f64, f64),
    /// Ground-truth boxes of every other vehicle at each future step.
    pub sv_boxes: Vec<Vec<Aabb>>,
}

impl SceneContext {
    pub fn from_scene(scene: &Scene, tv_id: VehicleId, t_end: usize, t_pred: usize) -> Result<Self, MetricsError> {
        let tv = scene.state(tv_id, t_end).ok_or(MetricsError::MissingVehicle(tv_id))?;
        let sv_boxes = (t_end + 1..=t_end + t_pred)
            .map(|t| scene.states_at(t).into_iter().filter(|s| s.id != tv_id).map(|s| s.aabb()).collect())
            .collect();
        Ok(Self {
            origin: [tv.kin.x, tv.kin.y],
            tv_length: tv.length,
            tv_width: tv.width,
            road_bounds: scene.geometry.road_bounds,
            sv_boxes,
        })
    }

    /// Whether the mean trajectory's TV box overlaps any SV box at the same step.
    pub fn collides(&self, mean: &[[f64; 2]]) -> bool {
        mean.iter().zip(&self.sv_boxes).any(|(p, boxes)| {
            let b = Aabb::centered(self.origin[0] + p[0], self.origin[1] + p[1], self.tv_length, self.tv_width);
            boxes.iter().any(|o| b.intersects(o))
        })
    }

    /// Whether the predicted centre leaves the road laterally at any step.
    pub fn offroad(&self, mean: &[[f64; 2]]) -> bool {
        let (lo, hi) = self.road_bounds;
        mean.iter().any(|p| {
            let lat = self.origin[1] + p[1];
            lat < lo || lat > hi
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub modes: Vec<ModePrediction>,
    pub gt_traj: Vec<[f64; 2]>,
    pub gt_labels: LabelSequence,
    pub scene: Option<SceneContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationBatch {
    pub horizon: HorizonConfig,
    pub samples: Vec<EvalSample>,
}

/// How minRMSE-K picks the best of the top-K modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RmseSelection {
    /// Best mode chosen separately at each reported horizon.
    #[default]
    PerHorizon,
    /// One mode per sample, chosen by full-horizon RMSE.
    FullHorizon,
}

/// Indices of the `k` most probable modes.
pub fn top_k(modes: &[ModePrediction], k: usize) -> Result<Vec<usize>, MetricsError> {
    if k > modes.len() {
        return Err(MetricsError::KTooLarge { k, n: modes.len() });
    }
    if k == 0 {
        return Err(MetricsError::KTooSmall { k, min: 1 });
    }
    let mut idx: Vec<usize> = (0..modes.len()).collect();
    idx.sort_by(|&a, &b| modes[b].prob.total_cmp(&modes[a].prob));
    idx.truncate(k);
    Ok(idx)
}

fn sq_err(p: &[f64; 2], q: &[f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

/// Zero-based step index of a horizon in seconds.
pub fn horizon_step(horizon: &HorizonConfig, seconds: f64) -> Result<usize, MetricsError> {
    let steps = seconds * horizon.fps as f64;
    let r = steps.round();
    if !(r >= 1.0 && (steps - r).abs() < 1e-9 && r as usize <= horizon.t_pred) {
        return Err(MetricsError::BadHorizon(seconds));
    }
    Ok(r as usize - 1)
}

impl EvaluationBatch {
    fn check(&self) -> Result<(), MetricsError> {
        let tp = self.horizon.t_pred;
        for (i, s) in self.samples.iter().enumerate() {
            if s.gt_traj.len() != tp || s.gt_labels.len() != tp {
                return Err(MetricsError::Inconsistent(format!("sample {i} ground truth is not {tp} steps long")));
            }
            if s.modes.iter().any(|m| m.traj_params.len() != tp) {
                return Err(MetricsError::Inconsistent(format!("sample {i} has a mode of the wrong length")));
            }
        }
        Ok(())
    }

    fn n(&self) -> f64 {
        self.samples.len().max(1) as f64
    }
}

/// Root of the dataset-mean squared displacement error of the best top-K
/// mode, at each horizon (seconds).
pub fn min_rmse_k(
    batch: &EvaluationBatch,
    k: usize,
    horizons: &[f64],
    selection: RmseSelection,
) -> Result<Vec<f64>, MetricsError> {
    batch.check()?;
    let steps: Vec<usize> = horizons.iter().map(|&h| horizon_step(&batch.horizon, h)).collect::<Result<_, _>>()?;
    let mut sums = vec![0.0; steps.len()];
    for s in &batch.samples {
        let top = top_k(&s.modes, k)?;
        let means: Vec<Vec<[f64; 2]>> = top.iter().map(|&i| s.modes[i].mean_traj()).collect();
        match selection {
            RmseSelection::PerHorizon => {
                for (sum, &st) in sums.iter_mut().zip(&steps) {
                    *sum += means.iter().map(|m| sq_err(&m[st], &s.gt_traj[st])).fold(f64::INFINITY, f64::min);
                }
            }
            RmseSelection::FullHorizon => {
                let best = means
                    .iter()
                    .min_by(|a, b| full_mse(a, &s.gt_traj).total_cmp(&full_mse(b, &s.gt_traj)))
                    .expect("k >= 1");
                for (sum, &st) in sums.iter_mut().zip(&steps) {
                    *sum += sq_err(&best[st], &s.gt_traj[st]);
                }
            }
        }
    }
    Ok(sums.into_iter().map(|v| (v / batch.n()).sqrt()).collect())
}

fn full_mse(mean: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    mean.iter().zip(gt).map(|(p, q)| sq_err(p, q)).sum::<f64>() / gt.len() as f64
}

/// Root of the dataset mean of the best top-K full-horizon mean squared error.
pub fn min_rmse_k_overall(batch: &EvaluationBatch, k: usize) -> Result<f64, MetricsError> {
    batch.check()?;
    let mut sum = 0.0;
    for s in &batch.samples {
        let top = top_k(&s.modes, k)?;
        sum += top.iter().map(|&i| full_mse(&s.modes[i].mean_traj(), &s.gt_traj)).fold(f64::INFINITY, f64::min);
    }
    Ok((sum / batch.n()).sqrt())
}

/// Probability-weighted NLL over all modes at each horizon, averaged over samples.
pub fn mean_nll(batch: &EvaluationBatch, horizons: &[f64]) -> Result<Vec<f64>, MetricsError> {
    batch.check()?;
    let steps: Vec<usize> = horizons.iter().map(|&h| horizon_step(&batch.horizon, h)).collect::<Result<_, _>>()?;
    let mut sums = vec![0.0; steps.len()];
    for s in &batch.samples {
        for (sum, &st) in sums.iter_mut().zip(&steps) {
            *sum += s.modes.iter().map(|m| m.prob * bvn_nll_with_grad(&m.traj_params[st], s.gt_traj[st]).0).sum::<f64>();
        }
    }
    Ok(sums.into_iter().map(|v| v / batch.n()).collect())
}

/// Fraction of steps whose decoded label matches the ground truth.
pub fn mode_accuracy(mode: &ModePrediction, gt: &LabelSequence, horizon: &HorizonConfig) -> Result<f64, MetricsError> {
    let labels = decode_manoeuvre_vector(&mode.manoeuvre, horizon)?;
    let hits = labels.as_slice().iter().zip(gt.as_slice()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Best per-step manoeuvre accuracy among the top-K modes, averaged over samples.
pub fn max_acc_k(batch: &EvaluationBatch, k: usize) -> Result<f64, MetricsError> {
    batch.check()?;
    let mut sum = 0.0;
    for s in &batch.samples {
        let mut best: f64 = 0.0;
        for i in top_k(&s.modes, k)? {
            best = best.max(mode_accuracy(&s.modes[i], &s.gt_labels, &batch.horizon)?);
        }
        sum += best;
    }
    Ok(sum / batch.n())
}

fn flagged_fraction(batch: &EvaluationBatch, flag: impl Fn(&SceneContext, &[[f64; 2]]) -> bool) -> Result<f64, MetricsError> {
    batch.check()?;
    let mut flagged = 0usize;
    let mut total = 0usize;
    for (i, s) in batch.samples.iter().enumerate() {
        let ctx = s.scene.as_ref().ok_or(MetricsError::MissingScene(i))?;
        for m in &s.modes {
            total += 1;
            flagged += usize::from(flag(ctx, &m.mean_traj()));
        }
    }
    Ok(if total == 0 { 0.0 } else { flagged as f64 / total as f64 })
}

/// Fraction of predicted modes whose TV box overlaps a ground-truth SV box.
pub fn collision_rate(batch: &EvaluationBatch) -> Result<f64, MetricsError> {
    flagged_fraction(batch, |c, m| c.collides(m))
}

/// Fraction of predicted modes whose centre leaves the road bounds.
pub fn offroad_rate(batch: &EvaluationBatch) -> Result<f64, MetricsError> {
    flagged_fraction(batch, |c, m| c.offroad(m))
}

/// `1 - (1 / (K(K-1))) Σ_{i≠j} overlap(i, j)` over the top-K mode endpoints.
pub fn div_k(modes: &[ModePrediction], k: usize) -> Result<f64, MetricsError> {
    if k < 2 {
        return Err(MetricsError::KTooSmall { k, min: 2 });
    }
    let ends: Vec<[f64; 2]> = top_k(modes, k)?
        .into_iter()
        .map(|i| modes[i].traj_params.last().map_or([0.0, 0.0], |g| g.mean()))
        .collect();
    let mut overlaps = 0usize;
    for i in 0..k {
        for j in 0..k {
            if i != j && (ends[i][1] - ends[j][1]).abs() < OVERLAP_LAT && (ends[i][0] - ends[j][0]).abs() < OVERLAP_LONG {
                overlaps += 1;
            }
        }
    }
    Ok(1.0 - overlaps as f64 / (k * (k - 1)) as f64)
}

/// Mean div_K over the batch.
pub fn div_k_batch(batch: &EvaluationBatch, k: usize) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for s in &batch.samples {
        sum += div_k(&s.modes, k)?;
    }
    Ok(sum / batch.n())
}

/// Full metric suite for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub horizons_s: Vec<f64>,
    pub rmse_selection: RmseSelection,
    /// K -> per-horizon minRMSE-K (m).
    pub min_rmse: BTreeMap<usize, Vec<f64>>,
    /// K -> full-horizon minRMSE-K (m).
    pub min_rmse_overall: BTreeMap<usize, f64>,
    pub mean_nll: Vec<f64>,
    pub max_acc: BTreeMap<usize, f64>,
    /// K -> div_K, for K >= 2.
    pub div: BTreeMap<usize, f64>,
    pub collision_rate: Option<f64>,
    pub offroad_rate: Option<f64>,
}

impl MetricsReport {
    pub fn compute(batch: &EvaluationBatch, ks: &[usize], horizons: &[f64]) -> Result<Self, MetricsError> {
        let mut r = Self {
            samples: batch.samples.len(),
            horizons_s: horizons.to_vec(),
            rmse_selection: RmseSelection::PerHorizon,
            min_rmse: BTreeMap::new(),
            min_rmse_overall: BTreeMap::new(),
            mean_nll: mean_nll(batch, horizons)?,
            max_acc: BTreeMap::new(),
            div: BTreeMap::new(),
            collision_rate: None,
            offroad_rate: None,
        };
        for &k in ks {
            r.min_rmse.insert(k, min_rmse_k(batch, k, horizons, r.rmse_selection)?);
            r.min_rmse_overall.insert(k, min_rmse_k_overall(batch, k)?);
            r.max_acc.insert(k, max_acc_k(batch, k)?);
            if k >= 2 {
                r.div.insert(k, div_k_batch(batch, k)?);
            }
        }
        if batch.samples.iter().all(|s| s.scene.is_some()) {
            r.collision_rate = Some(collision_rate(batch)?);
            r.offroad_rate = Some(offroad_rate(batch)?);
        }
        Ok(r)
    }

    /// Aligned text table with one column per horizon.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<14}", "metric");
        for h in &self.horizons_s {
            let _ = write!(out, "{:>9}", format!("{h}s"));
        }
        let _ = writeln!(out, "{:>9}", "all");
        for (k, v) in &self.min_rmse {
            let _ = write!(out, "{:<14}", format!("minRMSE-{k}"));
            for x in v {
                let _ = write!(out, "{x:>9.3}");
            }
            let _ = writeln!(out, "{:>9.3}", self.min_rmse_overall[k]);
        }
        let _ = write!(out, "{:<14}", "meanNLL");
        for x in &self.mean_nll {
            let _ = write!(out, "{x:>9.3}");
        }
        let _ = writeln!(out);
        for (k, v) in &self.max_acc {
            let _ = writeln!(out, "{:<14}{:>9.2}%", format!("maxACC-{k}"), 100.0 * v);
        }
        for (k, v) in &self.div {
            let _ = writeln!(out, "{:<14}{:>9.3}", format!("div_{k}"), v);
        }
        if let (Some(c), Some(o)) = (self.collision_rate, self.offroad_rate) {
            let _ = writeln!(out, "{:<14}{:>9.2}%", "CollisionRate", 100.0 * c);
            let _ = writeln!(out, "{:<14}{:>9.2}%", "OffroadRate", 100.0 * o);
        }
        out
    }
}

/// Runs inference on every sample (in parallel, order preserved). Scene
/// contexts are attached when the sample's scene is in `scenes`.
pub fn build_batch(model: &Model, samples: &[DatasetSample], scenes: &[Scene]) -> Result<EvaluationBatch, MetricsError> {
    let horizon = model.config().horizon;
    let out: Vec<EvalSample> = samples
        .par_iter()
        .map(|s| {
            let prepared = PreparedSample::new(s, &horizon).map_err(|e| MetricsError::Inconsistent(e.to_string()))?;
            let modes = model.infer(&prepared.obs)?;
            let scene = scenes
                .iter()
                .find(|sc| sc.id == s.meta.scene)
                .map(|sc| SceneContext::from_scene(sc, s.meta.tv_id, s.meta.t_end, horizon.t_pred))
                .transpose()?;
            Ok(EvalSample { modes, gt_traj: s.future_traj.clone(), gt_labels: s.future_labels.clone(), scene })
        })
        .collect::<Result<_, MetricsError>>()?;
    Ok(EvaluationBatch { horizon, samples: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Manoeuvre, ManoeuvreVector};
    use crate::model::GaussianParams;

    pub(crate) fn mode(traj: &[[f64; 2]], prob: f64) -> ModePrediction {
        ModePrediction {
            manoeuvre: ManoeuvreVector { types: vec![Manoeuvre::LaneKeep; 3], times: vec![-1.0, -1.0] },
            traj_params: traj
                .iter()
                .map(|p| GaussianParams { mu_long: p[0], mu_lat: p[1], sigma_long: 1.0, sigma_lat: 1.0, rho: 0.0 })
                .collect(),
            prob,
        }
    }

    fn line(dx: f64, dy: f64) -> Vec<[f64; 2]> {
        (1..=25).map(|k| [k as f64 * dx, k as f64 * dy]).collect()
    }

    fn batch(modes: Vec<ModePrediction>, gt: Vec<[f64; 2]>) -> EvaluationBatch {
        EvaluationBatch {
            horizon: HorizonConfig::highway_default(),
            samples: vec![EvalSample {
                modes,
                gt_traj: gt,
                gt_labels: LabelSequence::uniform(Manoeuvre::LaneKeep, 25),
                scene: Some(SceneContext {
                    origin: [0.0, 5.0],
                    tv_length: 4.5,
                    tv_width: 2.0,
                    road_bounds: (-100.0, 100.0),
                    sv_boxes: vec![vec![]; 25],
                }),
            }],
        }
    }

    #[test]
    fn exact_mode_has_zero_error() {
        let b = batch(vec![mode(&line(1.0, 0.0), 0.3), mode(&line(1.0, 0.1), 0.7)], line(1.0, 0.0));
        let hs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(min_rmse_k(&b, 2, &hs, RmseSelection::PerHorizon).unwrap(), vec![0.0; 5]);
        assert_eq!(min_rmse_k(&b, 2, &hs, RmseSelection::FullHorizon).unwrap(), vec![0.0; 5]);
        assert!(min_rmse_k(&b, 1, &hs, RmseSelection::PerHorizon).unwrap()[4] > 0.0);
        assert!(matches!(min_rmse_k(&b, 3, &hs, RmseSelection::PerHorizon), Err(MetricsError::KTooLarge { .. })));
        assert_eq!(max_acc_k(&b, 1).unwrap(), 1.0);
    }

    #[test]
    fn empty_road_flags_nothing() {
        let b = batch(vec![mode(&line(1.0, 0.0), 1.0)], line(1.0, 0.0));
        assert_eq!(collision_rate(&b).unwrap(), 0.0);
        assert_eq!(offroad_rate(&b).unwrap(), 0.0);
    }

    #[test]
    fn pinned_on_stationary_vehicle_collides() {
        let mut b = batch(vec![mode(&vec![[30.0, 0.0]; 25], 0.5), mode(&line(1.0, 0.0), 0.5)], line(1.0, 0.0));
        let ctx = b.samples[0].scene.as_mut().unwrap();
        ctx.sv_boxes = vec![vec![Aabb::centered(30.0, 5.0, 4.5, 2.0)]; 25];
        assert_eq!(collision_rate(&b).unwrap(), 0.5);
    }

    #[test]
    fn div_examples() {
        let a = mode(&line(1.0, 0.0), 0.5);
        assert_eq!(div_k(&[a.clone(), a.clone()], 2).unwrap(), 0.0);
        let far = mode(&line(1.4, 0.0), 0.2);
        assert_eq!(div_k(&[a.clone(), far.clone()], 2).unwrap(), 1.0);
        let v = div_k(&[a.clone(), a.clone(), far], 3).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(div_k(&[a], 1), Err(MetricsError::KTooSmall { .. })));
    }

    #[test]
    fn nll_single_mode_and_split() {
        let gt = line(1.0, 0.0);
        let one = batch(vec![mode(&line(1.0, 0.05), 1.0)], gt.clone());
        let split = batch(vec![mode(&line(1.0, 0.05), 0.5), mode(&line(1.0, 0.05), 0.5)], gt);
        let a = mean_nll(&one, &[1.0, 5.0]).unwrap();
        let b = mean_nll(&split, &[1.0, 5.0]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn horizon_steps() {
        let h = HorizonConfig::highway_default();
        assert_eq!(horizon_step(&h, 1.0).unwrap(), 4);
        assert_eq!(horizon_step(&h, 5.0).unwrap(), 24);
        assert!(horizon_step(&h, 6.0).is_err());
        assert!(horizon_step(&h, 0.1).is_err());
    }
}
