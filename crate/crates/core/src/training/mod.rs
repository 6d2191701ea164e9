//! Training objective, gradient computation and the training loop.
//!
//! The per-sample loss is `L_traj + L_p + L_U + L_V`. Output-layer
//! gradients are formed analytically and back-propagated through the tape.

pub mod gradcheck;
pub mod loss;
pub mod optim;

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_manoeuvre_vector, CodecError, HorizonConfig, LabelSequence, Manoeuvre, ManoeuvreVector, NO_TRANSITION};
use crate::model::{
    head_params, DecoderInputs, ManoeuvreLayout, ManoeuvrePrediction, Model, ModelError, ModeSelection, Standardization,
    HEAD_WIDTH, RHO_MAX, SIGMA_MAX, SIGMA_MIN,
};
use crate::nn::{Mat, Tape};
use crate::scene::dataset::{DatasetSample, SampleMeta};

use loss::{bvn_nll_with_grad, select_mode_mmp, select_mode_mtp, LOG_CLAMP};
use optim::{clip_global_norm, Adam};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("expected length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Loss terms of one sample (or their means over a set of samples).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_traj: f64,
    pub l_p: f64,
    pub l_u: f64,
    pub l_v: f64,
    pub l_total: f64,
    /// 0-based winning mode.
    pub winner: usize,
}

/// A dataset sample with its ground-truth manoeuvre vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub obs: Array2<f64>,
    pub labels: LabelSequence,
    pub traj: Vec<[f64; 2]>,
    pub vector: ManoeuvreVector,
    pub meta: SampleMeta,
}

impl PreparedSample {
    pub fn new(sample: &DatasetSample, horizon: &HorizonConfig) -> Result<Self, TrainError> {
        let rows = sample.features.len();
        let cols = sample.features.first().map_or(0, Vec::len);
        let flat: Vec<f64> = sample.features.iter().flatten().copied().collect();
        if flat.len() != rows * cols {
            return Err(TrainError::LengthMismatch { expected: rows * cols, got: flat.len() });
        }
        if sample.future_traj.len() != horizon.t_pred {
            return Err(TrainError::LengthMismatch { expected: horizon.t_pred, got: sample.future_traj.len() });
        }
        Ok(Self {
            obs: Array2::from_shape_vec((rows, cols), flat).expect("checked shape"),
            labels: sample.future_labels.clone(),
            traj: sample.future_traj.clone(),
            vector: encode_manoeuvre_vector(&sample.future_labels, horizon)?,
            meta: sample.meta,
        })
    }
}

/// Loss value plus a record of every non-smooth branch taken (ReLU signs,
/// sigma clamps, log clamps, winner) so that finite-difference checks can
/// detect steps that cross a kink.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub fingerprint: Vec<bool>,
}

fn manoeuvre_terms(
    pred: &ManoeuvrePrediction,
    winner: usize,
    gt: &ManoeuvreVector,
    g: &mut [f64],
    fp: &mut Vec<bool>,
) -> (f64, f64, f64) {
    let n = pred.modes();
    let c = gt.times.len();
    let lay = ManoeuvreLayout { n, c };

    let pw = pred.mode_probs[winner];
    fp.push(pw > LOG_CLAMP);
    let l_p = -pw.max(LOG_CLAMP).ln();
    if pw > LOG_CLAMP {
        for m in 0..n {
            g[lay.mode(m)] = pred.mode_probs[m] - f64::from(u8::from(m == winner));
        }
    }

    let mut l_u = 0.0;
    for (slot, gt_type) in gt.types.iter().enumerate() {
        let q = pred.type_probs[winner][slot];
        let k = gt_type.index();
        fp.push(q[k] > LOG_CLAMP);
        l_u -= q[k].max(LOG_CLAMP).ln();
        if q[k] > LOG_CLAMP {
            for j in 0..Manoeuvre::COUNT {
                g[lay.types(winner, slot) + j] = q[j] - f64::from(u8::from(j == k));
            }
        }
    }

    let v_hat = &pred.transition_times[winner];
    let l_v = loss::transition_time_loss(v_hat, &gt.times);
    if l_v > 0.0 {
        for i in 0..c {
            if gt.times[i] != NO_TRANSITION {
                let v = v_hat[i];
                g[lay.time(winner, i)] = (v - gt.times[i]) / l_v * v * (1.0 - v);
            }
        }
    }
    (l_p, l_u, l_v)
}

/// `(L_p, L_U, L_V)` of `pred` when mode `winner` is selected.
pub fn manoeuvre_losses(pred: &ManoeuvrePrediction, winner: usize, gt: &ManoeuvreVector) -> (f64, f64, f64) {
    let mut g = vec![0.0; ManoeuvreLayout { n: pred.modes(), c: gt.times.len() }.width()];
    manoeuvre_terms(pred, winner, gt, &mut g, &mut Vec::new())
}

fn trajectory_terms(raw: &Mat, stats: &Standardization, gt: &[[f64; 2]], fp: &mut Vec<bool>) -> (f64, Mat) {
    let params = head_params(raw, stats);
    let t_len = params.len();
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let mut g = Mat::zeros((t_len, HEAD_WIDTH));
    let mut d_mu = vec![[0.0; 2]; t_len];
    let mut total = 0.0;
    for (t, (p, y)) in params.iter().zip(gt).enumerate() {
        let (nll, bg) = bvn_nll_with_grad(p, *y);
        total += nll;
        d_mu[t] = bg.d_mu;
        let sig = [p.sigma_long, p.sigma_lat];
        for k in 0..2 {
            let r = raw[[t, 2 + k]];
            let inside = r > lo && r < hi;
            fp.push(inside);
            fp.push(r >= hi);
            if inside {
                g[[t, 2 + k]] = bg.d_sigma[k] * sig[k];
            }
        }
        let th = raw[[t, 4]].tanh();
        g[[t, 4]] = bg.d_rho * RHO_MAX * (1.0 - th * th);
    }
    for k in 0..2 {
        let mut acc = 0.0;
        for t in (0..t_len).rev() {
            acc += d_mu[t][k];
            g[[t, k]] = acc * stats.delta_std[k];
        }
    }
    (total, g)
}

/// Loss of one sample under the model's current parameters. When `grads`
/// is given, the parameter gradient is added into it.
pub fn evaluate(model: &Model, s: &PreparedSample, grads: Option<&mut [Mat]>) -> Result<Evaluation, TrainError> {
    let cfg = model.config();
    let (n, c) = (cfg.n_modes, cfg.periods());
    let mut t = Tape::new(&model.params().values);
    let mem = model.encode_on(&mut t, model.standardize(&s.obs));
    let man = model.manoeuvre_raw_on(&mut t, mem);
    let raw_row: Vec<f64> = t.value(man).iter().copied().collect();
    let pred = ManoeuvrePrediction::from_raw(&raw_row, n, c);

    let (winner, head) = match cfg.variant {
        ModeSelection::Mmp => {
            let (cond, route) = model.conditioning(s.labels.as_slice(), 0);
            let head = model.decoder_on(&mut t, mem, &DecoderInputs::teacher_forced(&s.traj, cond, route));
            (select_mode_mmp(&pred, &s.vector.types), head)
        }
        ModeSelection::Mtp => {
            let mut heads = Vec::with_capacity(n);
            let mut means = Vec::with_capacity(n);
            for mode in 0..n {
                let (cond, route) = model.conditioning(s.labels.as_slice(), mode);
                let h = model.decoder_on(&mut t, mem, &DecoderInputs::teacher_forced(&s.traj, cond, route));
                means.push(head_params(t.value(h), &model.stats).iter().map(|g| g.mean()).collect::<Vec<_>>());
                heads.push(h);
            }
            let w = select_mode_mtp(&means, &s.traj);
            (w, heads[w])
        }
    };

    let mut fp: Vec<bool> = (0..n).map(|m| m == winner).collect();
    let mut g_man = Mat::zeros((1, raw_row.len()));
    let (l_p, l_u, l_v) =
        manoeuvre_terms(&pred, winner, &s.vector, g_man.as_slice_mut().expect("contiguous row"), &mut fp);
    let (l_traj, g_head) = trajectory_terms(t.value(head), &model.stats, &s.traj, &mut fp);
    fp.extend_from_slice(t.relu_pattern());

    let l_total = l_traj + l_p + l_u + l_v;
    if !l_total.is_finite() {
        return Err(TrainError::NonFinite(format!(
            "loss of sample scene {} tv {} t_end {}: traj {l_traj} p {l_p} U {l_u} V {l_v}",
            s.meta.scene, s.meta.tv_id, s.meta.t_end
        )));
    }
    if let Some(grads) = grads {
        t.backward(&[(man, &g_man), (head, &g_head)], grads);
    }
    Ok(Evaluation { loss: LossBreakdown { l_traj, l_p, l_u, l_v, l_total, winner }, fingerprint: fp })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length; 0 disables warm-up.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub mode_selection: ModeSelection,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_epochs: 10,
            seed: 0,
            mode_selection: ModeSelection::Mmp,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_traj")]
    pub l_traj: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_U")]
    pub l_u: f64,
    #[serde(rename = "L_V")]
    pub l_v: f64,
    pub wall_time_s: f64,
}

/// Mean of the loss terms over `samples` (winner is left at 0).
pub fn mean_loss(model: &Model, samples: &[PreparedSample]) -> Result<LossBreakdown, TrainError> {
    let evals: Vec<LossBreakdown> =
        samples.par_iter().map(|s| evaluate(model, s, None).map(|e| e.loss)).collect::<Result<_, _>>()?;
    let k = evals.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    for e in &evals {
        out.l_traj += e.l_traj / k;
        out.l_p += e.l_p / k;
        out.l_u += e.l_u / k;
        out.l_v += e.l_v / k;
        out.l_total += e.l_total / k;
    }
    Ok(out)
}

/// Trains `model` on `samples`. Feature and output statistics are
/// re-estimated from `samples` first. `on_epoch` sees every epoch log as
/// soon as it is complete.
pub fn fit(
    model: &mut Model,
    samples: &[DatasetSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if cfg.mode_selection != model.config().variant {
        return Err(TrainError::Config(format!(
            "mode_selection {:?} does not match the model variant {:?}",
            cfg.mode_selection,
            model.config().variant
        )));
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let horizon = model.config().horizon;
    let prepared: Vec<PreparedSample> =
        samples.iter().map(|s| PreparedSample::new(s, &horizon)).collect::<Result<_, _>>()?;
    model.stats = Standardization::fit(
        model.config().n_features,
        samples.iter().map(|s| (s.features.as_slice(), s.future_traj.as_slice())),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params().values);
    let batches_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let warmup_steps = cfg.warmup_epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(LossBreakdown, Vec<Mat>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = model.params().zeros_like();
                    evaluate(model, &prepared[i], Some(&mut g)).map(|e| (e.loss, g))
                })
                .collect::<Result<_, _>>()?;
            let mut grads = model.params().zeros_like();
            let k = batch.len() as f64;
            for (l, g) in &per_sample {
                sums.l_traj += l.l_traj;
                sums.l_p += l.l_p;
                sums.l_u += l.l_u;
                sums.l_v += l.l_v;
                sums.l_total += l.l_total;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.scaled_add(1.0 / k, gi);
                }
            }
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NonFinite(format!("gradient in epoch {epoch}")));
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let step = opt.steps() as usize;
            let lr = if warmup_steps > 0 {
                cfg.learning_rate * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
            } else {
                cfg.learning_rate
            };
            opt.step(model.values_mut(), &grads, lr);
        }
        let k = prepared.len() as f64;
        let log = EpochLog {
            epoch,
            l_total: sums.l_total / k,
            l_traj: sums.l_traj / k,
            l_p: sums.l_p / k,
            l_u: sums.l_u / k,
            l_v: sums.l_v / k,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L_total {:.4} (traj {:.4}, p {:.4}, U {:.4}, V {:.4})",
            log.l_total,
            log.l_traj,
            log.l_p,
            log.l_u,
            log.l_v
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Writes the per-epoch log as CSV, preceded by optional `#` comment lines.
pub fn write_loss_csv<W: Write>(mut w: W, logs: &[EpochLog], comment: Option<&str>) -> Result<(), TrainError> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    let mut wr = csv::Writer::from_writer(w);
    for l in logs {
        wr.serialize(l)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Manoeuvre::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny(variant: ModeSelection, n_modes: usize) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 6,
            mlp_hidden: 7,
            n_modes,
            t_obs: 4,
            horizon: HorizonConfig::new(5, 3, 5).unwrap(),
            variant,
            ..ModelConfig::desk()
        };
        Model::new(cfg, 1).unwrap()
    }

    fn sample(seed: u64, labels: Vec<Manoeuvre>) -> DatasetSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DatasetSample {
            features: (0..4).map(|_| (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            future_traj: (1..=5).map(|k| [k as f64 * 1.1, 0.2 * k as f64]).collect(),
            future_labels: LabelSequence(labels),
            meta: SampleMeta { scene: 0, tv_id: seed as u32, t_end: 3 },
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let m = tiny(ModeSelection::Mmp, 2);
        let s = PreparedSample::new(&sample(1, vec![LaneKeep, LaneKeep, LeftLaneChange, LeftLaneChange, LeftLaneChange]), &m.config().horizon).unwrap();
        let l = evaluate(&m, &s, None).unwrap().loss;
        assert!((l.l_total - (l.l_traj + l.l_p + l.l_u + l.l_v)).abs() < 1e-9);
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let mut m = tiny(ModeSelection::Mmp, 2);
        let before = m.params().clone();
        let data: Vec<_> = (0..8).map(|k| sample(k, vec![LaneKeep; 5])).collect();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 0.0, warmup_epochs: 0, ..Default::default() };
        fit(&mut m, &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let data: Vec<_> = (0..8).map(|k| sample(k, vec![LaneKeep; 5])).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 3, warmup_epochs: 1, ..Default::default() };
        let run = || {
            let mut m = tiny(ModeSelection::Mtp, 2);
            let cfg = TrainConfig { mode_selection: ModeSelection::Mtp, ..cfg.clone() };
            let logs = fit(&mut m, &data, &cfg, &mut |_| {}).unwrap();
            (logs.iter().map(|l| (l.l_total, l.l_traj, l.l_p)).collect::<Vec<_>>(), m.params().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn variant_mismatch_rejected() {
        let mut m = tiny(ModeSelection::Mmp, 2);
        let data = vec![sample(0, vec![LaneKeep; 5])];
        let cfg = TrainConfig { mode_selection: ModeSelection::Mtp, ..Default::default() };
        assert!(matches!(fit(&mut m, &data, &cfg, &mut |_| {}), Err(TrainError::Config(_))));
    }
}
