//! Transformer encoder, manoeuvre generator and manoeuvre-conditioned
//! trajectory decoder with bivariate-Gaussian heads.
//!
//! Positions are TV-relative. The decoder emits per-step displacement raws
//! which are de-standardized and accumulated into mean positions.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_manoeuvre_vector, CodecError, HorizonConfig, LabelSequence, Manoeuvre, ManoeuvreVector};
use crate::nn::{positional_encoding, DecoderLayer, EncoderLayer, Init, Linear, Mat, ParamSet, Tape, Var};

/// Number of manoeuvre-specific trajectory heads (LK, RLC, LLC).
pub const HEAD_COUNT: usize = Manoeuvre::COUNT;
/// Raw outputs per head and step: two displacements, two log-sigmas, one correlation.
pub const HEAD_WIDTH: usize = 5;
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
pub const RHO_MAX: f64 = 0.999;
pub const CHECKPOINT_FORMAT: &str = "mmntp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected a {expected:?} input, got {got:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// How the winning mode is chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ModeSelection {
    /// Lowest manoeuvre-type NLL; the decoder is conditioned on manoeuvres
    /// and routes each step through the head of its manoeuvre type.
    #[default]
    #[serde(rename = "MMP")]
    Mmp,
    /// Lowest endpoint L1 distance; the decoder is conditioned on the mode
    /// index only and uses one shared head.
    #[serde(rename = "MTP")]
    Mtp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub mlp_hidden: usize,
    pub n_modes: usize,
    pub t_obs: usize,
    pub horizon: HorizonConfig,
    pub n_features: usize,
    pub variant: ModeSelection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-trainable size used for the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 1,
            d_ff: 32,
            mlp_hidden: 64,
            n_modes: 3,
            t_obs: 15,
            horizon: HorizonConfig::highway_default(),
            n_features: crate::scene::features::FEATURE_COUNT,
            variant: ModeSelection::Mmp,
        }
    }

    /// Full-size dimensions (512-wide, 8 heads).
    pub fn full() -> Self {
        Self { d_model: 512, n_heads: 8, d_ff: 128, mlp_hidden: 256, n_modes: 6, ..Self::desk() }
    }

    pub fn periods(&self) -> usize {
        self.horizon.periods()
    }

    pub fn t_pred(&self) -> usize {
        self.horizon.t_pred
    }

    /// `N + N(C+1)·3 + N·C`.
    pub fn manoeuvre_output_width(&self) -> usize {
        let (n, c) = (self.n_modes, self.periods());
        n + n * (c + 1) * Manoeuvre::COUNT + n * c
    }

    fn cond_width(&self) -> usize {
        match self.variant {
            ModeSelection::Mmp => Manoeuvre::COUNT,
            ModeSelection::Mtp => self.n_modes,
        }
    }

    pub fn routed_heads(&self) -> usize {
        match self.variant {
            ModeSelection::Mmp => HEAD_COUNT,
            ModeSelection::Mtp => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.mlp_hidden == 0 {
            return bad("n_layers, d_ff and mlp_hidden must be positive".into());
        }
        if self.n_modes == 0 || self.t_obs == 0 || self.n_features == 0 {
            return bad("n_modes, t_obs and n_features must be positive".into());
        }
        HorizonConfig::new(self.horizon.t_pred, self.horizon.t_change, self.horizon.fps)?;
        Ok(())
    }
}

/// Feature and output scaling learned from the training set and stored with
/// the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Mean per-step displacement `(long, lat)`.
    pub delta_mean: [f64; 2],
    pub delta_std: [f64; 2],
    /// Divisor applied to positions fed back into the decoder.
    pub pos_scale: f64,
}

impl Standardization {
    pub fn identity(n_features: usize) -> Self {
        Self {
            feature_mean: vec![0.0; n_features],
            feature_std: vec![1.0; n_features],
            delta_mean: [0.0; 2],
            delta_std: [1.0; 2],
            pos_scale: 1.0,
        }
    }

    /// Statistics over observation rows and future displacements.
    pub fn fit<'a, I>(n_features: usize, samples: I) -> Self
    where
        I: IntoIterator<Item = (&'a [Vec<f64>], &'a [[f64; 2]])>,
    {
        let mut fsum = vec![0.0; n_features];
        let mut fsq = vec![0.0; n_features];
        let mut nrows = 0usize;
        let mut dsum = [0.0; 2];
        let mut dsq = [0.0; 2];
        let mut ndelta = 0usize;
        let mut max_abs: f64 = 0.0;
        for (feats, traj) in samples {
            for row in feats {
                for (j, v) in row.iter().enumerate() {
                    fsum[j] += v;
                    fsq[j] += v * v;
                }
                nrows += 1;
            }
            let mut prev = [0.0, 0.0];
            for p in traj {
                for k in 0..2 {
                    let d = p[k] - prev[k];
                    dsum[k] += d;
                    dsq[k] += d * d;
                    max_abs = max_abs.max(p[k].abs());
                }
                prev = *p;
                ndelta += 1;
            }
        }
        let std_of = |sum: f64, sq: f64, n: usize| {
            if n == 0 {
                return (0.0, 1.0);
            }
            let m = sum / n as f64;
            let var = (sq / n as f64 - m * m).max(0.0);
            let s = var.sqrt();
            (m, if s > 1e-6 { s } else { 1.0 })
        };
        let mut out = Self::identity(n_features);
        for j in 0..n_features {
            let (m, s) = std_of(fsum[j], fsq[j], nrows);
            out.feature_mean[j] = m;
            out.feature_std[j] = s;
        }
        for k in 0..2 {
            let (m, s) = std_of(dsum[k], dsq[k], ndelta);
            out.delta_mean[k] = m;
            out.delta_std[k] = s;
        }
        out.pos_scale = if max_abs > 1e-6 { max_abs } else { 1.0 };
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManoeuvrePrediction {
    pub mode_probs: Vec<f64>,
    /// `[mode][slot]` distribution over LK, RLC, LLC.
    pub type_probs: Vec<Vec<[f64; 3]>>,
    /// `[mode][period]`, each in `[0, 1]`.
    pub transition_times: Vec<Vec<f64>>,
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Offsets of the three groups in the manoeuvre output row.
#[derive(Debug, Clone, Copy)]
pub struct ManoeuvreLayout {
    pub n: usize,
    pub c: usize,
}

impl ManoeuvreLayout {
    pub fn mode(&self, n: usize) -> usize {
        n
    }

    pub fn types(&self, n: usize, slot: usize) -> usize {
        self.n + (n * (self.c + 1) + slot) * Manoeuvre::COUNT
    }

    pub fn time(&self, n: usize, period: usize) -> usize {
        self.n + self.n * (self.c + 1) * Manoeuvre::COUNT + n * self.c + period
    }

    pub fn width(&self) -> usize {
        self.time(self.n, 0)
    }
}

impl ManoeuvrePrediction {
    /// Applies the output activations to one raw manoeuvre-generator row.
    pub fn from_raw(raw: &[f64], n: usize, c: usize) -> Self {
        let lay = ManoeuvreLayout { n, c };
        assert_eq!(raw.len(), lay.width());
        let mut mode_probs = raw[..n].to_vec();
        softmax_in_place(&mut mode_probs);
        let type_probs = (0..n)
            .map(|m| {
                (0..=c)
                    .map(|s| {
                        let o = lay.types(m, s);
                        let mut q = [raw[o], raw[o + 1], raw[o + 2]];
                        softmax_in_place(&mut q);
                        q
                    })
                    .collect()
            })
            .collect();
        let transition_times = (0..n).map(|m| (0..c).map(|i| sigmoid(raw[lay.time(m, i)])).collect()).collect();
        Self { mode_probs, type_probs, transition_times }
    }

    pub fn modes(&self) -> usize {
        self.mode_probs.len()
    }

    /// Per-slot argmax types (ties resolved LK < RLC < LLC) with the
    /// predicted transition times.
    pub fn hardened(&self, mode: usize) -> ManoeuvreVector {
        let types = self.type_probs[mode].iter().map(|q| Manoeuvre::argmax(q)).collect();
        ManoeuvreVector::from_parts(types, &self.transition_times[mode]).expect("slot counts agree")
    }
}

/// Bivariate-Gaussian parameters of one predicted position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu_long: f64,
    pub mu_lat: f64,
    pub sigma_long: f64,
    pub sigma_lat: f64,
    pub rho: f64,
}

impl GaussianParams {
    pub fn mean(&self) -> [f64; 2] {
        [self.mu_long, self.mu_lat]
    }

    pub fn is_valid(&self) -> bool {
        [self.mu_long, self.mu_lat, self.sigma_long, self.sigma_lat, self.rho].iter().all(|v| v.is_finite())
            && self.sigma_long > 0.0
            && self.sigma_lat > 0.0
            && self.rho.abs() < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub manoeuvre: ManoeuvreVector,
    pub traj_params: Vec<GaussianParams>,
    pub prob: f64,
}

impl ModePrediction {
    pub fn mean_traj(&self) -> Vec<[f64; 2]> {
        self.traj_params.iter().map(GaussianParams::mean).collect()
    }
}

fn step_params(mu: &mut [f64; 2], r: ndarray::ArrayView1<f64>, stats: &Standardization) -> GaussianParams {
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    for k in 0..2 {
        mu[k] += stats.delta_mean[k] + stats.delta_std[k] * r[k];
    }
    GaussianParams {
        mu_long: mu[0],
        mu_lat: mu[1],
        sigma_long: r[2].clamp(lo, hi).exp(),
        sigma_lat: r[3].clamp(lo, hi).exp(),
        rho: RHO_MAX * r[4].tanh(),
    }
}

/// Converts per-step head raws (`T x 5`) into Gaussian parameters.
pub fn head_params(raw: &Mat, stats: &Standardization) -> Vec<GaussianParams> {
    let mut mu = [0.0, 0.0];
    raw.rows().into_iter().map(|r| step_params(&mut mu, r, stats)).collect()
}

/// Parameter indices of every layer, rebuilt deterministically from the config.
#[derive(Debug, Clone)]
struct Layout {
    enc_in: Linear,
    enc: Vec<EncoderLayer>,
    man1: Linear,
    man2: Linear,
    dec_in: Linear,
    start: usize,
    dec: Vec<DecoderLayer>,
    head: Linear,
}

impl Layout {
    fn build(cfg: &ModelConfig, ps: &mut ParamSet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let enc_in = Linear::new(ps, "enc.embed", cfg.n_features, d, &mut rng);
        let enc = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(ps, &format!("enc.{i}"), d, cfg.n_heads, cfg.d_ff, &mut rng))
            .collect();
        let man1 = Linear::new(ps, "man.hidden", d, cfg.mlp_hidden, &mut rng);
        let man2 = Linear::new(ps, "man.out", cfg.mlp_hidden, cfg.manoeuvre_output_width(), &mut rng);
        let dec_in = Linear::new(ps, "dec.embed", 2 + cfg.cond_width(), d, &mut rng);
        let start = ps.add("dec.start", 1, d, Init::Xavier, &mut rng);
        let dec = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(ps, &format!("dec.{i}"), d, cfg.n_heads, cfg.d_ff, &mut rng))
            .collect();
        let head = Linear::new(ps, "dec.heads", d, HEAD_WIDTH * cfg.routed_heads(), &mut rng);
        Self { enc_in, enc, man1, man2, dec_in, start, dec, head }
    }
}

/// Decoder inputs for a prefix of `len` steps: the previous position and a
/// conditioning index per step, plus the head used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInputs {
    /// Position at step `t - 1` (zero for the first step).
    pub prev: Vec<[f64; 2]>,
    pub cond: Vec<usize>,
    pub route: Vec<usize>,
}

impl DecoderInputs {
    /// Teacher-forced inputs from a ground-truth trajectory.
    pub fn teacher_forced(gt_traj: &[[f64; 2]], cond: Vec<usize>, route: Vec<usize>) -> Self {
        let mut prev = Vec::with_capacity(gt_traj.len());
        prev.push([0.0, 0.0]);
        prev.extend_from_slice(&gt_traj[..gt_traj.len().saturating_sub(1)]);
        Self { prev, cond, route }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet,
    pub stats: Standardization,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    stats: Standardization,
    params: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

impl Model {
    /// Freshly initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamSet::default();
        let layout = Layout::build(&config, &mut params, seed);
        Ok(Self { config, layout, params, stats: Standardization::identity(config.n_features) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replaces the parameter values; shapes must match.
    pub fn set_values(&mut self, values: Vec<Mat>) {
        assert_eq!(values.len(), self.params.len());
        for (a, b) in self.params.values.iter().zip(&values) {
            assert_eq!(a.dim(), b.dim());
        }
        self.params.values = values;
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.params.values
    }

    fn check_observation(&self, obs: &Array2<f64>) -> Result<(), ModelError> {
        let expected = (self.config.t_obs, self.config.n_features);
        if obs.dim() != expected {
            return Err(ModelError::Shape { expected, got: obs.dim() });
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("observation"));
        }
        Ok(())
    }

    pub fn standardize(&self, obs: &Array2<f64>) -> Mat {
        let s = &self.stats;
        let mut out = obs.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - s.feature_mean[j]) / s.feature_std[j];
            }
        }
        out
    }

    /// Encoder forward pass on an already standardized observation.
    pub fn encode_on(&self, t: &mut Tape, obs_std: Mat) -> Var {
        let x = t.input(obs_std);
        let mut h = self.layout.enc_in.forward(t, x);
        let pe = t.input(positional_encoding(self.config.t_obs, self.config.d_model));
        h = t.add(h, pe);
        for layer in &self.layout.enc {
            h = layer.forward(t, h);
        }
        h
    }

    /// Raw manoeuvre-generator row (`1 x width`) from the final memory step.
    pub fn manoeuvre_raw_on(&self, t: &mut Tape, memory: Var) -> Var {
        let last = t.rows(memory, &[self.config.t_obs - 1]);
        let h = self.layout.man1.forward(t, last);
        let h = t.relu(h);
        self.layout.man2.forward(t, h)
    }

    /// Decoder forward pass returning routed head raws (`len x 5`).
    pub fn decoder_on(&self, t: &mut Tape, memory: Var, inputs: &DecoderInputs) -> Var {
        let len = inputs.prev.len();
        let cw = self.config.cond_width();
        let d = self.config.d_model;
        let mut tok = Mat::zeros((len, 2 + cw));
        for (r, (p, &c)) in inputs.prev.iter().zip(&inputs.cond).enumerate() {
            tok[[r, 0]] = p[0] / self.stats.pos_scale;
            tok[[r, 1]] = p[1] / self.stats.pos_scale;
            tok[[r, 2 + c]] = 1.0;
        }
        let x = t.input(tok);
        let mut h = self.layout.dec_in.forward(t, x);
        let mut e0 = Mat::zeros((len, 1));
        e0[[0, 0]] = 1.0;
        let e0 = t.input(e0);
        let start = t.param(self.layout.start);
        let start_rows = t.matmul(e0, start);
        h = t.add(h, start_rows);
        let pe = t.input(positional_encoding(len, d));
        h = t.add(h, pe);
        for layer in &self.layout.dec {
            h = layer.forward(t, h, memory);
        }
        let all = self.layout.head.forward(t, h);
        if self.config.routed_heads() == 1 {
            all
        } else {
            t.pick_blocks(all, HEAD_WIDTH, &inputs.route)
        }
    }

    /// Encoder memory (`T_obs x d_model`) for a raw observation.
    pub fn encode(&self, obs: &Array2<f64>) -> Result<Mat, ModelError> {
        self.check_observation(obs)?;
        let mut t = Tape::new(&self.params.values);
        let m = self.encode_on(&mut t, self.standardize(obs));
        Ok(t.value(m).clone())
    }

    pub fn predict_manoeuvres(&self, obs: &Array2<f64>) -> Result<ManoeuvrePrediction, ModelError> {
        self.check_observation(obs)?;
        let mut t = Tape::new(&self.params.values);
        let m = self.encode_on(&mut t, self.standardize(obs));
        let raw = self.manoeuvre_raw_on(&mut t, m);
        Ok(ManoeuvrePrediction::from_raw(t.value(raw).as_slice().unwrap(), self.config.n_modes, self.config.periods()))
    }

    /// Decoder conditioning for ground-truth labels, or for mode `mode`
    /// when the decoder is mode-conditioned.
    pub fn conditioning(&self, labels: &[Manoeuvre], mode: usize) -> (Vec<usize>, Vec<usize>) {
        match self.config.variant {
            ModeSelection::Mmp => {
                let idx: Vec<usize> = labels.iter().map(|m| m.index()).collect();
                (idx.clone(), idx)
            }
            ModeSelection::Mtp => (vec![mode; labels.len()], vec![0; labels.len()]),
        }
    }

    /// Teacher-forced trajectory distribution: decoder inputs are the
    /// ground-truth previous positions and labels (or mode index `mode` for
    /// the mode-conditioned variant).
    pub fn decode_teacher_forced(
        &self,
        obs: &Array2<f64>,
        gt_labels: &LabelSequence,
        gt_traj: &[[f64; 2]],
        mode: usize,
    ) -> Result<Vec<GaussianParams>, ModelError> {
        self.check_observation(obs)?;
        let tp = self.config.t_pred();
        if gt_labels.len() != tp || gt_traj.len() != tp {
            return Err(ModelError::Shape { expected: (tp, 2), got: (gt_traj.len(), gt_labels.len()) });
        }
        let mut t = Tape::new(&self.params.values);
        let m = self.encode_on(&mut t, self.standardize(obs));
        let (cond, route) = self.conditioning(gt_labels.as_slice(), mode);
        let raw = self.decoder_on(&mut t, m, &DecoderInputs::teacher_forced(gt_traj, cond, route));
        Ok(head_params(t.value(raw), &self.stats))
    }

    /// Autoregressive rollout with a fixed per-step conditioning and route,
    /// feeding back predicted means.
    pub fn rollout(&self, memory: &Mat, cond: &[usize], route: &[usize]) -> Vec<GaussianParams> {
        let tp = cond.len();
        let mut prev = vec![[0.0, 0.0]];
        let mut out: Vec<GaussianParams> = Vec::with_capacity(tp);
        let mut mu = [0.0, 0.0];
        for step in 0..tp {
            let mut t = Tape::new(&self.params.values);
            let m = t.input(memory.clone());
            let inputs = DecoderInputs { prev: prev.clone(), cond: cond[..=step].to_vec(), route: route[..=step].to_vec() };
            let raw = self.decoder_on(&mut t, m, &inputs);
            let g = step_params(&mut mu, t.value(raw).row(step), &self.stats);
            prev.push(g.mean());
            out.push(g);
        }
        out
    }

    /// All `N` modes, most probable first (ties keep mode order).
    pub fn infer(&self, obs: &Array2<f64>) -> Result<Vec<ModePrediction>, ModelError> {
        self.check_observation(obs)?;
        let mut t = Tape::new(&self.params.values);
        let m = self.encode_on(&mut t, self.standardize(obs));
        let raw = self.manoeuvre_raw_on(&mut t, m);
        let memory = t.value(m).clone();
        let pred =
            ManoeuvrePrediction::from_raw(t.value(raw).as_slice().unwrap(), self.config.n_modes, self.config.periods());
        let mut modes = Vec::with_capacity(self.config.n_modes);
        for n in 0..self.config.n_modes {
            let manoeuvre = pred.hardened(n);
            let labels = decode_manoeuvre_vector(&manoeuvre, &self.config.horizon)?;
            let (cond, route) = self.conditioning(labels.as_slice(), n);
            let traj_params = self.rollout(&memory, &cond, &route);
            if traj_params.iter().any(|g| !g.is_valid()) {
                return Err(ModelError::NonFinite("predicted trajectory"));
            }
            modes.push(ModePrediction { manoeuvre, traj_params, prob: pred.mode_probs[n] });
        }
        modes.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        Ok(modes)
    }

    pub fn save<W: Write>(&self, w: W, run_config: Option<&serde_json::Value>) -> Result<(), ModelError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            stats: self.stats.clone(),
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.values)
                .map(|(name, v)| TensorRecord {
                    name: name.clone(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.iter().copied().collect(),
                })
                .collect(),
            run_config: run_config.cloned(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the model and the embedded run config.
    pub fn load<R: Read>(r: R) -> Result<(Self, Option<serde_json::Value>), ModelError> {
        let file: CheckpointFile = serde_json::from_reader(r)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format {} v{}", file.format, file.version)));
        }
        let mut model = Self::new(file.config, 0)?;
        if file.params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, expected {}",
                file.params.len(),
                model.params.len()
            )));
        }
        for (i, rec) in file.params.into_iter().enumerate() {
            let cur = &model.params.values[i];
            if rec.name != model.params.names[i] || rec.shape != [cur.nrows(), cur.ncols()] {
                return Err(ModelError::Checkpoint(format!("tensor {i} ({}) does not match the config", rec.name)));
            }
            model.params.values[i] = Mat::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        }
        if file.stats.feature_mean.len() != file.config.n_features || file.stats.feature_std.len() != file.config.n_features {
            return Err(ModelError::Checkpoint("standardization statistics do not match n_features".into()));
        }
        model.stats = file.stats;
        Ok((model, file.run_config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Manoeuvre::*;

    fn small(variant: ModeSelection) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 6,
            mlp_hidden: 7,
            n_modes: 2,
            t_obs: 4,
            horizon: HorizonConfig::new(5, 3, 5).unwrap(),
            n_features: 18,
            variant,
            ..ModelConfig::desk()
        }
    }

    fn obs(seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((4, 18), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn output_width() {
        let c = ModelConfig::desk();
        assert_eq!(c.manoeuvre_output_width(), 3 + 3 * 3 * 3 + 3 * 2);
        let m = Model::new(c, 0).unwrap();
        let idx = m.params.names.iter().position(|n| n == "man.out.w").unwrap();
        assert_eq!(m.params.values[idx].ncols(), 36);
    }

    #[test]
    fn zero_input_memory_is_finite() {
        let m = Model::new(small(ModeSelection::Mmp), 3).unwrap();
        let mem = m.encode(&Array2::zeros((4, 18))).unwrap();
        assert_eq!(mem.dim(), (4, 8));
        assert!(mem.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn time_order_matters() {
        let m = Model::new(small(ModeSelection::Mmp), 3).unwrap();
        let x = obs(1);
        let mut rev = x.clone();
        rev.invert_axis(ndarray::Axis(0));
        assert_ne!(m.encode(&x).unwrap(), m.encode(&rev).unwrap());
    }

    #[test]
    fn single_mode_has_unit_probability() {
        let cfg = ModelConfig { n_modes: 1, ..small(ModeSelection::Mmp) };
        let m = Model::new(cfg, 9).unwrap();
        assert_eq!(m.predict_manoeuvres(&obs(2)).unwrap().mode_probs, vec![1.0]);
        let modes = m.infer(&obs(2)).unwrap();
        assert_eq!(modes.len(), 1);
        assert_eq!(modes[0].prob, 1.0);
    }

    #[test]
    fn rejects_bad_shape() {
        let m = Model::new(small(ModeSelection::Mmp), 3).unwrap();
        assert!(matches!(m.encode(&Array2::zeros((3, 18))), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn rollout_means_match_teacher_forcing_on_own_prediction() {
        let m = Model::new(small(ModeSelection::Mmp), 5).unwrap();
        let x = obs(4);
        let modes = m.infer(&x).unwrap();
        for mode in &modes {
            let labels = decode_manoeuvre_vector(&mode.manoeuvre, &m.config.horizon).unwrap();
            let tf = m.decode_teacher_forced(&x, &labels, &mode.mean_traj(), 0).unwrap();
            for (a, b) in tf.iter().zip(&mode.traj_params) {
                assert!((a.mu_long - b.mu_long).abs() < 1e-9 && (a.mu_lat - b.mu_lat).abs() < 1e-9);
                assert!((a.sigma_long - b.sigma_long).abs() < 1e-12 && (a.rho - b.rho).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_lane_keep_uses_lane_keep_head_only() {
        let m = Model::new(small(ModeSelection::Mmp), 7).unwrap();
        let labels = LabelSequence::uniform(LaneKeep, 5);
        let gt: Vec<[f64; 2]> = (1..=5).map(|k| [k as f64, 0.1]).collect();
        let tf = m.decode_teacher_forced(&obs(3), &labels, &gt, 0).unwrap();
        let mut t = Tape::new(&m.params.values);
        let mem = m.encode_on(&mut t, m.standardize(&obs(3)));
        let inputs = DecoderInputs::teacher_forced(&gt, vec![0; 5], vec![0; 5]);
        let raw = m.decoder_on(&mut t, mem, &inputs);
        assert_eq!(tf, head_params(t.value(raw), &m.stats));
        let _ = RightLaneChange;
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = Model::new(small(ModeSelection::Mtp), 11).unwrap();
        m.stats.feature_mean[3] = 0.1 + 0.2;
        m.stats.pos_scale = std::f64::consts::PI;
        let mut buf = Vec::new();
        let rc = serde_json::json!({"seed": 11});
        m.save(&mut buf, Some(&rc)).unwrap();
        let (back, run) = Model::load(&buf[..]).unwrap();
        assert_eq!(run, Some(rc));
        assert_eq!(back.params, m.params);
        assert_eq!(back.stats, m.stats);
        assert_eq!(back.config, m.config);
    }
}
