//! Transformer building blocks on top of the autodiff [`tape`].

pub mod tape;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use tape::{Mat, Tape, Var};

/// Named parameter tensors, addressed by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (rows + cols))`.
    Xavier,
}

impl ParamSet {
    pub fn add<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut R) -> usize {
        let m = match init {
            Init::Zeros => Mat::zeros((rows, cols)),
            Init::Ones => Mat::ones((rows, cols)),
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
            }
        };
        self.names.push(name.to_string());
        self.values.push(m);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.raw_dim())).collect()
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = ps.add(&format!("{name}.w"), d_in, d_out, Init::Xavier, rng);
        let b = ps.add(&format!("{name}.b"), 1, d_out, Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, rng: &mut R) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), 1, d, Init::Ones, rng);
        let beta = ps.add(&format!("{name}.beta"), 1, d, Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Scaled dot-product attention with `heads` heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "d_model must be divisible by the head count");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(ps, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(ps, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(ps, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, t: &mut Tape, query: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(t, query);
        let k = self.k.forward(t, memory);
        let v = self.v.forward(t, memory);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let s = t.matmul_t(qh, kh);
            let s = t.scale(s, scale);
            let a = t.softmax(s, causal);
            outs.push(t.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.o.forward(t, cat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(ps, &format!("{name}.ff1"), d_model, d_ff, rng),
            l2: Linear::new(ps, &format!("{name}.ff2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.l1.forward(t, x);
        let h = t.relu(h);
        self.l2.forward(t, h)
    }
}

/// Post-norm encoder layer: self-attention and feed-forward, each followed
/// by a residual connection and layer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm1: Norm,
    pub ff: FeedForward,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_model: usize, heads: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::new(ps, &format!("{name}.attn"), d_model, heads, rng),
            norm1: Norm::new(ps, &format!("{name}.norm1"), d_model, rng),
            ff: FeedForward::new(ps, name, d_model, d_ff, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), d_model, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let a = self.attn.forward(t, x, x, false);
        let x = t.add(x, a);
        let x = self.norm1.forward(t, x);
        let f = self.ff.forward(t, x);
        let x = t.add(x, f);
        self.norm2.forward(t, x)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention to the
/// encoder memory, feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross_attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
    pub norm3: Norm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_model: usize, heads: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), d_model, heads, rng),
            norm1: Norm::new(ps, &format!("{name}.norm1"), d_model, rng),
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), d_model, heads, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), d_model, rng),
            ff: FeedForward::new(ps, name, d_model, d_ff, rng),
            norm3: Norm::new(ps, &format!("{name}.norm3"), d_model, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, memory: Var) -> Var {
        let a = self.self_attn.forward(t, x, x, true);
        let x = t.add(x, a);
        let x = self.norm1.forward(t, x);
        let c = self.cross_attn.forward(t, x, memory, false);
        let x = t.add(x, c);
        let x = self.norm2.forward(t, x);
        let f = self.ff.forward(t, x);
        let x = t.add(x, f);
        self.norm3.forward(t, x)
    }
}

/// Sinusoidal positional encoding: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d_model), |(pos, j)| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
