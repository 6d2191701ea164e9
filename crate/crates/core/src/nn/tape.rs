//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from the caller's store and never copied; their gradients are
//! accumulated into a caller-provided buffer by [`Tape::backward`].

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    /// Row-wise softmax; output value is kept on the node.
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rows { x: Var, rows: Vec<usize> },
    /// Row `t` of the output is block `route[t]` (width `block`) of row `t` of `x`.
    PickBlocks { x: Var, block: usize, route: Vec<usize> },
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    relu_pattern: Vec<bool>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()], relu_pattern: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Option<Mat>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("non-parameter nodes carry values"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign pattern of every ReLU input seen so far (`true` = active).
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, Some(m))
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(Op::Param(index), None);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), Some(v))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), Some(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), Some(v))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = self.value(x) + &r.row(0);
        self.push(Op::AddRow(x, row), Some(v))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        self.push(Op::Scale(x, k), Some(v))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let pattern: Vec<bool> = xv.iter().map(|&a| a > 0.0).collect();
        let v = xv.mapv(|a| a.max(0.0));
        self.relu_pattern.extend(pattern);
        self.push(Op::Relu(x), Some(v))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|a| (a - mean) * is);
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let out = &xhat * &g + &b;
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, Some(out))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut out = self.value(x).clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let limit = if causal { i + 1 } else { row.len() };
            let m = row.iter().take(limit).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (j, a) in row.iter_mut().enumerate() {
                if j < limit {
                    *a = (*a - m).exp();
                    sum += *a;
                } else {
                    *a = 0.0;
                }
            }
            row.mapv_inplace(|a| a / sum);
        }
        self.push(Op::Softmax(x), Some(out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(Op::SliceCols { x, start }, Some(v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), Some(v))
    }

    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.push(Op::Rows { x, rows: rows.to_vec() }, Some(v))
    }

    pub fn pick_blocks(&mut self, x: Var, block: usize, route: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), route.len());
        let mut v = Mat::zeros((route.len(), block));
        for (t, &r) in route.iter().enumerate() {
            v.row_mut(t).assign(&xv.slice(s![t, r * block..(r + 1) * block]));
        }
        self.push(Op::PickBlocks { x, block, route: route.to_vec() }, Some(v))
    }

    /// Back-propagates the given output gradients and adds the resulting
    /// parameter gradients into `param_grads` (indexed like the parameter store).
    pub fn backward(&self, seeds: &[(Var, &Mat)], param_grads: &mut [Mat]) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }
        for (v, g) in seeds {
            acc(&mut grads, *v, (*g).clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, k) => acc(&mut grads, *x, g * *k),
                Op::Relu(x) => {
                    let mask = self.value(*x).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *x, g * mask);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma).row(0).to_owned();
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &gv;
                    let n = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / n;
                        let m2 = dh.dot(&xh) / n;
                        for c in 0..dh.len() {
                            dx[[r, c]] = inv_std[r] * (dh[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        row.zip_mut_with(&yr, |d, &yy| *d -= yy * s);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::Rows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut d = dx.row_mut(src);
                        d += &g.row(r);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::PickBlocks { x, block, route } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    for (t, &r) in route.iter().enumerate() {
                        dx.slice_mut(s![t, r * block..(r + 1) * block]).assign(&g.row(t));
                    }
                    acc(&mut grads, *x, dx);
                }
            }
        }
    }
}
