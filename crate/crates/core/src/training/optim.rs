//! Adaptive-moment optimizer with bias correction.

use crate::nn::Mat;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: i32,
}

impl Adam {
    pub fn new(shapes: &[Mat]) -> Self {
        let zeros = || shapes.iter().map(|p| Mat::zeros(p.raw_dim())).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Scales `grads` in place so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![array![[1.0, -2.0]]];
        let g = vec![array![[0.5, -3.0]]];
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[0][[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = vec![array![[1.0, -2.0]]];
        let before = p.clone();
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[array![[0.5, -3.0]]], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping() {
        let mut g = vec![array![[3.0, 4.0]]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
    }
}
