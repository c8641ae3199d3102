use ndarray::{Array2, Zip};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        let eps = self.eps;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *p *= decay;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let coef = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * coef);
        }
    }
    norm
}

/// Cosine decay from `base` at epoch 0 to zero at the last epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![array![[3.0, 4.0]], array![[12.0]]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-9);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 500), 0.1);
        assert!(cosine_lr(0.1, 499, 500) <= 1e-3 * 0.1);
        assert!(cosine_lr(0.1, 250, 500) < 0.1);
        assert_eq!(cosine_lr(0.1, 0, 1), 0.1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g) (up to eps)
        let mut p = array![[1.0, -2.0]];
        let mut opt = AdamW::new(&[(1, 2)], 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut [&mut p], &[array![[0.5, -3.0]]], 0.01);
        assert!((p[[0, 0]] - 0.99).abs() < 1e-9);
        assert!((p[[0, 1]] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = array![[2.0]];
        let mut opt = AdamW::new(&[(1, 1)], 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut [&mut p], &[array![[0.0]]], 0.1);
        assert!((p[[0, 0]] - 2.0 * 0.95).abs() < 1e-12);
    }
}
