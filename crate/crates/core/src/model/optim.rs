//! Adam optimizer over named parameter tensors.

use super::transformer::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Param<f32>], betas: (f64, f64), eps: f64) -> Self {
        Adam {
            beta1: betas.0 as f32,
            beta2: betas.1 as f32,
            eps: eps as f32,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut [Param<f32>], grads: &[Vec<f32>], lr: f32) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - f64::from(self.beta1).powi(t);
        let c2 = 1.0 - f64::from(self.beta2).powi(t);
        let step = (f64::from(lr) * c2.sqrt() / c1) as f32;
        let eps = self.eps * c2.sqrt() as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *x *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Param { name: "w".into(), rows: 1, cols: 3, data: vec![1.0, 1.0, 1.0] }];
        let mut opt = Adam::new(&params, (0.9, 0.999), 1e-8);
        opt.update(&mut params, &[vec![0.5, -2.0, 0.0]], 0.1);
        let w = &params[0].data;
        assert!((w[0] - 0.9).abs() < 1e-5);
        assert!((w[1] - 1.1).abs() < 1e-5);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Param { name: "w".into(), rows: 1, cols: 2, data: vec![3.0, -4.0] }];
        let mut opt = Adam::new(&params, (0.9, 0.999), 1e-8);
        for _ in 0..2000 {
            let g: Vec<f32> = params[0].data.iter().map(|&x| 2.0 * x).collect();
            opt.update(&mut params, &[g], 0.01);
        }
        assert!(params[0].data.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
    }
}
