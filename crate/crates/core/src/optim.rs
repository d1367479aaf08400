//! Rectified Adam and global-norm gradient clipping over [`Weights`].

use ndarray::{Array2, Zip};

use crate::autodiff::Tensor;
use crate::model::Weights;

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Weights<Tensor>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.tensors_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct RAdam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl RAdam {
    pub fn new(learning_rate: f64, template: &Weights<Tensor>) -> Self {
        let zeros: Vec<Tensor> = template
            .named()
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        RAdam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Weights<Tensor>, grads: &Weights<Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bias2;
        // variance of the adaptive rate is tractable only once rho_t > 5
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });
        let lr = self.learning_rate;
        let eps = self.eps;

        let grads = grads.named();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            match rect {
                Some(r) => Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let denom = (v / bias2).sqrt() + eps;
                    *p -= lr * r * m_hat / denom;
                }),
                None => Zip::from(p).and(&*m).for_each(|p, &m| {
                    *p -= lr * m / bias1;
                }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn weights() -> Weights<Tensor> {
        let cfg = ModelConfig {
            encoder_hidden: 3,
            rnn_hidden: 2,
            ..ModelConfig::new(2, 2, 4, 2)
        };
        init_model(&cfg, &Array2::zeros((4, 2)), 0).unwrap().weights
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = weights().map(|_, t| Array2::from_elem(t.raw_dim(), 1.0));
        let before = clip_global_norm(&mut g, 2.0);
        assert!(before > 2.0);
        assert!((g.global_norm() - 2.0).abs() < 1e-12);

        let mut small = weights().map(|_, t| Array2::from_elem(t.raw_dim(), 1e-4));
        let copy = small.clone();
        clip_global_norm(&mut small, 2.0);
        assert_eq!(small, copy);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(p) = 0.5 * |p - 3|^2 on every coordinate
        let mut p = weights();
        let mut opt = RAdam::new(0.05, &p);
        for _ in 0..2000 {
            let g = p.map(|_, t| t.mapv(|x| x - 3.0));
            opt.step(&mut p, &g);
        }
        for (_, t) in p.named() {
            assert!(t.iter().all(|x| (x - 3.0).abs() < 1e-2), "{t}");
        }
    }

    #[test]
    fn early_steps_are_unrectified() {
        let mut p = weights();
        let before = p.clone();
        let mut opt = RAdam::new(0.1, &p);
        let g = p.map(|_, t| Array2::from_elem(t.raw_dim(), 2.0));
        opt.step(&mut p, &g);
        // first step: m_hat = g, update = lr * g
        let (a, b) = (&p.named()[0].1[[0, 0]], &before.named()[0].1[[0, 0]]);
        assert!((b - a - 0.2).abs() < 1e-12);
    }
}
