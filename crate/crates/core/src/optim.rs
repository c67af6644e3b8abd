//! AdamW with decoupled weight decay, global-norm gradient clipping and the
//! polynomial learning-rate schedule.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` is the gradient of parameter `i` or `None`
    /// when the parameter was unused this step (it still decays).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            // decoupled decay acts on the weights, not through the moments
            if self.weight_decay > 0.0 {
                let f = 1.0 - lr * self.weight_decay;
                p.iter_mut().for_each(|x| *x *= f);
            }
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// `base_lr * (1 - iteration / max_iterations)^power`, clamped to the run.
pub fn poly_lr(iteration: usize, max_iterations: usize, base_lr: f64, power: f64) -> f64 {
    if max_iterations == 0 {
        return base_lr;
    }
    let frac = (iteration.min(max_iterations) as f64) / max_iterations as f64;
    base_lr * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 3e-4, 0.9), 3e-4);
        assert_eq!(poly_lr(100, 100, 3e-4, 0.9), 0.0);
        let mid = poly_lr(50, 100, 3e-4, 0.9) / 3e-4;
        assert!((mid - 0.535_886_731_268_146).abs() < 1e-9, "{mid}");
    }

    #[test]
    fn poly_lr_is_monotone() {
        let lrs: Vec<f64> = (0..=200).map(|i| poly_lr(i, 200, 1.0, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: only the decay term moves the weight
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 2.0));
        let mut opt = AdamW::new(&store, 0.1);
        opt.update(&mut store, &[Some(vec![0.0, 0.0])], 0.5);
        assert_eq!(store.get(id).data(), &[2.0 * 0.95, 2.0 * 0.95]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 1.0));
        let mut opt = AdamW::new(&store, 0.0);
        opt.update(&mut store, &[Some(vec![3.0])], 0.01);
        assert!((store.get(id).data()[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let g0 = g[0].as_ref().unwrap();
        assert!(((g0[0] * g0[0] + g0[1] * g0[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
