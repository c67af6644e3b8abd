//! Segmentation objective: cross-entropy and Dice on the original and
//! enhanced branches, a mean-squared consistency term between the two
//! branch predictions, and their λ-weighted total.
//!
//! All losses take per-class probabilities `ŷ ∈ (0, 1)` and binary targets
//! of the same shape `[B, K, H, W]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Named scalar losses for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce_o: f64,
    pub dice_o: f64,
    pub ce_e: f64,
    pub dice_e: f64,
    pub consist: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.ce_o, self.dice_o, self.ce_e, self.dice_e, self.consist, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `total = ce_o + dice_o + ce_e + dice_e + λ·consist`.
pub fn total_loss(ce_o: f64, dice_o: f64, ce_e: f64, dice_e: f64, consist: f64, lambda: f64) -> Result<LossBundle> {
    let parts = [ce_o, dice_o, ce_e, dice_e, consist, lambda];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss part in {parts:?}")));
    }
    Ok(LossBundle {
        ce_o,
        dice_o,
        ce_e,
        dice_e,
        consist,
        total: ce_o + dice_o + ce_e + dice_e + lambda * consist,
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn ce_value(pred: &[f64], target: &[f64]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / pred.len() as f64
}

/// Per-class sums `(Σŷy, Σŷ + Σy)` over batch and pixels.
fn dice_sums(pred: &Tensor, target: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [b, k, h, w] = pred.dims4()?;
    let hw = h * w;
    let (p, t) = (pred.data(), target.data());
    let mut sums = vec![(0.0, 0.0); k];
    for bi in 0..b {
        for (ki, s) in sums.iter_mut().enumerate() {
            let o = (bi * k + ki) * hw;
            for i in o..o + hw {
                s.0 += p[i] * t[i];
                s.1 += p[i] + t[i];
            }
        }
    }
    Ok(sums)
}

fn dice_value(sums: &[(f64, f64)]) -> f64 {
    sums.iter().map(|&(i, d)| 1.0 - 2.0 * i / (d + DICE_EPS)).sum::<f64>() / sums.len() as f64
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    pred.check_same_shape(target, "loss target")?;
    if pred.is_empty() {
        return Err(Error::Shape("loss on empty tensor".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy on clamped probabilities.
pub fn ce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(ce_value(pred.data(), target.data()))
}

/// Soft Dice loss, one ratio per class over the whole batch, averaged over classes.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(dice_value(&dice_sums(pred, target)?))
}

/// Mean of `(a − b)²` over all elements.
pub fn consistency_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

struct CeOp {
    pred: Var,
    target: Vec<f64>,
}

impl Backward for CeOp {
    // Gradient of the log terms evaluated at the clamped probability; it is
    // passed through the clamp so saturated wrong predictions keep learning.
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let p = values[self.pred.index()].data();
        let scale = grad[0] / p.len() as f64;
        let s = sink.slot(self.pred);
        for i in 0..p.len() {
            let q = clamp_prob(p[i]);
            let y = self.target[i];
            s[i] += scale * (-(y / q) + (1.0 - y) / (1.0 - q));
        }
    }
}

struct DiceOp {
    pred: Var,
    target: Tensor,
    sums: Vec<(f64, f64)>,
}

impl Backward for DiceOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let p = &values[self.pred.index()];
        let [b, k, h, w] = p.dims4().expect("checked in forward");
        let hw = h * w;
        let t = self.target.data();
        let s = sink.slot(self.pred);
        let scale = grad[0] / k as f64;
        for bi in 0..b {
            for ki in 0..k {
                let (inter, den) = self.sums[ki];
                let den = den + DICE_EPS;
                // d/dŷ [−2I/D] = −2y/D + 2I/D²
                let c0 = 2.0 * inter / (den * den);
                let c1 = 2.0 / den;
                let o = (bi * k + ki) * hw;
                for i in o..o + hw {
                    s[i] += scale * (c0 - c1 * t[i]);
                }
            }
        }
    }
}

struct MseOp(Var, Var);

impl Backward for MseOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let a = values[self.0.index()].data();
        let b = values[self.1.index()].data();
        let c = 2.0 * grad[0] / a.len() as f64;
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| c * (x - y)).collect();
        if sink.wants(self.0) {
            sink.accumulate(self.0, &d);
        }
        if sink.wants(self.1) {
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            sink.accumulate_owned(self.1, neg);
        }
    }
}

impl Graph {
    pub fn ce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        check_pair(p, target)?;
        let v = ce_value(p.data(), target.data());
        Ok(self.push(Tensor::scalar(v), CeOp { pred, target: target.data().to_vec() }, &[pred]))
    }

    pub fn dice_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        check_pair(p, target)?;
        let sums = dice_sums(p, target)?;
        let v = dice_value(&sums);
        Ok(self.push(Tensor::scalar(v), DiceOp { pred, target: target.clone(), sums }, &[pred]))
    }

    pub fn consistency_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = consistency_loss(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), MseOp(a, b), &[a, b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95))
    }

    fn random_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { 0.0 })
    }

    #[test]
    fn ce_reference_values() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!((ce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = ce_loss(&t, &t).unwrap();
        assert!(perfect > 0.0 && perfect < 1e-6);
        let inverted = t.map(|v| 1.0 - v);
        assert!((ce_loss(&inverted, &t).unwrap() - 16.118095650958317).abs() < 1e-6);
    }

    #[test]
    fn dice_reference_values() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(dice_loss(&t, &t).unwrap().abs() < 1e-6);
        let disjoint = t.map(|v| 1.0 - v);
        assert!((dice_loss(&disjoint, &t).unwrap() - 1.0).abs() < 1e-12);
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!((dice_loss(&half, &t).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn consistency_reference_values() {
        let a = Tensor::new(&[1, 1, 1, 2], vec![0.2, 0.8]).unwrap();
        let b = Tensor::new(&[1, 1, 1, 2], vec![0.4, 0.4]).unwrap();
        assert!((consistency_loss(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        let c = a.map(|v| v + 0.3);
        assert!((consistency_loss(&a, &c).unwrap() - 0.09).abs() < 1e-12);
        assert!(consistency_loss(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn total_reference_values() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.1).unwrap().total, 0.0);
        assert!((total_loss(0.0, 0.0, 0.0, 0.0, 1.0, 0.1).unwrap().total - 0.1).abs() < 1e-15);
        assert!((total_loss(0.5, 0.2, 0.5, 0.2, 1.0, 0.1).unwrap().total - 1.5).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn graph_values_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_probs(&[2, 2, 3, 3], &mut rng);
        let q = random_probs(&[2, 2, 3, 3], &mut rng);
        let t = random_mask(&[2, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (pv, qv) = (g.leaf(p.clone()), g.leaf(q.clone()));
        let ce = g.ce_loss(pv, &t).unwrap();
        let di = g.dice_loss(pv, &t).unwrap();
        let mse = g.consistency_loss(pv, qv).unwrap();
        assert_eq!(g.value(ce).item(), ce_loss(&p, &t).unwrap());
        assert_eq!(g.value(di).item(), dice_loss(&p, &t).unwrap());
        assert_eq!(g.value(mse).item(), consistency_loss(&p, &q).unwrap());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [2, 2, 4, 4];
        let t = random_mask(&shape, &mut rng);
        let inputs = vec![random_probs(&shape, &mut rng), random_probs(&shape, &mut rng)];
        let t1 = t.clone();
        let r = check_input_gradient(&inputs, 1e-6, 60, 2, move |g, v| {
            let a = g.ce_loss(v[0], &t1).unwrap();
            let b = g.dice_loss(v[0], &t1).unwrap();
            let c = g.consistency_loss(v[0], v[1]).unwrap();
            let s = g.add(a, b).unwrap();
            g.add(s, c).unwrap()
        });
        assert!(r.passed(1e-6), "{r:?}");
    }

    proptest! {
        #[test]
        fn consistency_is_symmetric_and_zero_iff_equal(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_probs(&[1, 2, 3, 3], &mut rng);
            let b = random_probs(&[1, 2, 3, 3], &mut rng);
            prop_assert_eq!(consistency_loss(&a, &b).unwrap(), consistency_loss(&b, &a).unwrap());
            prop_assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
            prop_assert!(consistency_loss(&a, &b).unwrap() > 0.0);
        }

        #[test]
        fn losses_stay_in_range(seed in 0u64..500, lambda in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.random::<f64>());
            let t = random_mask(&[2, 2, 3, 3], &mut rng);
            let d = dice_loss(&p, &t).unwrap();
            prop_assert!((0.0..=1.0 + 1e-6).contains(&d));
            let ce = ce_loss(&p, &t).unwrap();
            prop_assert!(ce >= 0.0 && ce <= -(PROB_CLAMP.ln()) + 1e-9);
            let b0 = total_loss(ce, d, ce, d, 0.3, 0.0).unwrap();
            let b1 = total_loss(ce, d, ce, d, 0.3, lambda).unwrap();
            prop_assert!((b1.total - b0.total - lambda * 0.3).abs() < 1e-12);
        }
    }
}
