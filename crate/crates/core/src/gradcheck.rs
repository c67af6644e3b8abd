//! Central finite-difference checker for tape gradients.
//!
//! The reference derivative is computed purely from forward evaluations, so
//! it stays independent of every hand-written backward rule it audits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Relative errors below this magnitude floor are measured absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (input, element, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.coords_checked > 0 && self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the tape gradient of `Σ R ⊙ build(inputs)` (with a fixed random
/// `R`) against central differences at up to `coords` random coordinates.
pub fn check_input_gradient(
    inputs: &[Tensor],
    step: f64,
    coords: usize,
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = Tensor::from_fn(g.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    let loss = g.weighted_sum(out, &weights).expect("weights match output");
    g.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if total > coords {
        // partial Fisher-Yates: the first `coords` entries are a uniform sample
        for k in 0..coords {
            let j = rng.random_range(k..all.len());
            all.swap(k, j);
        }
        all.truncate(coords);
    }

    let mut report = GradCheck {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (i, j) in all {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let up = eval(&work);
        work[i].data_mut()[j] = orig - step;
        let down = eval(&work);
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i][j];
        let e = rel_err(a, numeric);
        report.coords_checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((i, j, a, numeric));
        }
    }
    report
}
