//! Fast invariant suite behind `ssmdg self-test`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment_gva::{Gva, GvaConfig, PARAM_BUDGET};
use crate::augment_lsa::{lsa_block_with_noise, sequence_mask, window_len, DirectionNoise, SubSequenceMask};
use crate::error::Result;
use crate::gradcheck::check_input_gradient;
use crate::metrics::{average_surface_distance, average_surface_distance_brute_force, dice_coefficient, BinaryMask};
use crate::params::ParamStore;
use crate::ssm_core::{causal_convolution, global_conv_kernel, selective_scan, SequenceBatch, SsmParams};
use crate::tensor::Tensor;

/// Deliberate mutations used to confirm the suite catches broken logic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Window of `floor(p·L) + 1` tokens instead of `round(p·L)`.
    MaskCardinality,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mask-cardinality" => Ok(Fault::MaskCardinality),
            _ => Err(format!("unknown fault `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_self_test(fault: Option<Fault>) -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn(Option<Fault>) -> Result<std::result::Result<String, String>>); 6] = [
        ("recurrence-convolution equivalence", recurrence_vs_convolution),
        ("scan gradient", scan_gradient),
        ("lsa identity", lsa_identity),
        ("mask cardinality", mask_cardinality),
        ("gva gating", gva_gating),
        ("metric oracles", metric_oracles),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f(fault) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

type Check = Result<std::result::Result<String, String>>;

fn recurrence_vs_convolution(_: Option<Fault>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (d, n, l) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=32));
        let a_log = Tensor::from_fn(&[d, n], |_| rng.random_range(-1.0..1.5));
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.5)).collect();
        let params = SsmParams::time_invariant(a_log.clone(), &b, &c, &delta)?;
        let u = SequenceBatch::native(Tensor::from_fn(&[2, d, l], |_| rng.random_range(-1.0..1.0)))?;
        let rec = selective_scan(&u, &params)?;
        let conv = causal_convolution(&u, &global_conv_kernel(&a_log, &b, &c, &delta, l)?)?;
        worst = worst.max(rec.data.rel_diff(&conv.data));
    }
    Ok(if worst <= 1e-5 { Ok(format!("max relative error {worst:.2e}")) } else { Err(format!("relative error {worst:.2e} > 1e-5")) })
}

fn scan_gradient(_: Option<Fault>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (b, l, d, n) = (1, 6, 3, 2);
    let inputs = vec![
        Tensor::from_fn(&[b, l, d], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(&[b, l, d], |_| rng.random_range(0.05..0.5)),
        Tensor::from_fn(&[d, n], |_| rng.random_range(-0.5..1.0)),
        Tensor::from_fn(&[b, l, n], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(&[b, l, n], |_| rng.random_range(-1.0..1.0)),
    ];
    let r = check_input_gradient(&inputs, 1e-6, 30, 3, |g, v| {
        g.selective_scan(v[0], v[1], v[2], v[3], v[4], None).expect("valid shapes")
    });
    Ok(if r.passed(1e-4) { Ok(format!("max relative error {:.2e}", r.max_rel_err)) } else { Err(format!("{r:?}")) })
}

fn lsa_identity(_: Option<Fault>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, d, h, w) = (3, 4, 3, 4);
    let params = SsmParams::init(d, 3, true, &mut rng);
    let x = Tensor::from_fn(&[b, d, h, w], |_| rng.random_range(-2.0..2.0));
    let z = DirectionNoise::zeros(b, d, h * w, 0.75)?;
    let noise = [z.clone(), z.clone(), z.clone(), z];
    let train = lsa_block_with_noise(&x, &params, Some(&noise))?;
    let infer = lsa_block_with_noise(&x, &params, None)?;
    let e = train.rel_diff(&infer);
    Ok(if e <= 1e-12 { Ok(format!("relative difference {e:.2e}")) } else { Err(format!("relative difference {e:.2e} > 1e-12")) })
}

fn mutated_mask(len: usize, p: f64, j_start: usize) -> SubSequenceMask {
    let n = ((p * len as f64).floor() as usize + 1).min(len);
    let mut mask = vec![false; len];
    for k in 0..n {
        mask[(j_start - 1 + k) % len] = true;
    }
    SubSequenceMask { mask, p, j_start }
}

fn mask_cardinality(fault: Option<Fault>) -> Check {
    let mut cases = 0;
    for len in 1..=40 {
        for p in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
            for j in 1..=len {
                let m = match fault {
                    Some(Fault::MaskCardinality) => mutated_mask(len, p, j),
                    None => sequence_mask(len, p, j)?,
                };
                let want = window_len(len, p);
                if m.ones() != want {
                    return Ok(Err(format!("L={len} p={p} j={j}: {} ones, expected {want}", m.ones())));
                }
                let runs = (0..len).filter(|&i| m.mask[i] && !m.mask[(i + len - 1) % len]).count();
                if want > 0 && want < len && runs != 1 {
                    return Ok(Err(format!("L={len} p={p} j={j}: window is not contiguous")));
                }
                cases += 1;
            }
        }
    }
    Ok(Ok(format!("{cases} cases")))
}

fn gva_gating(_: Option<Fault>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = GvaConfig::default();
    let mut store = ParamStore::new();
    let gva = Gva::register(&cfg, &mut store, "gva", &mut rng)?;
    let count = store.num_scalars();
    if !PARAM_BUDGET.contains(&count) {
        return Ok(Err(format!("{count} parameters outside {PARAM_BUDGET:?}")));
    }
    let x = Tensor::from_fn(&[4, 3, 6, 6], |i| {
        let offset = if i / 108 % 2 == 0 { 0.6 } else { -0.6 };
        (offset + rng.random_range(-0.3..0.3f64)).clamp(-1.0, 1.0)
    });
    if gva.enhance_tensor(&store, &x)? != x {
        return Ok(Err("enhancement is not the identity at initialisation".into()));
    }
    for id in gva.param_ids() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let y = gva.forward_tensor(&store, &x, true)?;
    let bright = crate::augment_gva::mean_brightness(&x)?;
    let per = 3 * 36;
    for (i, &br) in bright.iter().enumerate() {
        let same = x.data()[i * per..(i + 1) * per] == y.data()[i * per..(i + 1) * per];
        if br >= cfg.tau && !same {
            return Ok(Err(format!("image {i} with brightness {br:.3} ≥ τ was modified")));
        }
        if br < cfg.tau && same {
            return Ok(Err(format!("image {i} with brightness {br:.3} < τ was not enhanced")));
        }
    }
    Ok(Ok(format!("{count} parameters")))
}

fn metric_oracles(_: Option<Fault>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let mk = |rng: &mut ChaCha8Rng| BinaryMask::new(&[16, 16], (0..256).map(|_| rng.random_bool(0.2)).collect());
        let (a, b) = (mk(&mut rng)?, mk(&mut rng)?);
        let [_, h, w] = a.shape();
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (p, q) = (a.get(0, y, x), b.get(0, y, x));
                inter += usize::from(p && q);
                na += usize::from(p);
                nb += usize::from(q);
            }
        }
        let oracle = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        if dice_coefficient(&a, &b)? != oracle {
            return Ok(Err("dice differs from the counting oracle".into()));
        }
        if !a.is_empty() && !b.is_empty() && average_surface_distance(&a, &b)? != average_surface_distance_brute_force(&a, &b)? {
            return Ok(Err("surface distance differs from the brute-force oracle".into()));
        }
    }
    Ok(Ok("20 random pairs".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_and_is_repeatable() {
        let a = run_self_test(None);
        assert!(a.iter().all(|c| c.passed), "{a:?}");
        assert_eq!(a, run_self_test(None));
    }

    #[test]
    fn injected_fault_is_named() {
        let r = run_self_test(Some(Fault::MaskCardinality));
        let failed: Vec<_> = r.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["mask cardinality"]);
    }
}
