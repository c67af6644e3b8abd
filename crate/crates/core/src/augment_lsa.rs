//! Local sequence-wise style augmentation.
//!
//! For every scan direction the post-scan sequence `f` (`[B, D, L]`) gets
//! per-instance channel statistics `(μ, σ)`, batch-level spreads of those
//! statistics, resampled statistics `β = μ + ε_μ Σ_μ`, `γ = σ + ε_σ Σ_σ`
//! and a restyled copy `β + (f - μ)/σ · γ`. A contiguous (cyclic) window of
//! `round(p·L)` tokens is taken from the restyled copy, the rest from `f`.
//! Masks and draws are independent per instance and per direction. Nothing
//! here is learnable, and inference never calls into this module.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Backward, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::ssm_core::{
    direction_index, scan_merge, transpose_last2, DirectionalBundle, FeatureMap, ScanDirection, SequenceBatch,
    SequenceLayout, SsmParams, SsmVars,
};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-instance, per-channel statistics over the sequence axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStats {
    /// `[B, D]`
    pub mu: Tensor,
    /// `[B, D]`, `sqrt(var + eps)` with the population variance.
    pub sigma: Tensor,
    pub eps: f64,
}

/// Batch-level standard deviations of the statistics, `[D]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUncertainty {
    pub sigma_mu: Tensor,
    pub sigma_sigma: Tensor,
}

/// One instance's token window.
#[derive(Clone, Debug, PartialEq)]
pub struct SubSequenceMask {
    pub mask: Vec<bool>,
    pub p: f64,
    /// One-based start of the window.
    pub j_start: usize,
}

impl SubSequenceMask {
    pub fn ones(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn channel_stats(f: &SequenceBatch, eps: f64) -> SequenceStats {
    let [b, d, l] = f.dims();
    let mut mu = vec![0.0; b * d];
    let mut sigma = vec![0.0; b * d];
    for (k, row) in f.data.data().chunks_exact(l.max(1)).enumerate().take(b * d) {
        let m = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / l as f64;
        mu[k] = m;
        sigma[k] = (var + eps).sqrt();
    }
    SequenceStats {
        mu: Tensor::new(&[b, d], mu).expect("sized"),
        sigma: Tensor::new(&[b, d], sigma).expect("sized"),
        eps,
    }
}

fn column_std(t: &Tensor) -> Tensor {
    let &[b, d] = t.shape() else {
        unreachable!("statistics are [B, D]")
    };
    let x = t.data();
    Tensor::from_fn(&[d], |j| {
        let m = (0..b).map(|i| x[i * d + j]).sum::<f64>() / b as f64;
        ((0..b).map(|i| (x[i * d + j] - m).powi(2)).sum::<f64>() / b as f64).sqrt()
    })
}

pub fn batch_uncertainty(stats: &SequenceStats) -> StatUncertainty {
    StatUncertainty {
        sigma_mu: column_std(&stats.mu),
        sigma_sigma: column_std(&stats.sigma),
    }
}

/// Resampled `(β, γ)`; `γ` is floored at `sqrt(eps)`.
pub fn resample_stats(
    stats: &SequenceStats,
    unc: &StatUncertainty,
    eps_mu: &Tensor,
    eps_sigma: &Tensor,
) -> Result<(Tensor, Tensor)> {
    stats.mu.check_same_shape(eps_mu, "eps_mu")?;
    stats.sigma.check_same_shape(eps_sigma, "eps_sigma")?;
    let &[_, d] = stats.mu.shape() else {
        return Err(Error::Shape("statistics must be [B, D]".into()));
    };
    let floor = stats.eps.sqrt();
    let beta = Tensor::from_fn(stats.mu.shape(), |k| {
        stats.mu.data()[k] + eps_mu.data()[k] * unc.sigma_mu.data()[k % d]
    });
    let gamma = Tensor::from_fn(stats.sigma.shape(), |k| {
        (stats.sigma.data()[k] + eps_sigma.data()[k] * unc.sigma_sigma.data()[k % d]).max(floor)
    });
    Ok((beta, gamma))
}

/// `β + (f - μ)/σ · γ`, broadcast over the sequence axis.
pub fn style_transform(f: &SequenceBatch, stats: &SequenceStats, beta: &Tensor, gamma: &Tensor) -> Result<SequenceBatch> {
    let [b, d, l] = f.dims();
    for t in [&stats.mu, &stats.sigma, beta, gamma] {
        if t.shape() != [b, d] {
            return Err(Error::Shape(format!("statistic {:?} for sequences [{b}, {d}, {l}]", t.shape())));
        }
    }
    let mut out = f.data.clone();
    for (k, row) in out.data_mut().chunks_exact_mut(l.max(1)).enumerate().take(b * d) {
        let (m, s) = (stats.mu.data()[k], stats.sigma.data()[k]);
        let (be, ga) = (beta.data()[k], gamma.data()[k]);
        for v in row {
            *v = be + (*v - m) / s * ga;
        }
    }
    SequenceBatch::new(out, f.layout)
}

/// Window length used for proportion `p` of `len` tokens.
pub fn window_len(len: usize, p: f64) -> usize {
    ((p * len as f64).round() as usize).min(len)
}

/// Cyclic window of `round(p·L)` ones starting at one-based `j_start`.
pub fn sequence_mask(len: usize, p: f64, j_start: usize) -> Result<SubSequenceMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("mask proportion {p} outside [0, 1]")));
    }
    if len == 0 || j_start == 0 || j_start > len {
        return Err(Error::InvalidArgument(format!("window start {j_start} outside [1, {len}]")));
    }
    let mut mask = vec![false; len];
    for k in 0..window_len(len, p) {
        mask[(j_start - 1 + k) % len] = true;
    }
    Ok(SubSequenceMask { mask, p, j_start })
}

/// `f_aug` inside each instance's window, `f` outside (copied, not blended).
pub fn lsa_mixup(f: &SequenceBatch, f_aug: &SequenceBatch, masks: &[SubSequenceMask]) -> Result<SequenceBatch> {
    f.data.check_same_shape(&f_aug.data, "lsa_mixup")?;
    let [b, d, l] = f.dims();
    if masks.len() != b || masks.iter().any(|m| m.mask.len() != l) {
        return Err(Error::Shape(format!("need {b} masks of length {l}")));
    }
    let mut out = f.data.clone();
    let src = f_aug.data.data();
    for (bi, m) in masks.iter().enumerate() {
        for di in 0..d {
            let base = (bi * d + di) * l;
            for (j, &on) in m.mask.iter().enumerate() {
                if on {
                    out.data_mut()[base + j] = src[base + j];
                }
            }
        }
    }
    SequenceBatch::new(out, f.layout)
}

/// Random draws for one direction of one block call.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionNoise {
    /// `[B, D]` standard-normal draws.
    pub eps_mu: Tensor,
    pub eps_sigma: Tensor,
    pub masks: Vec<SubSequenceMask>,
}

impl DirectionNoise {
    pub fn sample(b: usize, d: usize, l: usize, p: f64, rng: &mut impl Rng) -> Result<Self> {
        let eps_mu = Tensor::from_fn(&[b, d], |_| rng.sample(StandardNormal));
        let eps_sigma = Tensor::from_fn(&[b, d], |_| rng.sample(StandardNormal));
        let masks = (0..b)
            .map(|_| sequence_mask(l, p, rng.random_range(1..=l)))
            .collect::<Result<_>>()?;
        Ok(Self {
            eps_mu,
            eps_sigma,
            masks,
        })
    }

    /// Zero draws with the window fixed at the start.
    pub fn zeros(b: usize, d: usize, l: usize, p: f64) -> Result<Self> {
        Ok(Self {
            eps_mu: Tensor::zeros(&[b, d]),
            eps_sigma: Tensor::zeros(&[b, d]),
            masks: (0..b).map(|_| sequence_mask(l, p, 1)).collect::<Result<_>>()?,
        })
    }
}

/// Draws for the four directions of one block call.
pub fn sample_block_noise(b: usize, d: usize, l: usize, p: f64, rng: &mut impl Rng) -> Result<[DirectionNoise; 4]> {
    Ok([
        DirectionNoise::sample(b, d, l, p, rng)?,
        DirectionNoise::sample(b, d, l, p, rng)?,
        DirectionNoise::sample(b, d, l, p, rng)?,
        DirectionNoise::sample(b, d, l, p, rng)?,
    ])
}

/// Restyles and mixes one channel-major batch in a single pass.
pub fn style_mix(f: &SequenceBatch, noise: &DirectionNoise, eps: f64) -> Result<SequenceBatch> {
    let stats = channel_stats(f, eps);
    let unc = batch_uncertainty(&stats);
    let (beta, gamma) = resample_stats(&stats, &unc, &noise.eps_mu, &noise.eps_sigma)?;
    let aug = style_transform(f, &stats, &beta, &gamma)?;
    lsa_mixup(f, &aug, &noise.masks)
}

struct StyleMixOp {
    src: Var,
    /// Channel-major copy of the input.
    f: Tensor,
    stats: SequenceStats,
    unc: StatUncertainty,
    gamma: Tensor,
    noise: DirectionNoise,
}

impl Backward for StyleMixOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        let [b, d, l] = self.f.dims3().expect("rank 3");
        let go = transpose_last2(&Tensor::new(&[b, l, d], grad.to_vec()).expect("sized"));
        let (go, f) = (go.data(), self.f.data());
        let (mu, sigma) = (self.stats.mu.data(), self.stats.sigma.data());
        let gamma = self.gamma.data();
        let floor = self.stats.eps.sqrt();
        let mut gf = vec![0.0; f.len()];
        let mut g_mu = vec![0.0; b * d];
        let mut g_sigma = vec![0.0; b * d];
        let mut g_smu = vec![0.0; d];
        let mut g_ssig = vec![0.0; d];

        for bi in 0..b {
            let mask = &self.noise.masks[bi].mask;
            for di in 0..d {
                let k = bi * d + di;
                let base = k * l;
                let r = gamma[k] / sigma[k];
                let (mut g_beta, mut g_gamma) = (0.0, 0.0);
                for j in 0..l {
                    let g = go[base + j];
                    if mask[j] {
                        let c = f[base + j] - mu[k];
                        gf[base + j] += g * r;
                        g_mu[k] -= g * r;
                        g_sigma[k] -= g * c * gamma[k] / (sigma[k] * sigma[k]);
                        g_beta += g;
                        g_gamma += g * c / sigma[k];
                    } else {
                        gf[base + j] += g;
                    }
                }
                g_mu[k] += g_beta;
                g_smu[di] += g_beta * self.noise.eps_mu.data()[k];
                let raw = sigma[k] + self.noise.eps_sigma.data()[k] * self.unc.sigma_sigma.data()[di];
                if raw > floor {
                    g_sigma[k] += g_gamma;
                    g_ssig[di] += g_gamma * self.noise.eps_sigma.data()[k];
                }
            }
        }
        // spreads: d sqrt(mean_b (x_b - x̄)^2) / d x_b = (x_b - x̄) / (B s)
        for di in 0..d {
            let s_mu = self.unc.sigma_mu.data()[di];
            let s_sig = self.unc.sigma_sigma.data()[di];
            let mean_mu = (0..b).map(|i| mu[i * d + di]).sum::<f64>() / b as f64;
            let mean_sig = (0..b).map(|i| sigma[i * d + di]).sum::<f64>() / b as f64;
            for bi in 0..b {
                let k = bi * d + di;
                if s_mu > 0.0 {
                    g_mu[k] += g_smu[di] * (mu[k] - mean_mu) / (b as f64 * s_mu);
                }
                if s_sig > 0.0 {
                    g_sigma[k] += g_ssig[di] * (sigma[k] - mean_sig) / (b as f64 * s_sig);
                }
            }
        }
        for k in 0..b * d {
            let base = k * l;
            for j in 0..l {
                gf[base + j] += g_mu[k] / l as f64 + g_sigma[k] * (f[base + j] - mu[k]) / (l as f64 * sigma[k]);
            }
        }
        let gf = transpose_last2(&Tensor::new(&[b, d, l], gf).expect("sized"));
        sink.accumulate_owned(self.src, gf.into_data());
    }
}

impl Graph {
    /// Style augmentation of token-major sequences `[B, L, D]`.
    pub fn style_mix(&mut self, src: Var, noise: &DirectionNoise, eps: f64) -> Result<Var> {
        let [b, l, d] = self.value(src).dims3()?;
        if noise.eps_mu.shape() != [b, d] || noise.masks.len() != b {
            return Err(Error::Shape("style noise does not match the batch".into()));
        }
        let f = SequenceBatch::native(transpose_last2(self.value(src)))?;
        let stats = channel_stats(&f, eps);
        let unc = batch_uncertainty(&stats);
        let (beta, gamma) = resample_stats(&stats, &unc, &noise.eps_mu, &noise.eps_sigma)?;
        let aug = style_transform(&f, &stats, &beta, &gamma)?;
        let mixed = lsa_mixup(&f, &aug, &noise.masks)?;
        let out = transpose_last2(&mixed.data);
        debug_assert_eq!(out.shape(), [b, l, d]);
        Ok(self.push(
            out,
            StyleMixOp {
                src,
                f: f.data,
                stats,
                unc,
                gamma,
                noise: noise.clone(),
            },
            &[src],
        ))
    }

    /// Per-direction sequences after scan (and augmentation when `noise`
    /// is given), each in its own traversal order. `x` is token-major
    /// `[B, H·W, D]` over a row-major `h × w` grid.
    pub fn lsa_directional(
        &mut self,
        x: Var,
        ssm: &SsmVars,
        h: usize,
        w: usize,
        noise: Option<&[DirectionNoise; 4]>,
        eps: f64,
    ) -> Result<[Var; 4]> {
        let [b, l, d] = self.value(x).dims3()?;
        if l != h * w {
            return Err(Error::Shape(format!("sequence length {l} is not {h}×{w}")));
        }
        let mut outs = Vec::with_capacity(4);
        for (k, dir) in ScanDirection::ALL.into_iter().enumerate() {
            let seq = self.gather(x, direction_index(b, h, w, d, dir, false), &[b, l, d])?;
            let mut y = self.ssm(seq, ssm)?;
            if let Some(noise) = noise {
                y = self.style_mix(y, &noise[k], eps)?;
            }
            outs.push(y);
        }
        Ok(outs.try_into().expect("four directions"))
    }

    /// Expand → scan → (augment) → merge on token-major `[B, H·W, D]`.
    pub fn lsa_block(
        &mut self,
        x: Var,
        ssm: &SsmVars,
        h: usize,
        w: usize,
        noise: Option<&[DirectionNoise; 4]>,
        eps: f64,
    ) -> Result<Var> {
        let [b, l, d] = self.value(x).dims3()?;
        let dirs = self.lsa_directional(x, ssm, h, w, noise, eps)?;
        let mut back = Vec::with_capacity(4);
        for (y, dir) in dirs.into_iter().zip(ScanDirection::ALL) {
            back.push(self.gather(y, direction_index(b, h, w, d, dir, true), &[b, l, d])?);
        }
        self.add_n(&back)
    }
}

/// Feature-map level block `[B, D, H, W] → [B, D, H, W]`. With
/// `training == false` this is the plain four-direction scan.
pub fn lsa_block_forward(
    x: &FeatureMap,
    params: &SsmParams,
    p: f64,
    rng: &mut impl Rng,
    training: bool,
) -> Result<FeatureMap> {
    let [b, d, h, w] = x.dims4()?;
    let noise = if training {
        Some(sample_block_noise(b, d, h * w, p, rng)?)
    } else {
        None
    };
    lsa_block_with_noise(x, params, noise.as_ref())
}

/// As [`lsa_block_forward`] with explicit draws (`None` = inference).
pub fn lsa_block_with_noise(x: &FeatureMap, params: &SsmParams, noise: Option<&[DirectionNoise; 4]>) -> Result<FeatureMap> {
    let [b, d, h, w] = x.dims4()?;
    let tokens = transpose_last2(&x.clone().reshape(&[b, d, h * w])?);
    let mut g = Graph::inference();
    let xv = g.constant(tokens);
    let p = params.to_vars(&mut g, false);
    let y = g.lsa_block(xv, &p, h, w, noise, DEFAULT_EPS)?;
    transpose_last2(g.value(y)).reshape(&[b, d, h, w])
}

/// Plain-tensor reference of the same block built from the public
/// expand / scan / style / merge operations.
pub fn lsa_block_reference(x: &FeatureMap, params: &SsmParams, noise: Option<&[DirectionNoise; 4]>) -> Result<FeatureMap> {
    let [_, _, h, w] = x.dims4()?;
    let bundle = crate::ssm_core::scan_expand(x)?;
    let mut seqs = Vec::with_capacity(4);
    for (k, s) in bundle.sequences.iter().enumerate() {
        let y = crate::ssm_core::selective_scan(s, params)?;
        let y = match noise {
            Some(n) => style_mix(&y, &n[k], DEFAULT_EPS)?,
            None => y,
        };
        debug_assert!(matches!(y.layout, SequenceLayout::Direction(_)));
        seqs.push(y);
    }
    let bundle = DirectionalBundle {
        sequences: seqs.try_into().expect("four directions"),
    };
    scan_merge(&bundle, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(b: usize, d: usize, l: usize, f: impl FnMut(usize) -> f64) -> SequenceBatch {
        SequenceBatch::native(Tensor::from_fn(&[b, d, l], f)).unwrap()
    }

    #[test]
    fn constant_sequence_stats() {
        let s = channel_stats(&seq(1, 1, 5, |_| 3.0), 1e-6);
        assert_eq!(s.mu.data(), &[3.0]);
        assert!((s.sigma.data()[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn two_value_stats() {
        let s = channel_stats(&seq(1, 1, 2, |i| 2.0 * i as f64), 1e-6);
        assert_eq!(s.mu.data(), &[1.0]);
        assert!((s.sigma.data()[0] - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_cases() {
        let s = channel_stats(&seq(1, 3, 4, |i| i as f64), 1e-6);
        let u = batch_uncertainty(&s);
        assert!(u.sigma_mu.data().iter().chain(u.sigma_sigma.data()).all(|&v| v == 0.0));

        let s = SequenceStats {
            mu: Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap(),
            sigma: Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap(),
            eps: 1e-6,
        };
        let u = batch_uncertainty(&s);
        assert_eq!(u.sigma_mu.data(), &[1.0]);
        assert_eq!(u.sigma_sigma.data(), &[0.0]);
    }

    #[test]
    fn resample_substitution() {
        let s = SequenceStats {
            mu: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            sigma: Tensor::new(&[1, 1], vec![0.5]).unwrap(),
            eps: 1e-6,
        };
        let u = StatUncertainty {
            sigma_mu: Tensor::new(&[1], vec![2.0]).unwrap(),
            sigma_sigma: Tensor::new(&[1], vec![0.0]).unwrap(),
        };
        let e = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let (beta, gamma) = resample_stats(&s, &u, &e, &e).unwrap();
        assert_eq!(beta.data(), &[2.0]);
        assert_eq!(gamma.data(), &[0.5]);
        let zero = Tensor::zeros(&[1, 1]);
        let (beta, gamma) = resample_stats(&s, &u, &zero, &zero).unwrap();
        assert_eq!((beta.data()[0], gamma.data()[0]), (1.0, 0.5));
    }

    #[test]
    fn gamma_is_floored() {
        let s = SequenceStats {
            mu: Tensor::new(&[1, 1], vec![0.0]).unwrap(),
            sigma: Tensor::new(&[1, 1], vec![0.1]).unwrap(),
            eps: 1e-6,
        };
        let u = StatUncertainty {
            sigma_mu: Tensor::new(&[1], vec![0.0]).unwrap(),
            sigma_sigma: Tensor::new(&[1], vec![1.0]).unwrap(),
        };
        let (_, gamma) = resample_stats(&s, &u, &Tensor::zeros(&[1, 1]), &Tensor::full(&[1, 1], -5.0)).unwrap();
        assert_eq!(gamma.data(), &[1e-3]);
    }

    #[test]
    fn style_transform_hand_values() {
        let f = seq(1, 1, 2, |i| 2.0 * i as f64);
        let stats = SequenceStats {
            mu: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            sigma: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            eps: 0.0,
        };
        let out = style_transform(&f, &stats, &Tensor::new(&[1, 1], vec![5.0]).unwrap(), &Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(out.data.data(), &[2.0, 8.0]);
    }

    #[test]
    fn style_transform_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = seq(2, 3, 6, |_| rng.random_range(-2.0..2.0));
        let s = channel_stats(&f, 1e-6);
        let out = style_transform(&f, &s, &s.mu, &s.sigma).unwrap();
        assert!(out.data.max_abs_diff(&f.data) < 1e-12);

        let c = seq(1, 1, 4, |_| 0.7);
        let s = channel_stats(&c, 1e-6);
        let beta = Tensor::new(&[1, 1], vec![-3.0]).unwrap();
        let out = style_transform(&c, &s, &beta, &Tensor::new(&[1, 1], vec![9.0]).unwrap()).unwrap();
        assert!(out.data.data().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn mask_examples() {
        assert_eq!(sequence_mask(8, 0.0, 3).unwrap().ones(), 0);
        for j in 1..=8 {
            assert!(sequence_mask(8, 1.0, j).unwrap().mask.iter().all(|&m| m));
        }
        let m = sequence_mask(8, 0.75, 2).unwrap();
        let on: Vec<usize> = (0..8).filter(|&j| m.mask[j]).map(|j| j + 1).collect();
        assert_eq!(on, vec![2, 3, 4, 5, 6, 7]);
        // wraps around the end
        let m = sequence_mask(8, 0.5, 7).unwrap();
        let on: Vec<usize> = (0..8).filter(|&j| m.mask[j]).map(|j| j + 1).collect();
        assert_eq!(on, vec![1, 2, 7, 8]);
    }

    #[test]
    fn mask_rejects_bad_arguments() {
        assert!(sequence_mask(8, 1.5, 1).is_err());
        assert!(sequence_mask(8, 0.5, 0).is_err());
        assert!(sequence_mask(8, 0.5, 9).is_err());
    }

    #[test]
    fn mixup_positions() {
        let f = seq(1, 2, 4, |i| i as f64);
        let a = seq(1, 2, 4, |i| 100.0 + i as f64);
        let none = SubSequenceMask { mask: vec![false; 4], p: 0.0, j_start: 1 };
        assert_eq!(lsa_mixup(&f, &a, &[none]).unwrap().data, f.data);
        let all = SubSequenceMask { mask: vec![true; 4], p: 1.0, j_start: 1 };
        assert_eq!(lsa_mixup(&f, &a, &[all]).unwrap().data, a.data);
        let half = sequence_mask(4, 0.5, 1).unwrap();
        let out = lsa_mixup(&f, &a, &[half]).unwrap();
        for d in 0..2 {
            for j in 0..4 {
                let want = if j < 2 { a.data.data()[d * 4 + j] } else { f.data.data()[d * 4 + j] };
                assert_eq!(out.data.data()[d * 4 + j], want);
            }
        }
        assert!(lsa_mixup(&f, &a, &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn restyled_stats_match_targets(seed in 0u64..1000, b in 1usize..4, d in 1usize..4, l in 4usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = seq(b, d, l, |_| rng.random_range(-3.0..3.0));
            let s = channel_stats(&f, 1e-6);
            let beta = Tensor::from_fn(&[b, d], |_| rng.random_range(-2.0..2.0));
            let gamma = Tensor::from_fn(&[b, d], |_| rng.random_range(0.1..2.0));
            let out = style_transform(&f, &s, &beta, &gamma).unwrap();
            let s2 = channel_stats(&out, 0.0);
            proptest::prop_assert!(s2.mu.max_abs_diff(&beta) < 1e-10);
            for k in 0..b * d {
                // σ carries the ε floor, so the restyled spread is γ·sqrt(var/(var+ε))
                let var = s.sigma.data()[k].powi(2) - 1e-6;
                let want = gamma.data()[k] * (var / (var + 1e-6)).sqrt();
                proptest::prop_assert!((s2.sigma.data()[k] - want).abs() < 1e-9);
            }
        }

        #[test]
        fn stats_are_permutation_invariant(seed in 0u64..1000, l in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = seq(1, 2, l, |_| rng.random_range(-3.0..3.0));
            let mut perm: Vec<usize> = (0..l).collect();
            for i in (1..l).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let g = seq(1, 2, l, |i| f.data.data()[(i / l) * l + perm[i % l]]);
            let (a, b) = (channel_stats(&f, 1e-6), channel_stats(&g, 1e-6));
            proptest::prop_assert!(a.mu.max_abs_diff(&b.mu) < 1e-12);
            proptest::prop_assert!(a.sigma.max_abs_diff(&b.sigma) < 1e-12);
        }
    }
}
