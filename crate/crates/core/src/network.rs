//! Encoder–decoder segmentation network built from visual state-space
//! blocks whose four-direction scan carries the local style augmentation
//! during training.
//!
//! ```text
//! image [B,Cin,H,W] ─ patchify+linear+LN ─ enc stage 0 ─ merge ─ … ─ enc stage S-1
//!                                              │skip                      │
//!                         dec stage 0 ─ + ─ linear ─ up×2 ─ … ─────────────┘
//!                              │
//!      LN ─ linear(C0 → p²·Ch) ─ pixel shuffle ─ SiLU ─ linear(Ch → K) ─ logits [B,K,H,W]
//! ```
//!
//! Block (pre-norm residual):
//! `x + out_proj(LN(lsa(SiLU(dwconv(in_x)))) ⊙ SiLU(in_z))`, `[in_x, in_z] = in_proj(LN(x))`.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment_lsa::{sample_block_noise, DirectionNoise};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{sigmoid, Activation};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::ssm_core::{SsmParamIds, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Blocks per encoder stage; the decoder mirrors all but the last.
    pub depths: Vec<usize>,
    /// Channel width per stage, strictly increasing.
    pub dims: Vec<usize>,
    pub n_state: usize,
    pub patch_size: usize,
    /// Inner width of a block is `expand · dim`.
    pub expand: usize,
    /// Width of the full-resolution head features.
    pub head_channels: usize,
    /// Direct feedthrough `d ⊙ u` in the scan.
    pub d_skip: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            n_classes: 2,
            depths: vec![2, 2],
            dims: vec![16, 32],
            n_state: 8,
            patch_size: 4,
            expand: 2,
            head_channels: 8,
            d_skip: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.dims.len() {
            return bad("network.depths and network.dims need the same non-zero length".into());
        }
        if self.dims.windows(2).any(|w| w[1] <= w[0]) || self.dims[0] == 0 {
            return bad(format!("network.dims {:?} must be positive and strictly increasing", self.dims));
        }
        if self.n_state == 0 || self.patch_size == 0 || self.expand == 0 || self.n_classes == 0 || self.in_channels == 0 || self.head_channels == 0 {
            return bad("network sizes must be positive".into());
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.patch_size << (self.dims.len() - 1)
    }
}

/// Where and how strongly the sequence style augmentation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsaConfig {
    /// Proportion of each sequence that is restyled.
    pub p: f64,
    pub eps: f64,
    pub encoder: bool,
    pub decoder: bool,
}

impl Default for LsaConfig {
    fn default() -> Self {
        Self {
            p: 0.75,
            eps: crate::augment_lsa::DEFAULT_EPS,
            encoder: true,
            decoder: true,
        }
    }
}

impl LsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("lsa.p = {} must lie in [0, 1]", self.p)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("lsa.eps must be positive".into()));
        }
        Ok(())
    }
}

/// How LSA draws are produced in a training forward pass.
pub enum NoiseSource<'a> {
    Random(&'a mut ChaCha8Rng),
    /// All ε = 0 (the augmentation becomes an identity).
    Zero,
}

/// Training-time augmentation context; `None` in `forward` means inference.
pub struct LsaRuntime<'a> {
    pub cfg: &'a LsaConfig,
    pub noise: NoiseSource<'a>,
}

impl LsaRuntime<'_> {
    fn draw(&mut self, b: usize, d: usize, l: usize) -> Result<[DirectionNoise; 4]> {
        match &mut self.noise {
            NoiseSource::Random(rng) => sample_block_noise(b, d, l, self.cfg.p, *rng),
            NoiseSource::Zero => {
                let z = DirectionNoise::zeros(b, d, l, self.cfg.p)?;
                Ok([z.clone(), z.clone(), z.clone(), z])
            }
        }
    }
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

impl LinearIds {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), fan_in_uniform(&[fan_out, fan_in], fan_in, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

impl NormIds {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (a, b) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, a, b, 1e-5)
    }
}

#[derive(Clone, Debug)]
struct VssBlock {
    norm: NormIds,
    in_proj: LinearIds,
    dw_w: ParamId,
    dw_b: ParamId,
    ssm: SsmParamIds,
    out_norm: NormIds,
    out_proj: LinearIds,
    inner: usize,
}

impl VssBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &NetworkConfig, rng: &mut impl Rng) -> Self {
        let inner = cfg.expand * dim;
        Self {
            norm: NormIds::new(store, &format!("{name}.norm"), dim),
            in_proj: LinearIds::new(store, &format!("{name}.in_proj"), dim, 2 * inner, rng),
            dw_w: store.add(format!("{name}.dwconv.weight"), fan_in_uniform(&[3, 3, inner], 9, rng)),
            dw_b: store.add(format!("{name}.dwconv.bias"), Tensor::zeros(&[inner])),
            ssm: SsmParams::init(inner, cfg.n_state, cfg.d_skip, rng).register(store, &format!("{name}.ssm")),
            out_norm: NormIds::new(store, &format!("{name}.out_norm"), inner),
            out_proj: LinearIds::new(store, &format!("{name}.out_proj"), inner, dim, rng),
            inner,
        }
    }

    /// `x`: `[B, h·w, C]`.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        (h, w): (usize, usize),
        lsa: Option<&mut LsaRuntime<'_>>,
    ) -> Result<Var> {
        let [b, l, _] = g.value(x).dims3()?;
        let e = self.inner;
        let y = self.norm.apply(g, store, x)?;
        let xz = self.in_proj.apply(g, store, y)?;
        let xs = g.gather(xz, split_index(b * l, 2 * e, 0, e), &[b, l, e])?;
        let z = g.gather(xz, split_index(b * l, 2 * e, e, e), &[b, l, e])?;
        let xs = g.reshape(xs, &[b, h, w, e])?;
        let (dw, db) = (g.param(store, self.dw_w), g.param(store, self.dw_b));
        let xs = g.dwconv3x3(xs, dw, db)?;
        let xs = g.reshape(xs, &[b, l, e])?;
        let xs = g.activation(xs, Activation::Silu);
        let ssm = self.ssm.vars(g, store);
        let (noise, eps) = match lsa {
            Some(rt) => (Some(rt.draw(b, e, l)?), rt.cfg.eps),
            None => (None, crate::augment_lsa::DEFAULT_EPS),
        };
        let y = g.lsa_block(xs, &ssm, h, w, noise.as_ref(), eps)?;
        let y = self.out_norm.apply(g, store, y)?;
        let gate = g.activation(z, Activation::Silu);
        let y = g.mul(y, gate)?;
        let y = self.out_proj.apply(g, store, y)?;
        g.add(x, y)
    }
}

/// Parameter layout of the segmentation network.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    embed: LinearIds,
    embed_norm: NormIds,
    encoder: Vec<Vec<VssBlock>>,
    merges: Vec<(NormIds, LinearIds)>,
    ups: Vec<LinearIds>,
    decoder: Vec<Vec<VssBlock>>,
    head_norm: NormIds,
    head_expand: LinearIds,
    head_out: LinearIds,
}

impl Network {
    pub fn register(cfg: &NetworkConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let s = cfg.dims.len();
        let embed = LinearIds::new(store, &format!("{prefix}.embed.proj"), p * p * cfg.in_channels, cfg.dims[0], rng);
        let embed_norm = NormIds::new(store, &format!("{prefix}.embed.norm"), cfg.dims[0]);
        let mut encoder = Vec::with_capacity(s);
        let mut merges = Vec::new();
        for i in 0..s {
            encoder.push(
                (0..cfg.depths[i])
                    .map(|j| VssBlock::new(store, &format!("{prefix}.enc{i}.block{j}"), cfg.dims[i], cfg, rng))
                    .collect(),
            );
            if i + 1 < s {
                let name = format!("{prefix}.merge{i}");
                merges.push((
                    NormIds::new(store, &format!("{name}.norm"), 4 * cfg.dims[i]),
                    LinearIds::new(store, &format!("{name}.proj"), 4 * cfg.dims[i], cfg.dims[i + 1], rng),
                ));
            }
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for i in (0..s - 1).rev() {
            ups.push(LinearIds::new(store, &format!("{prefix}.up{i}.proj"), cfg.dims[i + 1], cfg.dims[i], rng));
            decoder.push(
                (0..cfg.depths[i])
                    .map(|j| VssBlock::new(store, &format!("{prefix}.dec{i}.block{j}"), cfg.dims[i], cfg, rng))
                    .collect(),
            );
        }
        let head_norm = NormIds::new(store, &format!("{prefix}.head.norm"), cfg.dims[0]);
        let head_expand = LinearIds::new(store, &format!("{prefix}.head.expand"), cfg.dims[0], p * p * cfg.head_channels, rng);
        let head_out = LinearIds::new(store, &format!("{prefix}.head.out"), cfg.head_channels, cfg.n_classes, rng);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            embed_norm,
            encoder,
            merges,
            ups,
            decoder,
            head_norm,
            head_expand,
            head_out,
        })
    }

    /// Logits `[B, K, H, W]` for images `[B, Cin, H, W]`. `lsa` is `None`
    /// at inference; with a runtime, blocks in enabled stages restyle their
    /// scan sequences.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut lsa: Option<&mut LsaRuntime<'_>>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let [b, cin, hh, ww] = g.value(x).dims4()?;
        let m = cfg.size_multiple();
        if cin != cfg.in_channels {
            return Err(Error::Shape(format!("network expects {} input channels, got {cin}", cfg.in_channels)));
        }
        if hh % m != 0 || ww % m != 0 || hh == 0 || ww == 0 {
            return Err(Error::Shape(format!("input {hh}×{ww} is not divisible by {m}")));
        }
        let p = cfg.patch_size;
        let (mut h, mut w) = (hh / p, ww / p);
        let t = g.gather(x, patchify_index(b, cin, hh, ww, p), &[b, h * w, p * p * cin])?;
        let t = self.embed.apply(g, store, t)?;
        let mut t = self.embed_norm.apply(g, store, t)?;

        let enc_on = lsa.as_ref().is_some_and(|r| r.cfg.encoder);
        let dec_on = lsa.as_ref().is_some_and(|r| r.cfg.decoder);
        let mut skips = Vec::new();
        for (i, blocks) in self.encoder.iter().enumerate() {
            for blk in blocks {
                let rt = if enc_on { lsa.as_deref_mut() } else { None };
                t = blk.forward(g, store, t, (h, w), rt)?;
            }
            if let Some((norm, proj)) = self.merges.get(i) {
                skips.push((t, h, w));
                let c = cfg.dims[i];
                t = g.gather(t, merge_index(b, h, w, c), &[b, (h / 2) * (w / 2), 4 * c])?;
                t = norm.apply(g, store, t)?;
                t = proj.apply(g, store, t)?;
                h /= 2;
                w /= 2;
            }
        }
        for (k, blocks) in self.decoder.iter().enumerate() {
            let (skip, sh, sw) = skips.pop().expect("one skip per decoder stage");
            let c = cfg.dims[cfg.dims.len() - 1 - k];
            t = g.gather(t, upsample_index(b, h, w, c), &[b, sh * sw, c])?;
            t = self.ups[k].apply(g, store, t)?;
            t = g.add(t, skip)?;
            h = sh;
            w = sw;
            for blk in blocks {
                let rt = if dec_on { lsa.as_deref_mut() } else { None };
                t = blk.forward(g, store, t, (h, w), rt)?;
            }
        }
        let t = self.head_norm.apply(g, store, t)?;
        let t = self.head_expand.apply(g, store, t)?;
        let ch = cfg.head_channels;
        let t = g.gather(t, pixel_shuffle_index(b, h, w, p, ch), &[b, hh * ww, ch])?;
        let t = g.activation(t, Activation::Silu);
        let t = self.head_out.apply(g, store, t)?;
        let k = cfg.n_classes;
        g.gather(t, channels_first_index(b, hh * ww, k), &[b, k, hh, ww])
    }

    /// Inference logits on a plain tensor.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = self.forward(&mut g, store, v, None)?;
        Ok(g.value(y).clone())
    }
}

/// `sigmoid(logit) ≥ 0.5` as 0/1.
pub fn predict_masks(logits: &Tensor) -> Tensor {
    logits.map(|v| if sigmoid(v) >= 0.5 { 1.0 } else { 0.0 })
}

fn split_index(rows: usize, width: usize, start: usize, len: usize) -> Arc<[usize]> {
    (0..rows)
        .flat_map(|r| (start..start + len).map(move |j| r * width + j))
        .collect()
}

/// `[B, C, H, W]` → `[B, (H/p)·(W/p), p·p·C]`, features ordered `(c, dy, dx)`.
fn patchify_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Arc<[usize]> {
    let (ph, pw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for i in 0..ph {
            for j in 0..pw {
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(((bi * c + ci) * h + i * p + dy) * w + j * p + dx);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// `[B, h·w, C]` → `[B, (h/2)·(w/2), 4C]`, features ordered `(dy, dx, c)`.
fn merge_index(b: usize, h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let base = ((bi * h + 2 * i + dy) * w + 2 * j + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Nearest-neighbour ×2: `[B, h·w, C]` → `[B, 2h·2w, C]`.
fn upsample_index(b: usize, h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(b * 4 * h * w * c);
    for bi in 0..b {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let base = ((bi * h + i / 2) * w + j / 2) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx.into()
}

/// `[B, h·w, p·p·C]` (features `(dy, dx, c)`) → `[B, hp·wp, C]`.
fn pixel_shuffle_index(b: usize, h: usize, w: usize, p: usize, c: usize) -> Arc<[usize]> {
    let (hh, ww) = (h * p, w * p);
    let mut idx = Vec::with_capacity(b * hh * ww * c);
    for bi in 0..b {
        for y in 0..hh {
            for x in 0..ww {
                let token = (bi * h + y / p) * w + x / p;
                let base = token * p * p * c + ((y % p) * p + x % p) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx.into()
}

/// `[B, L, K]` → `[B, K, L]`.
fn channels_first_index(b: usize, l: usize, k: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(b * l * k);
    for bi in 0..b {
        for ki in 0..k {
            for li in 0..l {
                idx.push((bi * l + li) * k + ki);
            }
        }
    }
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            depths: vec![1, 1],
            dims: vec![4, 8],
            n_state: 2,
            patch_size: 2,
            head_channels: 2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn output_matches_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [small(), NetworkConfig::default(), NetworkConfig { depths: vec![1, 1, 1], dims: vec![4, 6, 8], patch_size: 2, ..small() }] {
            let mut store = ParamStore::new();
            let net = Network::register(&cfg, &mut store, "net", &mut rng).unwrap();
            let m = cfg.size_multiple();
            let x = Tensor::from_fn(&[2, 3, 2 * m, m], |_| rng.random_range(-1.0..1.0));
            let y = net.infer(&store, &x).unwrap();
            assert_eq!(y.shape(), &[2, cfg.n_classes, 2 * m, m]);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = Network::register(&small(), &mut store, "net", &mut rng).unwrap();
        assert!(net.infer(&store, &Tensor::zeros(&[1, 3, 6, 8])).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = Network::register(&small(), &mut store, "net", &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let a = net.infer(&store, &x).unwrap();
        let b = net.infer(&store, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_noise_training_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = Network::register(&small(), &mut store, "net", &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let cfg = LsaConfig::default();
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let mut rt = LsaRuntime { cfg: &cfg, noise: NoiseSource::Zero };
        let y = net.forward(&mut g, &store, v, Some(&mut rt)).unwrap();
        let inf = net.infer(&store, &x).unwrap();
        assert!(g.value(y).rel_diff(&inf) < 1e-12);
        // random draws do change the output
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let mut rt = LsaRuntime { cfg: &cfg, noise: NoiseSource::Random(&mut r2) };
        let y = net.forward(&mut g, &store, v, Some(&mut rt)).unwrap();
        assert!(g.value(y).max_abs_diff(&inf) > 1e-6);
    }

    #[test]
    fn mask_threshold_convention() {
        let l = Tensor::new(&[3], vec![0.0, -50.0, 1e-9]).unwrap();
        assert_eq!(predict_masks(&l).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn index_maps_are_consistent() {
        // pixel shuffle inverts a patchify with the same feature order
        let (b, h, w, p) = (1, 2, 3, 2);
        let ps = pixel_shuffle_index(b, h, w, p, 1);
        let pf = patchify_index(b, 1, h * p, w * p, p);
        for (pix, &src) in ps.iter().enumerate() {
            assert_eq!(pf[src], pix);
        }
        // every token feeds exactly one merged slot
        let mi = merge_index(2, 4, 4, 3);
        let mut seen = mi.to_vec();
        seen.sort();
        assert_eq!(seen, (0..2 * 16 * 3).collect::<Vec<_>>());
    }
}
