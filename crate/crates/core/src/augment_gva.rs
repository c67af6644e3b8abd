//! Global appearance augmentation.
//!
//! A tiny residual conv net `Φ` re-renders dark images; a per-image gate
//! decides who gets it: `M_i = [I(x_i) < τ]` with `I` the mean brightness
//! on the `[0, 1]` scale (inputs live on `[-1, 1]`). The output layer starts
//! at zero so `Φ` is the identity until the optimiser moves it. At
//! inference the module is bypassed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fundus-style threshold.
pub const TAU_FUNDUS: f64 = 0.4;
/// Prostate-style threshold.
pub const TAU_PROSTATE: f64 = 0.03;

/// Allowed learnable scalar count of `Φ`.
pub const PARAM_BUDGET: std::ops::RangeInclusive<usize> = 200..=300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GvaConfig {
    /// Brightness threshold on the `[0, 1]` scale.
    pub tau: f64,
    /// Enhancement blocks between the input and output convolutions.
    pub n_blocks: usize,
    /// Internal width.
    pub channels: usize,
    /// Image channels `Φ` operates on.
    pub image_channels: usize,
}

impl Default for GvaConfig {
    fn default() -> Self {
        Self {
            tau: TAU_FUNDUS,
            n_blocks: 1,
            channels: 3,
            image_channels: 3,
        }
    }
}

impl GvaConfig {
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize| 9 * i * o + o;
        conv(self.image_channels, self.channels)
            + self.n_blocks * conv(self.channels, self.channels)
            + conv(self.channels, self.image_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("gva.tau = {} must lie in (0, 1)", self.tau)));
        }
        if self.channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("gva channel counts must be positive".into()));
        }
        let n = self.param_count();
        if !PARAM_BUDGET.contains(&n) {
            return Err(Error::Config(format!(
                "gva network has {n} parameters, budget is {PARAM_BUDGET:?}"
            )));
        }
        Ok(())
    }
}

/// Per-image gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    pub mask: Vec<bool>,
}

impl GateMask {
    /// `[B, C, H, W]` 0/1 tensor.
    pub fn expand(&self, c: usize, h: usize, w: usize) -> Tensor {
        let plane = c * h * w;
        Tensor::from_fn(&[self.mask.len(), c, h, w], |i| f64::from(u8::from(self.mask[i / plane])))
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `I(x_i)`: mean of `(x + 1)/2` over `C·H·W`.
pub fn mean_brightness(x: &Tensor) -> Result<Vec<f64>> {
    let [b, ..] = x.dims4()?;
    if b == 0 {
        return Ok(Vec::new());
    }
    let per = x.len() / b;
    Ok(x
        .data()
        .chunks_exact(per.max(1))
        .take(b)
        .map(|row| row.iter().map(|v| (v + 1.0) * 0.5).sum::<f64>() / per as f64)
        .collect())
}

/// Strict `I < τ`.
pub fn gate_mask(brightness: &[f64], tau: f64) -> GateMask {
    GateMask {
        mask: brightness.iter().map(|&i| i < tau).collect(),
    }
}

#[derive(Clone, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

/// Handles of `Φ`'s parameters.
#[derive(Clone, Debug)]
pub struct Gva {
    pub cfg: GvaConfig,
    layers: Vec<ConvIds>,
}

impl Gva {
    pub fn register(cfg: &GvaConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![(cfg.image_channels, cfg.channels)];
        widths.extend(std::iter::repeat_n((cfg.channels, cfg.channels), cfg.n_blocks));
        widths.push((cfg.channels, cfg.image_channels));
        let last = widths.len() - 1;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                let name = match i {
                    0 => "input".to_string(),
                    i if i == last => "output".to_string(),
                    i => format!("block{}", i - 1),
                };
                let w = if i == last {
                    Tensor::zeros(&[cout, cin, 3, 3])
                } else {
                    fan_in_uniform(&[cout, cin, 3, 3], 9 * cin, rng)
                };
                ConvIds {
                    w: store.add(format!("{prefix}.{name}.weight"), w),
                    b: store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[cout])),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// `Φ(x) = clamp(x + R(x), -1, 1)`.
    pub fn enhance(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, c, _, _] = g.value(x).dims4()?;
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "gva expects {} image channels, got {c}",
                self.cfg.image_channels
            )));
        }
        let mut r = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(store, l.w), g.param(store, l.b));
            r = g.conv3x3(r, w, b)?;
            if i != last {
                r = g.activation(r, Activation::Tanh);
            }
        }
        let sum = g.add(x, r)?;
        Ok(g.clamp(sum, -1.0, 1.0))
    }

    /// Gated augmentation. Returns the input node itself when not training.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<(Var, GateMask)> {
        let gate = gate_mask(&mean_brightness(g.value(x))?, self.cfg.tau);
        if !training || gate.count() == 0 {
            return Ok((x, gate));
        }
        let enhanced = self.enhance(g, store, x)?;
        let out = g.select_rows(&gate.mask, enhanced, x)?;
        Ok((out, gate))
    }

    /// `Φ(x)` on a plain tensor.
    pub fn enhance_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = self.enhance(&mut g, store, v)?;
        Ok(g.value(y).clone())
    }

    /// Gated augmentation on a plain tensor.
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let (y, _) = self.forward(&mut g, store, v, training)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Gva, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gva = Gva::register(&GvaConfig::default(), &mut store, "gva", &mut rng).unwrap();
        (gva, store)
    }

    #[test]
    fn brightness_extremes() {
        let x = Tensor::full(&[1, 3, 4, 4], 1.0);
        assert_eq!(mean_brightness(&x).unwrap(), vec![1.0]);
        let x = Tensor::full(&[1, 3, 4, 4], -1.0);
        assert_eq!(mean_brightness(&x).unwrap(), vec![0.0]);
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
        assert_eq!(mean_brightness(&x).unwrap(), vec![0.5]);
    }

    #[test]
    fn gate_is_strict() {
        assert_eq!(gate_mask(&[0.2], 0.4).mask, vec![true]);
        assert_eq!(gate_mask(&[0.4], 0.4).mask, vec![false]);
        assert_eq!(gate_mask(&[0.1, 0.9], 0.4).mask, vec![true, false]);
        let e = gate_mask(&[0.1, 0.9], 0.4).expand(2, 1, 1);
        assert_eq!(e.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn budget() {
        let cfg = GvaConfig::default();
        assert_eq!(cfg.param_count(), 252);
        let (_, store) = setup();
        assert_eq!(store.num_scalars(), 252);
        let big = GvaConfig { channels: 8, ..cfg };
        assert!(big.validate().is_err());
    }

    #[test]
    fn identity_at_init() {
        let (gva, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 3, 5, 6], |_| rng.random_range(-1.0..1.0));
        assert_eq!(gva.enhance_tensor(&store, &x).unwrap(), x);
        assert_eq!(gva.forward_tensor(&store, &x, true).unwrap(), x);
    }

    #[test]
    fn inference_and_closed_gate_pass_through() {
        let (gva, mut store) = setup();
        // make Φ non-trivial
        for id in gva.param_ids() {
            store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 7) as f64 - 3.0));
        }
        let bright = Tensor::full(&[2, 3, 4, 4], 0.5);
        assert_eq!(gva.forward_tensor(&store, &bright, true).unwrap(), bright);
        let dark = Tensor::full(&[2, 3, 4, 4], -0.9);
        assert_eq!(gva.forward_tensor(&store, &dark, false).unwrap(), dark);
        assert_ne!(gva.forward_tensor(&store, &dark, true).unwrap(), dark);
    }
}
