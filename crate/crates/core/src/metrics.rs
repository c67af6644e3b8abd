//! Segmentation metrics (Dice, average surface distance) and image
//! similarity measures (PSNR, SSIM) for augmentation previews.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary grid `[H, W]` or stacked slices `[S, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    slices: usize,
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        let (s, h, w) = match *shape {
            [h, w] => (1, h, w),
            [s, h, w] => (s, h, w),
            _ => return Err(Error::Shape(format!("mask shape {shape:?} must be [H,W] or [S,H,W]"))),
        };
        if bits.len() != s * h * w {
            return Err(Error::Shape(format!("mask shape {shape:?} does not match {} values", bits.len())));
        }
        Ok(Self { slices: s, h, w, bits })
    }

    /// Values must be exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            bits.push(match v {
                0.0 => false,
                1.0 => true,
                _ => return Err(Error::InvalidArgument(format!("mask value {v} is not binary"))),
            });
        }
        Self::new(t.shape(), bits)
    }

    /// Stack equally sized masks into one volume.
    pub fn stack(masks: &[BinaryMask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        let mut bits = Vec::new();
        for m in masks {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::Shape("stacked masks differ in size".into()));
            }
            bits.extend_from_slice(&m.bits);
        }
        let slices = masks.iter().map(|m| m.slices).sum();
        Ok(Self { slices, h: first.h, w: first.w, bits })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.slices, self.h, self.w]
    }

    pub fn get(&self, s: usize, y: usize, x: usize) -> bool {
        self.bits[(s * self.h + y) * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels with at least one in-plane background 4-neighbour;
    /// outside the grid counts as background. Returned as `(s, y, x)`.
    pub fn boundary(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.slices {
            for y in 0..self.h {
                for x in 0..self.w {
                    if !self.get(s, y, x) {
                        continue;
                    }
                    let edge = y == 0
                        || x == 0
                        || y + 1 == self.h
                        || x + 1 == self.w
                        || !self.get(s, y - 1, x)
                        || !self.get(s, y + 1, x)
                        || !self.get(s, y, x - 1)
                        || !self.get(s, y, x + 1);
                    if edge {
                        out.push((s, y, x));
                    }
                }
            }
        }
        out
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("mask shapes {:?} and {:?} differ", self.shape(), other.shape())));
        }
        Ok(())
    }
}

/// `2|a∩b| / (|a|+|b|)`, 1.0 when both are empty.
pub fn dice_coefficient(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b)?;
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Squared distance from every voxel to the nearest of `points`, with unit
/// spacing along all three axes. Separable exact computation in integers.
fn squared_distance_field(shape: [usize; 3], points: &[(usize, usize, usize)]) -> Vec<i64> {
    let [s, h, w] = shape;
    const INF: i64 = i64::MAX / 4;
    let mut grid = vec![INF; s * h * w];
    for &(k, y, x) in points {
        grid[(k * h + y) * w + x] = 0;
    }
    let pass = |grid: &mut Vec<i64>, n: usize, stride: usize, lines: Vec<usize>| {
        let mut line = vec![0i64; n];
        for start in lines {
            for (i, v) in line.iter_mut().enumerate() {
                *v = grid[start + i * stride];
            }
            for i in 0..n {
                let mut best = INF;
                for (j, &f) in line.iter().enumerate() {
                    if f < INF {
                        let d = i as i64 - j as i64;
                        best = best.min(f + d * d);
                    }
                }
                grid[start + i * stride] = best;
            }
        }
    };
    let rows: Vec<usize> = (0..s * h).map(|r| r * w).collect();
    pass(&mut grid, w, 1, rows);
    let cols: Vec<usize> = (0..s).flat_map(|k| (0..w).map(move |x| k * h * w + x)).collect();
    pass(&mut grid, h, w, cols);
    let depth: Vec<usize> = (0..h * w).collect();
    pass(&mut grid, s, h * w, depth);
    grid
}

/// Symmetric mean nearest-boundary distance in pixel units. Stacked slices
/// are one volume with unit slice spacing.
pub fn average_surface_distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("surface distance needs two non-empty masks".into()));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let (fa, fb) = (squared_distance_field(a.shape(), &ba), squared_distance_field(b.shape(), &bb));
    let [_, h, w] = a.shape();
    let at = |f: &[i64], (k, y, x): (usize, usize, usize)| (f[(k * h + y) * w + x] as f64).sqrt();
    let mut sum = 0.0;
    for &p in &ba {
        sum += at(&fb, p);
    }
    for &p in &bb {
        sum += at(&fa, p);
    }
    Ok(sum / (ba.len() + bb.len()) as f64)
}

/// All-pairs nearest boundary search; same result as
/// [`average_surface_distance`], quadratic cost.
pub fn average_surface_distance_brute_force(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("surface distance needs two non-empty masks".into()));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let nearest = |p: (usize, usize, usize), set: &[(usize, usize, usize)]| {
        let d2 = set
            .iter()
            .map(|q| {
                let (dk, dy, dx) = (p.0 as i64 - q.0 as i64, p.1 as i64 - q.1 as i64, p.2 as i64 - q.2 as i64);
                dk * dk + dy * dy + dx * dx
            })
            .min()
            .expect("non-empty mask has a boundary");
        (d2 as f64).sqrt()
    };
    let mut sum = 0.0;
    for &p in &ba {
        sum += nearest(p, &bb);
    }
    for &p in &bb {
        sum += nearest(p, &ba);
    }
    Ok(sum / (ba.len() + bb.len()) as f64)
}

/// `10·log10(1/MSE)` for intensities in `[0, 1]`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over valid window positions, averaged over leading
/// channels for `[C, H, W]` inputs. Images smaller than 11 pixels on a side
/// use a window of `min(H, W)` with the same σ.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("ssim expects [H,W] or [C,H,W], got {:?}", a.shape()))),
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Shape("ssim on empty image".into()));
    }
    let n = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(n);
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut total = 0.0;
    for ci in 0..c {
        let pa = &a.data()[ci * h * w..(ci + 1) * h * w];
        let pb = &b.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let i = (y + dy) * w + x + dx;
                        let (u, v) = (pa[i], pb[i]);
                        ma += wgt * u;
                        mb += wgt * v;
                        saa += wgt * u * u;
                        sbb += wgt * v * v;
                        sab += wgt * u * v;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// Aggregated metrics for one (domain, class) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub domain: String,
    pub class: String,
    pub samples: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// `None` when every sample was excluded.
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    pub asd_excluded: usize,
}

/// Per-sample scores for one (domain, class) pair.
#[derive(Clone, Debug, Default)]
pub struct ClassScores {
    pub dice: Vec<f64>,
    pub asd: Vec<f64>,
    pub asd_excluded: usize,
}

impl ClassScores {
    pub fn push(&mut self, pred: &BinaryMask, truth: &BinaryMask) -> Result<()> {
        self.dice.push(dice_coefficient(pred, truth)?);
        match average_surface_distance(pred, truth) {
            Ok(d) => self.asd.push(d),
            Err(Error::UndefinedMetric(_)) => self.asd_excluded += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    }

    pub fn summarize(&self, domain: &str, class: &str) -> ClassSummary {
        let (dm, ds) = mean_std(&self.dice);
        let asd = (!self.asd.is_empty()).then(|| mean_std(&self.asd));
        ClassSummary {
            domain: domain.to_string(),
            class: class.to_string(),
            samples: self.dice.len(),
            dice_mean: dm,
            dice_std: ds,
            asd_mean: asd.map(|v| v.0),
            asd_std: asd.map(|v| v.1),
            asd_excluded: self.asd_excluded,
        }
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Evaluation report: one row per (domain, class).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ClassSummary>,
}

impl EvalReport {
    /// Mean Dice over all rows.
    pub fn mean_dice(&self) -> f64 {
        mean_std(&self.rows.iter().map(|r| r.dice_mean).collect::<Vec<_>>()).0
    }

    pub fn mean_asd(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.asd_mean).collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<8} {:>7} {:>16} {:>16} {:>9}\n",
            "domain", "class", "samples", "dice", "asd", "asd_excl"
        );
        for r in &self.rows {
            let asd = match (r.asd_mean, r.asd_std) {
                (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
                _ => "undefined".to_string(),
            };
            out.push_str(&format!(
                "{:<12} {:<8} {:>7} {:>16} {:>16} {:>9}\n",
                r.domain,
                r.class,
                r.samples,
                format!("{:.4} ± {:.4}", r.dice_mean, r.dice_std),
                asd,
                r.asd_excluded
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &(y, x) in on {
            bits[y * w + x] = true;
        }
        BinaryMask::new(&[h, w], bits).unwrap()
    }

    fn random_mask(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
        let n = shape.iter().product();
        BinaryMask::new(shape, (0..n).map(|_| rng.random_bool(density)).collect()).unwrap()
    }

    #[test]
    fn dice_reference_values() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3), (2, 3)]);
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.0);
        let c = mask(4, 4, &[(0, 0), (0, 1), (2, 2), (3, 3)]);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.5);
        let e = mask(4, 4, &[]);
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
        assert!(dice_coefficient(&a, &mask(4, 5, &[])).is_err());
    }

    #[test]
    fn asd_reference_values() {
        let a = mask(5, 5, &[(0, 0)]);
        let b = mask(5, 5, &[(3, 4)]);
        assert_eq!(average_surface_distance(&a, &b).unwrap(), 5.0);
        let c = mask(6, 6, &[(1, 1), (1, 2), (2, 1), (2, 2), (3, 3)]);
        assert_eq!(average_surface_distance(&c, &c).unwrap(), 0.0);
        assert!(matches!(
            average_surface_distance(&a, &mask(5, 5, &[])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn boundary_excludes_interior() {
        let on: Vec<_> = (0..5).flat_map(|y| (0..5).map(move |x| (y + 1, x + 1))).collect();
        let m = mask(7, 7, &on);
        let b = m.boundary();
        assert_eq!(b.len(), 16);
        assert!(!b.contains(&(0, 3, 3)));
        // touching the border makes a pixel boundary
        let full = mask(3, 3, &(0..9).map(|i| (i / 3, i % 3)).collect::<Vec<_>>());
        assert_eq!(full.boundary().len(), 8);
    }

    #[test]
    fn asd_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..50 {
            let density = [0.05, 0.3, 0.7][i % 3];
            let a = random_mask(&[16, 16], density, &mut rng);
            let b = random_mask(&[16, 16], density, &mut rng);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            assert_eq!(
                average_surface_distance(&a, &b).unwrap(),
                average_surface_distance_brute_force(&a, &b).unwrap()
            );
        }
        for _ in 0..10 {
            let a = random_mask(&[3, 9, 7], 0.1, &mut rng);
            let b = random_mask(&[3, 9, 7], 0.1, &mut rng);
            assert_eq!(
                average_surface_distance(&a, &b).unwrap(),
                average_surface_distance_brute_force(&a, &b).unwrap()
            );
        }
    }

    #[test]
    fn stacked_volume_is_one_sample() {
        let a = mask(4, 4, &[(1, 1)]);
        let e = mask(4, 4, &[]);
        let v1 = BinaryMask::stack(&[a.clone(), e.clone()]).unwrap();
        let v2 = BinaryMask::stack(&[e, a]).unwrap();
        assert_eq!(v1.shape(), [2, 4, 4]);
        assert_eq!(average_surface_distance(&v1, &v2).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&v1, &v2).unwrap(), 0.0);
    }

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::full(&[4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &a.map(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&Tensor::zeros(&[4, 4]), &Tensor::full(&[4, 4], 1.0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[16, 16], |i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { 0.0 });
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < -0.5);
        let r = Tensor::from_fn(&[3, 12, 12], |_| rng.random::<f64>());
        assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        // constant images: only the luminance term differs from one
        let (ma, mb) = (0.3, 0.7);
        let ca = Tensor::full(&[11, 11], ma);
        let cb = Tensor::full(&[11, 11], mb);
        let expected = (2.0 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
        assert!((ssim(&ca, &cb).unwrap() - expected).abs() < 1e-12);
        // reduced window on a small image
        let small = Tensor::full(&[5, 7], ma);
        assert!((ssim(&small, &small.map(|_| mb)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_and_counts_exclusions() {
        let a = mask(4, 4, &[(1, 1)]);
        let e = mask(4, 4, &[]);
        let mut s = ClassScores::default();
        s.push(&a, &a).unwrap();
        s.push(&e, &a).unwrap();
        let sum = s.summarize("d0", "cup");
        assert_eq!(sum.samples, 2);
        assert_eq!(sum.dice_mean, 0.5);
        assert_eq!(sum.asd_mean, Some(0.0));
        assert_eq!(sum.asd_excluded, 1);
        let rep = EvalReport { rows: vec![sum] };
        assert!(rep.table().contains("d0"));
    }

    fn rotate(m: &BinaryMask) -> BinaryMask {
        let [_, h, w] = m.shape();
        let mut bits = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                bits[x * h + (h - 1 - y)] = m.get(0, y, x);
            }
        }
        BinaryMask::new(&[w, h], bits).unwrap()
    }

    fn flip(m: &BinaryMask) -> BinaryMask {
        let [_, h, w] = m.shape();
        let bits = (0..h * w).map(|i| m.get(0, i / w, w - 1 - i % w)).collect();
        BinaryMask::new(&[h, w], bits).unwrap()
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&[9, 11], 0.3, &mut rng);
            let b = random_mask(&[9, 11], 0.3, &mut rng);
            prop_assert_eq!(dice_coefficient(&a, &b).unwrap(), dice_coefficient(&b, &a).unwrap());
            if !a.is_empty() && !b.is_empty() {
                let ab = average_surface_distance(&a, &b).unwrap();
                let ba = average_surface_distance(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            }
        }

        #[test]
        fn asd_invariant_under_rotation_and_flip(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&[7, 10], 0.25, &mut rng);
            let b = random_mask(&[7, 10], 0.25, &mut rng);
            prop_assume!(!a.is_empty() && !b.is_empty());
            let d = average_surface_distance(&a, &b).unwrap();
            let dr = average_surface_distance(&rotate(&a), &rotate(&b)).unwrap();
            let df = average_surface_distance(&flip(&a), &flip(&b)).unwrap();
            prop_assert!((d - dr).abs() <= 1e-12 * d.max(1.0));
            prop_assert!((d - df).abs() <= 1e-12 * d.max(1.0));
        }

        #[test]
        fn dice_invariant_under_shared_permutation(seed in 0u64..300) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&[6, 6], 0.4, &mut rng);
            let b = random_mask(&[6, 6], 0.4, &mut rng);
            let mut perm: Vec<usize> = (0..36).collect();
            perm.shuffle(&mut rng);
            let pa = BinaryMask::new(&[6, 6], perm.iter().map(|&i| a.bits[i]).collect()).unwrap();
            let pb = BinaryMask::new(&[6, 6], perm.iter().map(|&i| b.bits[i]).collect()).unwrap();
            prop_assert_eq!(dice_coefficient(&a, &b).unwrap(), dice_coefficient(&pa, &pb).unwrap());
        }
    }
}
