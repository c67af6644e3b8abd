//! Multi-domain segmentation datasets: a synthetic nested-ellipse generator
//! with per-domain appearance, an image/mask folder loader, leave-one-out
//! splits, paired training augmentation and a domain-balanced sampler.
//!
//! Folder layout, one directory per domain and split:
//!
//! ```text
//! <root>/<domain>/<split>/images/<stem>.png
//! <root>/<domain>/<split>/masks/<stem>_c<k>.png   (one binary mask per class)
//! ```
//!
//! A stem of the form `<volume>__<slice>` marks slices of one volume, which
//! are evaluated together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[0, 1]` → `[-1, 1]`.
pub fn normalize(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// `[-1, 1]` → `[0, 1]`.
pub fn unnormalize(x: f64) -> f64 {
    (x + 1.0) * 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` on `[-1, 1]`.
    pub image: Tensor,
    /// `[K, H, W]`, binary.
    pub mask: Tensor,
    pub name: String,
    /// Samples sharing a volume id are evaluated as one stacked volume.
    pub volume: Option<String>,
    /// Full-resolution masks for evaluation at the original size.
    pub original_mask: Option<Tensor>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

/// Appearance of a synthetic domain, applied to a `[0, 1]` rendering:
/// contrast about 0.5, brightness offset, low-frequency texture, gamma, then
/// per-channel tint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub name: String,
    pub gamma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub texture: f64,
    pub tint: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.02
}

impl DomainStyle {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain {}: {m}", self.name)));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.contrast >= 0.0 && self.texture >= 0.0 && self.noise >= 0.0) {
            return bad("contrast, texture and noise must be non-negative");
        }
        if !self.brightness.is_finite() {
            return bad("brightness must be finite");
        }
        if self.tint.len() != channels || self.tint.iter().any(|t| !(*t >= 0.0)) {
            return bad(&format!("tint needs {channels} non-negative entries"));
        }
        Ok(())
    }
}

/// Four appearances: neutral, washed-out, dark, and low-contrast.
pub fn default_domains() -> Vec<DomainStyle> {
    let d = |name: &str, gamma, brightness, contrast, texture, tint: [f64; 3]| DomainStyle {
        name: name.to_string(),
        gamma,
        brightness,
        contrast,
        texture,
        tint: tint.to_vec(),
        noise: default_noise(),
    };
    vec![
        d("domain0", 1.0, 0.0, 1.0, 0.05, [1.0, 0.75, 0.5]),
        d("domain1", 0.8, 0.1, 0.8, 0.10, [0.95, 0.85, 0.7]),
        d("domain2", 1.3, -0.08, 1.0, 0.08, [0.9, 0.65, 0.5]),
        d("domain3", 1.0, 0.05, 0.6, 0.12, [1.0, 0.6, 0.35]),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    pub samples: Vec<Sample>,
    pub style: Option<DomainStyle>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

struct Geometry {
    disc: Ellipse,
    cup: Ellipse,
}

fn sample_geometry(size: usize, rng: &mut impl Rng) -> Geometry {
    let s = size as f64;
    let disc = Ellipse {
        cy: s * (0.5 + rng.random_range(-0.12..0.12)),
        cx: s * (0.5 + rng.random_range(-0.12..0.12)),
        ry: s * rng.random_range(0.17..0.27),
        rx: s * rng.random_range(0.17..0.27),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let k = rng.random_range(0.4..0.65);
    let cup = Ellipse {
        cy: disc.cy + s * rng.random_range(-0.04..0.04),
        cx: disc.cx + s * rng.random_range(-0.04..0.04),
        ry: disc.ry * k,
        rx: disc.rx * k * rng.random_range(0.85..1.15),
        angle: disc.angle + rng.random_range(-0.3..0.3),
    };
    Geometry { disc, cup }
}

/// Renders one sample: masks from the geometry alone, then the image in the
/// domain's appearance.
fn render(style: &DomainStyle, geo: &Geometry, size: usize, n_classes: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let channels = style.tint.len();
    let hw = size * size;
    let mut mask = Tensor::zeros(&[n_classes, size, size]);
    let mut base = vec![0.0; hw];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let disc = geo.disc.contains(py, px);
            let cup = disc && geo.cup.contains(py, px);
            let i = y * size + x;
            if disc {
                mask.data_mut()[i] = 1.0;
            }
            if cup && n_classes > 1 {
                mask.data_mut()[hw + i] = 1.0;
            }
            let r2 = ((py / s - 0.5).powi(2) + (px / s - 0.5).powi(2)) * 4.0;
            base[i] = if cup {
                0.85
            } else if disc {
                0.6
            } else {
                0.32 - 0.1 * r2
            };
        }
    }
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.random_range(1.0..3.0) * std::f64::consts::TAU / s;
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let normal = rand_distr::StandardNormal;
    let mut image = Tensor::zeros(&[channels, size, size]);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let tex: f64 = waves.iter().map(|(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin()).sum::<f64>() / 3.0;
            let v = style.contrast * (base[i] - 0.5) + 0.5 + style.brightness + style.texture * tex;
            let v = v.clamp(0.0, 1.0).powf(style.gamma);
            for (c, t) in style.tint.iter().enumerate() {
                let n: f64 = rng.sample(normal);
                image.data_mut()[c * hw + i] = normalize((v * t + style.noise * n).clamp(0.0, 1.0));
            }
        }
    }
    (image, mask)
}

/// Deterministic synthetic dataset. Geometry and appearance noise come from
/// separate streams of `seed`, so two domains generated with the same seed
/// share their masks exactly.
pub fn generate_synthetic(
    domain_id: usize,
    style: &DomainStyle,
    n_samples: usize,
    size: usize,
    n_classes: usize,
    seed: u64,
) -> Result<DomainDataset> {
    style.validate(style.tint.len())?;
    if size < 8 || !(1..=2).contains(&n_classes) || style.tint.is_empty() {
        return Err(Error::Config(format!(
            "synthetic data needs size ≥ 8, 1–2 classes and ≥ 1 channel (got {size}, {n_classes}, {})",
            style.tint.len()
        )));
    }
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut look_rng = ChaCha8Rng::seed_from_u64(seed);
    look_rng.set_stream(1);
    let samples = (0..n_samples)
        .map(|i| {
            let geo = sample_geometry(size, &mut geo_rng);
            let (image, mask) = render(style, &geo, size, n_classes, &mut look_rng);
            Sample {
                image,
                mask,
                name: format!("{}_{i:04}", style.name),
                volume: None,
                original_mask: None,
            }
        })
        .collect();
    Ok(DomainDataset {
        domain_id,
        name: style.name.clone(),
        samples,
        style: Some(style.clone()),
    })
}

/// Bilinear resampling of every `[H, W]` plane of a `[C, H, W]` tensor;
/// `src(y, x)` maps an output pixel centre to source pixel coordinates.
/// Out-of-range sources take `fill`.
fn resample(t: &Tensor, oh: usize, ow: usize, fill: f64, src: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let o = out.data_mut();
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y as f64 + 0.5, x as f64 + 0.5);
            let (fy, fx) = (sy - 0.5, sx - 0.5);
            let inside = fy > -1.0 && fx > -1.0 && fy < h as f64 && fx < w as f64;
            let (y0, x0) = (fy.floor(), fx.floor());
            let (ty, tx) = (fy - y0, fx - x0);
            let pick = |ci: usize, yy: f64, xx: f64| {
                let yy = (yy.max(0.0) as usize).min(h - 1);
                let xx = (xx.max(0.0) as usize).min(w - 1);
                d[(ci * h + yy) * w + xx]
            };
            for ci in 0..c {
                o[(ci * oh + y) * ow + x] = if inside {
                    let a = pick(ci, y0, x0) * (1.0 - tx) + pick(ci, y0, x0 + 1.0) * tx;
                    let b = pick(ci, y0 + 1.0, x0) * (1.0 - tx) + pick(ci, y0 + 1.0, x0 + 1.0) * tx;
                    a * (1.0 - ty) + b * ty
                } else {
                    fill
                };
            }
        }
    }
    out
}

/// Bilinear resize of `[C, H, W]`.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (t.shape()[1] as f64, t.shape()[2] as f64);
    let (sy, sx) = (h / oh as f64, w / ow as f64);
    resample(t, oh, ow, 0.0, |y, x| (y * sy, x * sx))
}

/// Nearest-neighbour resize of `[C, H, W]`.
pub fn resize_nearest(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ci, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let sy = ((y * h) / oh).min(h - 1);
        let sx = ((x * w) / ow).min(w - 1);
        t.data()[(ci * h + sy) * w + sx]
    })
}

/// Draws of one [`training_augment`] call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub offset_y: f64,
    pub offset_x: f64,
    pub flip: bool,
}

pub const CROP_SCALE: (f64, f64) = (0.8, 1.2);

/// Random resized crop (zoom factor in `[0.8, 1.2]`) and horizontal flip,
/// identical for image and mask. Zoom-out borders are filled with black and
/// background; masks are re-binarized at 0.5 after bilinear interpolation.
pub fn training_augment(sample: &Sample, rng: &mut impl Rng) -> (Sample, AugmentDraw) {
    let (h, w) = sample.size();
    let scale = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
    let (wh, ww) = (h as f64 / scale, w as f64 / scale);
    let mut span = |full: f64, win: f64| {
        let (a, b) = (0.0f64.min(full - win), 0.0f64.max(full - win));
        if b > a {
            rng.random_range(a..=b)
        } else {
            a
        }
    };
    let offset_y = span(h as f64, wh);
    let offset_x = span(w as f64, ww);
    let flip = rng.random::<bool>();
    let draw = AugmentDraw { scale, offset_y, offset_x, flip };
    let map = |y: f64, x: f64| {
        let x = if flip { w as f64 - x } else { x };
        (offset_y + y / scale, offset_x + x / scale)
    };
    let image = resample(&sample.image, h, w, -1.0, map);
    let mask = resample(&sample.mask, h, w, 0.0, map).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    (
        Sample {
            image,
            mask,
            name: sample.name.clone(),
            volume: sample.volume.clone(),
            original_mask: None,
        },
        draw,
    )
}

/// Folder-mode loading options.
#[derive(Clone, Debug, PartialEq)]
pub struct FolderOptions {
    pub size: usize,
    pub channels: usize,
    pub n_classes: usize,
    /// Keep full-resolution masks for evaluation at the original size.
    pub keep_original: bool,
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))
}

fn image_tensor(img: &image::DynamicImage, channels: usize, path: &Path) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src_channels = img.color().channel_count() as usize;
    let (data, n) = match src_channels {
        1 | 2 => (img.to_luma8().into_raw(), 1),
        _ => (img.to_rgb8().into_raw(), 3),
    };
    if n != channels && n != 1 {
        return Err(Error::Data(format!("{}: {n}-channel image, expected {channels}", path.display())));
    }
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let c = if n == 1 { 0 } else { c };
        normalize(data[p * n + c] as f64 / 255.0)
    }))
}

fn mask_plane(path: &Path) -> Result<Tensor> {
    let img = read_png(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[1, h, w], |i| if raw[i] > 127 { 1.0 } else { 0.0 }))
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn mask_path(dir: &Path, stem: &str, class: usize) -> PathBuf {
    dir.join(format!("{stem}_c{class}.png"))
}

/// Loads `<dir>/images` and `<dir>/masks` pairs, resized to `opts.size`.
pub fn load_folder(dir: &Path, domain_id: usize, name: &str, opts: &FolderOptions) -> Result<DomainDataset> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    let mut samples = Vec::new();
    for path in list_pngs(&img_dir)? {
        let stem = stem_of(&path).ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?;
        let img = read_png(&path)?;
        let image = image_tensor(&img, opts.channels, &path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mut planes = Vec::with_capacity(opts.n_classes * h * w);
        for k in 0..opts.n_classes {
            let mp = mask_path(&mask_dir, &stem, k);
            if !mp.exists() {
                return Err(Error::Data(format!("image {stem} has no mask {}", mp.display())));
            }
            let m = mask_plane(&mp)?;
            if m.shape()[1..] != [h, w] {
                return Err(Error::Data(format!("mask {} is {:?}, image is {h}×{w}", mp.display(), &m.shape()[1..])));
            }
            planes.extend_from_slice(m.data());
        }
        let mask = Tensor::new(&[opts.n_classes, h, w], planes)?;
        let volume = stem.split_once("__").map(|(v, _)| v.to_string());
        samples.push(Sample {
            image: resize_bilinear(&image, opts.size, opts.size),
            mask: resize_nearest(&mask, opts.size, opts.size),
            name: stem,
            volume,
            original_mask: opts.keep_original.then_some(mask),
        });
    }
    let stems: std::collections::HashSet<&str> = samples.iter().map(|s| s.name.as_str()).collect();
    for path in list_pngs(&mask_dir)? {
        let stem = stem_of(&path).unwrap_or_default();
        let base = stem.rsplit_once("_c").map_or(stem.as_str(), |(b, _)| b);
        if !stems.contains(base) {
            return Err(Error::Data(format!("mask {stem} has no image")));
        }
    }
    Ok(DomainDataset {
        domain_id,
        name: name.to_string(),
        samples,
        style: None,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[C, H, W]` on `[-1, 1]` as an 8-bit PNG (grey for one channel, RGB for three).
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let px = |ch: usize, p: usize| to_u8(unnormalize(image.data()[ch * h * w + p]));
    let res = match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(0, y as usize * w + x as usize)]))
            .save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb([px(0, p), px(1, p), px(2, p)])
        })
        .save(path),
        _ => return Err(Error::Data(format!("cannot save a {c}-channel image"))),
    };
    res.map_err(|e| Error::image(path, e))
}

fn save_mask(plane: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if plane[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    })
    .save(path)
    .map_err(|e| Error::image(path, e))
}

/// Writes a dataset in the folder layout read by [`load_folder`].
pub fn export_folder(ds: &DomainDataset, dir: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &ds.samples {
        save_image(&s.image, &img_dir.join(format!("{}.png", s.name)))?;
        let (h, w) = s.size();
        for (k, plane) in s.mask.data().chunks(h * w).enumerate() {
            save_mask(plane, h, w, &mask_path(&mask_dir, &s.name, k))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub held_out: usize,
    pub sources: Vec<usize>,
}

pub fn make_splits(domains: &[usize], held_out: usize) -> Result<SplitPlan> {
    if domains.len() < 2 {
        return Err(Error::InvalidArgument("leave-one-out needs at least two domains".into()));
    }
    if !domains.contains(&held_out) {
        return Err(Error::InvalidArgument(format!("unknown domain {held_out}, have {domains:?}")));
    }
    Ok(SplitPlan {
        held_out,
        sources: domains.iter().copied().filter(|&d| d != held_out).collect(),
    })
}

/// One plan per domain, each held out once.
pub fn sweep_plans(domains: &[usize]) -> Result<Vec<SplitPlan>> {
    domains.iter().map(|&d| make_splits(domains, d)).collect()
}

/// Batches cycle through source domains in turn; within a domain, samples
/// are drawn without replacement from a reshuffled order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedSampler {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next_domain: usize,
}

impl BalancedSampler {
    /// `sizes[d]` samples in source domain `d`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Data(format!("every source domain needs samples, sizes {sizes:?}")));
        }
        let mut s = Self {
            orders: sizes.iter().map(|&n| (0..n).collect()).collect(),
            cursors: vec![0; sizes.len()],
            next_domain: 0,
        };
        for d in 0..sizes.len() {
            s.reshuffle(d, rng);
        }
        Ok(s)
    }

    fn reshuffle(&mut self, d: usize, rng: &mut impl Rng) {
        use rand::seq::SliceRandom;
        self.orders[d].shuffle(rng);
        self.cursors[d] = 0;
    }

    /// `(domain index, sample index)` pairs.
    pub fn next_batch(&mut self, batch: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        (0..batch)
            .map(|_| {
                let d = self.next_domain;
                self.next_domain = (d + 1) % self.orders.len();
                if self.cursors[d] == self.orders[d].len() {
                    self.reshuffle(d, rng);
                }
                let i = self.orders[d][self.cursors[d]];
                self.cursors[d] += 1;
                (d, i)
            })
            .collect()
    }
}

/// Stacks samples into `([B, C, H, W], [B, K, H, W])`.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (is, ms) = (first.image.shape().to_vec(), first.mask.shape().to_vec());
    let mut img = Vec::with_capacity(samples.len() * first.image.len());
    let mut msk = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != is.as_slice() || s.mask.shape() != ms.as_slice() {
            return Err(Error::Shape(format!("sample {} differs in size from {}", s.name, first.name)));
        }
        img.extend_from_slice(s.image.data());
        msk.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, is[0], is[1], is[2]], img)?,
        Tensor::new(&[b, ms[0], ms[1], ms[2]], msk)?,
    ))
}

/// Groups sample indices by volume id; samples without one stand alone.
pub fn volume_groups(samples: &[Sample]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut singles = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match &s.volume {
            Some(v) => groups.entry(v.clone()).or_default().push(i),
            None => singles.push(vec![i]),
        }
    }
    singles.extend(groups.into_values());
    singles
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style() -> DomainStyle {
        default_domains().remove(0)
    }

    #[test]
    fn synthetic_is_deterministic_and_normalized() {
        let a = generate_synthetic(0, &style(), 3, 32, 2, 7).unwrap();
        let b = generate_synthetic(0, &style(), 3, 32, 2, 7).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            // cup inside disc, both non-empty
            let hw = 32 * 32;
            let (disc, cup) = s.mask.data().split_at(hw);
            assert!(cup.iter().zip(disc).all(|(c, d)| *c <= *d));
            assert!(cup.iter().sum::<f64>() > 0.0);
        }
        assert!(generate_synthetic(0, &style(), 0, 32, 2, 7).unwrap().is_empty());
    }

    #[test]
    fn brightness_offset_shifts_mean_and_keeps_masks() {
        let mut lo = style();
        lo.brightness = -0.1;
        lo.tint = vec![1.0; 3];
        lo.texture = 0.0;
        lo.noise = 0.0;
        lo.contrast = 0.5;
        let mut hi = lo.clone();
        hi.brightness = 0.2;
        let a = generate_synthetic(0, &lo, 4, 32, 2, 3).unwrap();
        let b = generate_synthetic(1, &hi, 4, 32, 2, 3).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.mask, y.mask);
            let ma = x.image.data().iter().map(|&v| unnormalize(v)).sum::<f64>() / x.image.len() as f64;
            let mb = y.image.data().iter().map(|&v| unnormalize(v)).sum::<f64>() / y.image.len() as f64;
            assert!((mb - ma - 0.3).abs() < 1e-9, "{}", mb - ma);
        }
    }

    #[test]
    fn normalization_round_trip() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((unnormalize(normalize(v)) - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn splits() {
        let p = make_splits(&[1, 2, 3, 4], 2).unwrap();
        assert_eq!(p.sources, vec![1, 3, 4]);
        assert_eq!(sweep_plans(&[1, 2, 3, 4]).unwrap().len(), 4);
        assert!(make_splits(&[1, 2, 3, 4], 5).is_err());
        assert!(make_splits(&[1], 1).is_err());
    }

    #[test]
    fn augment_is_paired_and_bounded() {
        let ds = generate_synthetic(0, &style(), 1, 32, 2, 1).unwrap();
        let s = &ds.samples[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flips = 0;
        for _ in 0..1000 {
            let (out, d) = training_augment(s, &mut rng);
            assert!((CROP_SCALE.0..=CROP_SCALE.1).contains(&d.scale));
            flips += usize::from(d.flip);
            assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!((400..600).contains(&flips));
        let (a, _) = training_augment(s, &mut ChaCha8Rng::seed_from_u64(5));
        let (b, _) = training_augment(s, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn pure_flip_mirrors_image_and_mask_together() {
        let ds = generate_synthetic(0, &style(), 1, 16, 2, 2).unwrap();
        let s = &ds.samples[0];
        let flip = |y: f64, x: f64| (y, 16.0 - x);
        let img = resample(&s.image, 16, 16, -1.0, flip);
        let msk = resample(&s.mask, 16, 16, 0.0, flip);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert!((img.data()[(c * 16 + y) * 16 + x] - s.image.data()[(c * 16 + y) * 16 + 15 - x]).abs() < 1e-12);
                }
            }
        }
        for i in 0..msk.len() {
            let (k, y, x) = (i / 256, (i / 16) % 16, i % 16);
            assert_eq!(msk.data()[i], s.mask.data()[(k * 16 + y) * 16 + 15 - x]);
        }
    }

    #[test]
    fn sampler_is_domain_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BalancedSampler::new(&[40, 7, 13], &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            for (d, i) in s.next_batch(4, &mut rng) {
                counts[d] += 1;
                assert!(i < [40, 7, 13][d]);
            }
        }
        for c in counts {
            let share = c as f64 / 4000.0;
            assert!((share - 1.0 / 3.0).abs() < 0.05);
        }
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(0, &style(), 3, 16, 2, 4).unwrap();
        export_folder(&ds, dir.path()).unwrap();
        let opts = FolderOptions { size: 16, channels: 3, n_classes: 2, keep_original: false };
        let back = load_folder(dir.path(), 0, "d", &opts).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 255.0 + 1e-12);
        }
        std::fs::remove_file(dir.path().join("masks").join(format!("{}_c1.png", ds.samples[1].name))).unwrap();
        let err = load_folder(dir.path(), 0, "d", &opts).unwrap_err().to_string();
        assert!(err.contains(&ds.samples[1].name), "{err}");
    }

    #[test]
    fn volumes_group_by_prefix() {
        let mk = |n: &str, v: Option<&str>| Sample {
            image: Tensor::zeros(&[1, 2, 2]),
            mask: Tensor::zeros(&[1, 2, 2]),
            name: n.into(),
            volume: v.map(str::to_string),
            original_mask: None,
        };
        let s = vec![mk("a__0", Some("a")), mk("x", None), mk("a__1", Some("a"))];
        assert_eq!(volume_groups(&s), vec![vec![1], vec![0, 2]]);
    }
}
