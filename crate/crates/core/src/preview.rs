//! Side-by-side previews of the global appearance augmentation with PSNR
//! and SSIM against the original image.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment_gva::{gate_mask, mean_brightness, Gva};
use crate::data::{save_image, unnormalize};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::Datasets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewEntry {
    pub domain: String,
    pub sample: String,
    pub brightness: f64,
    /// Whether the training-time gate would route this image through `Φ`.
    pub gated: bool,
    /// `None` stands for +∞ (identical images).
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub original: String,
    pub augmented: String,
}

/// Replaces every parameter of `Φ` with a small uniform draw so an
/// untrained enhancer visibly changes its input.
pub fn randomize_gva(gva: &Gva, store: &mut ParamStore, scale: f64, rng: &mut impl Rng) {
    for id in gva.param_ids() {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

/// Enhancer with random non-zero weights drawn from `seed`.
pub fn random_gva(cfg: &crate::augment_gva::GvaConfig, seed: u64) -> Result<(Gva, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gva = Gva::register(cfg, &mut store, "gva", &mut rng)?;
    randomize_gva(&gva, &mut store, 0.3, &mut rng);
    Ok((gva, store))
}

/// Writes `<domain>_<sample>_{original,augmented}.png` for the first
/// `per_domain` training samples of every domain, plus `annotations.tsv`
/// and `annotations.json`.
pub fn write_preview(gva: &Gva, store: &ParamStore, data: &Datasets, per_domain: usize, out: &Path) -> Result<Vec<PreviewEntry>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::new();
    for ds in &data.train {
        for s in ds.samples.iter().take(per_domain) {
            let shape = s.image.shape().to_vec();
            let x = s.image.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
            let y = gva.enhance_tensor(store, &x)?.reshape(&shape)?;
            let brightness = mean_brightness(&x)?[0];
            let gated = gate_mask(&[brightness], gva.cfg.tau).mask[0];
            let unit = |t: &Tensor| t.map(unnormalize);
            let p = psnr(&unit(&s.image), &unit(&y))?;
            let q = ssim(&unit(&s.image), &unit(&y))?;
            let stem = format!("{}_{}", ds.name, s.name);
            let (orig, aug) = (format!("{stem}_original.png"), format!("{stem}_augmented.png"));
            save_image(&s.image, &out.join(&orig))?;
            save_image(&y, &out.join(&aug))?;
            entries.push(PreviewEntry {
                domain: ds.name.clone(),
                sample: s.name.clone(),
                brightness,
                gated,
                psnr_db: p.is_finite().then_some(p),
                ssim: q,
                original: orig,
                augmented: aug,
            });
        }
    }
    let mut tsv = String::from("domain\tsample\tbrightness\tgated\tpsnr_db\tssim\toriginal\taugmented\n");
    for e in &entries {
        let p = e.psnr_db.map_or("inf".to_string(), |v| format!("{v:.2}"));
        tsv.push_str(&format!(
            "{}\t{}\t{:.4}\t{}\t{}\t{:.4}\t{}\t{}\n",
            e.domain, e.sample, e.brightness, e.gated, p, e.ssim, e.original, e.augmented
        ));
    }
    let p = out.join("annotations.tsv");
    std::fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
    let p = out.join("annotations.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&p, e))?;
    Ok(entries)
}
