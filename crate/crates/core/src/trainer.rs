//! Training loop with the original/enhanced dual branch, evaluation on a
//! held-out domain, leave-one-domain-out sweeps and run directories.
//!
//! Run directory contents:
//!
//! ```text
//! config.toml          resolved configuration
//! run.json             crate version, seed, held-out domain
//! metrics.jsonl        one record per iteration
//! checkpoints/*.bin    periodic snapshots, best.bin, final.bin
//! report_{final,best}.{txt,json}
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment_gva::Gva;
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{
    collate, generate_synthetic, load_folder, make_splits, resize_nearest, training_augment, volume_groups,
    BalancedSampler, DomainDataset, FolderOptions, Sample, SplitPlan,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle};
use crate::metrics::{BinaryMask, ClassScores, EvalReport};
use crate::network::{predict_masks, LsaRuntime, Network, NoiseSource};
use crate::ops::Activation;
use crate::optim::{clip_global_norm, poly_lr, AdamW};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Network and enhancement parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub net: Network,
    pub gva: Gva,
}

impl Model {
    pub fn new(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::register(&cfg.network, &mut store, "net", rng)?;
        let gva = Gva::register(&cfg.gva, &mut store, "gva", rng)?;
        Ok(Self { store, net, gva })
    }

    /// Inference logits for `[B, C, H, W]`, `chunk` images at a time.
    pub fn logits(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let [b, c, h, w] = images.dims4()?;
        let per = c * h * w;
        let mut out = Vec::new();
        let mut shape = Vec::new();
        for start in (0..b).step_by(chunk.max(1)) {
            let n = chunk.max(1).min(b - start);
            let x = Tensor::new(&[n, c, h, w], images.data()[start * per..(start + n) * per].to_vec())?;
            let y = self.net.infer(&self.store, &x)?;
            shape = y.shape().to_vec();
            out.extend_from_slice(y.data());
        }
        shape[0] = b;
        Tensor::new(&shape, out)
    }

    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(_, n, t)| (format!("param/{n}"), t.clone())).collect()
    }

    /// Copies `param/<name>` tensors from a checkpoint.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", self.store.name(id));
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}", t.shape())));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Train and test splits of every domain, in configuration order.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<DomainDataset>,
    pub test: Vec<DomainDataset>,
}

impl Datasets {
    pub fn names(&self) -> Vec<String> {
        self.train.iter().map(|d| d.name.clone()).collect()
    }
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let k = d.n_classes();
    let mut train = Vec::new();
    let mut test = Vec::new();
    match d.source {
        DataSource::Synthetic => {
            for (i, style) in d.domains.iter().enumerate() {
                let base = d.seed.wrapping_mul(1_000_003).wrapping_add(2 * i as u64);
                train.push(generate_synthetic(i, style, d.train_per_domain, d.size, k, base)?);
                test.push(generate_synthetic(i, style, d.test_per_domain, d.size, k, base + 1)?);
            }
        }
        DataSource::Folder => {
            let root = PathBuf::from(&d.folder_root);
            for (i, name) in d.folder_domains.iter().enumerate() {
                let opts = FolderOptions {
                    size: d.size,
                    channels: d.channels,
                    n_classes: k,
                    keep_original: false,
                };
                train.push(load_folder(&root.join(name).join("train"), i, name, &opts)?);
                let opts = FolderOptions {
                    keep_original: d.eval_original_resolution,
                    ..opts
                };
                test.push(load_folder(&root.join(name).join("test"), i, name, &opts)?);
            }
        }
    }
    Ok(Datasets { train, test })
}

/// Scores predicted masks `[K, H, W]` (one per sample) against a dataset.
/// Samples sharing a volume id are stacked and scored once.
pub fn evaluate_predictions(preds: &[Tensor], ds: &DomainDataset, class_names: &[String]) -> Result<EvalReport> {
    if preds.len() != ds.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} samples", preds.len(), ds.len())));
    }
    let k = class_names.len();
    let plane = |t: &Tensor, c: usize| -> Result<BinaryMask> {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        BinaryMask::from_tensor(&Tensor::new(&[h, w], t.data()[c * h * w..(c + 1) * h * w].to_vec())?)
    };
    let mut scores = vec![ClassScores::default(); k];
    for group in volume_groups(&ds.samples) {
        for (c, sc) in scores.iter_mut().enumerate() {
            let mut p = Vec::with_capacity(group.len());
            let mut t = Vec::with_capacity(group.len());
            for &i in &group {
                let s: &Sample = &ds.samples[i];
                let truth = s.original_mask.as_ref().unwrap_or(&s.mask);
                let pred = if preds[i].shape()[1..] == truth.shape()[1..] {
                    preds[i].clone()
                } else {
                    resize_nearest(&preds[i], truth.shape()[1], truth.shape()[2])
                };
                p.push(plane(&pred, c)?);
                t.push(plane(truth, c)?);
            }
            sc.push(&BinaryMask::stack(&p)?, &BinaryMask::stack(&t)?)?;
        }
    }
    Ok(EvalReport {
        rows: scores
            .iter()
            .zip(class_names)
            .map(|(s, name)| s.summarize(&ds.name, name))
            .collect(),
    })
}

/// Inference-mode evaluation (no enhancement, no style augmentation).
pub fn evaluate(model: &Model, ds: &DomainDataset, class_names: &[String]) -> Result<EvalReport> {
    if ds.is_empty() {
        return Ok(EvalReport::default());
    }
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let (x, _) = collate(&refs)?;
    let masks = predict_masks(&model.logits(&x, 8)?);
    let [b, k, h, w] = masks.dims4()?;
    let preds: Vec<Tensor> = (0..b)
        .map(|i| Tensor::new(&[k, h, w], masks.data()[i * k * h * w..(i + 1) * k * h * w].to_vec()))
        .collect::<Result<_>>()?;
    evaluate_predictions(&preds, ds, class_names)
}

/// One optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
    /// Images routed through the enhancement network.
    pub gated: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iteration: usize,
    pub source_dice: f64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    config: RunConfig,
    iteration: usize,
    rng: RngState,
    optimizer_step: u64,
    sampler: BalancedSampler,
    best: Option<BestSnapshot>,
}

/// Mutable training state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub plan: SplitPlan,
    pub iteration: usize,
    pub best: Option<BestSnapshot>,
    opt: AdamW,
    rng: ChaCha8Rng,
    sampler: BalancedSampler,
    sources: Vec<DomainDataset>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: &Datasets) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = Model::new(cfg, &mut rng)?;
        let ids: Vec<usize> = (0..data.train.len()).collect();
        let plan = make_splits(&ids, cfg.data.held_out)?;
        let sources: Vec<DomainDataset> = plan.sources.iter().map(|&d| data.train[d].clone()).collect();
        let sizes: Vec<usize> = sources.iter().map(DomainDataset::len).collect();
        let sampler = BalancedSampler::new(&sizes, &mut rng)?;
        let opt = AdamW::new(&model.store, cfg.train.weight_decay);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            plan,
            iteration: 0,
            best: None,
            opt,
            rng,
            sampler,
            sources,
        })
    }

    pub fn lr(&self) -> f64 {
        let t = &self.cfg.train;
        poly_lr(self.iteration, t.iterations, t.base_lr, t.lr_power)
    }

    /// A domain-balanced, augmented batch from the source domains.
    pub fn next_batch(&mut self) -> Result<(Tensor, Tensor)> {
        let picks = self.sampler.next_batch(self.cfg.train.batch_size, &mut self.rng);
        let mut owned = Vec::with_capacity(picks.len());
        for (d, i) in picks {
            let s = &self.sources[d].samples[i];
            owned.push(if self.cfg.data.augment {
                training_augment(s, &mut self.rng).0
            } else {
                s.clone()
            });
        }
        collate(&owned.iter().collect::<Vec<_>>())
    }

    /// Both branches, combined loss, one AdamW step on all parameters.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<StepRecord> {
        let t = self.cfg.train.clone();
        let lr = self.lr();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let store = &self.model.store;
        let net = &self.model.net;
        let lsa_cfg = &self.cfg.lsa;
        let rng = &mut self.rng;
        let mut branch = |g: &mut Graph, input| -> Result<_> {
            let mut rt = LsaRuntime { cfg: lsa_cfg, noise: NoiseSource::Random(&mut *rng) };
            let logits = net.forward(g, store, input, t.enable_lsa.then_some(&mut rt))?;
            let p = g.activation(logits, Activation::Sigmoid);
            let ce = g.ce_loss(p, y)?;
            let dice = g.dice_loss(p, y)?;
            Ok((p, ce, dice))
        };
        let (p_o, ce_o, dice_o) = branch(&mut g, xv)?;
        let mut terms = vec![ce_o, dice_o];
        let (mut ce_e, mut dice_e, mut consist, mut gated) = (None, None, None, 0);
        if t.enable_gva {
            let (xe, gate) = self.model.gva.forward(&mut g, store, xv, true)?;
            gated = gate.count();
            let (p_e, ce, dice) = branch(&mut g, xe)?;
            terms.extend([ce, dice]);
            ce_e = Some(ce);
            dice_e = Some(dice);
            if t.enable_consistency {
                let c = g.consistency_loss(p_o, p_e)?;
                terms.push(g.scale(c, t.lambda_consist));
                consist = Some(c);
            }
        }
        let total = g.add_n(&terms)?;
        let val = |v: Option<_>| v.map_or(0.0, |v| g.value(v).item());
        let losses = total_loss(
            g.value(ce_o).item(),
            g.value(dice_o).item(),
            val(ce_e),
            val(dice_e),
            val(consist),
            t.lambda_consist,
        )
        .map_err(|e| Error::Numerical(format!("iteration {}: {e}", self.iteration)))?;
        g.backward(total)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.model.store.len()];
        for (id, grad) in g.param_grads() {
            grads[id.index()] = Some(grad.to_vec());
        }
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, t.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("iteration {}: gradient norm {grad_norm}", self.iteration)));
        }
        self.opt.update(&mut self.model.store, &grads, lr);
        let rec = StepRecord { iteration: self.iteration, lr, losses, gated, grad_norm };
        self.iteration += 1;
        Ok(rec)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let (x, y) = self.next_batch()?;
        self.train_step(&x, &y)
    }

    /// Mean Dice over the source domains' test splits.
    pub fn source_validation(&self, data: &Datasets) -> Result<f64> {
        let mut sum = 0.0;
        for &d in &self.plan.sources {
            sum += evaluate(&self.model, &data.test[d], &self.cfg.data.class_names)?.mean_dice();
        }
        Ok(sum / self.plan.sources.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = TrainerMeta {
            config: self.cfg.clone(),
            iteration: self.iteration,
            rng: RngState {
                seed: self.rng.get_seed().to_vec(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            optimizer_step: self.opt.step,
            sampler: self.sampler.clone(),
            best: self.best,
        };
        let mut tensors = self.model.param_tensors();
        for (i, (_, name, _)) in self.model.store.iter().enumerate() {
            tensors.push((format!("adam_m/{name}"), self.opt.m[i].clone()));
            tensors.push((format!("adam_v/{name}"), self.opt.v[i].clone()));
        }
        Ok(Checkpoint { meta: serde_json::to_value(meta)?, tensors })
    }

    /// Rebuilds a trainer from a checkpoint; continuing produces the same
    /// losses as the uninterrupted run.
    pub fn restore(ck: &Checkpoint, data: &Datasets) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(ck.meta.clone())?;
        let mut tr = Self::new(&meta.config, data)?;
        tr.model.load_params(ck)?;
        let names: Vec<String> = tr.model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (key, dst) in [("adam_m", &mut tr.opt.m[i]), ("adam_v", &mut tr.opt.v[i])] {
                let t = ck
                    .tensor(&format!("{key}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}/{name}")))?;
                *dst = t.clone();
            }
        }
        tr.opt.step = meta.optimizer_step;
        let seed: [u8; 32] = meta
            .rng
            .seed
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(
            meta.rng
                .word_pos
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
        );
        tr.rng = rng;
        tr.sampler = meta.sampler;
        tr.iteration = meta.iteration;
        tr.best = meta.best;
        Ok(tr)
    }
}

/// Reads the configuration stored in a training checkpoint and loads its
/// parameters into a fresh model.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Model)> {
    let meta: TrainerMeta = serde_json::from_value(ck.meta.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(&meta.config, &mut rng)?;
    model.load_params(ck)?;
    Ok((meta.config, model))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub held_out: String,
    pub records: Vec<StepRecord>,
    pub final_report: EvalReport,
    pub best: Option<(BestSnapshot, EvalReport)>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_report(dir: &Path, stem: &str, title: &str, rep: &EvalReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.txt")), format!("{title}\n{}", rep.table()).as_bytes())?;
    write_file(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(rep)?)
}

/// Writes `config.toml` and `run.json` into `dir`.
pub fn write_run_header(cfg: &RunConfig, dir: &Path, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    let info = serde_json::json!({
        "crate": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.train.seed,
        "data_seed": cfg.data.seed,
        "domains": cfg.data.domain_names(),
        "held_out": cfg.data.domain_names().get(cfg.data.held_out),
        "extra": extra,
    });
    write_file(&dir.join("run.json"), &serde_json::to_vec_pretty(&info)?)
}

/// Full training run on the configured held-out split. With `out`, writes
/// the run directory; the held-out domain is evaluated with the final and
/// the best source-validation parameters.
pub fn run_training(cfg: &RunConfig, data: &Datasets, out: Option<&Path>) -> Result<TrainOutcome> {
    run_training_with(cfg, data, out, &mut |_| {})
}

/// [`run_training`] with a callback after every step.
pub fn run_training_with(
    cfg: &RunConfig,
    data: &Datasets,
    out: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg, data)?;
    let names = data.names();
    let held_out = names[cfg.data.held_out].clone();
    let mut log = match out {
        Some(dir) => {
            write_run_header(cfg, dir, serde_json::Value::Null)?;
            let ck = dir.join("checkpoints");
            std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
            let p = dir.join("metrics.jsonl");
            Some((std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let total = cfg.train.iterations;
    let every = if cfg.train.checkpoint_fraction > 0.0 {
        ((total as f64 * cfg.train.checkpoint_fraction).round() as usize).max(1)
    } else {
        0
    };
    let mut best_params: Option<Vec<(String, Tensor)>> = None;
    let mut records = Vec::with_capacity(total);
    while tr.iteration < total {
        let rec = match tr.step() {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                if let Some(dir) = out {
                    let snap = serde_json::json!({
                        "iteration": tr.iteration,
                        "error": e.to_string(),
                        "last_records": records.iter().rev().take(5).collect::<Vec<&StepRecord>>(),
                    });
                    write_file(&dir.join("diagnostic.json"), &serde_json::to_vec_pretty(&snap)?)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((w, p)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
        }
        on_step(&rec);
        records.push(rec);
        if every > 0 && (tr.iteration % every == 0 || tr.iteration == total) {
            let score = tr.source_validation(data)?;
            if tr.best.is_none_or(|b| score > b.source_dice) {
                tr.best = Some(BestSnapshot { iteration: tr.iteration, source_dice: score });
                best_params = Some(tr.model.param_tensors());
                if let Some(dir) = out {
                    tr.checkpoint()?.save(&dir.join("checkpoints").join("best.bin"))?;
                }
            }
            if let Some(dir) = out {
                tr.checkpoint()?.save(&dir.join("checkpoints").join(format!("ckpt_{:06}.bin", tr.iteration)))?;
            }
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let classes = &cfg.data.class_names;
    let target = &data.test[cfg.data.held_out];
    let final_report = evaluate(&tr.model, target, classes)?;
    let best = match (tr.best, best_params) {
        (Some(b), Some(params)) => {
            let mut m = tr.model.clone();
            m.load_params(&Checkpoint { meta: serde_json::Value::Null, tensors: params })?;
            Some((b, evaluate(&m, target, classes)?))
        }
        _ => None,
    };
    if let Some(dir) = out {
        tr.checkpoint()?.save(&dir.join("checkpoints").join("final.bin"))?;
        write_report(dir, "report_final", &format!("held-out {held_out}, final iteration {total}"), &final_report)?;
        if let Some((b, rep)) = &best {
            let title = format!(
                "held-out {held_out}, best source validation (iteration {}, dice {:.4})",
                b.iteration, b.source_dice
            );
            write_report(dir, "report_best", &title, rep)?;
        }
    }
    Ok(TrainOutcome { held_out, records, final_report, best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub held_out: usize,
    pub domain: String,
    pub dice: f64,
    pub asd: Option<f64>,
    pub seconds: f64,
    pub report: EvalReport,
}

/// Leave-one-domain-out results over several seeds (final checkpoints).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub label: String,
    pub domains: Vec<String>,
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    /// Mean held-out Dice of domain `d` over seeds.
    pub fn domain_dice(&self, d: usize) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.held_out == d).map(|r| r.dice).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn domain_asd(&self, d: usize) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.held_out == d).filter_map(|r| r.asd).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean over tasks and seeds.
    pub fn average_dice(&self) -> f64 {
        self.runs.iter().map(|r| r.dice).sum::<f64>() / self.runs.len() as f64
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// One row of held-out Dice (×100) per seed, then the mean row.
    pub fn table(&self) -> String {
        let mut out = format!("{:<28}", self.label);
        for d in &self.domains {
            out.push_str(&format!(" {d:>10}"));
        }
        out.push_str(&format!(" {:>10}\n", "avg"));
        for s in self.seeds() {
            out.push_str(&format!("{:<28}", format!("  seed {s}")));
            let runs: Vec<&SweepRun> = self.runs.iter().filter(|r| r.seed == s).collect();
            for r in &runs {
                out.push_str(&format!(" {:>10.2}", 100.0 * r.dice));
            }
            let avg = runs.iter().map(|r| r.dice).sum::<f64>() / runs.len() as f64;
            out.push_str(&format!(" {:>10.2}\n", 100.0 * avg));
        }
        out.push_str(&format!("{:<28}", "  mean dice"));
        for d in 0..self.domains.len() {
            out.push_str(&format!(" {:>10.2}", 100.0 * self.domain_dice(d)));
        }
        out.push_str(&format!(" {:>10.2}\n", 100.0 * self.average_dice()));
        out.push_str(&format!("{:<28}", "  mean asd"));
        for d in 0..self.domains.len() {
            match self.domain_asd(d) {
                Some(a) => out.push_str(&format!(" {a:>10.3}")),
                None => out.push_str(&format!(" {:>10}", "-")),
            }
        }
        out.push('\n');
        out
    }
}

/// Trains one model per (seed, held-out domain). `progress` sees each run
/// as it finishes. With `out`, every run gets its own directory.
pub fn run_sweep(
    cfg: &RunConfig,
    data: &Datasets,
    label: &str,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&SweepRun),
) -> Result<SweepReport> {
    let domains = data.names();
    if domains.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two domains".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.train.sweep_seeds {
        for held_out in 0..domains.len() {
            let mut c = cfg.clone();
            c.train.seed = seed;
            c.data.held_out = held_out;
            let dir = out.map(|o| o.join(format!("seed{seed}_{}", domains[held_out])));
            let start = Instant::now();
            let res = run_training(&c, data, dir.as_deref())?;
            let run = SweepRun {
                seed,
                held_out,
                domain: domains[held_out].clone(),
                dice: res.final_report.mean_dice(),
                asd: res.final_report.mean_asd(),
                seconds: start.elapsed().as_secs_f64(),
                report: res.final_report,
            };
            progress(&run);
            runs.push(run);
        }
    }
    let rep = SweepReport { label: label.to_string(), domains, runs };
    if let Some(o) = out {
        write_file(&o.join("sweep.txt"), rep.table().as_bytes())?;
        write_file(&o.join("sweep.json"), &serde_json::to_vec_pretty(&rep)?)?;
    }
    Ok(rep)
}

/// Component toggles `(gva, lsa, consistency)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub gva: bool,
    pub lsa: bool,
    pub consistency: bool,
}

impl Toggles {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.train.enable_gva = self.gva;
        cfg.train.enable_lsa = self.lsa;
        cfg.train.enable_consistency = self.consistency;
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.gva, "GVA"), (self.lsa, "LSA"), (self.consistency, "consistency")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            format!("+{}", on.join("+"))
        }
    }

    /// All eight combinations, baseline first.
    pub fn grid() -> Vec<Toggles> {
        (0..8)
            .map(|i| Toggles { gva: i & 1 != 0, lsa: i & 2 != 0, consistency: i & 4 != 0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.size = 16;
        cfg.data.train_per_domain = 4;
        cfg.data.test_per_domain = 2;
        cfg.network.dims = vec![4, 8];
        cfg.network.depths = vec![1, 1];
        cfg.network.n_state = 2;
        cfg.network.patch_size = 2;
        cfg.network.head_channels = 2;
        cfg.train.batch_size = 3;
        cfg.train.iterations = 4;
        cfg.train.checkpoint_fraction = 0.5;
        cfg
    }

    #[test]
    fn toggles_remove_loss_terms() {
        let mut cfg = tiny();
        Toggles { gva: false, lsa: false, consistency: false }.apply(&mut cfg);
        let data = load_datasets(&cfg).unwrap();
        let mut tr = Trainer::new(&cfg, &data).unwrap();
        let r = tr.step().unwrap();
        let l = r.losses;
        assert_eq!((l.ce_e, l.dice_e, l.consist), (0.0, 0.0, 0.0));
        assert_eq!(l.total, l.ce_o + l.dice_o);
        // identity enhancement and no style draws: branches agree exactly
        let mut cfg = tiny();
        Toggles { gva: true, lsa: false, consistency: true }.apply(&mut cfg);
        cfg.data.domains.iter_mut().for_each(|d| d.brightness = -0.4);
        let mut tr = Trainer::new(&cfg, &data).unwrap();
        let r = tr.step().unwrap();
        assert!(r.gated > 0);
        assert_eq!(r.losses.consist, 0.0);
        assert_eq!(r.losses.ce_o, r.losses.ce_e);
    }

    #[test]
    fn lr_is_monotone_and_ends_at_zero() {
        let cfg = tiny();
        let data = load_datasets(&cfg).unwrap();
        let out = run_training(&cfg, &data, None).unwrap();
        let lrs: Vec<f64> = out.records.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[0], cfg.train.base_lr);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.best.is_some());
    }

    #[test]
    fn evaluation_oracles() {
        let cfg = tiny();
        let data = load_datasets(&cfg).unwrap();
        let ds = &data.test[0];
        let classes = &cfg.data.class_names;
        let perfect: Vec<Tensor> = ds.samples.iter().map(|s| s.mask.clone()).collect();
        let rep = evaluate_predictions(&perfect, ds, classes).unwrap();
        for r in &rep.rows {
            assert_eq!(r.dice_mean, 1.0);
            assert_eq!(r.asd_mean, Some(0.0));
        }
        let empty: Vec<Tensor> = ds.samples.iter().map(|s| Tensor::zeros(s.mask.shape())).collect();
        let rep = evaluate_predictions(&empty, ds, classes).unwrap();
        for r in &rep.rows {
            assert_eq!(r.dice_mean, 0.0);
            assert_eq!(r.asd_excluded, ds.len());
            assert_eq!(r.asd_mean, None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&cfg, &mut rng).unwrap();
        assert_eq!(evaluate(&model, ds, classes).unwrap(), evaluate(&model, ds, classes).unwrap());
    }

    #[test]
    fn ablation_grid_has_eight_distinct_rows() {
        let g = Toggles::grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0].label(), "baseline");
        assert_eq!(g[7].label(), "+GVA+LSA+consistency");
    }
}
