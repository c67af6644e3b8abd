//! `ssmdg`: train, evaluate, sweep, generate data, preview augmentation and
//! self-test.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssmdg::checkpoint::Checkpoint;
use ssmdg::config::RunConfig;
use ssmdg::data::export_folder;
use ssmdg::metrics::EvalReport;
use ssmdg::preview::{random_gva, write_preview};
use ssmdg::selftest::{run_self_test, Fault};
use ssmdg::trainer::{
    evaluate, load_datasets, model_from_checkpoint, run_sweep, run_training_with, write_run_header, SweepReport,
    Toggles,
};
use ssmdg::Error;

#[derive(Parser)]
#[command(name = "ssmdg", version, about = "Domain-generalisable state-space segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for every artifact of the command.
    #[arg(long, default_value = "ssmdg-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the source domains and evaluate the held-out domain.
    Train(Common),
    /// Evaluate a checkpoint on the held-out domain (or all domains).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        all_domains: bool,
    },
    /// Leave-one-domain-out sweep over `train.sweep_seeds`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Repeat the sweep for all eight component toggle combinations.
        #[arg(long)]
        ablation: bool,
    },
    /// Generate the synthetic domains in the folder layout.
    GenData(Common),
    /// Write original/enhanced image pairs with PSNR and SSIM.
    PreviewAug {
        #[command(flatten)]
        common: Common,
        /// Use the enhancer from a training checkpoint instead of random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        per_domain: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the fast invariant suite.
    SelfTest {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Train(c) => train(&c),
        Command::Eval { common, checkpoint, all_domains } => eval(&common, &checkpoint, all_domains),
        Command::Sweep { common, ablation } => sweep(&common, ablation),
        Command::GenData(c) => gen_data(&c),
        Command::PreviewAug { common, checkpoint, per_domain, seed } => preview(&common, checkpoint.as_deref(), per_domain, seed),
        Command::SelfTest { inject_fault } => self_test(inject_fault.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load(c: &Common) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(c.config.as_deref(), &c.set)?)
}

fn create_dir(p: &Path) -> Outcome {
    std::fs::create_dir_all(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

fn write(p: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(p, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

fn train(c: &Common) -> Outcome {
    let cfg = load(c)?;
    let data = load_datasets(&cfg)?;
    let total = cfg.train.iterations;
    let every = (total / 10).max(1);
    let out = run_training_with(&cfg, &data, Some(&c.out), &mut |r| {
        if (r.iteration + 1) % every == 0 {
            eprintln!(
                "iter {:>6}/{total}  lr {:.2e}  loss {:.4}  (ce {:.4} dice {:.4} consist {:.4})",
                r.iteration + 1,
                r.lr,
                r.losses.total,
                r.losses.ce_o,
                r.losses.dice_o,
                r.losses.consist
            );
        }
    })?;
    println!("held-out domain {} (final checkpoint)", out.held_out);
    print!("{}", out.final_report.table());
    if let Some((b, rep)) = &out.best {
        println!("best source validation at iteration {} (dice {:.4})", b.iteration, b.source_dice);
        print!("{}", rep.table());
    }
    println!("artifacts in {}", c.out.display());
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path, all: bool) -> Outcome {
    let ck = Checkpoint::load(checkpoint)?;
    let (base, model) = model_from_checkpoint(&ck)?;
    let cfg = RunConfig::load_over(&base, c.config.as_deref(), &c.set)?;
    if cfg.network != base.network || cfg.gva != base.gva {
        return Err(Failure::Usage("network and gva sections must match the checkpoint".into()));
    }
    let data = load_datasets(&cfg)?;
    let targets: Vec<usize> = if all { (0..data.test.len()).collect() } else { vec![cfg.data.held_out] };
    let mut report = EvalReport::default();
    for d in targets {
        report.rows.extend(evaluate(&model, &data.test[d], &cfg.data.class_names)?.rows);
    }
    write_run_header(&cfg, &c.out, serde_json::json!({ "checkpoint": checkpoint }))?;
    write(&c.out.join("report.txt"), report.table())?;
    write(
        &c.out.join("report.json"),
        serde_json::to_vec_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?,
    )?;
    print!("{}", report.table());
    Ok(())
}

fn sweep(c: &Common, ablation: bool) -> Outcome {
    let cfg = load(c)?;
    let data = load_datasets(&cfg)?;
    let combos = if ablation {
        Toggles::grid()
    } else {
        vec![Toggles {
            gva: cfg.train.enable_gva,
            lsa: cfg.train.enable_lsa,
            consistency: cfg.train.enable_consistency,
        }]
    };
    create_dir(&c.out)?;
    write_run_header(&cfg, &c.out, serde_json::json!({ "ablation": ablation }))?;
    let mut reports: Vec<SweepReport> = Vec::new();
    for t in combos {
        let mut run_cfg = cfg.clone();
        t.apply(&mut run_cfg);
        let label = t.label();
        let dir = if ablation { c.out.join(label.replace('+', "plus_")) } else { c.out.clone() };
        let rep = run_sweep(&run_cfg, &data, &label, Some(&dir), &mut |r| {
            eprintln!("{label}: seed {} held-out {} dice {:.4} ({:.1}s)", r.seed, r.domain, r.dice, r.seconds)
        })?;
        print!("{}", rep.table());
        reports.push(rep);
    }
    if ablation {
        let text: String = reports.iter().map(SweepReport::table).collect();
        write(&c.out.join("ablation.txt"), text)?;
    }
    Ok(())
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = load(c)?;
    let data = load_datasets(&cfg)?;
    write_run_header(&cfg, &c.out, serde_json::Value::Null)?;
    for (split, sets) in [("train", &data.train), ("test", &data.test)] {
        for ds in sets {
            export_folder(ds, &c.out.join(&ds.name).join(split))?;
        }
    }
    println!("wrote {} domains to {}", data.train.len(), c.out.display());
    Ok(())
}

fn preview(c: &Common, checkpoint: Option<&Path>, per_domain: usize, seed: u64) -> Outcome {
    let cfg = load(c)?;
    let data = load_datasets(&cfg)?;
    let (gva, store) = match checkpoint {
        Some(p) => {
            let (_, model) = model_from_checkpoint(&Checkpoint::load(p)?)?;
            (model.gva, model.store)
        }
        None => random_gva(&cfg.gva, seed)?,
    };
    write_run_header(&cfg, &c.out, serde_json::json!({ "checkpoint": checkpoint, "seed": seed }))?;
    let entries = write_preview(&gva, &store, &data, per_domain, &c.out)?;
    for e in &entries {
        let p = e.psnr_db.map_or("inf".into(), |v| format!("{v:.2} dB"));
        println!("{:<10} {:<16} PSNR {p:>9}  SSIM {:.4}  gated {}", e.domain, e.sample, e.ssim, e.gated);
    }
    Ok(())
}

fn self_test(fault: Option<&str>) -> Outcome {
    let fault = match fault {
        Some(f) => Some(f.parse::<Fault>().map_err(Failure::Usage)?),
        None => None,
    };
    let start = std::time::Instant::now();
    let results = run_self_test(fault);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{} checks in {:.2}s", results.len(), start.elapsed().as_secs_f64());
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure::Runtime(format!("self-test failed: {}", r.name))),
        None => Ok(()),
    }
}
