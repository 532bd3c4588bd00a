//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

mod gradcheck;

pub use gradcheck::{run_grad_checks, toy_problem, GradCheckRow, GradCheckSettings};

use crate::data::{load_dataset, per_class_text_embedding, save_dataset, synth_generate, EmbeddingDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, retrieve, ApVariant, MetricsReport, QueryMode, RetrievalOptions};
use crate::model::{Dims, DivergenceMode};
use crate::train::{load_checkpoint, save_checkpoint, write_log, Ablation, Trainer, TrainConfig, WrongClassMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "zscrgan", version, about = "Zero-shot text-to-image retrieval with a conditional WGAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// `key=value` config file (`#` starts a comment)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub n_outer: Option<usize>,
    /// `none` or flags joined by `+`, e.g. `no_reg+no_triplet`
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// Train generator, text encoder and CSEM together on one objective
    #[arg(long)]
    pub joint: bool,
    #[arg(long)]
    pub wrong_class: Option<WrongClassMode>,
    /// Extra `key=value` config overrides, applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApArg {
    /// Divide by the relevant items found in the top k
    Found,
    /// Divide by min(total relevant, k)
    Classical,
}

impl From<ApArg> for ApVariant {
    fn from(a: ApArg) -> Self {
        match a {
            ApArg::Found => ApVariant::FoundInTopK,
            ApArg::Classical => ApVariant::Classical,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct EvalFlags {
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Sample the latent code instead of using its mean
    #[arg(long)]
    pub sample_code: bool,
    /// Noise draws averaged into each query embedding
    #[arg(long, default_value_t = 1)]
    pub noise_draws: usize,
    #[arg(long, value_enum, default_value_t = ApArg::Found)]
    pub ap: ApArg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset
    Synth {
        #[arg(long, default_value_t = 12)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        seen: usize,
        #[arg(long, default_value_t = 60)]
        items: usize,
        #[arg(long, default_value_t = 32)]
        di: usize,
        #[arg(long, default_value_t = 16)]
        dt: usize,
        #[arg(long, default_value_t = 0.05)]
        image_noise: f64,
        #[arg(long, default_value_t = 0.05)]
        text_noise: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset and write a checkpoint
    Train {
        dataset: PathBuf,
        /// CSV of per-step losses
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the unseen classes
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Rank the unseen images for one class
    Retrieve {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long = "class")]
        class: u32,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients of every loss with central differences
    Gradcheck {
        #[arg(long, default_value_t = 1e-2)]
        threshold: f64,
        /// Central-difference step, taken in 64-bit
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Run the check in 64-bit arithmetic
        #[arg(long)]
        f64: bool,
        #[arg(long, default_value_t = 3)]
        dt: usize,
        #[arg(long, default_value_t = 4)]
        di: usize,
        #[arg(long, default_value_t = 3)]
        dc: usize,
        #[arg(long, default_value_t = 2)]
        dz: usize,
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [5, 4])]
        gen_hidden: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        disc_hidden: usize,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value = "kl")]
        divergence: DivergenceMode,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate the full model and each ablation
    Ablate {
        dataset: PathBuf,
        /// Evaluate every this many outer iterations for the curves
        #[arg(long, default_value_t = 1)]
        eval_every: usize,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Built-in defaults, then the config file, then flags, then `--set`.
pub fn resolve_config(common: &Common, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_kv_text(&std::fs::read_to_string(p)?)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = flags.n_outer {
        cfg.n_outer = n;
    }
    if let Some(a) = flags.ablate {
        cfg.ablation = a;
    }
    if flags.joint {
        cfg.joint = true;
    }
    if let Some(w) = flags.wrong_class {
        cfg.wrong_class_mode = w;
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "override must look like key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Retrieval settings for a model trained with `cfg`. Without the GAN the
/// latent pivot itself is the query.
pub fn retrieval_options(cfg: &TrainConfig, flags: &EvalFlags, seed: u64) -> RetrievalOptions {
    RetrievalOptions {
        k: flags.k,
        seed,
        query: if cfg.ablation.no_gan {
            QueryMode::Pivot
        } else {
            QueryMode::Generated
        },
        sample_code: flags.sample_code,
        noise_draws: flags.noise_draws,
        ap: flags.ap.into(),
    }
}

fn banner(cfg: &TrainConfig) {
    for line in cfg.to_kv_text().lines() {
        eprintln!("# {line}");
    }
}

fn required<'a>(out: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    out.as_deref()
        .ok_or_else(|| Error::config("out", format!("-o/--out <{what}> is required")))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(std::fs::File::create(path)?))
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            classes,
            seen,
            items,
            di,
            dt,
            image_noise,
            text_noise,
            common,
        } => {
            let spec = SyntheticSpec {
                n_classes: classes,
                n_seen: seen,
                items_per_class: items,
                d_i: di,
                d_t: dt,
                image_noise_std: image_noise,
                text_noise_std: text_noise,
                seed: common.seed.unwrap_or(0),
            };
            eprintln!("# {spec:?}");
            let out = required(&common.out, "dataset")?;
            let ds = synth_generate(&spec)?;
            save_dataset(&ds, out)?;
            println!(
                "classes={} seen={} unseen={} items={}",
                ds.class_count(),
                ds.seen.len(),
                ds.unseen.len(),
                ds.items.len()
            );
            Ok(0)
        }
        Command::Train {
            dataset,
            log,
            train,
            common,
        } => {
            let cfg = resolve_config(&common, &train)?;
            banner(&cfg);
            let out = required(&common.out, "checkpoint")?;
            let ds = load_dataset(&dataset)?;
            let mut t = Trainer::new(&ds, cfg)?;
            t.run()?;
            save_checkpoint(&t.checkpoint(), out)?;
            if let Some(p) = log {
                write_log(&t.log, create(&p)?)?;
            }
            let c = t.counters;
            println!(
                "outer={} d_updates={} g_updates={} csem_updates={} log_rows={}",
                c.outer_done,
                c.d_updates,
                c.g_updates,
                c.csem_updates,
                t.log.len()
            );
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            dataset,
            eval,
            common,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            banner(&ck.config);
            let ds = load_dataset(&dataset)?;
            let opts = retrieval_options(&ck.config, &eval, common.seed.unwrap_or(0));
            let report = evaluate(&ck.params, &ds, &opts)?;
            if let Some(p) = &common.out {
                report.write_csv(create(p)?)?;
            }
            print!("{}", report.summary());
            Ok(0)
        }
        Command::Retrieve {
            checkpoint,
            dataset,
            class,
            eval,
            common,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            banner(&ck.config);
            let ds = load_dataset(&dataset)?;
            if !ds.unseen.contains(&class) {
                return Err(Error::UnknownClass { class });
            }
            let opts = retrieval_options(&ck.config, &eval, common.seed.unwrap_or(0));
            let query = per_class_text_embedding(&ds, class)?;
            let ranked = retrieve(&ck.params, &ds, &query, &ds.unseen_indices(), &opts)?;
            let mut text = String::new();
            for (r, &(sim, idx)) in ranked.entries.iter().enumerate() {
                let label = ds.items[idx].label;
                let _ = writeln!(text, "{},{idx},{sim:.6},{label},{}", r + 1, u8::from(label == class));
            }
            emit(&common.out, &text)?;
            Ok(0)
        }
        Command::Gradcheck {
            threshold,
            eps,
            f64,
            dt,
            di,
            dc,
            dz,
            gen_hidden,
            disc_hidden,
            batch,
            divergence,
            common,
        } => {
            let s = GradCheckSettings {
                dims: Dims {
                    d_t: dt,
                    d_i: di,
                    d_c: dc,
                    d_z: dz,
                    gen_hidden: [gen_hidden[0], gen_hidden[1]],
                    disc_hidden,
                },
                batch,
                seed: common.seed.unwrap_or(0),
                eps,
                divergence,
                wide: f64,
            };
            eprintln!("# {s:?} threshold={threshold}");
            let rows = run_grad_checks(&s)?;
            let mut text = String::from("loss,max_rel_err,coordinates,status\n");
            let mut ok = true;
            for r in &rows {
                let pass = r.report.max_rel_err < threshold;
                ok &= pass;
                let _ = writeln!(
                    text,
                    "{},{:.3e},{},{}",
                    r.name,
                    r.report.max_rel_err,
                    r.report.coordinates,
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            emit(&common.out, &text)?;
            Ok(if ok { 0 } else { 1 })
        }
        Command::Ablate {
            dataset,
            eval_every,
            train,
            eval,
            common,
        } => {
            let base = resolve_config(&common, &train)?;
            banner(&base);
            let out = required(&common.out, "directory")?;
            if eval_every == 0 {
                return Err(Error::config("eval_every", "must be at least 1"));
            }
            let ds = load_dataset(&dataset)?;
            let results = ablation_study(&ds, &base, &eval, common.seed.unwrap_or(0), eval_every);
            std::fs::create_dir_all(out)?;
            let table = ablation_table(&results, eval.k);
            std::fs::write(out.join("ablation.csv"), &table)?;
            std::fs::write(out.join("curves.csv"), ablation_curves(&results, eval.k))?;
            print!("{table}");
            Ok(0)
        }
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub variant: String,
    /// Final metrics, or the error that stopped the run.
    pub outcome: std::result::Result<MetricsReport, String>,
    /// `(outer iteration, prec@k)` at each evaluation point reached.
    pub curve: Vec<(usize, f64)>,
}

/// The full model followed by each variant, all sharing `base`'s seed.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut full = base.clone();
    full.ablation = Ablation::default();
    full.joint = false;
    full.wrong_class_mode = WrongClassMode::Random;
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    let abl = |s: &str| s.parse::<Ablation>().expect("valid ablation literal");
    vec![
        ("full".to_string(), full.clone()),
        ("no_wrong_class".into(), with(&|c| c.ablation = abl("no_wrong_class"))),
        ("no_reg+no_triplet".into(), with(&|c| c.ablation = abl("no_reg+no_triplet"))),
        ("no_triplet".into(), with(&|c| c.ablation = abl("no_triplet"))),
        ("no_reg".into(), with(&|c| c.ablation = abl("no_reg"))),
        ("no_gan".into(), with(&|c| c.ablation = abl("no_gan"))),
        ("joint".into(), with(&|c| c.joint = true)),
        ("most_similar".into(), with(&|c| c.wrong_class_mode = WrongClassMode::MostSimilar)),
        ("kmeans".into(), with(&|c| c.wrong_class_mode = WrongClassMode::Kmeans)),
    ]
}

/// Trains `cfg` on `ds`, evaluating every `eval_every` outer iterations and
/// at the end. Evaluation points are appended to `curve` as they happen.
pub fn train_and_evaluate(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    flags: &EvalFlags,
    eval_seed: u64,
    eval_every: usize,
    curve: &mut Vec<(usize, f64)>,
) -> Result<MetricsReport> {
    if eval_every == 0 {
        return Err(Error::config("eval_every", "must be at least 1"));
    }
    let opts = retrieval_options(cfg, flags, eval_seed);
    let mut t = Trainer::new(ds, cfg.clone())?;
    t.run_with(|it, tr| {
        if it % eval_every == 0 || it == tr.cfg.n_outer {
            curve.push((it, evaluate(&tr.params, ds, &opts)?.prec));
        }
        Ok(())
    })?;
    evaluate(&t.params, ds, &opts)
}

/// Runs every variant. A variant whose training fails is reported with its
/// error instead of aborting the study.
pub fn ablation_study(
    ds: &EmbeddingDataset,
    base: &TrainConfig,
    flags: &EvalFlags,
    eval_seed: u64,
    eval_every: usize,
) -> Vec<AblationResult> {
    ablation_variants(base)
        .into_iter()
        .map(|(variant, cfg)| {
            let mut curve = Vec::new();
            let outcome =
                train_and_evaluate(ds, &cfg, flags, eval_seed, eval_every, &mut curve).map_err(|e| e.to_string());
            AblationResult { variant, outcome, curve }
        })
        .collect()
}

pub fn ablation_table(results: &[AblationResult], k: usize) -> String {
    let mut s = format!("variant,prec_at_{k},map_at_{k},top1,status\n");
    for r in results {
        match &r.outcome {
            Ok(m) => {
                let _ = writeln!(s, "{},{:.6},{:.6},{:.6},ok", r.variant, m.prec, m.map, m.top1);
            }
            Err(e) => {
                let _ = writeln!(s, "{},,,,{}", r.variant, e.replace([',', '\n'], ";"));
            }
        }
    }
    s
}

pub fn ablation_curves(results: &[AblationResult], k: usize) -> String {
    let mut s = format!("variant,outer_it,prec_at_{k}\n");
    for r in results {
        for (it, p) in &r.curve {
            let _ = writeln!(s, "{},{it},{p:.6}", r.variant);
        }
    }
    s
}
