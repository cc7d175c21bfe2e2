//! The `advseg` command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autodiff::{Fault, Tensor};
use crate::config::RunConfig;
use crate::data::{generate_cohort, read_dataset, write_dataset, write_samples, Cohort, PhantomSample, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_run, argmax_classes, crossval_run, evaluate, make_folds, mean_dice, metrics_csv,
    predict_samples, runs_csv, summary_csv, wilcoxon_csv, CrossvalResult, ExperimentConfig, FoldSpec, Metric,
    MetricRow, SliceMetrics,
};
use crate::gradsuite::{run_suite, SuiteScope, GRAD_TOLERANCE};
use crate::io::write_atomic;
use crate::models::{Checkpoint, Discriminator, Segmentor};
use crate::trainer::{run_training_observed, Scheme, TrainingData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "advseg", version, about = "Adversarial training lab for segmentation networks on synthetic phantoms")]
pub struct Cli {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `paths.out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for data, folds, initialization and sampling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for independent training runs.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort and write it as a dataset directory.
    GenData,
    /// Train one scheme on one cross-validation split.
    Train,
    /// Train every scheme on every permutation and compare them.
    Crossval,
    /// Shrink the training set of one split and compare mce with adversarial training.
    Ablate,
    /// Evaluate a stored checkpoint and emit its predicted label maps.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory; falls back to `paths.dataset`, then to the configured cohort.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Compare every backward rule against central finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::Io { .. } | Error::Format { .. } | Error::Json(_) => EXIT_CONFIG,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

/// Parse `args` (program name first), run the command and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    if let Command::Gradcheck { inject_fault } = cli.command {
        return gradcheck(inject_fault, cli.seed.unwrap_or(1));
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &out_dir(cli, &cfg)?),
        Command::Train => train(&cfg, &out_dir(cli, &cfg)?),
        Command::Crossval => crossval(&cfg, &out_dir(cli, &cfg)?, threads(cli)),
        Command::Ablate => ablate(&cfg, &out_dir(cli, &cfg)?, threads(cli)),
        Command::Eval { checkpoint, dataset } => {
            eval(&cfg, cli.config.is_some(), checkpoint, dataset.as_deref(), &out_dir(cli, &cfg)?)
        }
        Command::Gradcheck { .. } => unreachable!(),
    }
    .map(|()| EXIT_OK)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.out".into()))
}

fn threads(cli: &Cli) -> usize {
    cli.threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn load_cohort(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Cohort> {
    let cohort = match dataset.or(cfg.paths.dataset.as_deref()) {
        Some(dir) => read_dataset(dir)?,
        None => generate_cohort(&cfg.cohort)?,
    };
    if cohort.image_size != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            cohort.image_size, cfg.model.image_size
        )));
    }
    Ok(cohort)
}

fn folds(cfg: &RunConfig, cohort: &Cohort) -> Result<Vec<FoldSpec>> {
    make_folds(&cohort.pos_subjects(), cfg.crossval.n_folds, cfg.crossval.fold_seed)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_atomic(&dir.join(name), text.as_bytes())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cohort = generate_cohort(&cfg.cohort)?;
    let manifest = write_dataset(out, &cohort)?;
    println!(
        "wrote {} slices ({} with lesions) of {} positive and {} negative subjects to {}",
        manifest.slices.len(),
        cohort.pos.len(),
        cohort.pos_subjects().len(),
        cohort.neg_subjects().len(),
        out.display()
    );
    Ok(())
}

fn metric_rows(scheme: Scheme, permutation: usize, metrics: Vec<SliceMetrics>) -> Vec<MetricRow> {
    metrics
        .into_iter()
        .map(|metrics| MetricRow {
            scheme,
            permutation,
            metrics,
        })
        .collect()
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cohort = load_cohort(cfg, None)?;
    let folds = folds(cfg, &cohort)?;
    let fold = &folds[cfg.crossval.permutation];
    let scheme = cfg.train.scheme;
    let data = TrainingData {
        pos: cohort.pos_of(&fold.train_subjects()),
        neg: cohort.neg.iter().collect(),
        selection: cohort.pos_of(fold.selection_subjects()),
    };
    let seg = Segmentor::new(&cfg.model)?;
    let disc = if scheme.uses_discriminator() {
        Some(Discriminator::new(&cfg.model)?)
    } else {
        None
    };
    let outcome = run_training_observed(seg, disc, &data, &cfg.train, &cfg.augment, &mut |e| {
        println!(
            "epoch {:>4}  lr {:.3e}  selection dice {:.4}  skipped steps {}",
            e.epoch, e.lr_s, e.selection_dice, e.skipped_steps
        );
    })?;
    let mut best = outcome.best;
    best.meta.permutation = Some(fold.permutation);
    best.save(&out.join("best.ckpt"))?;
    write_text(out, "trainlog.csv", &outcome.log.to_csv())?;
    write_text(out, "selection.csv", &outcome.log.selection_csv())?;

    let (seg, _) = best.restore()?;
    let metrics = evaluate(&seg, &cohort.pos_of(fold.test_subjects()))?;
    let test_dice = mean_dice(&metrics);
    write_text(out, "metrics.csv", &metrics_csv(&metric_rows(scheme, fold.permutation, metrics)))?;
    println!(
        "{scheme}: best epoch {} (selection dice {:.4}), test dice {:.4}; outputs in {}",
        outcome.best_epoch,
        outcome.best_selection_dice,
        test_dice,
        out.display()
    );
    Ok(())
}

fn one_hot_prediction(probs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let classes = argmax_classes(probs)?;
    let hw = classes.len();
    let mut data = vec![0.0f32; N_CLASSES * hw];
    for (p, &c) in classes.iter().enumerate() {
        data[c as usize * hw + p] = 1.0;
    }
    Tensor::from_vec(probs.shape(), data)
}

fn eval(cfg: &RunConfig, fold_scoped: bool, checkpoint: &Path, dataset: Option<&Path>, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let scheme: Scheme = ckpt
        .meta
        .scheme
        .as_deref()
        .ok_or_else(|| Error::format(checkpoint, "checkpoint does not record its training scheme"))?
        .parse()
        .map_err(|e: Error| Error::format(checkpoint, e.to_string()))?;
    let (seg, _) = ckpt.restore()?;
    let cfg = RunConfig {
        model: ckpt.meta.model.clone(),
        ..cfg.clone()
    };
    let cohort = load_cohort(&cfg, dataset)?;
    let permutation = ckpt.meta.permutation.unwrap_or(cfg.crossval.permutation);
    let samples: Vec<&PhantomSample> = if fold_scoped {
        let folds = folds(&cfg, &cohort)?;
        let fold = folds.get(permutation).ok_or_else(|| {
            Error::Config(format!("checkpoint permutation {permutation} exceeds {} folds", folds.len()))
        })?;
        cohort.pos_of(fold.test_subjects())
    } else {
        cohort.pos.iter().chain(&cohort.neg).collect()
    };

    let probs = predict_samples(&seg, &samples)?;
    let predicted = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| {
            Ok(PhantomSample {
                label: one_hot_prediction(p)?,
                ..(*s).clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = evaluate(&seg, &samples)?;
    let dice = mean_dice(&metrics);
    write_text(out, "metrics.csv", &metrics_csv(&metric_rows(scheme, permutation, metrics)))?;
    let refs: Vec<&PhantomSample> = predicted.iter().collect();
    write_samples(&out.join("predictions"), cohort.image_size, &refs)?;
    println!(
        "evaluated {} slices with a {scheme} checkpoint: mean tumor dice {dice:.4}; outputs in {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

fn experiment(cfg: &RunConfig, threads: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        augment: cfg.augment.clone(),
        schemes: cfg.crossval.schemes.clone(),
        threads,
    }
}

/// Plain-text table with one column per scheme and one row per metric.
pub fn summary_table(result: &CrossvalResult, schemes: &[Scheme]) -> String {
    let mut out = format!("{:<12}", "");
    for s in schemes {
        out.push_str(&format!("{:>16}", s.name()));
    }
    out.push('\n');
    for m in Metric::ALL {
        out.push_str(&format!("{:<12}", m.name()));
        for s in schemes {
            let cell = result
                .summary
                .iter()
                .find(|(sc, mm, _)| sc == s && *mm == m)
                .and_then(|(_, _, st)| st.as_ref())
                .map_or_else(|| "n/a".to_string(), |st| st.to_string());
            out.push_str(&format!("{cell:>16}"));
        }
        out.push('\n');
    }
    out
}

fn crossval(cfg: &RunConfig, out: &Path, threads: usize) -> Result<()> {
    let cohort = load_cohort(cfg, None)?;
    let folds = folds(cfg, &cohort)?;
    let result = crossval_run(&cohort, &experiment(cfg, threads), &folds)?;
    write_text(out, "metrics.csv", &metrics_csv(&result.rows))?;
    write_text(out, "summary.csv", &summary_csv(&result))?;
    write_text(out, "wilcoxon.csv", &wilcoxon_csv(&result))?;
    write_text(out, "runs.csv", &runs_csv(&result))?;
    print!("{}", summary_table(&result, &cfg.crossval.schemes));
    for t in &result.tests {
        match &t.result {
            Some(r) => println!(
                "{} {} vs {}: p = {:.4} ({}, n = {})",
                t.metric.name(),
                t.scheme_a,
                t.scheme_b,
                r.p_value,
                r.method.name(),
                r.n_effective
            ),
            None => println!("{} {} vs {}: insufficient data", t.metric.name(), t.scheme_a, t.scheme_b),
        }
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, threads: usize) -> Result<()> {
    let cohort = load_cohort(cfg, None)?;
    let folds = folds(cfg, &cohort)?;
    let ab = &cfg.ablation;
    let rows = ablation_run(&cohort, &experiment(cfg, threads), &folds[ab.fold], &ab.sizes, &ab.seeds)?;
    write_text(out, "ablation.csv", &ablation_csv(&rows))?;
    for r in rows.iter().filter(|r| r.scheme == Scheme::Adversarial) {
        println!(
            "size {:<5} seed {:<3} subjects {:<3} relative median dice gain {}",
            r.size,
            r.seed,
            r.n_subjects,
            r.rel_gain_dice.map_or_else(|| "undefined".to_string(), |g| format!("{g:+.3}"))
        );
    }
    Ok(())
}

fn gradcheck(inject_fault: bool, seed: u64) -> Result<i32> {
    let fault = inject_fault.then_some(Fault::ConvBackwardPadOffByOne);
    let entries = run_suite(SuiteScope::All, fault, seed)?;
    let mut failed = 0;
    for e in &entries {
        let ok = e.passed();
        failed += usize::from(!ok);
        println!(
            "{:<8} {:<32} max rel error {:.3e}  {}",
            format!("{:?}", e.group).to_lowercase(),
            e.name,
            e.report.max_rel_error,
            if ok { "ok" } else { "FAILED" }
        );
    }
    println!("{} checks, {failed} failed, tolerance {GRAD_TOLERANCE:e}", entries.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}
