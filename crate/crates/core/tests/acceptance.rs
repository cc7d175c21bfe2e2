//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Criterion 8 is soft:
//! it is reported but never fails the run.

use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advseg::autodiff::{Tape, Tensor};
use advseg::config::RunConfig;
use advseg::data::{
    generate_cohort, read_dataset, write_dataset, BatchSampler, CohortSpec, N_CLASSES, TUMOR,
};
use advseg::eval::{
    confusion_counts, dice, evaluate, make_folds, mean_dice, wilcoxon_signed_rank, WilcoxonMethod,
};
use advseg::gradsuite::{run_suite, SuiteScope};
use advseg::losses::{
    adversarial_seg_loss, discriminator_loss, hybrid_seg_loss, mce_loss, saturating_seg_loss,
};
use advseg::models::{Checkpoint, CheckpointMeta, Discriminator, ModelConfig, Segmentor};
use advseg::seeding::rng_for;
use advseg::trainer::{lr_at, run_training, Phase, Scheme, TrainConfig, Trainer, TrainingData};
use advseg::Error;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        width_scale: 1.0 / 16.0,
        seed: 3,
        ..Default::default()
    }
}

fn tiny_cohort_spec() -> CohortSpec {
    CohortSpec {
        n_subjects_pos: 4,
        slices_pos: 8,
        n_subjects_neg: 2,
        slices_neg: 4,
        image_size: 32,
        ambiguity_width: 1.0,
        seed: 11,
    }
}

fn tiny_train(scheme: Scheme) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batches_per_epoch: 3,
        batch_size: 2,
        lr0_s: 1e-3,
        lr_d: 1e-3,
        scheme,
        seed: 5,
        ..Default::default()
    }
}

fn c1_gradient_suite() -> Outcome {
    let t = Instant::now();
    let entries = run_suite(SuiteScope::All, None, 1).map_err(e2s)?;
    let elapsed = t.elapsed();
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} ({:.2e})", e.name, e.report.max_rel_error))
        .collect();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    ensure(failed.is_empty(), format!("failing checks: {}", failed.join(", ")))?;
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:.1?}"))?;
    Ok(format!("{} checks, worst relative error {worst:.2e}, {elapsed:.1?}", entries.len()))
}

fn loss_on(values: &[(Vec<usize>, Vec<f64>)], f: impl FnOnce(&mut Tape<f64>, &[advseg::autodiff::Var]) -> f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = values
        .iter()
        .map(|(s, d)| tape.constant(Tensor::from_vec(s, d.clone()).unwrap()))
        .collect();
    f(&mut tape, &vars)
}

fn c2_analytic_losses() -> Outcome {
    let (n, h, w) = (2, 3, 3);
    let shape = vec![n, N_CLASSES, h, w];
    let hw = h * w;
    let uniform = vec![0.25; n * N_CLASSES * hw];
    let mut onehot = vec![0.0; n * N_CLASSES * hw];
    for b in 0..n {
        for p in 0..hw {
            onehot[(b * N_CLASSES + (p + b) % N_CLASSES) * hw + p] = 1.0;
        }
    }
    let mce = loss_on(&[(shape.clone(), uniform), (shape.clone(), onehot.clone())], |t, v| {
        mce_loss(t, v[0], v[1]).unwrap().value
    });
    let half = vec![0.5; 4];
    let d = loss_on(&[(vec![4, 1], half.clone()), (vec![4, 1], half.clone())], |t, v| {
        discriminator_loss(t, v[0], v[1]).unwrap().value
    });
    let s = loss_on(&[(vec![4, 1], half)], |t, v| adversarial_seg_loss(t, v[0]).unwrap().value);
    ensure((mce - 4f64.ln()).abs() < 1e-5, format!("mce {mce}"))?;
    ensure((d - 2.0 * LN_2).abs() < 1e-5, format!("discriminator loss {d}"))?;
    ensure((s - LN_2).abs() < 1e-5, format!("segmentor loss {s}"))?;

    let mut rng = rng_for(2, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut probs = vec![0.0; n * N_CLASSES * hw];
        for b in 0..n {
            for p in 0..hw {
                let raw: Vec<f64> = (0..N_CLASSES).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                for c in 0..N_CLASSES {
                    probs[(b * N_CLASSES + c) * hw + p] = raw[c] / z;
                }
            }
        }
        let d_fake: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let inputs = [(shape.clone(), probs), (shape.clone(), onehot.clone()), (vec![n, 1], d_fake)];
        let hybrid = loss_on(&inputs, |t, v| hybrid_seg_loss(t, v[0], v[1], v[2], 0.5).unwrap().value);
        let m = loss_on(&inputs, |t, v| mce_loss(t, v[0], v[1]).unwrap().value);
        let a = loss_on(&inputs, |t, v| adversarial_seg_loss(t, v[2]).unwrap().value);
        worst = worst.max((hybrid - (m / 2.0 + a)).abs());
    }
    ensure(worst < 1e-6, format!("hybrid deviates by {worst:e}"))?;
    Ok(format!("mce {mce:.6}, L_D {d:.6}, L_S {s:.6}, hybrid max deviation {worst:.1e}"))
}

fn grad_at(v: f64, saturating: bool) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(&[1, 1], vec![v]).unwrap());
    let loss = if saturating {
        saturating_seg_loss(&mut tape, x)
    } else {
        adversarial_seg_loss(&mut tape, x)
    }
    .unwrap();
    tape.backward(loss.var).unwrap();
    tape.grad(x).unwrap()[0]
}

fn c3_non_saturation() -> Outcome {
    let ratio = grad_at(0.01, false).abs() / grad_at(0.01, true).abs();
    ensure((ratio / 99.0 - 1.0).abs() < 0.05, format!("ratio {ratio}"))?;
    Ok(format!("gradient ratio {ratio:.3} at v = 0.01"))
}

fn c4_optimal_discriminator() -> Outcome {
    let t = Instant::now();
    let real_counts = [3usize, 1, 2, 4, 1, 2];
    let fake_counts = [1usize, 3, 2, 1, 4, 2];
    let k = real_counts.len();
    let expand = |counts: &[usize]| -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect()
    };
    let (real, fake) = (expand(&real_counts), expand(&fake_counts));
    let selector = |set: &[usize]| {
        let mut m = vec![0.0; set.len() * k];
        for (row, &i) in set.iter().enumerate() {
            m[row * k + i] = 1.0;
        }
        Tensor::from_vec(&[set.len(), k], m).unwrap()
    };
    let (sel_real, sel_fake) = (selector(&real), selector(&fake));

    let mut theta = vec![0.0f64; k];
    for _ in 0..4000 {
        let mut tape = Tape::<f64>::new();
        let th = tape.param(Tensor::from_vec(&[k, 1], theta.clone()).unwrap());
        let sr = tape.constant(sel_real.clone());
        let sf = tape.constant(sel_fake.clone());
        let zr = tape.matmul(sr, th).map_err(e2s)?;
        let zf = tape.matmul(sf, th).map_err(e2s)?;
        let dr = tape.sigmoid(zr).map_err(e2s)?;
        let df = tape.sigmoid(zf).map_err(e2s)?;
        let loss = discriminator_loss(&mut tape, dr, df).map_err(e2s)?;
        tape.backward(loss.var).map_err(e2s)?;
        let g = tape.grad(th).unwrap();
        for (t, g) in theta.iter_mut().zip(g) {
            *t -= 5.0 * g;
        }
    }
    // Brute-force oracle: count how often each support point occurs in each set.
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let nr = real.iter().filter(|&&x| x == i).count() as f64;
        let nf = fake.iter().filter(|&&x| x == i).count() as f64;
        let learned = 1.0 / (1.0 + (-theta[i]).exp());
        worst = worst.max((learned - nr / (nr + nf)).abs());
    }
    let elapsed = t.elapsed();
    ensure(worst < 0.02, format!("max deviation {worst}"))?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:.1?}"))?;
    Ok(format!("max deviation from n_real/(n_real+n_fake) {worst:.2e}, {elapsed:.1?}"))
}

fn bits(store: &advseg::models::ParamStore) -> Vec<u32> {
    store.tensors().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn c5_protocol() -> Outcome {
    let base = TrainConfig::default();
    let lrs: Vec<f64> = [0, 75, 150].iter().map(|&e| lr_at(e, &base).unwrap()).collect();
    ensure(lrs == [1e-5, 5e-6, 2.5e-6], format!("schedule {lrs:?}"))?;

    let cohort = generate_cohort(&tiny_cohort_spec()).map_err(e2s)?;
    let model = tiny_model();
    let mut details = Vec::new();
    for scheme in [Scheme::Adversarial, Scheme::Hybrid] {
        let cfg = tiny_train(scheme);
        let data = TrainingData {
            pos: cohort.pos_of(&[0, 1]),
            neg: cohort.neg.iter().collect(),
            selection: cohort.pos_of(&[2]),
        };
        let seg = Segmentor::new(&model).map_err(e2s)?;
        let disc = Discriminator::new(&model).map_err(e2s)?;
        let out = run_training(seg, Some(disc), &data, &cfg, &Default::default()).map_err(e2s)?;
        let phases: Vec<Phase> = out.log.steps.iter().map(|s| s.phase).collect();
        let rounds = cfg.epochs * cfg.batches_per_epoch;
        ensure(phases.len() == 4 * rounds, format!("{scheme}: {} log rows", phases.len()))?;
        for (r, chunk) in phases.chunks(4).enumerate() {
            ensure(
                chunk == [Phase::D, Phase::D, Phase::D, Phase::S],
                format!("{scheme}: round {r} has phases {chunk:?}"),
            )?;
        }
        details.push(format!("{scheme} {}D/{}S", out.log.count(Phase::D), out.log.count(Phase::S)));
    }

    let cfg = tiny_train(Scheme::Adversarial);
    let mut trainer = Trainer::new(
        Segmentor::new(&model).map_err(e2s)?,
        Some(Discriminator::new(&model).map_err(e2s)?),
        &cfg,
    )
    .map_err(e2s)?;
    let pos = cohort.pos_of(&[0, 1]);
    let neg: Vec<_> = cohort.neg.iter().collect();
    let mut sampler = BatchSampler::new(pos, neg, 2, 0.7, None, rng_for(1, &[])).map_err(e2s)?;
    let (s0, d0) = (bits(trainer.seg.params()), bits(trainer.disc.as_ref().unwrap().params()));
    trainer.d_step(&sampler.sample_batch().map_err(e2s)?, 0).map_err(e2s)?;
    let (s1, d1) = (bits(trainer.seg.params()), bits(trainer.disc.as_ref().unwrap().params()));
    ensure(s0 == s1, "segmentor changed during a discriminator step")?;
    ensure(d0 != d1, "discriminator step left D unchanged")?;
    trainer.s_step(&sampler.sample_batch().map_err(e2s)?, 0, 1e-3).map_err(e2s)?;
    let (s2, d2) = (bits(trainer.seg.params()), bits(trainer.disc.as_ref().unwrap().params()));
    ensure(d1 == d2, "discriminator changed during a segmentor step")?;
    ensure(s1 != s2, "segmentor step left S unchanged")?;
    Ok(format!("lr {lrs:?}; {}; frozen networks bitwise unchanged", details.join(", ")))
}

fn naive_ranks(abs: &[f64]) -> Vec<f64> {
    abs.iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn c6_statistics() -> Outcome {
    let mut rng = rng_for(6, &[]);
    let mut exact_cases = 0;
    for case in 0..50 {
        let n = rng.random_range(5..=12);
        // Small integer grid so ties and zero differences occur.
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
        let got = wilcoxon_signed_rank(&a, &b);
        if d.len() < 5 {
            ensure(matches!(got, Err(Error::InsufficientData(_))), format!("case {case}: expected insufficient data"))?;
            continue;
        }
        let r = got.map_err(e2s)?;
        let ranks = naive_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let total: f64 = ranks.iter().sum();
        let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let w_obs = w_plus.min(total - w_plus);
        let m = d.len();
        let mut extreme = 0u64;
        for mask in 0u64..(1 << m) {
            let s: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s.min(total - s) <= w_obs {
                extreme += 1;
            }
        }
        let p = extreme as f64 / (1u64 << m) as f64;
        ensure(r.method == WilcoxonMethod::Exact, format!("case {case}: method {:?}", r.method))?;
        ensure(r.statistic == w_obs, format!("case {case}: W {} vs {w_obs}", r.statistic))?;
        ensure(r.p_value == p, format!("case {case}: p {} vs enumeration {p}", r.p_value))?;
        exact_cases += 1;
    }

    for case in 0..100 {
        let (h, w) = (rng.random_range(3..12), rng.random_range(3..12));
        let hw = h * w;
        let probs: Vec<f32> = (0..N_CLASSES * hw).map(|_| rng.random::<f32>()).collect();
        let no_tumor = case % 5 == 0;
        let gt_class: Vec<usize> = (0..hw)
            .map(|_| if no_tumor { rng.random_range(0..TUMOR) } else { rng.random_range(0..N_CLASSES) })
            .collect();
        let mut onehot = vec![0.0f32; N_CLASSES * hw];
        for (p, &c) in gt_class.iter().enumerate() {
            onehot[c * hw + p] = 1.0;
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for p in 0..hw {
            let mut best = 0;
            for c in 1..N_CLASSES {
                if probs[c * hw + p] > probs[best * hw + p] {
                    best = c;
                }
            }
            match (best == TUMOR, gt_class[p] == TUMOR) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let pt = Tensor::from_vec(&[N_CLASSES, h, w], probs).unwrap();
        let gt = Tensor::from_vec(&[N_CLASSES, h, w], onehot).unwrap();
        let c = confusion_counts(&pt, &gt).map_err(e2s)?;
        ensure((c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_), format!("map {case}: counts {c:?}"))?;
        let denom = 2 * tp + fp + fn_;
        let naive = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
        ensure(dice(c.tp, c.fp, c.fn_) == naive, format!("map {case}: dice"))?;
    }
    Ok(format!("{exact_cases} exact p-values equal enumeration; 100 confusion recounts match"))
}

fn c7_smoke_training() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::load(&workspace_root().join("configs/desk.json")).map_err(e2s)?;
    let cohort = generate_cohort(&cfg.cohort).map_err(e2s)?;
    let folds = make_folds(&cohort.pos_subjects(), cfg.crossval.n_folds, cfg.crossval.fold_seed).map_err(e2s)?;
    let fold = &folds[cfg.crossval.permutation];
    let mut results = Vec::new();
    for scheme in [Scheme::Mce, Scheme::Adversarial] {
        let train = TrainConfig {
            scheme,
            ..cfg.train.clone()
        };
        let data = TrainingData {
            pos: cohort.pos_of(&fold.train_subjects()),
            neg: cohort.neg.iter().collect(),
            selection: cohort.pos_of(fold.selection_subjects()),
        };
        let seg = Segmentor::new(&cfg.model).map_err(e2s)?;
        let disc = if scheme.uses_discriminator() {
            Some(Discriminator::new(&cfg.model).map_err(e2s)?)
        } else {
            None
        };
        let out = run_training(seg, disc, &data, &train, &cfg.augment).map_err(e2s)?;
        let (best, _) = out.best.restore().map_err(e2s)?;
        let test = mean_dice(&evaluate(&best, &cohort.pos_of(fold.test_subjects())).map_err(e2s)?);
        results.push((scheme, test, out.best_epoch));
    }
    let elapsed = t.elapsed();
    let summary = results
        .iter()
        .map(|(s, d, e)| format!("{s} dice {d:.3} (epoch {e})"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(results.iter().all(|r| r.1 >= 0.5), format!("{summary}; below 0.5"))?;
    ensure(elapsed < Duration::from_secs(30 * 60), format!("{summary}; took {elapsed:.0?}"))?;
    Ok(format!("{summary}, {elapsed:.0?}"))
}

fn parse_csv(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Soft: the harness must run, the directional outcome is only reported.
fn c8_ablation() -> (Outcome, bool) {
    let run = || -> Result<(String, bool), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = workspace_root().join("configs/ablation_desk.json");
        let cfg = RunConfig::load(&config).map_err(e2s)?;
        let out = dir.path().to_str().unwrap().to_string();
        let code = advseg::cli::run(["advseg", "ablate", "--config", config.to_str().unwrap(), "--out", &out]);
        ensure(code == 0, format!("ablate exited with {code}"))?;
        let rows = parse_csv(&dir.path().join("ablation.csv"))?;
        let (sizes, seeds) = (&cfg.ablation.sizes, &cfg.ablation.seeds);
        ensure(rows.len() == sizes.len() * seeds.len() * 2, format!("{} rows", rows.len()))?;
        let num = |s: &str| s.parse::<f64>().ok();
        for pair in rows.chunks(2) {
            let (m, a) = (num(&pair[0][3]), num(&pair[1][3]));
            let recomputed = match (a, m) {
                (Some(a), Some(m)) if m != 0.0 => Some((a - m) / m),
                _ => None,
            };
            ensure(num(&pair[1][5]) == recomputed, format!("relative gain mismatch in {pair:?}"))?;
        }
        let gain = |size: f64, seed: u64| {
            rows.iter()
                .find(|r| num(&r[0]) == Some(size) && r[1] == seed.to_string() && r[2] == "adversarial")
                .and_then(|r| num(&r[5]))
        };
        let (largest, smallest) = (sizes[0], *sizes.last().unwrap());
        let wins = seeds
            .iter()
            .filter(|&&s| matches!((gain(smallest, s), gain(largest, s)), (Some(lo), Some(hi)) if lo >= hi))
            .count();
        let gains_small: Vec<f64> = seeds.iter().filter_map(|&s| gain(smallest, s)).collect();
        let gains_full: Vec<f64> = seeds.iter().filter_map(|&s| gain(largest, s)).collect();
        let direction = wins >= 2;
        Ok((
            format!(
                "{} rows; gain at {smallest} >= gain at {largest} in {wins}/{} seeds (median gains {:+.3} vs {:+.3})",
                rows.len(),
                seeds.len(),
                if gains_small.is_empty() { f64::NAN } else { median(gains_small) },
                if gains_full.is_empty() { f64::NAN } else { median(gains_full) },
            ),
            direction,
        ))
    };
    match run() {
        Ok((msg, direction)) => (Ok(msg), direction),
        Err(e) => (Err(e), false),
    }
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        model: tiny_model(),
        train: tiny_train(Scheme::Adversarial),
        cohort: tiny_cohort_spec(),
        ..Default::default()
    };
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(run);
        let code = advseg::cli::run([
            "advseg",
            "crossval",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
            "--threads",
            threads,
        ]);
        ensure(code == 0, format!("crossval run {run} exited with {code}"))?;
        outputs.push(out);
    }
    let mut sizes = Vec::new();
    for name in ["metrics.csv", "summary.csv", "wilcoxon.csv"] {
        let a = std::fs::read(outputs[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(outputs[1].join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{name} differs between runs"))?;
        sizes.push(format!("{name} {} B", a.len()));
    }
    let summary_rows = parse_csv(&outputs[0].join("summary.csv"))?.len();
    ensure(summary_rows == 9, format!("summary.csv has {summary_rows} rows"))?;
    Ok(format!("byte-identical across runs and thread counts: {}", sizes.join(", ")))
}

fn expect_format<T>(what: &str, r: std::thread::Result<advseg::Result<T>>) -> Result<(), String> {
    match r {
        Err(_) => Err(format!("{what}: panicked")),
        Ok(Ok(_)) => Err(format!("{what}: accepted")),
        Ok(Err(e)) => ensure(matches!(e.root(), Error::Format { .. }), format!("{what}: {e}")),
    }
}

fn c10_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = tiny_model();
    let seg = Segmentor::new(&model).map_err(e2s)?;
    let disc = Discriminator::new(&model).map_err(e2s)?;
    let ckpt = Checkpoint::from_models(&seg, Some(&disc), CheckpointMeta::new(model.clone()));
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).map_err(e2s)?;
    let back = Checkpoint::load(&path).map_err(e2s)?;
    let tensor_bits = |c: &Checkpoint| -> Vec<(String, Vec<u32>)> {
        c.tensors.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
    };
    ensure(tensor_bits(&ckpt) == tensor_bits(&back) && ckpt.meta == back.meta, "checkpoint changed on round trip")?;
    ensure(back.to_bytes().map_err(e2s)? == std::fs::read(&path).unwrap(), "re-serialized checkpoint differs")?;
    let (seg2, _) = back.restore().map_err(e2s)?;
    let x = Tensor::full(&[1, 3, 32, 32], 0.3f32).unwrap();
    let same = seg.predict(&x).map_err(e2s)?.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        == seg2.predict(&x).map_err(e2s)?.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(same, "restored segmentor predicts differently")?;

    let bytes = ckpt.to_bytes().map_err(e2s)?;
    let mut corruptions: Vec<(String, Vec<u8>)> = [0, 5, 8, 13, bytes.len() / 2, bytes.len() - 1]
        .iter()
        .map(|&cut| (format!("checkpoint cut at {cut}"), bytes[..cut].to_vec()))
        .collect();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xFF;
    corruptions.push(("bad magic".into(), bad_magic));
    let mut trailing = bytes.clone();
    trailing.push(0);
    corruptions.push(("trailing byte".into(), trailing));
    let mut huge_dim = bytes.clone();
    let name_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    huge_dim[15 + name_len..19 + name_len].copy_from_slice(&u32::MAX.to_le_bytes());
    corruptions.push(("huge dimension".into(), huge_dim));
    let n_checkpoint_cases = corruptions.len();
    for (what, data) in corruptions {
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, &data).unwrap();
        expect_format(&what, catch_unwind(|| Checkpoint::load(&p)))?;
    }
    match Checkpoint::load(&dir.path().join("absent.ckpt")) {
        Err(Error::Io { .. }) => {}
        other => return Err(format!("missing checkpoint: {:?}", other.map(|_| ()))),
    }

    let cohort = generate_cohort(&tiny_cohort_spec()).map_err(e2s)?;
    let ds = dir.path().join("dataset");
    write_dataset(&ds, &cohort).map_err(e2s)?;
    let read = read_dataset(&ds).map_err(e2s)?;
    let sample_bits = |c: &advseg::data::Cohort| -> Vec<(u32, u32, bool, Vec<u32>, Vec<u32>)> {
        c.pos
            .iter()
            .chain(&c.neg)
            .map(|s| {
                (
                    s.subject_id,
                    s.slice_id,
                    s.has_lesion,
                    s.image.data().iter().map(|v| v.to_bits()).collect(),
                    s.label.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    ensure(sample_bits(&cohort) == sample_bits(&read), "dataset changed on round trip")?;
    let ds2 = dir.path().join("dataset2");
    write_dataset(&ds2, &read).map_err(e2s)?;
    for entry in std::fs::read_dir(&ds).unwrap() {
        let name = entry.unwrap().file_name();
        ensure(
            std::fs::read(ds.join(&name)).unwrap() == std::fs::read(ds2.join(&name)).unwrap(),
            format!("{name:?} differs after rewrite"),
        )?;
    }

    let first = &cohort.pos[0];
    let stem = format!("s{:05}_{:04}", first.subject_id, first.slice_id);
    let image_file = ds.join(format!("{stem}_image.bin"));
    let label_file = ds.join(format!("{stem}_label.bin"));
    let manifest = ds.join("manifest.json");
    let original = |p: &Path| std::fs::read(p).unwrap();
    let (img, lbl, man) = (original(&image_file), original(&label_file), original(&manifest));
    let mut two_hot = lbl.clone();
    two_hot[..4].copy_from_slice(&1.0f32.to_le_bytes());
    two_hot[4 * 32 * 32..4 * 32 * 32 + 4].copy_from_slice(&1.0f32.to_le_bytes());
    let dataset_cases: Vec<(&str, &PathBuf, Vec<u8>)> = vec![
        ("truncated image", &image_file, img[..img.len() - 4].to_vec()),
        ("non one-hot label", &label_file, two_hot),
        ("garbage manifest", &manifest, b"{not json".to_vec()),
        (
            "future manifest version",
            &manifest,
            String::from_utf8(man.clone()).unwrap().replacen("\"format_version\": 1", "\"format_version\": 99", 1).into_bytes(),
        ),
    ];
    let n_dataset_cases = dataset_cases.len();
    for (what, file, data) in dataset_cases {
        std::fs::write(file, &data).unwrap();
        expect_format(what, catch_unwind(AssertUnwindSafe(|| read_dataset(&ds))))?;
        std::fs::write(&image_file, &img).unwrap();
        std::fs::write(&label_file, &lbl).unwrap();
        std::fs::write(&manifest, &man).unwrap();
    }
    std::fs::remove_file(&manifest).unwrap();
    ensure(matches!(read_dataset(&ds), Err(Error::Io { .. })), "missing manifest is not an IO error")?;
    Ok(format!(
        "bit-exact round trips; {n_checkpoint_cases} checkpoint and {n_dataset_cases} dataset corruptions rejected"
    ))
}

fn report(id: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(msg) => println!("[PASS] {id:>2} {name}: {msg}"),
        Err(msg) => println!("[FAIL] {id:>2} {name}: {msg}"),
    }
    outcome.is_ok()
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: usize| filter.is_empty() || filter.iter().any(|f| f == &id.to_string());
    let hard: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", c1_gradient_suite),
        (2, "analytic loss values", c2_analytic_losses),
        (3, "non-saturating gradient ratio", c3_non_saturation),
        (4, "tabular optimal discriminator", c4_optimal_discriminator),
        (5, "protocol fidelity", c5_protocol),
        (6, "statistics oracles", c6_statistics),
        (7, "smoke training", c7_smoke_training),
        (9, "crossval determinism", c9_determinism),
        (10, "persistence", c10_persistence),
    ];
    let mut failures = 0;
    for (id, name, f) in hard {
        if id == 9 && wanted(8) {
            let (outcome, direction) = c8_ablation();
            match &outcome {
                Ok(msg) if direction => println!("[PASS] {:>2} ablation harness (soft): {msg}", 8),
                Ok(msg) => println!("[SOFT-FAIL] {:>2} ablation harness (soft): {msg}", 8),
                Err(msg) => {
                    println!("[FAIL] {:>2} ablation harness: {msg}", 8);
                    failures += 1;
                }
            }
        }
        if !wanted(id) {
            continue;
        }
        let outcome = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        if !report(id, name, &outcome) {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all gating acceptance criteria passed");
}
