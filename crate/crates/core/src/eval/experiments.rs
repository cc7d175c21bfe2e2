use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{AugmentSpec, Cohort};
use crate::error::{Error, Result};
use crate::eval::folds::FoldSpec;
use crate::eval::metrics::{median, summarize, Metric, SliceMetrics, SummaryStats};
use crate::eval::wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
use crate::eval::{evaluate, mean_dice};
use crate::models::{Discriminator, ModelConfig, Segmentor};
use crate::seeding::{derive_seed, rng_for};
use crate::trainer::{run_training, Scheme, TrainConfig, TrainingData};

/// Everything a training run needs besides the data split.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub schemes: Vec<Scheme>,
    /// Worker threads for independent runs.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scheme: Scheme,
    pub permutation: usize,
    pub metrics: SliceMetrics,
}

/// Bookkeeping of one trained model, kept for the leakage audit.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub scheme: Scheme,
    pub permutation: usize,
    pub train_subjects: Vec<u32>,
    pub selection_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
    pub best_epoch: usize,
    pub best_selection_dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedTest {
    pub metric: Metric,
    pub scheme_a: Scheme,
    pub scheme_b: Scheme,
    /// `None` when fewer than five pairs differ.
    pub result: Option<WilcoxonResult>,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossvalResult {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<(Scheme, Metric, Option<SummaryStats>)>,
    pub tests: Vec<PairedTest>,
    pub runs: Vec<RunRecord>,
}

impl CrossvalResult {
    pub fn values(&self, scheme: Scheme, metric: Metric) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| metric.of(&r.metrics))
            .collect()
    }
}

struct SplitRun {
    metrics: Vec<SliceMetrics>,
    record: RunRecord,
}

#[allow(clippy::too_many_arguments)]
fn train_and_test(
    cohort: &Cohort,
    exp: &ExperimentConfig,
    scheme: Scheme,
    permutation: usize,
    seed_tag: u64,
    train_subjects: &[u32],
    selection_subjects: &[u32],
    test_subjects: &[u32],
) -> Result<SplitRun> {
    let overlap = test_subjects
        .iter()
        .find(|t| train_subjects.contains(t) || selection_subjects.contains(t));
    if let Some(t) = overlap {
        return Err(Error::Contract(format!("test subject {t} is also used for training or selection")));
    }
    let model = ModelConfig {
        seed: derive_seed(exp.model.seed, &[seed_tag]),
        ..exp.model.clone()
    };
    let train = TrainConfig {
        scheme,
        seed: derive_seed(exp.train.seed, &[seed_tag]),
        ..exp.train.clone()
    };
    let seg = Segmentor::new(&model)?;
    let disc = if scheme.uses_discriminator() {
        Some(Discriminator::new(&model)?)
    } else {
        None
    };
    let data = TrainingData {
        pos: cohort.pos_of(train_subjects),
        neg: cohort.neg.iter().collect(),
        selection: cohort.pos_of(selection_subjects),
    };
    let outcome = run_training(seg, disc, &data, &train, &exp.augment)?;
    let (best, _) = outcome.best.restore()?;
    let test = cohort.pos_of(test_subjects);
    let metrics = evaluate(&best, &test)?;
    Ok(SplitRun {
        metrics,
        record: RunRecord {
            scheme,
            permutation,
            train_subjects: train_subjects.to_vec(),
            selection_subjects: selection_subjects.to_vec(),
            test_subjects: test_subjects.to_vec(),
            best_epoch: outcome.best_epoch,
            best_selection_dice: outcome.best_selection_dice,
        },
    })
}

fn run_parallel<J: Sync, R: Send>(threads: usize, jobs: &[J], f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| jobs.par_iter().map(|j| f(j)).collect())
}

/// Train every scheme on every permutation, evaluate the held-out fold and
/// compare schemes pairwise on the pooled per-slice metrics.
pub fn crossval_run(cohort: &Cohort, exp: &ExperimentConfig, folds: &[FoldSpec]) -> Result<CrossvalResult> {
    if exp.schemes.is_empty() {
        return Err(Error::Config("no schemes to evaluate".into()));
    }
    let jobs: Vec<(Scheme, &FoldSpec)> = exp
        .schemes
        .iter()
        .flat_map(|&s| folds.iter().map(move |f| (s, f)))
        .collect();
    let runs = run_parallel(exp.threads, &jobs, |&(scheme, fold)| {
        train_and_test(
            cohort,
            exp,
            scheme,
            fold.permutation,
            fold.permutation as u64,
            &fold.train_subjects(),
            fold.selection_subjects(),
            fold.test_subjects(),
        )
        .map_err(|e| e.context(format!("scheme {scheme}, permutation {}", fold.permutation)))
    })?;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for run in runs {
        let (scheme, permutation) = (run.record.scheme, run.record.permutation);
        rows.extend(run.metrics.into_iter().map(|metrics| MetricRow {
            scheme,
            permutation,
            metrics,
        }));
        records.push(run.record);
    }
    let mut result = CrossvalResult {
        rows,
        summary: Vec::new(),
        tests: Vec::new(),
        runs: records,
    };
    for &s in &exp.schemes {
        for m in Metric::ALL {
            let defined: Vec<f64> = result.values(s, m).into_iter().flatten().collect();
            result.summary.push((s, m, summarize(&defined).ok()));
        }
    }
    for m in [Metric::Dice, Metric::Sensitivity] {
        for (i, &a) in exp.schemes.iter().enumerate() {
            for &b in &exp.schemes[i + 1..] {
                let (xa, xb): (Vec<f64>, Vec<f64>) = result
                    .values(a, m)
                    .into_iter()
                    .zip(result.values(b, m))
                    .filter_map(|(x, y)| Some((x?, y?)))
                    .unzip();
                let test = match wilcoxon_signed_rank(&xa, &xb) {
                    Ok(r) => Some(r),
                    Err(Error::InsufficientData(_)) => None,
                    Err(e) => return Err(e),
                };
                result.tests.push(PairedTest {
                    metric: m,
                    scheme_a: a,
                    scheme_b: b,
                    result: test,
                    n_pairs: xa.len(),
                });
            }
        }
    }
    Ok(result)
}

/// Nested training subsets: one seeded ordering of `subjects`, then the
/// first `ceil(size * n)` (at least one) for every size.
pub fn nested_subsets(subjects: &[u32], sizes: &[f64], seed: u64) -> Result<Vec<Vec<u32>>> {
    if sizes.is_empty() {
        return Err(Error::Config("ablation needs at least one size".into()));
    }
    for w in sizes.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::Config(format!("ablation sizes must strictly decrease: {sizes:?}")));
        }
    }
    if let Some(bad) = sizes.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Error::Config(format!("ablation size {bad} must lie in (0, 1]")));
    }
    let mut order = subjects.to_vec();
    order.shuffle(&mut rng_for(seed, &[0xAB1A]));
    Ok(sizes
        .iter()
        .map(|&s| {
            let keep = ((s * order.len() as f64) - 1e-9).ceil().max(1.0) as usize;
            order[..keep.min(order.len())].to_vec()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub size: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub n_subjects: usize,
    pub median_dice: f64,
    pub median_sensitivity: Option<f64>,
    /// `(adversarial - mce) / mce` of the medians; shared by both rows of a
    /// `(size, seed)` pair and undefined when the mce median is zero.
    pub rel_gain_dice: Option<f64>,
    pub rel_gain_sens: Option<f64>,
}

/// All rows of one `(size, seed)` point.
pub type AblationPoint = Vec<AblationRow>;

fn rel_gain(adv: Option<f64>, mce: Option<f64>) -> Option<f64> {
    let (a, m) = (adv?, mce?);
    (m != 0.0).then(|| (a - m) / m)
}

/// Train mce and adversarial models on shrinking nested subsets of the
/// training subjects of `fold` and evaluate each on its held-out fold.
pub fn ablation_run(
    cohort: &Cohort,
    exp: &ExperimentConfig,
    fold: &FoldSpec,
    sizes: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let schemes = [Scheme::Mce, Scheme::Adversarial];
    let train_ids = fold.train_subjects();
    let mut jobs = Vec::new();
    for &seed in seeds {
        let subsets = nested_subsets(&train_ids, sizes, seed)?;
        for (&size, subset) in sizes.iter().zip(subsets) {
            for scheme in schemes {
                jobs.push((size, seed, scheme, subset.clone()));
            }
        }
    }
    let runs = run_parallel(exp.threads, &jobs, |(size, seed, scheme, subset)| {
        train_and_test(
            cohort,
            exp,
            *scheme,
            fold.permutation,
            derive_seed(*seed, &[0xAB1A]),
            subset,
            fold.selection_subjects(),
            fold.test_subjects(),
        )
        .map_err(|e| e.context(format!("ablation size {size}, seed {seed}, scheme {scheme}")))
    })?;

    let mut rows: Vec<AblationRow> = jobs
        .iter()
        .zip(&runs)
        .map(|((size, seed, scheme, subset), run)| {
            let dice: Vec<f64> = run.metrics.iter().filter_map(|m| m.dice).collect();
            let sens: Vec<f64> = run.metrics.iter().filter_map(|m| m.sensitivity).collect();
            AblationRow {
                size: *size,
                seed: *seed,
                scheme: *scheme,
                n_subjects: subset.len(),
                median_dice: median(&dice).unwrap_or(mean_dice(&run.metrics)),
                median_sensitivity: median(&sens),
                rel_gain_dice: None,
                rel_gain_sens: None,
            }
        })
        .collect();
    for pair in rows.chunks_mut(2) {
        let gd = rel_gain(Some(pair[1].median_dice), Some(pair[0].median_dice));
        let gs = rel_gain(pair[1].median_sensitivity, pair[0].median_sensitivity);
        for r in pair {
            r.rel_gain_dice = gd;
            r.rel_gain_sens = gs;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_nested_prefixes() {
        let ids: Vec<u32> = (10..30).collect();
        let s = nested_subsets(&ids, &[1.0, 0.5, 0.25], 3).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![20, 10, 5]);
        assert!(s[2].iter().all(|x| s[1].contains(x)));
        assert!(s[1].iter().all(|x| s[0].contains(x)));
        assert_eq!(s, nested_subsets(&ids, &[1.0, 0.5, 0.25], 3).unwrap());
    }

    #[test]
    fn tiny_sizes_keep_one_subject() {
        let s = nested_subsets(&[1, 2, 3, 4], &[1.0, 0.5, 0.1], 0).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2, 1]);
    }

    #[test]
    fn sizes_must_decrease() {
        assert!(nested_subsets(&[1, 2], &[0.5, 0.5], 0).is_err());
        assert!(nested_subsets(&[1, 2], &[1.5], 0).is_err());
    }

    #[test]
    fn relative_gain() {
        assert_eq!(rel_gain(Some(0.6), Some(0.4)), Some(0.6 / 0.4 - 1.0).map(|_| (0.6 - 0.4) / 0.4));
        assert_eq!(rel_gain(Some(0.6), Some(0.0)), None);
    }
}
