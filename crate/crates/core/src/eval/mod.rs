//! Tumor metrics, the signed-rank test, fold construction and the
//! cross-validation and ablation experiments.

mod experiments;
mod folds;
mod metrics;
mod report;
mod wilcoxon;

pub use experiments::{
    ablation_run, crossval_run, nested_subsets, AblationPoint, AblationRow, CrossvalResult, ExperimentConfig,
    MetricRow, PairedTest, RunRecord,
};
pub use folds::{make_folds, FoldSpec};
pub use metrics::{
    argmax_classes, confusion_counts, dice, median, sensitivity, specificity, summarize, Confusion, Metric,
    SliceMetrics, SummaryStats,
};
pub use report::{ablation_csv, metrics_csv, runs_csv, summary_csv, wilcoxon_csv};
pub use wilcoxon::{doubled_midranks, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

use crate::autodiff::Tensor;
use crate::data::{PhantomSample, N_CLASSES};
use crate::error::Result;
use crate::models::Segmentor;

const EVAL_BATCH: usize = 8;

/// Clean (unaugmented) class probabilities `[4, H, W]` for every sample.
pub fn predict_samples(seg: &Segmentor, samples: &[&PhantomSample]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let probs = seg.predict(&Tensor::stack(&imgs)?)?;
        let n = probs.shape()[2];
        for i in 0..chunk.len() {
            out.push(probs.narrow0(i, 1)?.reshape(&[N_CLASSES, n, n])?);
        }
    }
    Ok(out)
}

pub fn evaluate(seg: &Segmentor, samples: &[&PhantomSample]) -> Result<Vec<SliceMetrics>> {
    let preds = predict_samples(seg, samples)?;
    samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let c = confusion_counts(p, &s.label)?;
            Ok(SliceMetrics::from_counts(s.subject_id, s.slice_id, c))
        })
        .collect()
}

/// Mean tumor dice, the model-selection criterion.
pub fn mean_dice(metrics: &[SliceMetrics]) -> f64 {
    let d: Vec<f64> = metrics.iter().filter_map(|m| m.dice).collect();
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}
