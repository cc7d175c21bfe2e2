//! CSV renderings of experiment results. Undefined values are empty fields.

use std::fmt::Write as _;

use crate::eval::experiments::{AblationRow, CrossvalResult, MetricRow};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("scheme,permutation,subject_id,slice_id,dice,sensitivity,specificity,tp,fp,tn,fn\n");
    for r in rows {
        let m = &r.metrics;
        let c = m.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.permutation,
            m.subject_id,
            m.slice_id,
            opt(m.dice),
            opt(m.sensitivity),
            opt(m.specificity),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        );
    }
    out
}

pub fn summary_csv(result: &CrossvalResult) -> String {
    let mut out = String::from("scheme,metric,mean,std,median,n\n");
    for (scheme, metric, stats) in &result.summary {
        let _ = match stats {
            Some(s) => writeln!(out, "{scheme},{},{},{},{},{}", metric.name(), s.mean, s.std, s.median, s.n),
            None => writeln!(out, "{scheme},{},,,,0", metric.name()),
        };
    }
    out
}

pub fn wilcoxon_csv(result: &CrossvalResult) -> String {
    let mut out = String::from("metric,scheme_a,scheme_b,W,n_effective,p,method\n");
    for t in &result.tests {
        let _ = match &t.result {
            Some(r) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.metric.name(),
                t.scheme_a,
                t.scheme_b,
                r.statistic,
                r.n_effective,
                r.p_value,
                r.method.name()
            ),
            None => writeln!(
                out,
                "{},{},{},,,,insufficient-data",
                t.metric.name(),
                t.scheme_a,
                t.scheme_b
            ),
        };
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("size,seed,scheme,median_dice,median_sensitivity,rel_gain_dice,rel_gain_sens\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.size,
            r.seed,
            r.scheme,
            r.median_dice,
            opt(r.median_sensitivity),
            opt(r.rel_gain_dice),
            opt(r.rel_gain_sens)
        );
    }
    out
}

/// One line per trained model with the subjects it saw, for auditing.
pub fn runs_csv(result: &CrossvalResult) -> String {
    let ids = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    let mut out = String::from("scheme,permutation,best_epoch,best_selection_dice,train_subjects,selection_subjects,test_subjects\n");
    for r in &result.runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scheme,
            r.permutation,
            r.best_epoch,
            r.best_selection_dice,
            ids(&r.train_subjects),
            ids(&r.selection_subjects),
            ids(&r.test_subjects)
        );
    }
    out
}
