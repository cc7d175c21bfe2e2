use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Where the largest disagreement was found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose +/- step crossed a non-differentiable point.
    pub coords_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coords_per_param: 24,
            seed: 0,
            fault: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, everything evaluated in `f64`.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a single-element output. Coordinates where either perturbed
/// evaluation takes a different branch at a relu, pooling or clamp than the
/// unperturbed one are skipped and counted in `coords_skipped`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let h = opts.step;
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside [1e-4, 1e-2]"
        )));
    }
    type Eval = (f64, Option<u64>, Vec<Option<Vec<f64>>>);
    let eval = |values: &[Tensor<f64>], keep: bool| -> Result<Eval> {
        let mut tape = Tape::<f64>::new();
        tape.inject_fault(opts.fault);
        tape.trace_kinks();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.var(t.clone().with_requires_grad(keep)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        let sig = tape.kink_signature();
        if !keep {
            return Ok((value, sig, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
        Ok((value, sig, grads))
    };

    let (v1, base_sig, grads) = eval(params, true)?;
    let (v2, _, _) = eval(params, false)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {v1} vs {v2}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = param.data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let (fp, sig_p, _) = eval(&work, false)?;
            work[pi].data_mut()[idx] = orig - h;
            let (fm, sig_m, _) = eval(&work, false)?;
            work[pi].data_mut()[idx] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.coords_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[pi].as_ref().map_or(0.0, |g| g[idx]);
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let report = grad_check(
            |tape, p| tape.mul(p[0], p[0]),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((report.analytic - 6.0).abs() < 1e-12);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let opts = GradCheckOptions {
            step: 1e-6,
            ..Default::default()
        };
        assert!(matches!(
            grad_check(|tape, p| tape.mul(p[0], p[0]), &[x], &opts),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let result = grad_check(
            |tape, p| {
                calls.set(calls.get() + 1.0);
                let shift = tape.constant(Tensor::scalar(calls.get()));
                tape.add(p[0], shift)
            },
            &[x],
            &GradCheckOptions::default(),
        );
        assert!(matches!(result, Err(Error::Contract(_))));
    }
}
