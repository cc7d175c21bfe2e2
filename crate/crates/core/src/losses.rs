//! Training objectives for the segmentor and the discriminator.
//!
//! All losses are built from tape primitives so their gradients come out of
//! the ordinary backward pass. Every `log` argument is clamped to
//! `[LOG_EPS, 1]` (or `[LOG_EPS, 1 - LOG_EPS]` for discriminator outputs).

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_EPS: f64 = 1e-7;

/// Default weight of the cross-entropy term in the hybrid objective.
pub const HYBRID_MCE_WEIGHT: f64 = 0.5;

const NORMALIZATION_TOL: f64 = 1e-4;

/// A scalar loss on the tape plus its detached value for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub value: f64,
}

impl LossValue {
    fn read<T: Scalar>(tape: &Tape<T>, var: Var) -> Result<Self> {
        let value = tape.value(var).item()?.to_f64_lossy();
        Ok(LossValue { var, value })
    }
}

fn check_label_maps<T: Scalar>(tape: &Tape<T>, probs: Var, onehot: Var) -> Result<(usize, usize)> {
    let (p, y) = (tape.value(probs), tape.value(onehot));
    let [b, c, h, w] = match *p.shape() {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(Error::Shape(format!("expected [B, C, H, W] probabilities, got {s:?}"))),
    };
    if y.shape() != p.shape() {
        return Err(Error::Shape(format!(
            "probabilities {:?} and labels {:?} differ in shape",
            p.shape(),
            y.shape()
        )));
    }
    let hw = h * w;
    for bi in 0..b {
        for px in 0..hw {
            let mut psum = 0.0;
            let mut ysum = 0.0;
            for ci in 0..c {
                let k = (bi * c + ci) * hw + px;
                psum += p.data()[k].to_f64_lossy();
                let yv = y.data()[k].to_f64_lossy();
                if yv != 0.0 && yv != 1.0 {
                    return Err(Error::Contract(format!(
                        "label map is not one-hot at instance {bi}, pixel {px}: {yv}"
                    )));
                }
                ysum += yv;
            }
            if !psum.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite probability at instance {bi}, pixel {px}"
                )));
            }
            if (psum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Contract(format!(
                    "probabilities at instance {bi}, pixel {px} sum to {psum}"
                )));
            }
            if ysum != 1.0 {
                return Err(Error::Contract(format!(
                    "label map at instance {bi}, pixel {px} has {ysum} active classes"
                )));
            }
        }
    }
    Ok((b, hw))
}

fn check_unit_interval<T: Scalar>(tape: &Tape<T>, d: Var, what: &str) -> Result<usize> {
    let v = tape.value(d);
    if v.rank() != 2 || v.shape()[1] != 1 {
        return Err(Error::Shape(format!("{what} must be [B, 1], got {:?}", v.shape())));
    }
    if let Some(bad) = v.data().iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
        return Err(Error::Contract(format!("{what} value {bad:?} outside [0, 1]")));
    }
    Ok(v.shape()[0])
}

/// Mean pixel-wise multi-class cross-entropy, `-1/(N*M) sum y^T log p`.
pub fn mce_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, onehot: Var) -> Result<LossValue> {
    let (n, m) = check_label_maps(tape, probs, onehot)?;
    let clamped = tape.clamp(probs, LOG_EPS, 1.0)?;
    let logp = tape.log(clamped)?;
    let picked = tape.mul(onehot, logp)?;
    let total = tape.sum_all(picked)?;
    let loss = tape.affine(total, -1.0 / (n * m) as f64, 0.0)?;
    LossValue::read(tape, loss)
}

fn mean_log<T: Scalar>(tape: &mut Tape<T>, d: Var, complement: bool) -> Result<Var> {
    let c = tape.clamp(d, LOG_EPS, 1.0 - LOG_EPS)?;
    let arg = if complement { tape.affine(c, -1.0, 1.0)? } else { c };
    let l = tape.log(arg)?;
    tape.mean_all(l)
}

/// Discriminator objective: `-1/N sum [log D(real) + log(1 - D(fake))]`.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<LossValue> {
    let nr = check_unit_interval(tape, d_real, "D(real)")?;
    let nf = check_unit_interval(tape, d_fake, "D(fake)")?;
    if nr != nf {
        return Err(Error::Shape(format!(
            "real batch of {nr} and fake batch of {nf} must match"
        )));
    }
    let real = mean_log(tape, d_real, false)?;
    let fake = mean_log(tape, d_fake, true)?;
    let sum = tape.add(real, fake)?;
    let loss = tape.neg(sum)?;
    LossValue::read(tape, loss)
}

/// Non-saturating segmentor objective: `-1/N sum log D(fake)`.
pub fn adversarial_seg_loss<T: Scalar>(tape: &mut Tape<T>, d_fake: Var) -> Result<LossValue> {
    check_unit_interval(tape, d_fake, "D(fake)")?;
    let m = mean_log(tape, d_fake, false)?;
    let loss = tape.neg(m)?;
    LossValue::read(tape, loss)
}

/// Saturating minimax counterpart, `1/N sum log(1 - D(fake))`. Only used to
/// compare gradient magnitudes against [`adversarial_seg_loss`].
pub fn saturating_seg_loss<T: Scalar>(tape: &mut Tape<T>, d_fake: Var) -> Result<LossValue> {
    check_unit_interval(tape, d_fake, "D(fake)")?;
    let loss = mean_log(tape, d_fake, true)?;
    LossValue::read(tape, loss)
}

/// `mce_weight * mce + adversarial`.
pub fn hybrid_seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    onehot: Var,
    d_fake: Var,
    mce_weight: f64,
) -> Result<LossValue> {
    let mce = mce_loss(tape, probs, onehot)?;
    let adv = adversarial_seg_loss(tape, d_fake)?;
    let weighted = tape.affine(mce.var, mce_weight, 0.0)?;
    let loss = tape.add(weighted, adv.var)?;
    LossValue::read(tape, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::f64::consts::LN_2;

    fn onehot(classes: &[usize], c: usize) -> Tensor<f64> {
        let hw = classes.len();
        let mut data = vec![0.0; c * hw];
        for (p, &k) in classes.iter().enumerate() {
            data[k * hw + p] = 1.0;
        }
        Tensor::from_vec(&[1, c, 1, hw], data).unwrap()
    }

    fn d(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn mce_uniform_is_ln4() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[1, 4, 1, 3], 0.25).unwrap());
        let y = tape.constant(onehot(&[0, 3, 2], 4));
        let l = mce_loss(&mut tape, p, y).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mce_perfect_prediction_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let y = onehot(&[1, 2], 4);
        let p = tape.constant(y.clone());
        let y = tape.constant(y);
        let l = mce_loss(&mut tape, p, y).unwrap();
        assert!(l.value.abs() <= 1.2e-7);
    }

    #[test]
    fn mce_contract_violations() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[1, 4, 1, 1], 0.3).unwrap());
        let y = tape.constant(onehot(&[0], 4));
        assert!(matches!(mce_loss(&mut tape, p, y), Err(Error::Contract(_))));

        let p = tape.constant(Tensor::full(&[1, 4, 1, 1], 0.25).unwrap());
        let y2 = tape.constant(Tensor::full(&[1, 4, 1, 1], 0.25).unwrap());
        assert!(matches!(mce_loss(&mut tape, p, y2), Err(Error::Contract(_))));
    }

    #[test]
    fn discriminator_loss_values() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(d(&[0.5, 0.5]));
        let f = tape.constant(d(&[0.5, 0.5]));
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        assert!((l.value - 2.0 * LN_2).abs() < 1e-12);

        let r = tape.constant(d(&[1.0]));
        let f = tape.constant(d(&[0.0]));
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        assert!(l.value >= 0.0 && l.value <= 2.1e-7);

        let r = tape.constant(d(&[0.9, 0.6]));
        let f = tape.constant(d(&[0.2, 0.4]));
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        let expected = 0.5 * (-(0.9f64.ln()) - 0.8f64.ln() - 0.6f64.ln() - 0.6f64.ln());
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.67508).abs() < 1e-4);

        let bad = tape.constant(d(&[1.5]));
        let ok = tape.constant(d(&[0.5]));
        assert!(matches!(discriminator_loss(&mut tape, bad, ok), Err(Error::Contract(_))));
    }

    #[test]
    fn adversarial_loss_values() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(d(&[0.5]));
        assert!((adversarial_seg_loss(&mut tape, f).unwrap().value - LN_2).abs() < 1e-12);
        let f = tape.constant(d(&[1.0]));
        assert!(adversarial_seg_loss(&mut tape, f).unwrap().value.abs() < 2e-7);
    }

    #[test]
    fn non_saturating_gradient_is_larger() {
        let grad_of = |saturating: bool| {
            let mut tape = Tape::<f64>::new();
            let v = tape.param(d(&[0.01]));
            let l = if saturating {
                saturating_seg_loss(&mut tape, v).unwrap()
            } else {
                adversarial_seg_loss(&mut tape, v).unwrap()
            };
            tape.backward(l.var).unwrap();
            tape.grad(v).unwrap()[0].abs()
        };
        let ns = grad_of(false);
        let sat = grad_of(true);
        assert!((ns - 100.0).abs() < 1e-9);
        assert!((sat - 1.0 / 0.99).abs() < 1e-9);
    }

    #[test]
    fn hybrid_composition() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[1, 4, 1, 2], 0.25).unwrap());
        let y = tape.constant(onehot(&[0, 1], 4));
        let f = tape.constant(d(&[0.5]));
        let l = hybrid_seg_loss(&mut tape, p, y, f, HYBRID_MCE_WEIGHT).unwrap();
        assert!((l.value - 2.0 * LN_2).abs() < 1e-12);

        let l0 = hybrid_seg_loss(&mut tape, p, y, f, 0.0).unwrap();
        let adv = adversarial_seg_loss(&mut tape, f).unwrap();
        assert_eq!(l0.value, adv.value);
    }
}
