//! Finite-difference verification of every primitive, loss and network.
//!
//! Each check reduces its op's output to a scalar through a fixed random
//! weighting, so every output element contributes a distinct gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    grad_check, BinaryKind, Fault, GradCheckOptions, GradCheckReport, ReduceKind, Tape, Tensor,
    UnaryKind, Var,
};
use crate::error::Result;
use crate::losses;
use crate::models::{Discriminator, ModelConfig, Segmentor};

/// Largest acceptable relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    Primitive,
    Loss,
    Network,
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub group: CheckGroup,
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values with magnitude in `[0.1, 1]` and random sign; keeps relu-style
/// kinks out of reach of the finite-difference step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}

/// A permutation of well separated values, so no pooling window has ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        data.swap(i, j);
    }
    Tensor::from_vec(shape, data).expect("valid shape")
}

fn onehot(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let hw = h * w;
    let mut data = vec![0.0; b * c * hw];
    for bi in 0..b {
        for p in 0..hw {
            let k = rng.random_range(0..c);
            data[(bi * c + k) * hw + p] = 1.0;
        }
    }
    Tensor::from_vec(&[b, c, h, w], data).expect("valid shape")
}

/// `sum(weights * y)`.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    tape.sum_all(prod)
}

struct Suite {
    entries: Vec<SuiteEntry>,
    opts: GradCheckOptions,
    rng: ChaCha8Rng,
}

impl Suite {
    fn check<F>(&mut self, group: CheckGroup, name: &str, params: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, &params, &self.opts)?;
        self.entries.push(SuiteEntry {
            group,
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    /// Check a shape-preserving or shape-changing op `op(params) -> y`
    /// through a random weighting of `y` with shape `out_shape`.
    fn check_op<F>(&mut self, name: &str, params: Vec<Tensor<f64>>, out_shape: &[usize], op: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let weights = uniform(&mut self.rng, out_shape, -1.0, 1.0);
        self.check(CheckGroup::Primitive, name, params, move |tape, p| {
            let y = op(tape, p)?;
            weighted_sum(tape, y, &weights)
        })
    }
}

fn primitive_checks(s: &mut Suite) -> Result<()> {
    let r = &mut s.rng;
    let x = off_kink(r, &[3, 4]);
    s.check_op("relu", vec![x.clone()], &[3, 4], |t, p| t.unary(p[0], UnaryKind::Relu))?;
    s.check_op("leaky_relu", vec![x.clone()], &[3, 4], |t, p| {
        t.unary(p[0], UnaryKind::LeakyRelu(0.2))
    })?;
    let x = uniform(&mut s.rng, &[3, 4], -3.0, 3.0);
    s.check_op("sigmoid", vec![x.clone()], &[3, 4], |t, p| t.unary(p[0], UnaryKind::Sigmoid))?;
    s.check_op("exp", vec![x.clone()], &[3, 4], |t, p| t.unary(p[0], UnaryKind::Exp))?;
    s.check_op("neg", vec![x], &[3, 4], |t, p| t.unary(p[0], UnaryKind::Neg))?;
    let pos = uniform(&mut s.rng, &[3, 4], 0.2, 2.0);
    s.check_op("log", vec![pos], &[3, 4], |t, p| t.unary(p[0], UnaryKind::Log))?;

    let a = uniform(&mut s.rng, &[2, 3, 2], -2.0, 2.0);
    let b = uniform(&mut s.rng, &[2, 3, 2], 0.5, 2.0);
    let bb = uniform(&mut s.rng, &[2, 1, 2], 0.5, 2.0);
    for (name, kind) in [
        ("add", BinaryKind::Add),
        ("sub", BinaryKind::Sub),
        ("mul", BinaryKind::Mul),
        ("div", BinaryKind::Div),
    ] {
        s.check_op(name, vec![a.clone(), b.clone()], &[2, 3, 2], move |t, p| {
            t.binary(p[0], p[1], kind)
        })?;
        s.check_op(
            &format!("{name}_broadcast"),
            vec![a.clone(), bb.clone()],
            &[2, 3, 2],
            move |t, p| t.binary(p[0], p[1], kind),
        )?;
    }
    let x = uniform(&mut s.rng, &[2, 3], -2.0, 2.0);
    s.check_op("affine", vec![x.clone()], &[2, 3], |t, p| t.affine(p[0], -1.5, 0.3))?;
    s.check_op("clamp", vec![x], &[2, 3], |t, p| t.clamp(p[0], -2.5, 2.5))?;

    let x = uniform(&mut s.rng, &[2, 4, 2, 2], -2.0, 2.0);
    s.check_op("softmax_channels", vec![x], &[2, 4, 2, 2], |t, p| t.softmax_channels(p[0]))?;

    let a = uniform(&mut s.rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut s.rng, &[4, 2], -1.0, 1.0);
    s.check_op("matmul", vec![a, b], &[3, 2], |t, p| t.matmul(p[0], p[1]))?;

    let x = uniform(&mut s.rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w3 = uniform(&mut s.rng, &[3, 2, 3, 3], -1.0, 1.0);
    let w1 = uniform(&mut s.rng, &[3, 2, 1, 1], -1.0, 1.0);
    let bias = uniform(&mut s.rng, &[3], -1.0, 1.0);
    s.check_op(
        "conv2d_3x3",
        vec![x.clone(), w3.clone(), bias.clone()],
        &[1, 3, 5, 5],
        |t, p| t.conv2d(p[0], p[1], p[2], 1, 1),
    )?;
    s.check_op(
        "conv2d_3x3_stride2",
        vec![x.clone(), w3, bias.clone()],
        &[1, 3, 3, 3],
        |t, p| t.conv2d(p[0], p[1], p[2], 2, 1),
    )?;
    s.check_op("conv2d_1x1", vec![x, w1, bias], &[1, 3, 5, 5], |t, p| {
        t.conv2d(p[0], p[1], p[2], 1, 0)
    })?;

    let x = uniform(&mut s.rng, &[2, 3, 4, 4], -2.0, 2.0);
    let g = uniform(&mut s.rng, &[3], 0.5, 1.5);
    let b = uniform(&mut s.rng, &[3], -0.5, 0.5);
    s.check_op("instance_norm", vec![x, g, b], &[2, 3, 4, 4], |t, p| {
        t.instance_norm(p[0], p[1], p[2], crate::autodiff::INSTANCE_NORM_EPS)
    })?;

    let x = distinct(&mut s.rng, &[1, 2, 4, 4]);
    s.check_op("maxpool2", vec![x], &[1, 2, 2, 2], |t, p| t.maxpool2(p[0]))?;
    let x = uniform(&mut s.rng, &[1, 2, 2, 3], -1.0, 1.0);
    s.check_op("upsample_nn2", vec![x], &[1, 2, 4, 6], |t, p| t.upsample_nn2(p[0]))?;
    let a = uniform(&mut s.rng, &[2, 3, 2, 2], -1.0, 1.0);
    let b = uniform(&mut s.rng, &[2, 4, 2, 2], -1.0, 1.0);
    s.check_op("concat_channels", vec![a, b], &[2, 7, 2, 2], |t, p| {
        t.concat_channels(p[0], p[1])
    })?;
    let x = uniform(&mut s.rng, &[2, 3, 3, 2], -1.0, 1.0);
    s.check_op("global_avg_pool", vec![x.clone()], &[2, 3], |t, p| t.global_avg_pool(p[0]))?;
    s.check_op("reduce_sum", vec![x.clone()], &[2, 2], |t, p| {
        t.reduce(p[0], ReduceKind::Sum, &[1, 2], false)
    })?;
    s.check_op("reduce_mean", vec![x], &[2, 1, 3, 1], |t, p| {
        t.reduce(p[0], ReduceKind::Mean, &[1, 3], true)
    })?;
    Ok(())
}

fn loss_checks(s: &mut Suite) -> Result<()> {
    let logits = uniform(&mut s.rng, &[2, 4, 3, 3], -2.0, 2.0);
    let y = onehot(&mut s.rng, 2, 4, 3, 3);
    {
        let y = y.clone();
        s.check(CheckGroup::Loss, "mce_loss", vec![logits.clone()], move |t, p| {
            let probs = t.softmax_channels(p[0])?;
            let y = t.constant(y.clone());
            Ok(losses::mce_loss(t, probs, y)?.var)
        })?;
    }
    let real = uniform(&mut s.rng, &[3, 1], -2.0, 2.0);
    let fake = uniform(&mut s.rng, &[3, 1], -2.0, 2.0);
    s.check(
        CheckGroup::Loss,
        "discriminator_loss",
        vec![real, fake.clone()],
        |t, p| {
            let r = t.sigmoid(p[0])?;
            let f = t.sigmoid(p[1])?;
            Ok(losses::discriminator_loss(t, r, f)?.var)
        },
    )?;
    s.check(CheckGroup::Loss, "adversarial_seg_loss", vec![fake.clone()], |t, p| {
        let f = t.sigmoid(p[0])?;
        Ok(losses::adversarial_seg_loss(t, f)?.var)
    })?;
    let fake2 = uniform(&mut s.rng, &[2, 1], -2.0, 2.0);
    s.check(CheckGroup::Loss, "hybrid_seg_loss", vec![logits, fake2], move |t, p| {
        let probs = t.softmax_channels(p[0])?;
        let y = t.constant(y.clone());
        let f = t.sigmoid(p[1])?;
        Ok(losses::hybrid_seg_loss(t, probs, y, f, losses::HYBRID_MCE_WEIGHT)?.var)
    })?;
    Ok(())
}

/// Configuration used for network-level checks: 16x16 inputs, widths 1/16.
pub fn network_check_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        width_scale: 1.0 / 16.0,
        seed: 5,
        ..Default::default()
    }
}

fn network_checks(s: &mut Suite) -> Result<()> {
    let cfg = network_check_config();
    let size = cfg.image_size;
    let seg = Segmentor::new(&cfg)?;
    let disc = Discriminator::new(&cfg)?;
    let n_seg = seg.params().len();
    let seg_params: Vec<Tensor<f64>> = seg.params().tensors().map(|t| t.cast()).collect();
    let disc_params: Vec<Tensor<f64>> = disc.params().tensors().map(|t| t.cast()).collect();
    let image = uniform(&mut s.rng, &[2, 3, size, size], 0.0, 1.0);
    let y = onehot(&mut s.rng, 2, 4, size, size);

    {
        let (seg, image, y) = (seg.clone(), image.clone(), y.clone());
        s.check(CheckGroup::Network, "segmentor/mce", seg_params.clone(), move |t, p| {
            let x = t.constant(image.clone());
            let probs = seg.forward(t, p, x)?;
            let y = t.constant(y.clone());
            Ok(losses::mce_loss(t, probs, y)?.var)
        })?;
    }

    // Discriminator parameters plus the fake label map's logits, so the
    // gradient with respect to D's label input is covered too.
    let fake_logits = uniform(&mut s.rng, &[2, 4, size, size], -1.0, 1.0);
    let mut params = disc_params.clone();
    params.push(fake_logits);
    {
        let (disc, image, y) = (disc.clone(), image.clone(), y.clone());
        s.check(CheckGroup::Network, "discriminator/d_loss", params, move |t, p| {
            let (dp, logits) = p.split_at(p.len() - 1);
            let x = t.constant(image.clone());
            let real = t.constant(y.clone());
            let fake = t.softmax_channels(logits[0])?;
            let d_real = disc.forward(t, dp, real, x)?;
            let d_fake = disc.forward(t, dp, fake, x)?;
            Ok(losses::discriminator_loss(t, d_real, d_fake)?.var)
        })?;
    }

    // Segmentor objectives through a discriminator, w.r.t. both networks.
    let mut both = seg_params;
    both.extend(disc_params);
    for hybrid in [false, true] {
        let (seg, disc, image, y) = (seg.clone(), disc.clone(), image.clone(), y.clone());
        let name = if hybrid { "end_to_end/hybrid" } else { "end_to_end/adversarial" };
        s.check(CheckGroup::Network, name, both.clone(), move |t, p| {
            let (sp, dp) = p.split_at(n_seg);
            let x = t.constant(image.clone());
            let probs = seg.forward(t, sp, x)?;
            let d_fake = disc.forward(t, dp, probs, x)?;
            if hybrid {
                let y = t.constant(y.clone());
                Ok(losses::hybrid_seg_loss(t, probs, y, d_fake, losses::HYBRID_MCE_WEIGHT)?.var)
            } else {
                Ok(losses::adversarial_seg_loss(t, d_fake)?.var)
            }
        })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteScope {
    All,
    PrimitivesOnly,
}

/// Run the full gradient suite. `fault` deliberately corrupts a backward
/// rule to demonstrate that the suite notices.
pub fn run_suite(scope: SuiteScope, fault: Option<Fault>, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut suite = Suite {
        entries: Vec::new(),
        opts: GradCheckOptions {
            fault,
            seed,
            ..Default::default()
        },
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    primitive_checks(&mut suite)?;
    if scope == SuiteScope::All {
        loss_checks(&mut suite)?;
        network_checks(&mut suite)?;
    }
    Ok(suite.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let entries = run_suite(SuiteScope::PrimitivesOnly, None, 1).unwrap();
        for e in &entries {
            assert!(e.passed(), "{} failed: {:?}", e.name, e.report);
        }
    }

    #[test]
    fn corrupted_conv_backward_is_caught() {
        let entries = run_suite(SuiteScope::PrimitivesOnly, Some(Fault::ConvBackwardPadOffByOne), 1).unwrap();
        let conv = entries.iter().find(|e| e.name == "conv2d_3x3").unwrap();
        assert!(conv.report.max_rel_error > 1e-1, "{:?}", conv.report);
    }
}
