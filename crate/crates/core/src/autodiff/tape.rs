use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Log,
    Exp,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Deliberate backward-pass corruptions used to prove the gradient checker
/// catches real bugs.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// conv2d input gradient scattered with padding shifted by one.
    ConvBackwardPadOffByOne,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Softmax {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        mask: Vec<bool>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracks: bool,
}

/// Reverse-mode differentiation tape.
///
/// Every primitive appends one node holding its output and whatever it needs
/// for the backward pass. Nodes are only ever appended, so record order is a
/// topological order and [`Tape::backward`] simply walks it in reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
    kinks: Option<u64>,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fold(hash: &mut u64, branch: u64) {
    *hash = (*hash ^ branch).wrapping_mul(FNV_PRIME);
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::Shape(format!("{what} expects a rank-4 tensor, got {s:?}"))),
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(Error::Shape(format!(
            "conv2d: input extent {size} with padding {pad} is smaller than kernel {k}"
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((c * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((c * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let dst = &mut plane[iy as usize * w + ix as usize];
                            *dst = *dst + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Strides mapping each index of `out_shape` onto a tensor of `shape` whose
/// axes are either equal or singleton (singleton axes get stride 0).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for axis in (0..out_shape.len()).rev() {
        if shape[axis] != 1 {
            strides[axis] = acc;
        }
        acc *= shape[axis];
    }
    strides
}

/// Visit `(linear index in out_shape, mapped index)` pairs.
fn for_each_mapped(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut mapped = 0usize;
    for lin in 0..total {
        f(lin, mapped);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            mapped += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            mapped -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
            kinks: None,
        }
    }

    /// Start fingerprinting every branch taken at a non-differentiable
    /// point (relu sign, pooling argmax, clamp region). Two evaluations with
    /// equal fingerprints lie on the same smooth piece.
    pub fn trace_kinks(&mut self) {
        self.kinks.get_or_insert(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks);
        self.nodes.push(Node { value, op, tracks });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Its gradient is kept iff `tensor.requires_grad()`.
    pub fn var(&mut self, tensor: Tensor<T>) -> Var {
        let tracks = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            tracks,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.var(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.var(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Move a recorded value out (leaves an empty placeholder behind).
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        let node = &mut self.nodes[v.0];
        let shape = node.value.shape().to_vec();
        std::mem::replace(
            &mut node.value,
            Tensor::full(&shape, T::zero()).expect("shape was valid"),
        )
    }

    /// Whether gradients flow into `v` from some requires-grad leaf.
    pub fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let xv = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = xv.data().iter().find(|v| !(**v > T::zero())) {
                return Err(Error::Numeric(format!(
                    "log of non-positive value {bad:?}"
                )));
            }
        }
        let data: Vec<T> = match kind {
            UnaryKind::Relu => xv.data().iter().map(|&v| v.max(T::zero())).collect(),
            UnaryKind::LeakyRelu(slope) => {
                let s = T::from_f64_lossy(slope);
                xv.data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * s })
                    .collect()
            }
            UnaryKind::Sigmoid => xv
                .data()
                .iter()
                .map(|&v| {
                    if v >= T::zero() {
                        T::one() / (T::one() + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (T::one() + e)
                    }
                })
                .collect(),
            UnaryKind::Log => xv.data().iter().map(|v| v.ln()).collect(),
            UnaryKind::Exp => xv.data().iter().map(|v| v.exp()).collect(),
            UnaryKind::Neg => xv.data().iter().map(|&v| -v).collect(),
        };
        if let (Some(h), UnaryKind::Relu | UnaryKind::LeakyRelu(_)) = (self.kinks.as_mut(), kind) {
            let xv = &self.nodes[x.0].value;
            xv.data().iter().for_each(|&v| fold(h, (v > T::zero()) as u64));
        }
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::Unary { x, kind }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, UnaryKind::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Neg)
    }

    /// Elementwise `a op b`. `b` may broadcast over `a` when it is a single
    /// element or has `a`'s rank with some axes collapsed to 1.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let compatible = av.shape() == bv.shape()
            || bv.numel() == 1
            || (av.rank() == bv.rank()
                && av
                    .shape()
                    .iter()
                    .zip(bv.shape())
                    .all(|(&x, &y)| y == x || y == 1));
        if !compatible {
            return Err(Error::Shape(format!(
                "{kind:?}: shape {:?} does not broadcast onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        if kind == BinaryKind::Div && bv.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            av.data().iter().map(|&x| f(x, y)).collect()
        } else {
            let strides = broadcast_strides(bv.shape(), av.shape());
            let mut out = vec![T::zero(); av.numel()];
            for_each_mapped(av.shape(), &strides, |i, j| {
                out[i] = f(av.data()[i], bv.data()[j]);
            });
            out
        };
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(out, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().map(|&v| s * v + c).collect())?;
        Ok(self.push(out, Op::Affine { x, scale: s }, &[x]))
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`. NaN
    /// inputs stay NaN.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        if let Some(h) = self.kinks.as_mut() {
            self.nodes[x.0].value
                .data()
                .iter()
                .for_each(|&v| fold(h, (v >= lo) as u64 + 2 * (v <= hi) as u64));
        }
        let xv = self.value(x);
        let out = Tensor::from_vec(
            xv.shape(),
            xv.data()
                .iter()
                .map(|&v| if v.is_nan() { v } else { v.max(lo).min(hi) })
                .collect(),
        )?;
        Ok(self.push(out, Op::Clamp { x, lo, hi }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out.with_requires_grad(false), Op::Reshape { x }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Structured ops
    // ---------------------------------------------------------------------

    /// Softmax over the channel axis of a `[B, C, H, W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(xv, "softmax_channels")?;
        let hw = h * w;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut max = T::neg_infinity();
                for ci in 0..c {
                    max = max.max(src[base + ci * hw + p]);
                }
                let mut sum = T::zero();
                for ci in 0..c {
                    let e = (src[base + ci * hw + p] - max).exp();
                    out[base + ci * hw + p] = e;
                    sum = sum + e;
                }
                for ci in 0..c {
                    let o = &mut out[base + ci * hw + p];
                    *o = *o / sum;
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(Error::Shape(format!(
                    "matmul expects rank-2 operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, T::zero(), &mut out);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// 2-D cross-correlation. Output extent is `floor((H + 2 pad - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let [b, cin, h, wd] = shape4(xv, "conv2d input")?;
        let [cout, wcin, kh, kw] = shape4(wv, "conv2d weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if bv.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let ho = conv_out(h, kh, stride, pad)?;
        let wo = conv_out(wd, kw, stride, pad)?;
        let (p, kdim) = (ho * wo, cin * kh * kw);
        let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * p] };
        let mut out = vec![T::zero(); b * cout * p];
        for bi in 0..b {
            let xb = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bv.data()[co]);
            }
            let src: &[T] = if direct {
                xb
            } else {
                im2col(xb, cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
                &cols
            };
            T::gemm(cout, kdim, p, wv.data(), kdim, 1, src, p, 1, T::one(), ob);
        }
        let out = Tensor::from_vec(&[b, cout, ho, wo], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            &[x, w, bias],
        ))
    }

    /// Per-instance, per-channel normalization over the spatial plane
    /// (biased variance), followed by a learned affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let [b, c, h, w] = shape4(xv, "instance_norm")?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "instance_norm: gamma {:?} / beta {:?} must both be [{c}]",
                gv.shape(),
                bv.shape()
            )));
        }
        let n = h * w;
        if n < 2 {
            return Err(Error::Shape(format!(
                "instance_norm needs at least 2 pixels per plane, got {h}x{w}"
            )));
        }
        let eps = T::from_f64_lossy(eps);
        let nf = T::from_usize(n).expect("plane size fits in a float");
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); b * c];
        let mut out = vec![T::zero(); xv.numel()];
        for plane in 0..b * c {
            let ch = plane % c;
            let src = &xv.data()[plane * n..(plane + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[plane] = istd;
            let (g, be) = (gv.data()[ch], bv.data()[ch]);
            for i in 0..n {
                let xh = (src[i] - mean) * istd;
                xhat[plane * n + i] = xh;
                out[plane * n + i] = xh * g + be;
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(xv, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        let src = xv.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        if let Some(h) = self.kinks.as_mut() {
            argmax.iter().for_each(|&i| fold(h, i as u64));
        }
        let out = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nn2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(xv, "upsample_nn2")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * ho * wo];
        for plane in 0..b * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(out, Op::Upsample2 { x }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_channels_all(&[a, b])
    }

    /// Channel-axis concatenation of any number of `[B, C_i, H, W]` tensors.
    pub fn concat_channels_all(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let [b, _, h, w] = shape4(self.value(first), "concat_channels")?;
        let mut total_c = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = shape4(self.value(p), "concat_channels")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} does not match batch/spatial extents of {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let out = Tensor::from_vec(&[b, total_c, h, w], out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Mean over the spatial plane: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(xv, "global_avg_pool")?;
        let n = h * w;
        let nf = T::from_usize(n).expect("plane size fits in a float");
        let out: Vec<T> = xv
            .data()
            .chunks(n)
            .map(|plane| plane.iter().copied().sum::<T>() / nf)
            .collect();
        let out = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Sum or mean over `axes`. With `keep_dims` reduced axes stay as 1,
    /// otherwise they are dropped (a full reduction yields shape `[1]`).
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut mask = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::Shape(format!(
                    "reduce: axis {a} out of range for rank {rank}"
                )));
            }
            mask[a] = true;
        }
        let kept_shape: Vec<usize> = xv
            .shape()
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { 1 } else { d })
            .collect();
        let strides = broadcast_strides(&kept_shape, xv.shape());
        let out_len: usize = kept_shape.iter().product();
        let count: usize = xv.shape().iter().zip(&mask).filter(|(_, &m)| m).map(|(&d, _)| d).product();
        let mut out = vec![T::zero(); out_len];
        let src = xv.data();
        for_each_mapped(xv.shape(), &strides, |i, j| out[j] = out[j] + src[i]);
        if kind == ReduceKind::Mean {
            let c = T::from_usize(count).expect("count fits in a float");
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let out_shape = if keep_dims {
            kept_shape
        } else {
            let dropped: Vec<usize> = xv
                .shape()
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| !m)
                .map(|(&d, _)| d)
                .collect();
            if dropped.is_empty() {
                vec![1]
            } else {
                dropped
            }
        };
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(out, Op::Reduce { x, kind, mask }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, ReduceKind::Sum, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, ReduceKind::Mean, &axes, false)
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Back-propagate from a single-element `loss`.
    ///
    /// Gradients accumulate into every requires-grad leaf reachable from
    /// `loss`; calling `backward` twice without [`Tape::reset_grads`] sums
    /// both passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].tracks {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracks {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if node.value.requires_grad() {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let tracks = |v: Var| nodes[v.0].tracks;
        // Lazily zero-initialised gradient slot for an input.
        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                if !tracks(*x) {
                    return;
                }
                let xd = val(*x).data();
                let yd = out.data();
                let dx = slot(grads, *x, xd.len());
                match *kind {
                    UnaryKind::Relu => {
                        for j in 0..g.len() {
                            if xd[j] > T::zero() {
                                dx[j] = dx[j] + g[j];
                            }
                        }
                    }
                    UnaryKind::LeakyRelu(slope) => {
                        let s = T::from_f64_lossy(slope);
                        for j in 0..g.len() {
                            dx[j] = dx[j] + if xd[j] > T::zero() { g[j] } else { g[j] * s };
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for j in 0..g.len() {
                            dx[j] = dx[j] + g[j] * yd[j] * (T::one() - yd[j]);
                        }
                    }
                    UnaryKind::Log => {
                        for j in 0..g.len() {
                            dx[j] = dx[j] + g[j] / xd[j];
                        }
                    }
                    UnaryKind::Exp => {
                        for j in 0..g.len() {
                            dx[j] = dx[j] + g[j] * yd[j];
                        }
                    }
                    UnaryKind::Neg => {
                        for j in 0..g.len() {
                            dx[j] = dx[j] - g[j];
                        }
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (val(*a), val(*b));
                let same = av.shape() == bv.shape();
                let bmap: Box<dyn Fn(&mut dyn FnMut(usize, usize))> = if same {
                    Box::new(|f: &mut dyn FnMut(usize, usize)| (0..g.len()).for_each(|j| f(j, j)))
                } else if bv.numel() == 1 {
                    Box::new(|f: &mut dyn FnMut(usize, usize)| (0..g.len()).for_each(|j| f(j, 0)))
                } else {
                    let strides = broadcast_strides(bv.shape(), av.shape());
                    let shape = av.shape().to_vec();
                    Box::new(move |f: &mut dyn FnMut(usize, usize)| {
                        for_each_mapped(&shape, &strides, |i, j| f(i, j))
                    })
                };
                let (ad, bd) = (av.data(), bv.data());
                if tracks(*a) {
                    let da = slot(grads, *a, ad.len());
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            da.iter_mut().zip(g).for_each(|(d, &gg)| *d = *d + gg)
                        }
                        BinaryKind::Mul => bmap(&mut |i, j| da[i] = da[i] + g[i] * bd[j]),
                        BinaryKind::Div => bmap(&mut |i, j| da[i] = da[i] + g[i] / bd[j]),
                    }
                }
                if tracks(*b) {
                    let db = slot(grads, *b, bd.len());
                    match kind {
                        BinaryKind::Add => bmap(&mut |i, j| db[j] = db[j] + g[i]),
                        BinaryKind::Sub => bmap(&mut |i, j| db[j] = db[j] - g[i]),
                        BinaryKind::Mul => bmap(&mut |i, j| db[j] = db[j] + g[i] * ad[i]),
                        BinaryKind::Div => {
                            bmap(&mut |i, j| db[j] = db[j] - g[i] * ad[i] / (bd[j] * bd[j]))
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if tracks(*x) {
                    let dx = slot(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d = *d + gg * *scale);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if tracks(*x) {
                    let xd = val(*x).data();
                    let dx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        if xd[j] >= *lo && xd[j] <= *hi {
                            dx[j] = dx[j] + g[j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if tracks(*x) {
                    let dx = slot(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d = *d + gg);
                }
            }
            Op::Softmax { x } => {
                if !tracks(*x) {
                    return;
                }
                let [b, c, h, w] = shape4(out, "softmax").expect("recorded shape");
                let hw = h * w;
                let y = out.data();
                let dx = slot(grads, *x, y.len());
                for bi in 0..b {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let mut dot = T::zero();
                        for ci in 0..c {
                            let k = base + ci * hw + p;
                            dot = dot + g[k] * y[k];
                        }
                        for ci in 0..c {
                            let k = base + ci * hw + p;
                            dx[k] = dx[k] + y[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if tracks(*a) {
                    // dA = dC . B^T
                    let da = slot(grads, *a, m * k);
                    T::gemm(m, n, k, g, n, 1, bv.data(), 1, n, T::one(), da);
                }
                if tracks(*b) {
                    // dB = A^T . dC
                    let db = slot(grads, *b, k * n);
                    T::gemm(k, m, n, av.data(), 1, k, g, n, 1, T::one(), db);
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let [b, cin, h, wd] = shape4(xv, "conv2d").expect("recorded shape");
                let [cout, _, kh, kw] = shape4(wv, "conv2d").expect("recorded shape");
                let [_, _, ho, wo] = shape4(out, "conv2d").expect("recorded shape");
                let (p, kdim) = (ho * wo, cin * kh * kw);
                let direct = kh == 1 && kw == 1 && *stride == 1 && *pad == 0;
                if tracks(*bias) {
                    let db = slot(grads, *bias, cout);
                    for bi in 0..b {
                        for (co, d) in db.iter_mut().enumerate() {
                            let row = &g[(bi * cout + co) * p..][..p];
                            *d = *d + row.iter().copied().sum::<T>();
                        }
                    }
                }
                let (need_w, need_x) = (tracks(*w), tracks(*x));
                if !need_w && !need_x {
                    return;
                }
                let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * p] };
                let mut dcols = if need_x && !direct { vec![T::zero(); kdim * p] } else { Vec::new() };
                let bwd_pad = match self.fault {
                    Some(Fault::ConvBackwardPadOffByOne) => *pad + 1,
                    None => *pad,
                };
                for bi in 0..b {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    let xb = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    if need_w {
                        let src: &[T] = if direct {
                            xb
                        } else {
                            im2col(xb, cin, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                            &cols
                        };
                        let dw = slot(grads, *w, cout * kdim);
                        // dW += dOut . cols^T
                        T::gemm(cout, p, kdim, gb, p, 1, src, 1, p, T::one(), dw);
                    }
                    if need_x {
                        let dxb_len = cin * h * wd;
                        if direct && bwd_pad == *pad {
                            let dx = slot(grads, *x, b * dxb_len);
                            let dxb = &mut dx[bi * dxb_len..(bi + 1) * dxb_len];
                            T::gemm(kdim, cout, p, wv.data(), 1, kdim, gb, p, 1, T::one(), dxb);
                        } else {
                            if dcols.is_empty() {
                                dcols = vec![T::zero(); kdim * p];
                            }
                            T::gemm(kdim, cout, p, wv.data(), 1, kdim, gb, p, 1, T::zero(), &mut dcols);
                            let dx = slot(grads, *x, b * dxb_len);
                            let dxb = &mut dx[bi * dxb_len..(bi + 1) * dxb_len];
                            col2im(&dcols, cin, h, wd, kh, kw, *stride, bwd_pad, ho, wo, dxb);
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [b, c, h, w] = shape4(out, "instance_norm").expect("recorded shape");
                let n = h * w;
                let nf = T::from_usize(n).expect("plane size fits in a float");
                if tracks(*gamma) {
                    let dg = slot(grads, *gamma, c);
                    for plane in 0..b * c {
                        let s: T = (0..n).map(|i| g[plane * n + i] * xhat[plane * n + i]).sum();
                        dg[plane % c] = dg[plane % c] + s;
                    }
                }
                if tracks(*beta) {
                    let db = slot(grads, *beta, c);
                    for plane in 0..b * c {
                        let s: T = g[plane * n..(plane + 1) * n].iter().copied().sum();
                        db[plane % c] = db[plane % c] + s;
                    }
                }
                if tracks(*x) {
                    let gd = val(*gamma).data();
                    let dx = slot(grads, *x, b * c * n);
                    for plane in 0..b * c {
                        let gam = gd[plane % c];
                        let gp = &g[plane * n..(plane + 1) * n];
                        let xp = &xhat[plane * n..(plane + 1) * n];
                        let sum_g: T = gp.iter().copied().sum::<T>() * gam;
                        let sum_gx: T = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>() * gam;
                        let scale = inv_std[plane] / nf;
                        for i in 0..n {
                            let dxh = gp[i] * gam;
                            let k = plane * n + i;
                            dx[k] = dx[k] + scale * (nf * dxh - sum_g - xp[i] * sum_gx);
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if tracks(*x) {
                    let dx = slot(grads, *x, val(*x).numel());
                    for (j, &src) in argmax.iter().enumerate() {
                        dx[src] = dx[src] + g[j];
                    }
                }
            }
            Op::Upsample2 { x } => {
                if tracks(*x) {
                    let [b, c, h, w] = shape4(val(*x), "upsample").expect("recorded shape");
                    let (ho, wo) = (2 * h, 2 * w);
                    let dx = slot(grads, *x, b * c * h * w);
                    for plane in 0..b * c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let k = plane * h * w + (oy / 2) * w + ox / 2;
                                dx[k] = dx[k] + g[plane * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let [b, total_c, h, w] = shape4(out, "concat").expect("recorded shape");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).shape()[1];
                    if tracks(p) {
                        let dp = slot(grads, p, b * pc * hw);
                        for bi in 0..b {
                            let src = &g[(bi * total_c + offset) * hw..][..pc * hw];
                            let dst = &mut dp[bi * pc * hw..(bi + 1) * pc * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                    offset += pc;
                }
            }
            Op::GlobalAvgPool { x } => {
                if tracks(*x) {
                    let xv = val(*x);
                    let [_, _, h, w] = shape4(xv, "gap").expect("recorded shape");
                    let n = h * w;
                    let nf = T::from_usize(n).expect("plane size fits in a float");
                    let dx = slot(grads, *x, xv.numel());
                    for (plane, &gg) in g.iter().enumerate() {
                        let share = gg / nf;
                        dx[plane * n..(plane + 1) * n].iter_mut().for_each(|d| *d = *d + share);
                    }
                }
            }
            Op::Reduce { x, kind, mask } => {
                if tracks(*x) {
                    let xv = val(*x);
                    let kept: Vec<usize> = xv
                        .shape()
                        .iter()
                        .zip(mask)
                        .map(|(&d, &m)| if m { 1 } else { d })
                        .collect();
                    let count: usize = xv
                        .shape()
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|(&d, _)| d)
                        .product();
                    let scale = match kind {
                        ReduceKind::Sum => T::one(),
                        ReduceKind::Mean => T::one() / T::from_usize(count).expect("count fits"),
                    };
                    let strides = broadcast_strides(&kept, xv.shape());
                    let dx = slot(grads, *x, xv.numel());
                    for_each_mapped(xv.shape(), &strides, |i, j| dx[i] = dx[i] + g[j] * scale);
                }
            }
        }
    }
}
