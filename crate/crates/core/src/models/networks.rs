use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Scalar, Tape, Tensor, Var, INSTANCE_NORM_EPS};
use crate::error::{Error, Result};
use crate::models::ModelConfig;

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ParamStore {
    pub fn from_named(entries: Vec<(String, Tensor<f32>)>) -> Self {
        ParamStore { entries }
    }

    fn push(&mut self, name: String, tensor: Tensor<f32>) -> usize {
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, i: usize) -> &Tensor<f32> {
        &self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Record every parameter on `tape`, converted to `T`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.var(t.cast::<T>().with_requires_grad(trainable)))
            .collect()
    }

    /// Replace values by name and shape; every parameter must be supplied.
    pub fn load_named(&mut self, source: &[(String, Tensor<f32>)]) -> Result<()> {
        if source.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                source.len()
            )));
        }
        for ((name, dst), (src_name, src)) in self.entries.iter_mut().zip(source) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match stored {src_name} {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<f32>)> {
        self.entries.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Activation {
    Relu,
    Leaky(f64),
    Identity,
}

impl Activation {
    fn gain(self) -> f64 {
        match self {
            Activation::Relu => 2f64.sqrt(),
            Activation::Leaky(s) => (2.0 / (1.0 + s * s)).sqrt(),
            Activation::Identity => 1.0,
        }
    }
}

/// Convolution, optional instance norm, activation.
#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
    act: Activation,
    stride: usize,
    pad: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Tensor::from_vec(shape, data).expect("shape matches data")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: bool,
        act: Activation,
    ) -> ConvBlock {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(&[cout, cin, k, k], act.gain() / fan_in.sqrt());
        let weight = self.store.push(format!("{name}.weight"), w);
        let bias = self
            .store
            .push(format!("{name}.bias"), Tensor::zeros(&[cout]).expect("cout > 0"));
        let norm = norm.then(|| {
            let g = self.store.push(
                format!("{name}.norm.gamma"),
                Tensor::full(&[cout], 1.0).expect("cout > 0"),
            );
            let b = self
                .store
                .push(format!("{name}.norm.beta"), Tensor::zeros(&[cout]).expect("cout > 0"));
            (g, b)
        });
        ConvBlock {
            weight,
            bias,
            norm,
            act,
            stride,
            pad: k / 2,
        }
    }
}

impl ConvBlock {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let mut y = tape.conv2d(x, p[self.weight], p[self.bias], self.stride, self.pad)?;
        if let Some((g, b)) = self.norm {
            let s = tape.shape(y);
            // A 1x1 plane normalises to a constant; skip the norm there.
            if s[2] * s[3] >= 2 {
                y = tape.instance_norm(y, p[g], p[b], INSTANCE_NORM_EPS)?;
            }
        }
        match self.act {
            Activation::Relu => tape.relu(y),
            Activation::Leaky(s) => tape.leaky_relu(y, s),
            Activation::Identity => Ok(y),
        }
    }
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize, size: usize, what: &str) -> Result<usize> {
    match *tape.shape(x) {
        [b, c, h, w] if c == channels && h == size && w == size => Ok(b),
        ref s => Err(Error::Shape(format!(
            "{what} expects [B, {channels}, {size}, {size}], got {s:?}"
        ))),
    }
}

/// U-Net style segmentor: five encoder blocks with 2x2 max pooling between
/// them, four decoder blocks fed by nearest-neighbour upsampling
/// concatenated with the matching encoder output, and a 1x1 projection
/// followed by a channel softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentor {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Vec<ConvBlock>,
    decoder: Vec<ConvBlock>,
    head: ConvBlock,
}

impl Segmentor {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let enc_w = cfg.encoder_widths();
        let dec_w = cfg.decoder_widths();
        let leaky = Activation::Leaky(cfg.leaky_slope);
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &w) in enc_w.iter().enumerate() {
            encoder.push(b.conv_block(&format!("seg.enc{i}"), cin, w, 3, 1, i > 0, leaky));
            cin = w;
        }
        let mut decoder = Vec::new();
        for (i, &w) in dec_w.iter().enumerate() {
            let skip = enc_w[enc_w.len() - 2 - i];
            decoder.push(b.conv_block(
                &format!("seg.dec{i}"),
                cin + skip,
                w,
                3,
                1,
                true,
                Activation::Relu,
            ));
            cin = w;
        }
        let head = b.conv_block("seg.head", cin, cfg.n_classes, 1, 1, false, Activation::Identity);
        Ok(Segmentor {
            cfg: cfg.clone(),
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Per-pixel class probabilities `[B, n_classes, H, W]` for `x` of shape
    /// `[B, in_channels, H, W]`, with `p` from [`Segmentor::bind`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        check_input(tape, x, self.cfg.in_channels, self.cfg.image_size, "segmentor")?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.maxpool2(h)?;
            }
            h = block.forward(tape, p, h)?;
            skips.push(h);
        }
        skips.pop();
        for block in &self.decoder {
            let up = tape.upsample_nn2(h)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let joined = tape.concat_channels(up, skip)?;
            h = block.forward(tape, p, joined)?;
        }
        let logits = self.head.forward(tape, p, h)?;
        tape.softmax_channels(logits)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.take_value(y))
    }
}

/// Convolutional critic on `(label map, image)` pairs: stride-2 blocks,
/// global average pooling, one dense output and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    cfg: ModelConfig,
    params: ParamStore,
    blocks: Vec<ConvBlock>,
    dense_w: usize,
    dense_b: usize,
}

/// Standard deviation of the dense head's initial weights.
const DENSE_INIT_STD: f64 = 0.02;

impl Discriminator {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.disc_depth = Some(cfg.resolved_disc_depth());
        let mut params = ParamStore::default();
        let mut b = Builder {
            store: &mut params,
            // Independent stream from the segmentor built with the same seed.
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD15C_0000_0000_0001),
        };
        let leaky = Activation::Leaky(cfg.leaky_slope);
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels + cfg.n_classes;
        for (i, &w) in cfg.discriminator_widths().iter().enumerate() {
            blocks.push(b.conv_block(&format!("disc.block{i}"), cin, w, 3, 2, i > 0, leaky));
            cin = w;
        }
        let dw = b.normal(&[cin, 1], DENSE_INIT_STD);
        let dense_w = b.store.push("disc.dense.weight".into(), dw);
        let dense_b = b
            .store
            .push("disc.dense.bias".into(), Tensor::zeros(&[1]).expect("non-empty"));
        Ok(Discriminator {
            cfg,
            params,
            blocks,
            dense_w,
            dense_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_channels(&self) -> usize {
        self.cfg.in_channels + self.cfg.n_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Probability `[B, 1]` that each `(label, image)` pair is a reference
    /// annotation.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], label: Var, image: Var) -> Result<Var> {
        let size = self.cfg.image_size;
        let b1 = check_input(tape, label, self.cfg.n_classes, size, "discriminator label")?;
        let b2 = check_input(tape, image, self.cfg.in_channels, size, "discriminator image")?;
        if b1 != b2 {
            return Err(Error::Shape(format!(
                "discriminator: label batch {b1} differs from image batch {b2}"
            )));
        }
        let mut h = tape.concat_channels(image, label)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let logit = tape.matmul(pooled, p[self.dense_w])?;
        let logit = tape.add(logit, p[self.dense_b])?;
        tape.sigmoid(logit)
    }

    pub fn predict(&self, label: &Tensor<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let l = tape.constant(label.clone());
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &p, l, x)?;
        Ok(tape.take_value(y))
    }
}
