use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::augment::AugmentSpec;
use crate::data::phantom::{PhantomSample, N_CHANNELS, N_CLASSES};
use crate::error::{Error, Result};

/// Stacked minibatch ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub images: Tensor<f32>,
    /// `[B, 4, H, W]`, one-hot
    pub labels: Tensor<f32>,
    pub n_pos: usize,
    /// `(subject_id, slice_id)` of every slot.
    pub members: Vec<(u32, u32)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn from_samples<'s>(samples: impl IntoIterator<Item = &'s PhantomSample>, n_pos: usize) -> Result<Batch> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut members = Vec::new();
        let mut size = None;
        for s in samples {
            let n = s.image_size();
            if *size.get_or_insert(n) != n {
                return Err(Error::Shape("batch mixes image sizes".into()));
            }
            images.extend_from_slice(s.image.data());
            labels.extend_from_slice(s.label.data());
            members.push((s.subject_id, s.slice_id));
        }
        let n = size.ok_or_else(|| Error::Contract("empty batch".into()))?;
        let b = members.len();
        Ok(Batch {
            images: Tensor::from_vec(&[b, N_CHANNELS, n, n], images)?,
            labels: Tensor::from_vec(&[b, N_CLASSES, n, n], labels)?,
            n_pos,
            members,
        })
    }
}

/// Importance-sampled minibatches: every slot independently comes from the
/// positive pool with probability `p_pos`, otherwise from the negative pool,
/// uniformly and with replacement.
pub struct BatchSampler<'a> {
    pos: Vec<&'a PhantomSample>,
    neg: Vec<&'a PhantomSample>,
    batch_size: usize,
    p_pos: f64,
    augment: Option<AugmentSpec>,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        pos: Vec<&'a PhantomSample>,
        neg: Vec<&'a PhantomSample>,
        batch_size: usize,
        p_pos: f64,
        augment: Option<AugmentSpec>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&p_pos) {
            return Err(Error::Config(format!("p_pos {p_pos} must lie in [0, 1]")));
        }
        if pos.is_empty() && p_pos > 0.0 {
            return Err(Error::Contract("positive pool is empty".into()));
        }
        if neg.is_empty() && p_pos < 1.0 {
            return Err(Error::Contract("negative pool is empty".into()));
        }
        Ok(BatchSampler {
            pos,
            neg,
            batch_size,
            p_pos,
            augment,
            rng,
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        let mut picked = Vec::with_capacity(self.batch_size);
        let mut n_pos = 0;
        for _ in 0..self.batch_size {
            let positive = self.rng.random_bool(self.p_pos);
            let pool = if positive { &self.pos } else { &self.neg };
            let s = pool[self.rng.random_range(0..pool.len())];
            n_pos += usize::from(positive);
            picked.push(match &self.augment {
                Some(spec) => spec.draw(s.image_size(), &mut self.rng).apply(s),
                None => s.clone(),
            });
        }
        Batch::from_samples(&picked, n_pos)
    }
}
