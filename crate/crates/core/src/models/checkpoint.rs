//! Binary checkpoint format.
//!
//! ```text
//! "ADVSEG01"                      8-byte magic (last two digits = version)
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//!             little-endian f32 data
//! u32 JSON length, JSON metadata
//! ```
//! All integers are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::models::{Discriminator, ModelConfig, Segmentor};

pub const MAGIC: &[u8; 8] = b"ADVSEG01";
const MAGIC_PREFIX: &[u8; 6] = b"ADVSEG";

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it is a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Contract(format!("malformed RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: Option<usize>,
    pub rng: Option<RngState>,
    pub scheme: Option<String>,
    pub permutation: Option<usize>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        CheckpointMeta {
            format_version: 1,
            model,
            step: 0,
            epoch: None,
            rng: None,
            scheme: None,
            permutation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_models(seg: &Segmentor, disc: Option<&Discriminator>, mut meta: CheckpointMeta) -> Self {
        let mut tensors = seg.params().to_named();
        if let Some(d) = disc {
            tensors.extend(d.params().to_named());
            meta.model.disc_depth = Some(d.depth());
        }
        Checkpoint { tensors, meta }
    }

    /// Rebuild the networks. The discriminator is returned only when the
    /// checkpoint carries its parameters.
    pub fn restore(&self) -> Result<(Segmentor, Option<Discriminator>)> {
        let (seg_t, disc_t): (Vec<_>, Vec<_>) = self
            .tensors
            .iter()
            .cloned()
            .partition(|(n, _)| n.starts_with("seg."));
        let mut seg = Segmentor::new(&self.meta.model)?;
        seg.params_mut().load_named(&seg_t)?;
        let disc = if disc_t.is_empty() {
            None
        } else {
            let mut d = Discriminator::new(&self.meta.model)?;
            d.params_mut().load_named(&disc_t)?;
            Some(d)
        };
        Ok((seg, disc))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            if magic.starts_with(MAGIC_PREFIX) {
                return Err(Error::format(
                    path,
                    format!(
                        "unsupported checkpoint version {:?}",
                        String::from_utf8_lossy(&magic[6..])
                    ),
                ));
            }
            return Err(Error::format(path, "bad magic, not a checkpoint"));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.array(&format!("tensor {i} name length"))?) as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(path, format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(path, format!("tensor {name} extends past end of file")))?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let json_len = r.u32("metadata length")? as usize;
        let json = r.take(json_len, "metadata")?;
        if r.remaining() != 0 {
            return Err(Error::format(path, format!("{} trailing bytes", r.remaining())));
        }
        let meta: CheckpointMeta = serde_json::from_slice(json)
            .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        if meta.format_version != 1 {
            return Err(Error::format(
                path,
                format!("unsupported metadata version {}", meta.format_version),
            ));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            width_scale: 1.0 / 16.0,
            ..Default::default()
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let cfg = tiny();
        let seg = Segmentor::new(&cfg).unwrap();
        let disc = Discriminator::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut meta = CheckpointMeta::new(cfg);
        meta.step = 42;
        meta.rng = Some(RngState::capture(&rng));
        Checkpoint::from_models(&seg, Some(&disc), meta)
    }

    #[test]
    fn byte_round_trip_is_stable() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (seg, disc) = back.restore().unwrap();
        assert_eq!(seg.params().num_scalars() + disc.unwrap().params().num_scalars(),
            ck.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let _: u32 = rng.random();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        for cut in [0, 5, 8, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut wrong_version = bytes.clone();
        wrong_version[6..8].copy_from_slice(b"02");
        let err = Checkpoint::from_bytes(&wrong_version, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("version"));
        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic, Path::new("t")).is_err());
    }
}
