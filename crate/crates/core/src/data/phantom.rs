use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_for};

pub const N_CHANNELS: usize = 3;
pub const N_CLASSES: usize = 4;
pub const BACKGROUND: usize = 0;
pub const PERIPHERAL_ZONE: usize = 1;
pub const TRANSITIONAL_ZONE: usize = 2;
pub const TUMOR: usize = 3;

/// Accepted range for the lesion share of a lesion-bearing slice.
pub const LESION_AREA_RANGE: (f64, f64) = (0.005, 0.05);

/// One synthetic slice: a 3-channel image in `[0, 1]` and its one-hot label.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
    pub subject_id: u32,
    pub slice_id: u32,
    pub has_lesion: bool,
}

impl PhantomSample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Check the structural invariants: shapes, one-hot labels, lesion flag.
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != N_CHANNELS || s[1] != s[2] {
            return Err(Error::Shape(format!("image must be [3, H, H], got {s:?}")));
        }
        let expected = [N_CLASSES, s[1], s[2]];
        if self.label.shape() != expected {
            return Err(Error::Shape(format!(
                "label must be {expected:?}, got {:?}",
                self.label.shape()
            )));
        }
        let hw = s[1] * s[2];
        let lab = self.label.data();
        for p in 0..hw {
            let mut ones = 0;
            for c in 0..N_CLASSES {
                match lab[c * hw + p] {
                    v if v == 1.0 => ones += 1,
                    v if v == 0.0 => {}
                    v => {
                        return Err(Error::Contract(format!(
                            "label value {v} at class {c}, pixel {p} is not 0 or 1"
                        )))
                    }
                }
            }
            if ones != 1 {
                return Err(Error::Contract(format!("pixel {p} has {ones} active classes")));
            }
        }
        let lesion = lab[TUMOR * hw..(TUMOR + 1) * hw].iter().any(|&v| v == 1.0);
        if lesion != self.has_lesion {
            return Err(Error::Contract(format!(
                "has_lesion = {} but tumor channel {} pixels",
                self.has_lesion,
                if lesion { "has" } else { "has no" }
            )));
        }
        Ok(())
    }

    pub fn tumor_pixels(&self) -> usize {
        let hw = self.image_size() * self.image_size();
        self.label.data()[TUMOR * hw..].iter().filter(|&&v| v == 1.0).count()
    }
}

/// Size and composition of a synthetic cohort.
///
/// Slice totals are spread over subjects as evenly as possible, so the
/// defaults give 23 positive subjects with 4 slices and 32 with 3, and
/// 87 negative subjects with 5 slices and 10 with 4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_subjects_pos: usize,
    pub slices_pos: usize,
    pub n_subjects_neg: usize,
    pub slices_neg: usize,
    pub image_size: usize,
    /// Width in pixels of the band straddling each lesion border over which
    /// the lesion contrast fades in. The label itself stays hard.
    pub ambiguity_width: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_subjects_pos: 55,
            slices_pos: 188,
            n_subjects_neg: 97,
            slices_neg: 475,
            image_size: 64,
            ambiguity_width: 2.0,
            seed: 0,
        }
    }
}

impl CohortSpec {
    /// Small, low-ambiguity cohort: 8 positive and 8 negative subjects with
    /// four 64x64 slices each.
    pub fn desk() -> Self {
        CohortSpec {
            n_subjects_pos: 8,
            slices_pos: 32,
            n_subjects_neg: 8,
            slices_neg: 32,
            ambiguity_width: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("cohort: {m}")));
        if self.n_subjects_pos == 0 {
            return bad("n_subjects_pos must be at least 1".into());
        }
        if self.slices_pos < self.n_subjects_pos {
            return bad(format!(
                "slices_pos {} is fewer than one per positive subject",
                self.slices_pos
            ));
        }
        if self.slices_neg < self.n_subjects_neg {
            return bad(format!(
                "slices_neg {} is fewer than one per negative subject",
                self.slices_neg
            ));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if !(self.ambiguity_width.is_finite() && self.ambiguity_width >= 0.0) {
            return bad(format!("ambiguity_width {} must be >= 0", self.ambiguity_width));
        }
        Ok(())
    }

    /// Subject ids: positives first, then negatives.
    pub fn subject_ids(&self) -> (Vec<u32>, Vec<u32>) {
        let np = self.n_subjects_pos as u32;
        let nn = self.n_subjects_neg as u32;
        ((0..np).collect(), (np..np + nn).collect())
    }

    /// Number of slices for the `i`-th subject of a group.
    pub fn slices_for(total: usize, subjects: usize, i: usize) -> usize {
        total / subjects + usize::from(i < total % subjects)
    }

    pub fn subject_seed(&self, subject_id: u32) -> u64 {
        derive_seed(self.seed, &[0x5B1E_C7, subject_id as u64])
    }
}

/// Per-subject anatomy shared by all slices of that subject.
struct Anatomy {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    tz_scale: f64,
    tz_shift: f64,
    contrast: f64,
}

impl Anatomy {
    fn draw(rng: &mut ChaCha8Rng, n: f64) -> Self {
        Anatomy {
            cx: n * (0.5 + rng.random_range(-0.06..0.06)),
            cy: n * (0.5 + rng.random_range(-0.06..0.06)),
            a: n * rng.random_range(0.22..0.29),
            b: n * rng.random_range(0.17..0.23),
            angle: rng.random_range(-0.3..0.3),
            tz_scale: rng.random_range(0.52..0.66),
            tz_shift: rng.random_range(-0.18..-0.06),
            contrast: rng.random_range(0.85..1.15),
        }
    }

    fn jittered(&self, rng: &mut ChaCha8Rng) -> Self {
        let f = rng.random_range(0.92..1.04);
        Anatomy {
            cx: self.cx + rng.random_range(-0.8..0.8),
            cy: self.cy + rng.random_range(-0.8..0.8),
            a: self.a * f,
            b: self.b * f,
            ..*self
        }
    }

    /// Normalized radius in the gland frame, plus the same for the
    /// transitional-zone core.
    fn radii(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let outer = (u * u + v * v).sqrt();
        let vt = v - self.tz_shift;
        let inner = (u * u + vt * vt).sqrt() / self.tz_scale;
        (outer, inner)
    }
}

/// Star-shaped blob with a harmonically perturbed radius.
struct Blob {
    x: f64,
    y: f64,
    r0: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn radius_at(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(amp, phase))| amp * ((k as f64 + 2.0) * theta + phase).cos())
            .sum();
        self.r0 * (1.0 + wobble)
    }

    /// Radial signed distance to the border, positive inside.
    fn depth(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.x, y - self.y);
        self.radius_at(dy.atan2(dx)) - (dx * dx + dy * dy).sqrt()
    }

    fn max_radius(&self) -> f64 {
        self.r0 * (1.0 + self.harmonics.iter().map(|h| h.0).sum::<f64>())
    }

    fn fits_inside(&self, anatomy: &Anatomy, margin: f64) -> bool {
        (0..32).all(|i| {
            let t = i as f64 * PI / 16.0;
            let r = self.radius_at(t);
            anatomy.radii(self.x + r * t.cos(), self.y + r * t.sin()).0 <= margin
        })
    }
}

const MAX_PLACEMENTS: usize = 100;
const MAX_LESION_ATTEMPTS: usize = 20;

fn place_blob(rng: &mut ChaCha8Rng, anatomy: &Anatomy, area: f64, others: &[Blob]) -> Option<Blob> {
    let mut r0 = (area / PI).sqrt();
    for _shrink in 0..8 {
        for _ in 0..MAX_PLACEMENTS {
            let harmonics = [
                (rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.0..0.10), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.0..0.06), rng.random_range(0.0..2.0 * PI)),
            ];
            let t = rng.random_range(0.0..2.0 * PI);
            let rho = rng.random_range(0.0..0.75f64).sqrt();
            let (s, c) = anatomy.angle.sin_cos();
            let (u, v) = (rho * t.cos() * anatomy.a, rho * t.sin() * anatomy.b);
            let blob = Blob {
                x: anatomy.cx + c * u - s * v,
                y: anatomy.cy + s * u + c * v,
                r0,
                harmonics,
            };
            let separate = others.iter().all(|o| {
                let d = ((o.x - blob.x).powi(2) + (o.y - blob.y).powi(2)).sqrt();
                d > 1.3 * (o.max_radius() + blob.max_radius())
            });
            if separate && blob.fits_inside(anatomy, 0.95) {
                return Some(blob);
            }
        }
        r0 *= 0.8;
    }
    None
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

const TISSUE: [[f64; N_CHANNELS]; 3] = [
    [0.22, 0.30, 0.10], // background
    [0.72, 0.66, 0.24], // peripheral zone
    [0.50, 0.48, 0.20], // transitional zone
];
/// Lesion contrast per channel: mildly dark, strongly dark, bright.
const LESION_DELTA: [f64; N_CHANNELS] = [-0.14, -0.32, 0.42];
const NOISE_STD: f64 = 0.035;

/// Render one slice. Deterministic in `(subject_seed, slice_index)` and the
/// spec's image size and ambiguity width.
pub fn generate_phantom(
    subject_seed: u64,
    slice_index: u32,
    spec: &CohortSpec,
    with_lesion: bool,
) -> Result<PhantomSample> {
    let n = spec.image_size;
    let nf = n as f64;
    let hw = n * n;
    let base = Anatomy::draw(&mut rng_for(subject_seed, &[0]), nf);
    let mut rng = rng_for(subject_seed, &[1, slice_index as u64]);
    let anatomy = base.jittered(&mut rng);

    let mut label_idx = vec![BACKGROUND as u8; hw];
    for y in 0..n {
        for x in 0..n {
            let (outer, inner) = anatomy.radii(x as f64, y as f64);
            label_idx[y * n + x] = if inner <= 1.0 {
                TRANSITIONAL_ZONE as u8
            } else if outer <= 1.0 {
                PERIPHERAL_ZONE as u8
            } else {
                BACKGROUND as u8
            };
        }
    }

    let gland_pixels = label_idx.iter().filter(|&&c| c != BACKGROUND as u8).count();
    let mut lesion_weight = vec![0f64; hw];
    let mut lesion_mask = vec![false; hw];
    if with_lesion {
        let (lo, hi) = LESION_AREA_RANGE;
        let mut placed = false;
        for _ in 0..MAX_LESION_ATTEMPTS {
            let share = rng.random_range(0.01..0.035);
            let count = if rng.random_bool(0.3) { 2 } else { 1 };
            let mut blobs: Vec<Blob> = Vec::new();
            for _ in 0..count {
                let area = share * (hw as f64) / count as f64;
                if let Some(b) = place_blob(&mut rng, &anatomy, area, &blobs) {
                    blobs.push(b);
                }
            }
            if blobs.is_empty() {
                continue;
            }
            let w = spec.ambiguity_width;
            lesion_mask.fill(false);
            lesion_weight.fill(0.0);
            for y in 0..n {
                for x in 0..n {
                    let i = y * n + x;
                    if label_idx[i] == BACKGROUND as u8 {
                        continue;
                    }
                    let depth = blobs
                        .iter()
                        .map(|b| b.depth(x as f64, y as f64))
                        .fold(f64::NEG_INFINITY, f64::max);
                    lesion_mask[i] = depth > 0.0;
                    lesion_weight[i] = if w > 0.0 {
                        smoothstep(depth / w + 0.5)
                    } else if depth > 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
            let frac = lesion_mask.iter().filter(|&&m| m).count() as f64 / hw as f64;
            if (lo..=hi).contains(&frac) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Contract(format!(
                "could not place a lesion covering {:.1}%..{:.1}% of a {n}x{n} slice \
                 (gland covers {gland_pixels} pixels)",
                lo * 100.0,
                hi * 100.0
            )));
        }
        for (l, &m) in label_idx.iter_mut().zip(&lesion_mask) {
            if m {
                *l = TUMOR as u8;
            }
        }
    }

    // Benign nodule in the transitional zone: dark on the first channel only.
    let nodule = if rng.random_bool(0.4) {
        place_blob(&mut rng, &anatomy, 0.01 * hw as f64, &[])
    } else {
        None
    };

    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let tilt = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let mut image = vec![0f32; N_CHANNELS * hw];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let tissue = match label_idx[i] as usize {
                TUMOR => {
                    let (outer, inner) = anatomy.radii(x as f64, y as f64);
                    if inner <= 1.0 {
                        TRANSITIONAL_ZONE
                    } else if outer <= 1.0 {
                        PERIPHERAL_ZONE
                    } else {
                        BACKGROUND
                    }
                }
                c => c,
            };
            let bias = tilt[0] * (x as f64 / nf - 0.5) + tilt[1] * (y as f64 / nf - 0.5);
            let nod = nodule
                .as_ref()
                .filter(|_| tissue != BACKGROUND)
                .map_or(0.0, |b| smoothstep(b.depth(x as f64, y as f64) / 1.5 + 0.5));
            for ch in 0..N_CHANNELS {
                let mut v = TISSUE[tissue][ch] + bias;
                v += anatomy.contrast * LESION_DELTA[ch] * lesion_weight[i];
                if ch == 0 {
                    v -= 0.12 * nod;
                }
                v += noise.sample(&mut rng);
                image[ch * hw + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut label = vec![0f32; N_CLASSES * hw];
    for (i, &c) in label_idx.iter().enumerate() {
        label[c as usize * hw + i] = 1.0;
    }
    Ok(PhantomSample {
        image: Tensor::from_vec(&[N_CHANNELS, n, n], image)?,
        label: Tensor::from_vec(&[N_CLASSES, n, n], label)?,
        subject_id: 0,
        slice_id: slice_index,
        has_lesion: lesion_mask.iter().any(|&m| m),
    })
}

/// Slices of a cohort, split into the lesion-bearing subjects and the
/// lesion-free subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub image_size: usize,
    pub pos: Vec<PhantomSample>,
    pub neg: Vec<PhantomSample>,
}

impl Cohort {
    /// Distinct subject ids of a pool, in first-appearance order.
    pub fn subjects(pool: &[PhantomSample]) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for s in pool {
            if ids.last() != Some(&s.subject_id) && !ids.contains(&s.subject_id) {
                ids.push(s.subject_id);
            }
        }
        ids
    }

    pub fn pos_subjects(&self) -> Vec<u32> {
        Self::subjects(&self.pos)
    }

    pub fn neg_subjects(&self) -> Vec<u32> {
        Self::subjects(&self.neg)
    }

    pub fn len(&self) -> usize {
        self.pos.len() + self.neg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positive slices whose subject is in `ids`, in cohort order.
    pub fn pos_of(&self, ids: &[u32]) -> Vec<&PhantomSample> {
        self.pos.iter().filter(|s| ids.contains(&s.subject_id)).collect()
    }
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let (pos_ids, neg_ids) = spec.subject_ids();
    let build = |ids: &[u32], total: usize, lesion: bool| -> Result<Vec<PhantomSample>> {
        let mut out = Vec::with_capacity(total);
        for (i, &id) in ids.iter().enumerate() {
            for slice in 0..CohortSpec::slices_for(total, ids.len(), i) {
                let mut s = generate_phantom(spec.subject_seed(id), slice as u32, spec, lesion)
                    .map_err(|e| e.context(format!("subject {id}, slice {slice}")))?;
                s.subject_id = id;
                out.push(s);
            }
        }
        Ok(out)
    };
    Ok(Cohort {
        image_size: spec.image_size,
        pos: build(&pos_ids, spec.slices_pos, true)?,
        neg: build(&neg_ids, spec.slices_neg, false)?,
    })
}
