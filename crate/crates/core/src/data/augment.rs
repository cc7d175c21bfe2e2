use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::phantom::{PhantomSample, BACKGROUND, N_CHANNELS, N_CLASSES, TUMOR};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Rotation angles are drawn from `U[-rot_range, rot_range]` (radians).
    pub rot_range: f64,
    /// Half-range of the integer shift as a fraction of the image side.
    pub shift_frac: f64,
    pub mirror_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rot_range: PI / 8.0,
            shift_frac: 50.0 / 416.0,
            mirror_prob: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=PI / 2.0).contains(&self.rot_range) {
            return Err(Error::Config(format!(
                "augment.rot_range {} must lie in [0, pi/2]",
                self.rot_range
            )));
        }
        if !(0.0..0.5).contains(&self.shift_frac) {
            return Err(Error::Config(format!(
                "augment.shift_frac {} must lie in [0, 0.5)",
                self.shift_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config(format!(
                "augment.mirror_prob {} must lie in [0, 1]",
                self.mirror_prob
            )));
        }
        Ok(())
    }

    pub fn max_shift(&self, size: usize) -> i64 {
        (self.shift_frac * size as f64).round() as i64
    }

    pub fn draw<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Transform {
        let s = self.max_shift(size);
        let angle = if self.rot_range > 0.0 {
            rng.random_range(-self.rot_range..=self.rot_range)
        } else {
            0.0
        };
        Transform {
            angle,
            dx: rng.random_range(-s..=s),
            dy: rng.random_range(-s..=s),
            mirror: rng.random_bool(self.mirror_prob),
        }
    }
}

/// One concrete augmentation: left-right mirror, then rotation about the
/// image centre, then an integer shift.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Transform {
    pub angle: f64,
    pub dx: i64,
    pub dy: i64,
    pub mirror: bool,
}

impl Transform {
    pub fn identity() -> Self {
        Transform::default()
    }

    /// Source coordinate for output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, size: usize) -> (f64, f64) {
        let c = (size as f64 - 1.0) / 2.0;
        let (px, py) = (x as f64 - self.dx as f64 - c, y as f64 - self.dy as f64 - c);
        let (s, co) = self.angle.sin_cos();
        let (rx, ry) = if self.angle == 0.0 {
            (px, py)
        } else {
            (co * px + s * py, -s * px + co * py)
        };
        let sx = if self.mirror { -rx } else { rx };
        (sx + c, ry + c)
    }

    pub fn apply(&self, sample: &PhantomSample) -> PhantomSample {
        let n = sample.image_size();
        let hw = n * n;
        let img = sample.image.data();
        let lab = sample.label.data();
        let mut out_img = vec![0f32; N_CHANNELS * hw];
        let mut out_lab = vec![0f32; N_CLASSES * hw];
        let inside = |v: i64| v >= 0 && v < n as i64;
        for y in 0..n {
            for x in 0..n {
                let o = y * n + x;
                let (sx, sy) = self.source(x, y, n);

                let (nx, ny) = (sx.round() as i64, sy.round() as i64);
                let class = if inside(nx) && inside(ny) {
                    let i = ny as usize * n + nx as usize;
                    (0..N_CLASSES).find(|&c| lab[c * hw + i] == 1.0).unwrap_or(BACKGROUND)
                } else {
                    BACKGROUND
                };
                out_lab[class * hw + o] = 1.0;

                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as i64, y0 as i64);
                for ch in 0..N_CHANNELS {
                    let plane = &img[ch * hw..(ch + 1) * hw];
                    let at = |xx: i64, yy: i64| {
                        if inside(xx) && inside(yy) {
                            plane[yy as usize * n + xx as usize]
                        } else {
                            0.0
                        }
                    };
                    out_img[ch * hw + o] = if fx == 0.0 && fy == 0.0 {
                        at(x0, y0)
                    } else {
                        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                        top * (1.0 - fy) + bottom * fy
                    };
                }
            }
        }
        let has_lesion = out_lab[TUMOR * hw..].iter().any(|&v| v == 1.0);
        PhantomSample {
            image: Tensor::from_vec(sample.image.shape(), out_img).expect("same shape"),
            label: Tensor::from_vec(sample.label.shape(), out_lab).expect("same shape"),
            subject_id: sample.subject_id,
            slice_id: sample.slice_id,
            has_lesion,
        }
    }
}

/// Draw a transform from `spec` and apply it.
pub fn augment<R: Rng + ?Sized>(sample: &PhantomSample, spec: &AugmentSpec, rng: &mut R) -> PhantomSample {
    spec.draw(sample.image_size(), rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_phantom, CohortSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> PhantomSample {
        generate_phantom(3, 1, &CohortSpec::desk(), true).unwrap()
    }

    #[test]
    fn identity_draw_is_exact() {
        let s = sample();
        assert_eq!(Transform::identity().apply(&s), s);
    }

    #[test]
    fn mirror_is_an_involution() {
        let s = sample();
        let m = Transform {
            mirror: true,
            ..Transform::identity()
        };
        let once = m.apply(&s);
        assert_ne!(once, s);
        assert_eq!(m.apply(&once), s);
    }

    #[test]
    fn shift_moves_pixels_and_fills_background() {
        let s = sample();
        let t = Transform {
            dx: 3,
            dy: -2,
            ..Transform::identity()
        };
        let out = t.apply(&s);
        let n = 64;
        let hw = n * n;
        for ch in 0..3 {
            assert_eq!(out.image.data()[ch * hw + 10 * n + 10], s.image.data()[ch * hw + 12 * n + 7]);
            assert_eq!(out.image.data()[ch * hw + 2], 0.0);
        }
        assert_eq!(out.label.data()[2], 1.0);
    }

    #[test]
    fn random_draws_keep_labels_one_hot() {
        let s = sample();
        let spec = AugmentSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = spec.draw(64, &mut rng);
            assert!(t.angle.abs() <= PI / 8.0);
            assert!(t.dx.abs() <= 8 && t.dy.abs() <= 8);
            t.apply(&s).validate().unwrap();
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let bad = AugmentSpec {
            shift_frac: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
