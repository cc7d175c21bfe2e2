//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` and, per slice, two files of raw
//! little-endian `f32` in row-major order: the image `[3, H, W]` and the
//! one-hot label `[4, H, W]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::phantom::{Cohort, PhantomSample, N_CHANNELS, N_CLASSES};
use crate::error::{Error, Result};
use crate::io::{f32_from_le_bytes, f32_to_le_bytes, write_atomic};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub slices: Vec<SliceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRecord {
    pub subject_id: u32,
    pub slice_id: u32,
    pub has_lesion: bool,
    pub image_file: String,
    pub label_file: String,
}

fn file_stem(s: &PhantomSample) -> String {
    format!("s{:05}_{:04}", s.subject_id, s.slice_id)
}

/// Write `samples` (any mix of pools) to `dir`.
pub fn write_samples(dir: &Path, image_size: usize, samples: &[&PhantomSample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut slices = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image_size() != image_size {
            return Err(Error::Shape(format!(
                "slice {}/{} is {}px, dataset is {image_size}px",
                s.subject_id,
                s.slice_id,
                s.image_size()
            )));
        }
        let stem = file_stem(s);
        let rec = SliceRecord {
            subject_id: s.subject_id,
            slice_id: s.slice_id,
            has_lesion: s.has_lesion,
            image_file: format!("{stem}_image.bin"),
            label_file: format!("{stem}_label.bin"),
        };
        write_atomic(&dir.join(&rec.image_file), &f32_to_le_bytes(s.image.data()))?;
        write_atomic(&dir.join(&rec.label_file), &f32_to_le_bytes(s.label.data()))?;
        slices.push(rec);
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        image_size,
        channels: N_CHANNELS,
        classes: N_CLASSES,
        slices,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn write_dataset(dir: &Path, cohort: &Cohort) -> Result<Manifest> {
    let all: Vec<&PhantomSample> = cohort.pos.iter().chain(&cohort.neg).collect();
    write_samples(dir, cohort.image_size, &all)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unknown dataset format version {}", manifest.format_version),
        ));
    }
    if manifest.channels != N_CHANNELS || manifest.classes != N_CLASSES || manifest.image_size == 0 {
        return Err(Error::format(
            &path,
            format!(
                "expected {N_CHANNELS} channels and {N_CLASSES} classes with a non-zero size, \
                 found {} channels, {} classes, size {}",
                manifest.channels, manifest.classes, manifest.image_size
            ),
        ));
    }
    Ok(manifest)
}

fn read_tensor(dir: &Path, file: &str, shape: [usize; 3]) -> Result<Tensor<f32>> {
    let path = dir.join(file);
    if Path::new(file).components().count() != 1 {
        return Err(Error::format(&path, "file names must not contain directories"));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &path,
            format!("length mismatch: expected {expected} bytes for {shape:?}, found {}", bytes.len()),
        ));
    }
    Tensor::from_vec(&shape, f32_from_le_bytes(&bytes))
}

/// Read every slice listed in the manifest, in manifest order.
pub fn read_samples(dir: &Path) -> Result<(Manifest, Vec<PhantomSample>)> {
    let manifest = read_manifest(dir)?;
    let n = manifest.image_size;
    let mut out = Vec::with_capacity(manifest.slices.len());
    for rec in &manifest.slices {
        let s = PhantomSample {
            image: read_tensor(dir, &rec.image_file, [N_CHANNELS, n, n])?,
            label: read_tensor(dir, &rec.label_file, [N_CLASSES, n, n])?,
            subject_id: rec.subject_id,
            slice_id: rec.slice_id,
            has_lesion: rec.has_lesion,
        };
        s.validate()
            .map_err(|e| Error::format(dir.join(&rec.label_file), e.to_string()))?;
        out.push(s);
    }
    Ok((manifest, out))
}

/// Read a dataset and split it into pools: a subject is positive when any of
/// its slices carries a lesion.
pub fn read_dataset(dir: &Path) -> Result<Cohort> {
    let (manifest, samples) = read_samples(dir)?;
    let positive: Vec<u32> = samples
        .iter()
        .filter(|s| s.has_lesion)
        .map(|s| s.subject_id)
        .collect();
    let (pos, neg) = samples
        .into_iter()
        .partition(|s| positive.contains(&s.subject_id));
    Ok(Cohort {
        image_size: manifest.image_size,
        pos,
        neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_cohort, CohortSpec};

    fn small() -> Cohort {
        generate_cohort(&CohortSpec {
            n_subjects_pos: 2,
            slices_pos: 3,
            n_subjects_neg: 1,
            slices_neg: 2,
            image_size: 32,
            ..CohortSpec::desk()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let m = write_dataset(dir.path(), &c).unwrap();
        assert_eq!(m.slices.len(), 5);
        assert_eq!(read_dataset(dir.path()).unwrap(), c);
    }

    #[test]
    fn truncated_file_names_itself() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &small()).unwrap();
        let victim = dir.path().join(&m.slices[1].image_file);
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains(&m.slices[1].image_file), "{err}");
        assert!(err.to_string().contains("length mismatch"));
    }

    #[test]
    fn missing_manifest_and_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
        write_dataset(dir.path(), &small()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }
}
