//! Synthetic prostate phantoms, augmentation, importance-sampled batches and
//! the on-disk dataset format.

mod augment;
mod dataset;
mod phantom;
mod sampler;

pub use augment::{augment, AugmentSpec, Transform};
pub use dataset::{
    read_dataset, read_manifest, read_samples, write_dataset, write_samples, Manifest, SliceRecord,
    DATASET_FORMAT_VERSION, MANIFEST,
};
pub use phantom::{
    generate_cohort, generate_phantom, Cohort, CohortSpec, PhantomSample, BACKGROUND, LESION_AREA_RANGE,
    N_CHANNELS, N_CLASSES, PERIPHERAL_ZONE, TRANSITIONAL_ZONE, TUMOR,
};
pub use sampler::{Batch, BatchSampler};
