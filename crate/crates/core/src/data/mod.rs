//! Samples, resampling, synthetic generation and on-disk containers.

mod augment;
mod container;
mod manifest;
mod resample;
mod sample;
mod synth;

pub(crate) use container::write_atomic;
pub use augment::{random_flip, Flip};
pub use container::{
    decode_container, encode_container, read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use manifest::{
    prepare_modality, DatasetManifest, ManifestEntry, ModalitySpec, Split, TemporalMode, MANIFEST_VERSION,
};
pub use resample::{
    bilinear_upsample, nearest_frames, rbf_ensemble_weights, rbf_gapfill, rbf_kernel_weights, temporal_align,
    DEFAULT_MAX_GAP, RBF_WINDOWS,
};
pub use sample::{validate_dates, CoRegisteredSet, LabelMap, SitsSample, MAX_DAY_OF_YEAR};
pub use synth::{gen_synthetic_dataset, SignatureMode, SynthConfig, SyntheticGenerator};
