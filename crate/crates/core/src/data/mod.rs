//! Dataset IO, preprocessing, augmentation, batching and synthetic phantoms.

pub mod augment;
pub mod batch;
pub mod manifest;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use augment::{augment, AugmentParams, AugmentRanges};
pub use batch::{Batch, BatchIterator};
pub use manifest::{Case, CaseEntry, DatasetManifest, Split};
pub use phantom::{synth_phantom, write_dataset, PhantomConfig};
pub use preprocess::{crop_rois, zscore_normalize, CenterWindow, Plane, RoiCrop};
pub use volume::{
    load_mask, load_volume, save_mask, save_volume, sidecar_path, MaskVolume, Modality, Provenance,
    PseudoInfo, Volume, LABEL_NAMES, NUM_CLASSES,
};
