//! Datasets, partial-label masking and synthetic data.

mod labels;
mod loaders;
mod mask;
mod synthetic;

pub use labels::{DatasetIndex, ImageRef, LabelVector, Sample};
pub use loaders::{load_dataset, DatasetFormat, LoadOptions, VOC_CATEGORIES};
pub use mask::{
    apply_partial_mask, known_per_image, round_half_up, MaskManifest, MaskMode, MaskSpec,
};
pub use synthetic::{category_color, make_synthetic_dataset, synthetic_index, SyntheticSpec};
