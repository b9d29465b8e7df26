//! Cube masking and image augmentation over observation sequences.

mod augment;
mod mask;

pub use augment::{
    apply_intensity, center_crop, random_crop, random_intensity, sample_crop_offset,
    sample_intensity_multiplier, AugmentSpec, CropMode, CropSpec, IntensitySpec,
};
pub use mask::{
    apply_mask, apply_mask_to_features, mask_strategies, mask_strategy, sample_mask, CubeMaskSpec,
    MaskPlan, MaskSpace, MaskStrategy,
};
