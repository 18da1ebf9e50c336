//! Rasters, polygon annotations, training-patch extraction and synthetic scenes.

mod annotation;
mod archive;
mod raster;
mod sampling;
mod split;
mod synth;

pub use annotation::{rasterize, AnnotationSet, LabelMask, Polygon};
pub use archive::{read_archive, write_archive, ARCHIVE_MAGIC};
pub use raster::Raster;
pub use sampling::{
    crop_patch, extract, negative_candidates, positive_candidates, round_half_up, sample_negatives, sample_positives,
    ExtractConfig, Label, LabelKind, NegativeQuota, PatchSample, MARGIN, NEGATIVE_STRIDE, POSITIVE_COPIES,
    POSITIVE_RETENTION, POSITIVE_STRIDE,
};
pub use split::{manifest, split_validation, Manifest};
pub use synth::{synth_scene, SynthConfig};
