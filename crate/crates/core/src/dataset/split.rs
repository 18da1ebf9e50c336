use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampling::round_half_up;
use super::AnnotationSet;
use crate::error::{Error, Result};

/// Holds out `round(fraction · n)` whole rasters for validation.
///
/// Both halves keep the input order.
pub fn split_validation<T: Clone>(rasters: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if rasters.is_empty() {
        return Err(Error::invalid("cannot split an empty raster list"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("validation fraction {fraction} outside [0, 1]")));
    }
    let k = round_half_up(fraction * rasters.len() as f64).min(rasters.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; rasters.len()];
    for i in index::sample(&mut rng, rasters.len(), k) {
        held[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, h) in rasters.iter().zip(held) {
        if h {
            val.push(r.clone())
        } else {
            train.push(r.clone())
        }
    }
    Ok((train, val))
}

/// Summary counts for one split, always computed from the annotation files.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub split: String,
    pub raster_count: usize,
    pub area_km2: f64,
    pub annotation_count: usize,
}

impl Manifest {
    pub const CSV_HEADER: &'static str = "split,rasters,area_km2,annotations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{}",
            self.split, self.raster_count, self.area_km2, self.annotation_count
        )
    }
}

pub fn manifest(split: &str, sets: &[AnnotationSet]) -> Manifest {
    Manifest {
        split: split.to_string(),
        raster_count: sets.len(),
        area_km2: sets.iter().map(AnnotationSet::area_km2).sum(),
        annotation_count: sets.iter().map(|s| s.polygons.len()).sum(),
    }
}
