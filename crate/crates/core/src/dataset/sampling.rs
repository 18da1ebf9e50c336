//! Training-patch extraction.
//!
//! Negatives come from a stride-5 grid of centers whose whole 41×41 window
//! is panel-free. Positives come from a stride-3 grid of centers lying on a
//! panel pixel; 30% of those are kept and each is emitted as four copies with
//! independent random rotations.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMask, Raster};
use crate::arch::PATCH;
use crate::error::{Error, Result};
use crate::par;
use crate::seed::stream_seed;

/// Distance from a patch center to its edge.
pub const MARGIN: usize = PATCH / 2;
pub const NEGATIVE_STRIDE: usize = 5;
pub const POSITIVE_STRIDE: usize = 3;
pub const POSITIVE_RETENTION: f64 = 0.3;
pub const POSITIVE_COPIES: usize = 4;

/// Side of the crop that is rotated before the central 41×41 is cut out;
/// large enough that a rotated 41×41 window never leaves it.
const SUPER: usize = 59;
const SUPER_MARGIN: usize = SUPER / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// Panel/non-panel class of the patch's center pixel.
    Class,
    /// 41×41 binary panel mask.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(u8),
    Mask(Vec<u8>),
}

impl Label {
    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Class(_) => LabelKind::Class,
            Label::Mask(_) => LabelKind::Mask,
        }
    }

    /// Per-location class targets (one for a class label, 1681 for a mask).
    pub fn targets(&self) -> &[u8] {
        match self {
            Label::Class(c) => std::slice::from_ref(c),
            Label::Mask(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// Interleaved RGB, 41×41×3.
    pub pixels: Vec<u8>,
    pub label: Label,
    pub raster_id: String,
    /// `(row, col)` of the patch center in the source raster.
    pub center: (usize, usize),
    pub rotation_deg: f32,
}

impl PatchSample {
    /// True when the center pixel is a panel pixel.
    pub fn is_positive(&self) -> bool {
        match &self.label {
            Label::Class(c) => *c == 1,
            Label::Mask(m) => m[MARGIN * PATCH + MARGIN] == 1,
        }
    }
}

/// How many negatives to draw from the candidate pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NegativeQuota {
    /// Fraction of the available candidates.
    Ratio(f64),
    /// Fixed count (capped at the number of candidates).
    Count(usize),
    /// Enough negatives that they make up this fraction of all samples.
    ClassMix(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub label: LabelKind,
    pub negatives: NegativeQuota,
    pub positive_retention: f64,
    pub copies: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            label: LabelKind::Mask,
            negatives: NegativeQuota::ClassMix(0.75),
            positive_retention: POSITIVE_RETENTION,
            copies: POSITIVE_COPIES,
        }
    }
}

/// `floor(x + 0.5)`, with a tiny tolerance so products like `0.3 * 5` land on
/// the intended half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn check(raster: &Raster, mask: &LabelMask) -> Result<()> {
    if raster.width != mask.width || raster.height != mask.height {
        return Err(Error::shape(format!(
            "mask {}x{} does not match raster {}x{}",
            mask.width, mask.height, raster.width, raster.height
        )));
    }
    Ok(())
}

fn grid(dim: usize, stride: usize) -> Vec<usize> {
    if dim < PATCH {
        return Vec::new();
    }
    (MARGIN..dim - MARGIN).step_by(stride).collect()
}

/// Stride-5 centers whose 41×41 window contains no panel pixel, row-major.
pub fn negative_candidates(mask: &LabelMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    // summed-area table with a zero border
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for r in 0..h {
        let mut row_sum = 0u32;
        for c in 0..w {
            row_sum += mask.data[r * w + c] as u32;
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row_sum;
        }
    }
    let window = |r: usize, c: usize| {
        let (r0, c0, r1, c1) = (r - MARGIN, c - MARGIN, r + MARGIN + 1, c + MARGIN + 1);
        sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
    };
    let cols = grid(w, NEGATIVE_STRIDE);
    grid(h, NEGATIVE_STRIDE)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .filter(|&(r, c)| window(r, c) == 0)
        .collect()
}

/// Stride-3 centers lying on a panel pixel, row-major.
pub fn positive_candidates(mask: &LabelMask) -> Vec<(usize, usize)> {
    let cols = grid(mask.width, POSITIVE_STRIDE);
    grid(mask.height, POSITIVE_STRIDE)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c))
        .collect()
}

/// Seeded choice of `k` items, returned in their original order.
fn choose<T: Copy>(items: &[T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let k = k.min(items.len());
    let mut picked = index::sample(rng, items.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // mirror about the edge pixels: -1 -> 1, n -> n - 2
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        if n == 1 {
            return 0;
        }
    }
    i as usize
}

/// 41×41 crop centered on `(row, col)`, unrotated.
pub fn crop_patch(raster: &Raster, center: (usize, usize)) -> Vec<u8> {
    let (r0, c0) = (center.0 - MARGIN, center.1 - MARGIN);
    let mut out = Vec::with_capacity(PATCH * PATCH * 3);
    for r in r0..r0 + PATCH {
        let start = (r * raster.width + c0) * 3;
        out.extend_from_slice(&raster.pixels[start..start + PATCH * 3]);
    }
    out
}

#[cfg(test)]
fn crop_mask(mask: &LabelMask, center: (usize, usize)) -> Vec<u8> {
    let (r0, c0) = (center.0 - MARGIN, center.1 - MARGIN);
    let mut out = Vec::with_capacity(PATCH * PATCH);
    for r in r0..r0 + PATCH {
        out.extend_from_slice(&mask.data[r * mask.width + c0..][..PATCH]);
    }
    out
}

/// Rotated 41×41 crops of image and mask about `center`.
///
/// A 59×59 super-crop (reflected at raster borders) is rotated by `degrees`
/// counter-clockwise (bilinear for pixels, nearest for the mask) and its
/// central 41×41 returned. Zero degrees reproduces the plain crop exactly.
pub fn rotated_crop(raster: &Raster, mask: &LabelMask, center: (usize, usize), degrees: f64) -> (Vec<u8>, Vec<u8>) {
    let mut sup_px = vec![0u8; SUPER * SUPER * 3];
    let mut sup_mask = vec![0u8; SUPER * SUPER];
    for sr in 0..SUPER {
        let r = reflect(center.0 as isize + sr as isize - SUPER_MARGIN as isize, raster.height);
        for sc in 0..SUPER {
            let c = reflect(center.1 as isize + sc as isize - SUPER_MARGIN as isize, raster.width);
            let i = sr * SUPER + sc;
            sup_px[i * 3..i * 3 + 3].copy_from_slice(&raster.pixel(r, c));
            sup_mask[i] = mask.data[r * mask.width + c];
        }
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mid = SUPER_MARGIN as f64;
    let mut px = Vec::with_capacity(PATCH * PATCH * 3);
    let mut mk = Vec::with_capacity(PATCH * PATCH);
    for i in 0..PATCH {
        for j in 0..PATCH {
            let dy = i as f64 - MARGIN as f64;
            let dx = j as f64 - MARGIN as f64;
            // inverse rotation maps each output pixel back into the super-crop
            let sx = mid + cos * dx + sin * dy;
            let sy = mid - sin * dx + cos * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (x1, y1) = ((x0 + 1).min(SUPER - 1), (y0 + 1).min(SUPER - 1));
            for ch in 0..3 {
                let at = |y: usize, x: usize| sup_px[(y * SUPER + x) * 3 + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                px.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
            }
            let (ny, nx) = (sy.round() as usize, sx.round() as usize);
            mk.push(sup_mask[ny.min(SUPER - 1) * SUPER + nx.min(SUPER - 1)]);
        }
    }
    (px, mk)
}

fn make_label(kind: LabelKind, mask_crop: Vec<u8>) -> Label {
    match kind {
        LabelKind::Class => Label::Class(mask_crop[MARGIN * PATCH + MARGIN]),
        LabelKind::Mask => Label::Mask(mask_crop),
    }
}

fn negative_sample(raster: &Raster, center: (usize, usize), kind: LabelKind) -> PatchSample {
    PatchSample {
        pixels: crop_patch(raster, center),
        label: make_label(kind, vec![0; PATCH * PATCH]),
        raster_id: raster.id.clone(),
        center,
        rotation_deg: 0.0,
    }
}

/// Panel-free patches from the stride-5 grid, subsampled per `quota`.
///
/// `ClassMix` has no positives to balance against here and is treated as a
/// ratio of the candidates.
pub fn sample_negatives(
    raster: &Raster,
    mask: &LabelMask,
    seed: u64,
    quota: NegativeQuota,
    kind: LabelKind,
) -> Result<Vec<PatchSample>> {
    check(raster, mask)?;
    let candidates = negative_candidates(mask);
    let k = match quota {
        NegativeQuota::Ratio(f) | NegativeQuota::ClassMix(f) => round_half_up(f * candidates.len() as f64),
        NegativeQuota::Count(n) => n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(choose(&candidates, k, &mut rng)
        .into_iter()
        .map(|c| negative_sample(raster, c, kind))
        .collect())
}

/// Panel-centered patches: stride-3 candidates, a seeded `retention` share
/// kept, each emitted as `copies` independently rotated samples.
pub fn sample_positives(
    raster: &Raster,
    mask: &LabelMask,
    seed: u64,
    config: &ExtractConfig,
) -> Result<Vec<PatchSample>> {
    check(raster, mask)?;
    let candidates = positive_candidates(mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = round_half_up(config.positive_retention * candidates.len() as f64);
    let kept = choose(&candidates, keep, &mut rng);
    let mut out = Vec::with_capacity(kept.len() * config.copies);
    for center in kept {
        for _ in 0..config.copies {
            let degrees: f64 = rng.random_range(0.0..360.0);
            let (pixels, mask_crop) = rotated_crop(raster, mask, center, degrees);
            out.push(PatchSample {
                pixels,
                label: make_label(config.label, mask_crop),
                raster_id: raster.id.clone(),
                center,
                rotation_deg: degrees as f32,
            });
        }
    }
    Ok(out)
}

/// Extracts positives and negatives from many rasters.
///
/// Positives are drawn per raster (in parallel, each with its own seed
/// stream). Negatives are drawn from the pooled candidates of all rasters so
/// the requested quota or class mix holds over the whole set. Output is
/// ordered by raster, then negatives before positives.
pub fn extract(scenes: &[(Raster, LabelMask)], config: &ExtractConfig, seed: u64) -> Result<Vec<PatchSample>> {
    for (r, m) in scenes {
        check(r, m)?;
    }
    let positives = par::map_range(scenes.len(), |i| {
        sample_positives(&scenes[i].0, &scenes[i].1, stream_seed(seed, i as u64 + 1), config)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n_pos: usize = positives.iter().map(Vec::len).sum();

    let candidates = par::map_slice(scenes, |(_, m)| negative_candidates(m));
    let pool: Vec<(usize, (usize, usize))> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, cs)| cs.iter().map(move |&c| (i, c)))
        .collect();
    let k = match config.negatives {
        NegativeQuota::Ratio(f) => round_half_up(f * pool.len() as f64),
        NegativeQuota::Count(n) => n,
        NegativeQuota::ClassMix(f) => {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid("negative class mix must lie in [0, 1)"));
            }
            round_half_up(n_pos as f64 * f / (1.0 - f))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
    let chosen = choose(&pool, k, &mut rng);

    let mut out = Vec::with_capacity(chosen.len() + n_pos);
    let mut next = chosen.iter().peekable();
    for (i, pos) in positives.into_iter().enumerate() {
        while let Some(&&(ri, c)) = next.peek() {
            if ri != i {
                break;
            }
            out.push(negative_sample(&scenes[i].0, c, config.label));
            next.next();
        }
        out.extend(pos);
    }
    Ok(out)
}
