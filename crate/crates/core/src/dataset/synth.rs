//! Synthetic aerial scenes: textured ground, a few dark non-panel
//! distractors, and rotated rectangular panels that never touch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rasterize, AnnotationSet, LabelMask, Polygon, Raster};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Panel side lengths are drawn uniformly from `[min_side, max_side]` pixels.
    pub min_side: f64,
    pub max_side: f64,
    /// Minimum pixel gap between any two panels.
    pub gap: usize,
    /// Dark round blobs that are not panels.
    pub distractors: usize,
    pub resolution_m: f64,
    /// Placement attempts per requested panel before giving up.
    pub attempts_per_panel: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_side: 3.0,
            max_side: 20.0,
            gap: 2,
            distractors: 3,
            resolution_m: 0.3,
            attempts_per_panel: 200,
        }
    }
}

fn rotated_rect(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Polygon {
    let (s, c) = theta.sin_cos();
    let corners = [(-w, -h), (w, -h), (w, h), (-w, h)];
    Polygon {
        vertices: corners
            .iter()
            .map(|&(dx, dy)| [cx + 0.5 * (dx * c - dy * s), cy + 0.5 * (dx * s + dy * c)])
            .collect(),
    }
}

fn fits(poly: &Polygon, width: usize, height: usize) -> bool {
    poly.vertices
        .iter()
        .all(|&[x, y]| x >= 1.0 && y >= 1.0 && x <= width as f64 - 1.0 && y <= height as f64 - 1.0)
}

/// True when no pixel of `cand` lies within `gap` pixels (Chebyshev) of `taken`.
fn clear_of(cand: &LabelMask, taken: &LabelMask, gap: usize) -> bool {
    let (w, h) = (cand.width, cand.height);
    for r in 0..h {
        for c in 0..w {
            if !cand.get(r, c) {
                continue;
            }
            for rr in r.saturating_sub(gap)..(r + gap + 1).min(h) {
                for cc in c.saturating_sub(gap)..(c + gap + 1).min(w) {
                    if taken.get(rr, cc) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Generates one scene with exactly `panel_count` panels.
///
/// Fails with [`Error::InfeasiblePlacement`] when the panels cannot be packed
/// within the attempt budget.
pub fn synth_scene(
    id: &str,
    seed: u64,
    width: usize,
    height: usize,
    panel_count: usize,
    cfg: &SynthConfig,
) -> Result<(Raster, AnnotationSet)> {
    if width < 128 || height < 128 {
        return Err(Error::invalid(format!(
            "synthetic scenes need at least 128x128 pixels, got {width}x{height}"
        )));
    }
    if !(cfg.min_side >= 3.0 && cfg.max_side >= cfg.min_side) {
        return Err(Error::invalid("panel sides need 3 <= min_side <= max_side"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut taken = LabelMask::zeros(width, height);
    let mut polygons = Vec::with_capacity(panel_count);
    let mut attempts = 0;
    while polygons.len() < panel_count && attempts < cfg.attempts_per_panel * panel_count.max(1) {
        attempts += 1;
        let w = rng.random_range(cfg.min_side..=cfg.max_side);
        let h = rng.random_range(cfg.min_side..=cfg.max_side);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let poly = rotated_rect(cx, cy, w, h, theta);
        if !fits(&poly, width, height) {
            continue;
        }
        let probe = AnnotationSet {
            raster_id: String::new(),
            width,
            height,
            resolution_m: cfg.resolution_m,
            polygons: vec![poly.clone()],
        };
        let cand = rasterize(&probe)?;
        if cand.count_ones() == 0 || !clear_of(&cand, &taken, cfg.gap) {
            continue;
        }
        for (t, &v) in taken.data.iter_mut().zip(&cand.data) {
            *t |= v;
        }
        polygons.push(poly);
    }
    if polygons.len() < panel_count {
        return Err(Error::InfeasiblePlacement {
            requested: panel_count,
            placed: polygons.len(),
        });
    }

    let annotations = AnnotationSet {
        raster_id: id.to_string(),
        width,
        height,
        resolution_m: cfg.resolution_m,
        polygons,
    };
    let pixels = paint(&mut rng, &taken, cfg.distractors);
    Ok((Raster::new(id, width, height, cfg.resolution_m, pixels)?, annotations))
}

fn paint(rng: &mut ChaCha8Rng, panels: &LabelMask, distractors: usize) -> Vec<u8> {
    let (w, h) = (panels.width, panels.height);
    let base: [f64; 3] = [
        rng.random_range(90.0..150.0),
        rng.random_range(100.0..160.0),
        rng.random_range(60.0..110.0),
    ];
    // low-frequency ground variation from a few soft blobs
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..8)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(10.0..50.0),
                [
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-30.0..30.0),
                ],
            )
        })
        .collect();
    let dark: Vec<(f64, f64, f64)> = (0..distractors)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(3.0..9.0),
            )
        })
        .collect();

    let mut out = vec![0u8; w * h * 3];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut rgb = base;
            for &(bx, by, rad, tint) in &blobs {
                let f = (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * rad * rad)).exp();
                for k in 0..3 {
                    rgb[k] += f * tint[k];
                }
            }
            if dark
                .iter()
                .any(|&(dx, dy, rad)| (x - dx).powi(2) + (y - dy).powi(2) <= rad * rad)
            {
                rgb = [55.0, 50.0, 45.0];
            }
            if panels.get(r, c) {
                // dark blue cells with lighter grid lines every 3 px
                let line = r % 3 == 0 || c % 3 == 0;
                rgb = if line { [70.0, 80.0, 110.0] } else { [25.0, 35.0, 75.0] };
            }
            let noise = rng.random_range(-12.0..12.0);
            for k in 0..3 {
                out[(r * w + c) * 3 + k] =
                    (rgb[k] + noise + rng.random_range(-6.0..6.0)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SynthConfig::default();
        let a = synth_scene("a", 9, 128, 144, 6, &cfg).unwrap();
        let b = synth_scene("a", 9, 128, 144, 6, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_scene("a", 10, 128, 144, 6, &cfg).unwrap();
        assert_ne!(a.0.pixels, c.0.pixels);
    }

    #[test]
    fn panels_are_valid_and_separated() {
        let cfg = SynthConfig::default();
        let (raster, ann) = synth_scene("s", 4, 160, 160, 10, &cfg).unwrap();
        assert_eq!(ann.polygons.len(), 10);
        ann.validate().unwrap();
        assert_eq!(raster.pixels.len(), 160 * 160 * 3);
        let masks: Vec<LabelMask> = ann
            .polygons
            .iter()
            .map(|p| {
                rasterize(&AnnotationSet {
                    polygons: vec![p.clone()],
                    ..ann.clone()
                })
                .unwrap()
            })
            .collect();
        for (i, a) in masks.iter().enumerate() {
            assert!(a.count_ones() > 0);
            for b in &masks[i + 1..] {
                assert!(clear_of(a, b, cfg.gap));
            }
        }
        // panel pixels are darker than the average ground
        let mask = rasterize(&ann).unwrap();
        let lum = |i: usize| raster.pixels[i * 3..i * 3 + 3].iter().map(|&v| v as f64).sum::<f64>();
        let (mut sp, mut np, mut sg, mut ng) = (0.0, 0, 0.0, 0);
        for i in 0..mask.data.len() {
            if mask.data[i] == 1 {
                sp += lum(i);
                np += 1
            } else {
                sg += lum(i);
                ng += 1
            }
        }
        assert!(sp / np as f64 + 100.0 < sg / ng as f64);
    }

    #[test]
    fn overfull_scene_is_infeasible() {
        let cfg = SynthConfig {
            min_side: 18.0,
            max_side: 20.0,
            attempts_per_panel: 20,
            ..SynthConfig::default()
        };
        let err = synth_scene("x", 1, 128, 128, 150, &cfg).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePlacement { requested: 150, .. }));
    }

    #[test]
    fn zero_panels_and_tiny_rasters() {
        let (_, ann) = synth_scene("e", 2, 128, 128, 0, &SynthConfig::default()).unwrap();
        assert!(ann.polygons.is_empty());
        assert_eq!(rasterize(&ann).unwrap().count_ones(), 0);
        assert!(synth_scene("e", 2, 127, 200, 0, &SynthConfig::default()).is_err());
    }
}
