//! Dense tiled inference over a whole raster and Gaussian-weighted blending
//! of the overlapping 41×41 tile predictions into one probability map.

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::arch::PATCH;
use crate::dataset::{crop_patch, Raster};
use crate::error::{Error, Result};
use crate::network::{patch_tensor, Network, Prediction};
use crate::par;
use crate::tensor::Real;

pub const DEFAULT_STRIDE: usize = 10;
pub const DEFAULT_SIGMA: f64 = 10.0;

/// Rows of output handled by one blending work unit.
const BAND_ROWS: usize = 16;

/// Top-left tile offsets covering a raster, sorted row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub offsets: Vec<(usize, usize)>,
}

/// Offsets `0, stride, 2·stride, …` plus a final `dim − 41` when the stride
/// does not land there.
pub fn axis_offsets(dim: usize, stride: usize) -> Vec<usize> {
    let last = dim - PATCH;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

pub fn plan_tiles(width: usize, height: usize, stride: usize) -> Result<TilePlan> {
    if width < PATCH || height < PATCH {
        return Err(Error::invalid(format!(
            "raster {width}x{height} is smaller than a {PATCH}x{PATCH} patch"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("tile stride must be positive"));
    }
    let cols = axis_offsets(width, stride);
    let offsets = axis_offsets(height, stride)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TilePlan {
        width,
        height,
        stride,
        offsets,
    })
}

/// Unnormalized 41×41 Gaussian weights centered on the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWindow {
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl BlendWindow {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "blend window sigma must be positive, got {sigma}"
            )));
        }
        let c = (PATCH / 2) as f64;
        let weights = (0..PATCH * PATCH)
            .map(|i| {
                let (dy, dx) = ((i / PATCH) as f64 - c, (i % PATCH) as f64 - c);
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Ok(BlendWindow { sigma, weights })
    }
}

impl Default for BlendWindow {
    fn default() -> Self {
        BlendWindow::gaussian(DEFAULT_SIGMA).expect("default sigma is valid")
    }
}

/// Per-pixel panel confidence over a whole raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub const PMAP_MAGIC: &[u8; 6] = b"PMAP01";

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap { width, height, values })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Binary form: magic, width and height (u32 LE), then f32 LE values.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(PMAP_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |d: &str| Error::format("probability map", d.to_string());
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        if bytes.len() < 14 || &bytes[..6] != PMAP_MAGIC {
            return Err(bad("bad magic"));
        }
        let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() != width * height * 4 {
            return Err(bad(&format!(
                "{width}x{height} map needs {} value bytes, found {}",
                width * height * 4,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        ProbabilityMap::new(width, height, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(&mut bytes.as_slice())
    }

    /// 16-bit grayscale PNG, pixel value `round(65535·c)`.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw = self.values.iter().map(|&v| (v * 65535.0).round() as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("length checked");
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png16(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        let values = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        ProbabilityMap::new(w as usize, h as usize, values)
    }
}

/// One tile's 41×41 panel probabilities, row-major.
pub type Tile = Vec<f64>;

fn predict_one<T: Real>(net: &Network<T>, raster: &Raster, offset: (usize, usize)) -> Result<Tile> {
    let center = (offset.0 + PATCH / 2, offset.1 + PATCH / 2);
    let x = patch_tensor::<T>(&crop_patch(raster, center))?;
    Ok(match net.predict(&x)? {
        Prediction::Map(m) => m,
        Prediction::Scalar(p) => vec![p; PATCH * PATCH],
    })
}

/// Runs the network on every planned tile (in parallel), returning tiles in
/// plan order. Classifier scalars are broadcast to constant tiles.
pub fn predict_tiles<T: Real>(net: &Network<T>, raster: &Raster, plan: &TilePlan) -> Result<Vec<Tile>> {
    check_plan(raster, plan)?;
    par::map_slice(&plan.offsets, |&o| predict_one(net, raster, o))
        .into_iter()
        .collect()
}

fn check_plan(raster: &Raster, plan: &TilePlan) -> Result<()> {
    if (raster.width, raster.height) != (plan.width, plan.height) {
        return Err(Error::shape(format!(
            "tile plan for {}x{} applied to a {}x{} raster",
            plan.width, plan.height, raster.width, raster.height
        )));
    }
    Ok(())
}

/// Running weighted sums for one pixel. Tracking the range of contributing
/// values lets single-tile and constant pixels come out exactly and keeps
/// every result inside the convex hull of its inputs.
#[derive(Clone, Copy)]
struct Acc {
    num: f64,
    den: f64,
    lo: f64,
    hi: f64,
}

impl Acc {
    const EMPTY: Acc = Acc {
        num: 0.0,
        den: 0.0,
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
    };

    #[inline]
    fn add(&mut self, w: f64, v: f64) {
        self.num += w * v;
        self.den += w;
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    #[inline]
    fn value(&self) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            (self.num / self.den).clamp(self.lo, self.hi)
        }
    }
}

/// Accumulates `tiles` (in order) into rows `row0..row0 + acc.len() / width`.
fn accumulate<'a>(
    acc: &mut [Acc],
    row0: usize,
    width: usize,
    tiles: impl Iterator<Item = ((usize, usize), &'a [f64])>,
    window: &BlendWindow,
) {
    let rows = acc.len() / width;
    for ((tr, tc), tile) in tiles {
        let r_start = tr.max(row0);
        let r_end = (tr + PATCH).min(row0 + rows);
        for r in r_start..r_end {
            let pr = r - tr;
            let line = &mut acc[(r - row0) * width + tc..(r - row0) * width + tc + PATCH];
            let w = &window.weights[pr * PATCH..(pr + 1) * PATCH];
            let v = &tile[pr * PATCH..(pr + 1) * PATCH];
            for ((a, &wi), &vi) in line.iter_mut().zip(w).zip(v) {
                a.add(wi, vi);
            }
        }
    }
}

/// Weighted average of overlapping tiles:
/// `out(p) = Σ w(p − o)·tile(p − o) / Σ w(p − o)` over tiles covering `p`,
/// accumulated in plan order. Row bands are blended in parallel; each pixel
/// still sees its tiles in plan order, so the result is thread-count independent.
pub fn blend(tiles: &[Tile], plan: &TilePlan, window: &BlendWindow) -> Result<ProbabilityMap> {
    if tiles.len() != plan.offsets.len() {
        return Err(Error::shape(format!(
            "{} tiles for a plan of {} offsets",
            tiles.len(),
            plan.offsets.len()
        )));
    }
    if let Some(t) = tiles.iter().find(|t| t.len() != PATCH * PATCH) {
        return Err(Error::shape(format!(
            "tile has {} values, expected {}",
            t.len(),
            PATCH * PATCH
        )));
    }
    if window.weights.len() != PATCH * PATCH {
        return Err(Error::shape("blend window must be 41x41"));
    }
    let (w, h) = (plan.width, plan.height);
    let bands = h.div_ceil(BAND_ROWS);
    let parts = par::map_range(bands, |b| {
        let row0 = b * BAND_ROWS;
        let rows = BAND_ROWS.min(h - row0);
        let mut acc = vec![Acc::EMPTY; rows * w];
        let touching = plan
            .offsets
            .iter()
            .zip(tiles)
            .filter(|((r, _), _)| *r < row0 + rows && r + PATCH > row0)
            .map(|(&o, t)| (o, t.as_slice()));
        accumulate(&mut acc, row0, w, touching, window);
        acc.iter().map(Acc::value).collect::<Vec<f64>>()
    });
    finish(w, h, parts.concat())
}

fn finish(w: usize, h: usize, values: Vec<f64>) -> Result<ProbabilityMap> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("tile plan leaves pixels uncovered"));
    }
    ProbabilityMap::new(w, h, values)
}

/// Tiled inference and blending in one pass, holding only one row of tile
/// predictions at a time. Equal to `blend(predict_tiles(..))` bit for bit.
pub fn predict_map<T: Real>(
    net: &Network<T>,
    raster: &Raster,
    plan: &TilePlan,
    window: &BlendWindow,
) -> Result<ProbabilityMap> {
    check_plan(raster, plan)?;
    let (w, h) = (plan.width, plan.height);
    let mut acc = vec![Acc::EMPTY; w * h];
    let mut start = 0;
    while start < plan.offsets.len() {
        let row = plan.offsets[start].0;
        let end = start + plan.offsets[start..].iter().take_while(|o| o.0 == row).count();
        let offsets = &plan.offsets[start..end];
        let tiles = par::map_slice(offsets, |&o| predict_one(net, raster, o))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let rows = PATCH.min(h - row);
        accumulate(
            &mut acc[row * w..(row + rows) * w],
            row,
            w,
            offsets.iter().copied().zip(tiles.iter().map(Vec::as_slice)),
            window,
        );
        start = end;
    }
    finish(w, h, acc.iter().map(Acc::value).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel weighted average over every covering tile.
    fn oracle(tiles: &[Tile], plan: &TilePlan, window: &BlendWindow) -> Vec<f64> {
        let mut out = vec![0.0; plan.width * plan.height];
        for r in 0..plan.height {
            for c in 0..plan.width {
                let (mut num, mut den) = (0.0, 0.0);
                for (&(tr, tc), t) in plan.offsets.iter().zip(tiles) {
                    if (tr..tr + PATCH).contains(&r) && (tc..tc + PATCH).contains(&c) {
                        let k = (r - tr) * PATCH + (c - tc);
                        num += window.weights[k] * t[k];
                        den += window.weights[k];
                    }
                }
                out[r * plan.width + c] = num / den;
            }
        }
        out
    }

    fn random_tiles(n: usize, rng: &mut ChaCha8Rng) -> Vec<Tile> {
        (0..n)
            .map(|_| (0..PATCH * PATCH).map(|_| rng.random()).collect())
            .collect()
    }

    #[test]
    fn offsets_follow_stride_and_snap_to_edge() {
        assert_eq!(axis_offsets(41, 10), vec![0]);
        assert_eq!(axis_offsets(61, 10), vec![0, 10, 20]);
        assert_eq!(axis_offsets(65, 10), vec![0, 10, 20, 24]);
        let plan = plan_tiles(65, 41, 10).unwrap();
        assert_eq!(plan.offsets, vec![(0, 0), (0, 10), (0, 20), (0, 24)]);
        assert!(plan_tiles(40, 100, 10).is_err());
    }

    #[test]
    fn every_pixel_is_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(41..150), rng.random_range(41..150));
            let plan = plan_tiles(w, h, 10).unwrap();
            let mut count = vec![0; w * h];
            for &(r, c) in &plan.offsets {
                for rr in r..r + PATCH {
                    for cc in c..c + PATCH {
                        count[rr * w + cc] += 1;
                    }
                }
            }
            assert!(count.iter().all(|&n| n >= 1));
        }
    }

    #[test]
    fn window_shape() {
        let win = BlendWindow::default();
        let c = PATCH / 2;
        let max = win.weights.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(win.weights[c * PATCH + c], 1.0);
        assert_eq!(max, 1.0);
        for r in 0..PATCH {
            for col in 0..PATCH {
                let v = win.weights[r * PATCH + col];
                assert!(v > 0.0);
                assert_eq!(v, win.weights[r * PATCH + (PATCH - 1 - col)]);
                assert_eq!(v, win.weights[(PATCH - 1 - r) * PATCH + col]);
            }
        }
        assert!(BlendWindow::gaussian(0.0).is_err());
    }

    #[test]
    fn blend_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let win = BlendWindow::default();
        for (w, h) in [(128, 128), (97, 133), (41, 60)] {
            let plan = plan_tiles(w, h, 10).unwrap();
            let tiles = random_tiles(plan.offsets.len(), &mut rng);
            let map = blend(&tiles, &plan, &win).unwrap();
            let expect = oracle(&tiles, &plan, &win);
            for (a, b) in map.values.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            assert_eq!(par::sequential(|| blend(&tiles, &plan, &win)).unwrap(), map);
        }
    }

    #[test]
    fn single_tile_and_constants_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let win = BlendWindow::default();
        let plan = plan_tiles(41, 41, 10).unwrap();
        let tiles = random_tiles(1, &mut rng);
        assert_eq!(blend(&tiles, &plan, &win).unwrap().values, tiles[0]);

        let plan = plan_tiles(77, 90, 10).unwrap();
        let tiles = vec![vec![0.3; PATCH * PATCH]; plan.offsets.len()];
        assert!(blend(&tiles, &plan, &win).unwrap().values.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn two_tile_overlap_is_weight_ratio() {
        let win = BlendWindow::default();
        let plan = plan_tiles(51, 41, 10).unwrap();
        assert_eq!(plan.offsets, vec![(0, 0), (0, 10)]);
        let tiles = vec![vec![0.0; PATCH * PATCH], vec![1.0; PATCH * PATCH]];
        let map = blend(&tiles, &plan, &win).unwrap();
        for r in 0..41 {
            for c in 10..41 {
                let w0 = win.weights[r * PATCH + c];
                let w1 = win.weights[r * PATCH + c - 10];
                assert!((map.get(r, c) - w1 / (w0 + w1)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn convex_and_shift_commuting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let win = BlendWindow::default();
        let plan = plan_tiles(70, 70, 10).unwrap();
        let tiles: Vec<Tile> = random_tiles(plan.offsets.len(), &mut rng)
            .into_iter()
            .map(|t| t.into_iter().map(|v| 0.5 * v).collect())
            .collect();
        let map = blend(&tiles, &plan, &win).unwrap();
        let shifted: Vec<Tile> = tiles.iter().map(|t| t.iter().map(|v| v + 0.25).collect()).collect();
        let map2 = blend(&shifted, &plan, &win).unwrap();
        for (a, b) in map.values.iter().zip(&map2.values) {
            assert!((a + 0.25 - b).abs() < 1e-12);
            assert!((0.0..=0.5).contains(a));
        }
    }

    #[test]
    fn tile_count_mismatch_is_rejected() {
        let plan = plan_tiles(60, 60, 10).unwrap();
        assert!(blend(&[], &plan, &BlendWindow::default()).is_err());
    }

    #[test]
    fn binary_and_png_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..35 * 20).map(|_| rng.random::<f32>() as f64).collect();
        let map = ProbabilityMap::new(35, 20, values).unwrap();
        let mut buf = Vec::new();
        map.write_binary(&mut buf).unwrap();
        assert_eq!(ProbabilityMap::read_binary(&mut buf.as_slice()).unwrap(), map);
        assert!(ProbabilityMap::read_binary(&mut &buf[..buf.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        map.save_png16(&p).unwrap();
        let back = ProbabilityMap::load_png16(&p).unwrap();
        for (a, b) in map.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        assert!(ProbabilityMap::new(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn fused_inference_equals_two_pass() {
        use crate::arch::{classifier_with, segmenter_with};
        use crate::network::Init;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pixels = (0..70 * 66 * 3).map(|_| rng.random()).collect();
        let raster = Raster::new("r", 70, 66, 0.3, pixels).unwrap();
        let plan = plan_tiles(70, 66, 10).unwrap();
        let win = BlendWindow::default();
        let seg = Network::<f32>::new(
            &segmenter_with(&[4, 4, 4], &[4, 4, 4]).unwrap(),
            Init::FanInUniform { seed: 1 },
        );
        let cls = Network::<f32>::new(
            &classifier_with(&[4, 4, 4], &[4]).unwrap(),
            Init::FanInUniform { seed: 1 },
        );
        for net in [&seg, &cls] {
            let tiles = predict_tiles(net, &raster, &plan).unwrap();
            assert_eq!(
                predict_map(net, &raster, &plan, &win).unwrap(),
                blend(&tiles, &plan, &win).unwrap()
            );
        }
        let tiles = predict_tiles(&cls, &raster, &plan).unwrap();
        assert!(tiles.iter().all(|t| t.iter().all(|&v| v == t[0])));
    }
}
