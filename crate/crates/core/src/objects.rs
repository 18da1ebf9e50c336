//! Thresholding a probability map and grouping panel pixels into detections.

use serde::{Deserialize, Serialize};

use crate::dataset::LabelMask;
use crate::error::Result;
use crate::stitch::ProbabilityMap;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `c ≥ t`.
pub fn threshold_map(map: &ProbabilityMap, t: f64) -> LabelMask {
    LabelMask {
        width: map.width,
        height: map.height,
        data: map.values.iter().map(|&c| u8::from(c >= t)).collect(),
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    // keep the smaller index as root so roots are first pixels
    if ra < rb {
        parent[rb as usize] = ra;
    } else if rb < ra {
        parent[ra as usize] = rb;
    }
}

/// Maximal 8-connected groups of set pixels, as ascending flat row-major
/// indices; groups are ordered by their first pixel.
pub fn connected_components(mask: &LabelMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut parent: Vec<u32> = (0..(w * h) as u32).collect();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let i = (r * w + c) as u32;
            // already-visited neighbours: W, NW, N, NE
            if c > 0 && mask.get(r, c - 1) {
                union(&mut parent, i, i - 1);
            }
            if r > 0 {
                let up = i - w as u32;
                if mask.get(r - 1, c) {
                    union(&mut parent, i, up);
                }
                if c > 0 && mask.get(r - 1, c - 1) {
                    union(&mut parent, i, up - 1);
                }
                if c + 1 < w && mask.get(r - 1, c + 1) {
                    union(&mut parent, i, up + 1);
                }
            }
        }
    }
    let mut slot = vec![u32::MAX; w * h];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..w * h {
        if mask.data[i] == 0 {
            continue;
        }
        let root = find(&mut parent, i as u32) as usize;
        if slot[root] == u32::MAX {
            slot[root] = out.len() as u32;
            out.push(Vec::new());
        }
        out[slot[root] as usize].push(i);
    }
    out
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    /// Ascending flat row-major indices.
    pub pixels: Vec<usize>,
    /// Mean probability of the member pixels.
    pub confidence: f64,
    pub bbox: BBox,
}

impl DetectedObject {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn bbox(pixels: &[usize], width: usize) -> BBox {
    let mut b = BBox {
        row_min: usize::MAX,
        col_min: usize::MAX,
        row_max: 0,
        col_max: 0,
    };
    for &p in pixels {
        let (r, c) = (p / width, p % width);
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    b
}

/// Thresholds at `t`, groups the result into components, and scores each by
/// its mean probability. Sorted by descending confidence, ties by first pixel.
pub fn extract_objects_at(map: &ProbabilityMap, t: f64) -> Vec<DetectedObject> {
    let mut objects: Vec<DetectedObject> = connected_components(&threshold_map(map, t))
        .into_iter()
        .map(|pixels| {
            // shifted by the first value so uniform components average exactly
            let base = map.values[pixels[0]];
            let spread = pixels.iter().map(|&p| map.values[p] - base).sum::<f64>();
            let confidence = base + spread / pixels.len() as f64;
            DetectedObject {
                bbox: bbox(&pixels, map.width),
                pixels,
                confidence,
            }
        })
        .collect();
    objects.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.pixels[0].cmp(&b.pixels[0]))
    });
    objects
}

pub fn extract_objects(map: &ProbabilityMap) -> Vec<DetectedObject> {
    extract_objects_at(map, DEFAULT_THRESHOLD)
}

/// One JSON-lines detection record. `runs` holds `[start, length]` pairs of
/// consecutive flat row-major pixel indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub confidence: f64,
    pub bbox: BBox,
    pub area: usize,
    pub runs: Vec<[usize; 2]>,
}

impl DetectionLine {
    pub fn from_object(obj: &DetectedObject) -> Self {
        let mut runs: Vec<[usize; 2]> = Vec::new();
        for &p in &obj.pixels {
            match runs.last_mut() {
                Some([start, len]) if *start + *len == p => *len += 1,
                _ => runs.push([p, 1]),
            }
        }
        DetectionLine {
            confidence: obj.confidence,
            bbox: obj.bbox,
            area: obj.area(),
            runs,
        }
    }

    pub fn to_object(&self) -> DetectedObject {
        DetectedObject {
            pixels: self.runs.iter().flat_map(|&[s, n]| s..s + n).collect(),
            confidence: self.confidence,
            bbox: self.bbox,
        }
    }
}

pub fn to_jsonl(objects: &[DetectedObject]) -> String {
    objects
        .iter()
        .map(|o| serde_json::to_string(&DetectionLine::from_object(o)).expect("plain data serializes") + "\n")
        .collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<DetectedObject>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<DetectionLine>(l)
                .map(|d| d.to_object())
                .map_err(|e| crate::Error::format("detections", e.to_string()))
        })
        .collect()
}
