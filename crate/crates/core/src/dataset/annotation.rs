use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simple polygon; vertices are `[x, y]` in pixel coordinates, where pixel
/// `(row, col)` spans `[col, col+1) × [row, row+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon {
            vertices: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    /// x coordinates where the horizontal line `y` crosses an edge
    /// (half-open in y so shared vertices count once).
    fn crossings(&self, y: f64, out: &mut Vec<f64>) {
        let n = self.vertices.len();
        for i in 0..n {
            let [ax, ay] = self.vertices[i];
            let [bx, by] = self.vertices[(i + 1) % n];
            if (ay > y) != (by > y) {
                out.push(ax + (y - ay) * (bx - ax) / (by - ay));
            }
        }
    }
}

/// Ground-truth polygons for one raster, with the raster metadata needed to
/// rasterize and to compute covered area without the imagery.
///
/// Stored as one JSON document per raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub raster_id: String,
    pub width: usize,
    pub height: usize,
    pub resolution_m: f64,
    pub polygons: Vec<Polygon>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        for p in &self.polygons {
            if p.vertices.len() < 3 {
                return Err(Error::invalid("polygons need at least three vertices"));
            }
            for &[x, y] in &p.vertices {
                let inside = x.is_finite()
                    && y.is_finite()
                    && (0.0..=self.width as f64).contains(&x)
                    && (0.0..=self.height as f64).contains(&y);
                if !inside {
                    return Err(Error::VertexOutOfBounds {
                        x,
                        y,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: AnnotationSet = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn area_km2(&self) -> f64 {
        self.width as f64 * self.height as f64 * self.resolution_m * self.resolution_m / 1e6
    }
}

/// Binary per-pixel ground truth, row-major; 1 = panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        LabelMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// 1-band PNG, panel pixels 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        )
        .expect("mask length matches dims");
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(LabelMask {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect(),
        })
    }
}

/// Marks every pixel whose center lies inside any polygon (even-odd rule).
pub fn rasterize(annotations: &AnnotationSet) -> Result<LabelMask> {
    annotations.validate()?;
    let (w, h) = (annotations.width, annotations.height);
    let mut mask = LabelMask::zeros(w, h);
    let mut xs = Vec::new();
    for poly in &annotations.polygons {
        for row in 0..h {
            let yc = row as f64 + 0.5;
            xs.clear();
            poly.crossings(yc, &mut xs);
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            for span in xs.chunks_exact(2) {
                // pixel centers col + 0.5 in [span[0], span[1])
                let start = (span[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((span[1] - 0.5).ceil().max(0.0) as usize).min(w);
                for col in start..end {
                    mask.data[row * w + col] = 1;
                }
            }
        }
    }
    Ok(mask)
}
