use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Ground sampling distance, meters per pixel.
    pub resolution_m: f64,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(id: impl Into<String>, width: usize, height: usize, resolution_m: f64, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB raster needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Raster {
            id: id.into(),
            width,
            height,
            resolution_m,
            pixels,
        })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn load_png(path: &Path, id: impl Into<String>, resolution_m: f64) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Raster::new(id, w as usize, h as usize, resolution_m, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("length checked at construction");
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}
