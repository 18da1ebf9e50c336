//! Scene directories: `<id>.png` imagery plus `<id>.json` annotations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pvmap::dataset::{rasterize, AnnotationSet, LabelMask, Raster};

pub struct Scene {
    pub raster: Raster,
    pub mask: LabelMask,
}

/// Annotation files in a directory, sorted by name.
pub fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading scene directory {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != crate::run::MANIFEST_NAME) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no annotation files in {}", dir.display());
    }
    Ok(files)
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

pub fn load_annotations(dir: &Path) -> Result<Vec<(PathBuf, AnnotationSet)>> {
    annotation_files(dir)?
        .into_iter()
        .map(|p| {
            let set = AnnotationSet::load(&p).with_context(|| format!("loading annotations {}", p.display()))?;
            Ok((p, set))
        })
        .collect()
}

/// Loads every scene in `dir`, returning the scenes and the files read.
pub fn load_scenes(dir: &Path) -> Result<(Vec<Scene>, Vec<PathBuf>)> {
    let mut scenes = Vec::new();
    let mut inputs = Vec::new();
    for (json, annotations) in load_annotations(dir)? {
        let png = image_path(dir, &annotations.raster_id);
        let raster = Raster::load_png(&png, annotations.raster_id.clone(), annotations.resolution_m)
            .with_context(|| format!("loading raster {}", png.display()))?;
        if (raster.width, raster.height) != (annotations.width, annotations.height) {
            bail!(
                "{}: image is {}x{} but annotations say {}x{}",
                png.display(),
                raster.width,
                raster.height,
                annotations.width,
                annotations.height
            );
        }
        let mask = rasterize(&annotations).with_context(|| format!("rasterizing {}", json.display()))?;
        inputs.push(json);
        inputs.push(png);
        scenes.push(Scene { raster, mask });
    }
    Ok((scenes, inputs))
}
