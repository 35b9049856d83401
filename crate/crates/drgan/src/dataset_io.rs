//! Dataset directories: `<root>/<id>/image.png`, one grayscale PNG per
//! condition channel and `meta.json` with the grade.

use std::fs;
use std::path::Path;

use drgan_core::data::{ConditionMap, Dataset, GradeLabel, Sample, CONDITION_CHANNELS};
use drgan_core::tensor::Tensor;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, read_json, write_json, Error, Result};

/// File stems of the condition channels, in channel order.
pub const CHANNEL_FILES: [&str; CONDITION_CHANNELS] = ["vessel", "optic_disk", "ma", "he", "ex", "se", "laser", "membrane"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub grade: u8,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` in [0, 1] to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let [_, h, w] = t.dims3();
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    })
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn plane_to_gray(plane: &[f64], h: usize, w: usize) -> GrayImage {
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(plane[y as usize * w + x as usize])]))
}

pub fn save_sample(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("image.png");
    tensor_to_rgb(&sample.image).save(&path).map_err(|e| format_err(&path, e))?;
    let c = sample.condition.tensor();
    let [_, h, w] = c.dims3();
    for (k, stem) in CHANNEL_FILES.iter().enumerate() {
        let path = dir.join(format!("{stem}.png"));
        plane_to_gray(&c.data()[k * h * w..(k + 1) * h * w], h, w).save(&path).map_err(|e| format_err(&path, e))?;
    }
    write_json(&dir.join("meta.json"), &SampleMeta { grade: sample.grade.level() })
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for s in &ds.samples {
        save_sample(s, &root.join(&s.id))?;
    }
    Ok(())
}

fn open_png(path: &Path, id: &str) -> Result<image::DynamicImage> {
    if !path.is_file() {
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        return Err(Error::Ingestion { id: id.to_string(), message: format!("missing {file}") });
    }
    image::open(path).map_err(|e| format_err(path, e))
}

pub fn load_sample(dir: &Path) -> Result<Sample> {
    let id = dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::Ingestion { id, message: "missing meta.json".into() });
    }
    let meta: SampleMeta = read_json(&meta_path)?;
    let image = rgb_to_tensor(&open_png(&dir.join("image.png"), &id)?.to_rgb8());
    let [_, h, w] = image.dims3();
    let mut cond = Vec::with_capacity(CONDITION_CHANNELS * h * w);
    for stem in CHANNEL_FILES {
        let g = open_png(&dir.join(format!("{stem}.png")), &id)?.to_luma8();
        if (g.width() as usize, g.height() as usize) != (w, h) {
            return Err(drgan_core::Error::Validation(format!("sample {id}: {stem}.png is {}×{}, image is {w}×{h}", g.width(), g.height())).into());
        }
        cond.extend(g.pixels().map(|p| (p[0] as f64 / 255.0).clamp(0.0, 1.0)));
    }
    let condition = ConditionMap::from_tensor(Tensor::from_vec(&[CONDITION_CHANNELS, h, w], cond))?;
    Ok(Sample::new(condition, image, GradeLabel::new(meta.grade)?, id)?)
}

/// Loads every sample directory under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(io_err(root))?;
    let mut dirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("dataset directory {} is empty", root.display());
    }
    Ok(Dataset::new(dirs.iter().map(|d| load_sample(d)).collect::<Result<Vec<_>>>()?))
}
