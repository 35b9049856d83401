use std::path::Path;

use drgan_core::tensor::Tensor;
use image::{Rgb, RgbImage};

use crate::dataset_io::tensor_to_rgb;
use crate::error::{format_err, Result};

/// Tiles `[3, R, R]` images row-major, `columns` per row, with a 2-px gap.
pub fn contact_sheet(images: &[&Tensor], columns: usize) -> RgbImage {
    let gap = 2u32;
    let r = images.first().map(|t| t.shape()[1] as u32).unwrap_or(1);
    let columns = columns.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(columns).max(1);
    let mut sheet = RgbImage::from_pixel(columns as u32 * (r + gap) + gap, rows as u32 * (r + gap) + gap, Rgb([255, 255, 255]));
    for (k, t) in images.iter().enumerate() {
        let tile = tensor_to_rgb(t);
        let (ox, oy) = (gap + (k % columns) as u32 * (r + gap), gap + (k / columns) as u32 * (r + gap));
        for (x, y, p) in tile.enumerate_pixels() {
            sheet.put_pixel(ox + x, oy + y, *p);
        }
    }
    sheet
}

pub fn save_contact_sheet(images: &[&Tensor], columns: usize, path: &Path) -> Result<()> {
    contact_sheet(images, columns).save(path).map_err(|e| format_err(path, e))
}
