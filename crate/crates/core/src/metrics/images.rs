use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

const GAP: u32 = 2;

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Writes rows of `[H, W, C]` images as one PNG, each row left to right
/// (conventionally the conditioning image first, then its samples).
pub fn write_mosaic(rows: &[Vec<Tensor<f32>>], scale: u32, path: &Path) -> Result<()> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| shape_err!("empty mosaic"))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(shape_err!("mosaic expects [H,W,C] images, got {s:?}"));
    }
    let (h, w, c) = (s[0] as u32, s[1] as u32, s[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let cell_w = w * scale + GAP;
    let cell_h = h * scale + GAP;
    let mut img = RgbImage::from_pixel(
        cols * cell_w + GAP,
        rows.len() as u32 * cell_h + GAP,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (col, t) in row.iter().enumerate() {
            if t.shape() != s.as_slice() {
                return Err(shape_err!(
                    "mosaic images differ in shape: {:?} vs {s:?}",
                    t.shape()
                ));
            }
            let d = t.data();
            for y in 0..h * scale {
                for x in 0..w * scale {
                    let base = (((y / scale) * w + x / scale) as usize) * c;
                    let px = if c == 1 {
                        [to_byte(d[base]); 3]
                    } else {
                        [to_byte(d[base]), to_byte(d[base + 1]), to_byte(d[base + 2])]
                    };
                    img.put_pixel(
                        GAP + col as u32 * cell_w + x,
                        GAP + r as u32 * cell_h + y,
                        Rgb(px),
                    );
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Precision (x) against recall (y) on the unit square, one dot per point.
pub fn write_pr_scatter(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let size = 256u32;
    let margin = 16u32;
    let span = size - 2 * margin;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    for i in 0..=span {
        img.put_pixel(margin + i, size - margin, Rgb([0, 0, 0]));
        img.put_pixel(margin, size - margin - i, Rgb([0, 0, 0]));
    }
    let n = points.len().max(1) as f64;
    for (idx, &(p, r)) in points.iter().enumerate() {
        let x = margin + (p.clamp(0.0, 1.0) * span as f64).round() as u32;
        let y = size - margin - (r.clamp(0.0, 1.0) * span as f64).round() as u32;
        // darker dots for larger guidance index
        let shade = (200.0 * (1.0 - idx as f64 / n)) as u8;
        for dy in 0..5u32 {
            for dx in 0..5u32 {
                let (px, py) = ((x + dx).saturating_sub(2), (y + dy).saturating_sub(2));
                if px < size && py < size {
                    img.put_pixel(px, py, Rgb([220, shade, shade / 2]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Raw tensor file: `"TNSR"`, rank `u32`, extents `u64`, `f32` data, all
/// little-endian.
pub fn write_tensor_file(t: &Tensor<f32>, path: &Path) -> Result<()> {
    use crate::binio::BinWrite;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"TNSR")?;
    w.put_u32(t.rank() as u32)?;
    for &e in t.shape() {
        w.put_u64(e as u64)?;
    }
    w.put_f32s(t.data())?;
    w.flush()?;
    Ok(())
}

/// Reads an RGB PNG of exactly `height × width` into `[H, W, 3]` in `[-1, 1]`.
pub fn read_png(path: &Path, height: u32, width: u32) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    if img.dimensions() != (width, height) {
        return Err(shape_err!(
            "{} is {}x{}, expected {width}x{height}",
            path.display(),
            img.width(),
            img.height()
        ));
    }
    let data = img
        .pixels()
        .flat_map(|p| p.0)
        .map(|b| b as f32 / 127.5 - 1.0)
        .collect();
    Tensor::new(&[height as usize, width as usize, 3], data)
}
