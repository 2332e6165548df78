//! Minimal uncompressed 24-bit BMP writer/reader for the warp demo, so no
//! image codec dependency is needed. Reads back only the subset it writes
//! (BITMAPINFOHEADER, bottom-up, no compression).

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Writes a grayscale image (values clamped to [0, 1]) as 24-bit BMP.
pub fn write_gray(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Config(format!(
            "bmp: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let row_bytes = width * 3;
    let row_padded = (row_bytes + 3) & !3;
    let data_size = row_padded * height;
    let file_size = 54 + data_size;

    let mut out = Vec::with_capacity(file_size);
    // BITMAPFILEHEADER
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(file_size as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&54u32.to_le_bytes());
    // BITMAPINFOHEADER
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes()); // BI_RGB
    out.extend_from_slice(&(data_size as u32).to_le_bytes());
    out.extend_from_slice(&2835u32.to_le_bytes());
    out.extend_from_slice(&2835u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    // Pixel rows, bottom-up.
    for y in (0..height).rev() {
        let mut written = 0usize;
        for x in 0..width {
            let v = (pixels[y * width + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.extend_from_slice(&[v, v, v]);
            written += 3;
        }
        while written < row_padded {
            out.push(0);
            written += 1;
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads a BMP written by [`write_gray`] (or any uncompressed 24-bit
/// bottom-up BMP), converting to grayscale by channel average.
pub fn read_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let take_u32 = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
            .ok_or_else(|| Error::corrupt(path, "truncated bmp header"))
    };
    if bytes.len() < 54 || &bytes[0..2] != b"BM" {
        return Err(Error::corrupt(path, "not a BMP file"));
    }
    let data_offset = take_u32(10)? as usize;
    let width = take_u32(18)? as i32;
    let height = take_u32(22)? as i32;
    let bpp = u16::from_le_bytes([bytes[28], bytes[29]]);
    let compression = take_u32(30)?;
    if bpp != 24 || compression != 0 || width <= 0 || height <= 0 {
        return Err(Error::corrupt(
            path,
            format!("unsupported BMP variant (bpp={bpp}, compression={compression})"),
        ));
    }
    let (width, height) = (width as usize, height as usize);
    let row_padded = (width * 3 + 3) & !3;
    if bytes.len() < data_offset + row_padded * height {
        return Err(Error::corrupt(path, "truncated bmp pixel data"));
    }
    let mut pixels = vec![0.0f64; width * height];
    for y in 0..height {
        let row = &bytes[data_offset + (height - 1 - y) * row_padded..];
        for x in 0..width {
            let b = row[x * 3] as f64;
            let g = row[x * 3 + 1] as f64;
            let r = row[x * 3 + 2] as f64;
            pixels[y * width + x] = (r + g + b) / (3.0 * 255.0);
        }
    }
    Ok((pixels, width, height))
}
