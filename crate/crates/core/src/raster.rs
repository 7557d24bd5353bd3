//! 8-bit RGB rasters and the separable resampler shared by region reads,
//! thumbnails and AnyRes tiling.

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

/// All rasters handled by the crate are 8-bit RGB.
pub type RasterImage = RgbImage;

/// One source sample contributing to an output sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub index: usize,
    pub weight: f64,
}

/// Per-output-sample contributions along one axis.
pub(crate) type AxisTaps = Vec<Vec<Tap>>;

/// Area-coverage taps: output sample `j` averages the source interval
/// `[start + j*extent/n, start + (j+1)*extent/n)` where source pixel `i` spans
/// `[i*pixel, min((i+1)*pixel, limit))`. All coordinates are in a common
/// (base) unit, which lets a coarse level stand in for level 0.
pub(crate) fn area_taps(start: f64, extent: f64, out_len: usize, pixel: f64, limit: f64) -> AxisTaps {
    // Multiplying before dividing keeps integral boundaries exact.
    let edge = |j: usize| start + j as f64 * extent / out_len as f64;
    (0..out_len)
        .map(|j| {
            let lo = edge(j);
            let hi = edge(j + 1).min(limit);
            let first = (lo / pixel).floor().max(0.0) as usize;
            let mut taps = Vec::new();
            let mut i = first;
            loop {
                let p_lo = i as f64 * pixel;
                if p_lo >= hi {
                    break;
                }
                let p_hi = ((i + 1) as f64 * pixel).min(limit);
                let overlap = p_hi.min(hi) - p_lo.max(lo);
                if overlap > 0.0 {
                    taps.push(Tap { index: i, weight: overlap });
                }
                i += 1;
            }
            normalise(&mut taps);
            taps
        })
        .collect()
}

/// Bilinear taps for enlarging `in_len` samples to `out_len` (pixel centres aligned).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> AxisTaps {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|j| {
            let centre = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let left = centre.floor() as usize;
            let frac = centre - left as f64;
            let mut taps = vec![Tap { index: left, weight: 1.0 - frac }];
            if frac > 0.0 && left + 1 < in_len {
                taps.push(Tap { index: left + 1, weight: frac });
            }
            normalise(&mut taps);
            taps
        })
        .collect()
}

fn normalise(taps: &mut [Tap]) {
    let total: f64 = taps.iter().map(|t| t.weight).sum();
    if total > 0.0 {
        for t in taps.iter_mut() {
            t.weight /= total;
        }
    }
}

/// Taps for a plain resize along one axis: area average when shrinking,
/// bilinear when enlarging.
pub(crate) fn resize_taps(in_len: usize, out_len: usize) -> AxisTaps {
    if out_len <= in_len {
        area_taps(0.0, in_len as f64, out_len, 1.0, in_len as f64)
    } else {
        bilinear_taps(in_len, out_len)
    }
}

/// Applies separable taps to `src`. Tap indices are relative to `src`.
pub(crate) fn apply_taps(src: &RasterImage, xs: &AxisTaps, ys: &AxisTaps) -> RasterImage {
    let (sw, _) = src.dimensions();
    let out_w = xs.len();
    let out_h = ys.len();
    let raw = src.as_raw();

    // Horizontal pass only over the rows the vertical pass needs.
    let row_lo = ys.iter().flat_map(|t| t.iter().map(|t| t.index)).min().unwrap_or(0);
    let row_hi = ys.iter().flat_map(|t| t.iter().map(|t| t.index)).max().unwrap_or(0);
    let rows = row_hi + 1 - row_lo;
    let mut horiz = vec![0f64; rows * out_w * 3];
    for r in 0..rows {
        let src_row = &raw[(row_lo + r) * sw as usize * 3..(row_lo + r + 1) * sw as usize * 3];
        let dst = &mut horiz[r * out_w * 3..(r + 1) * out_w * 3];
        for (j, taps) in xs.iter().enumerate() {
            let mut acc = [0f64; 3];
            for t in taps {
                let p = &src_row[t.index * 3..t.index * 3 + 3];
                acc[0] += t.weight * p[0] as f64;
                acc[1] += t.weight * p[1] as f64;
                acc[2] += t.weight * p[2] as f64;
            }
            dst[j * 3..j * 3 + 3].copy_from_slice(&acc);
        }
    }

    let mut out = RasterImage::new(out_w as u32, out_h as u32);
    for (i, taps) in ys.iter().enumerate() {
        for j in 0..out_w {
            let mut acc = [0f64; 3];
            for t in taps {
                let base = ((t.index - row_lo) * out_w + j) * 3;
                acc[0] += t.weight * horiz[base];
                acc[1] += t.weight * horiz[base + 1];
                acc[2] += t.weight * horiz[base + 2];
            }
            out.put_pixel(j as u32, i as u32, Rgb(acc.map(to_u8)));
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Resizes an image to exactly `width` x `height`.
pub fn resize(src: &RasterImage, width: u32, height: u32) -> RasterImage {
    if src.dimensions() == (width, height) {
        return src.clone();
    }
    let xs = resize_taps(src.width() as usize, width as usize);
    let ys = resize_taps(src.height() as usize, height as usize);
    apply_taps(src, &xs, &ys)
}

/// Lowercase hex SHA-256 over the dimensions and raw RGB bytes.
pub fn digest(img: &RasterImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encodes a raster as PNG bytes.
pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, image::ImageError> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Adaptive).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

/// Draws a rectangle outline of the given thickness, clipped to the image.
pub fn draw_outline(img: &mut RasterImage, x0: u32, y0: u32, x1: u32, y1: u32, thickness: u32, colour: Rgb<u8>) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let x1 = x1.min(w - 1);
    let y1 = y1.min(h - 1);
    if x0 > x1 || y0 > y1 {
        return;
    }
    for t in 0..thickness {
        let (top, bottom) = (y0 + t, y1.saturating_sub(t));
        let (left, right) = (x0 + t, x1.saturating_sub(t));
        if top > bottom || left > right {
            break;
        }
        for x in left..=right {
            img.put_pixel(x, top, colour);
            img.put_pixel(x, bottom, colour);
        }
        for y in top..=bottom {
            img.put_pixel(left, y, colour);
            img.put_pixel(right, y, colour);
        }
    }
}
