//! Tissue detection on a low-resolution view: saturation threshold (Otsu),
//! 3x3 closing, connected components, small-component removal and merging of
//! nearby boxes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{PixelBox, PyramidSlide};
use crate::raster::RasterImage;

/// Longest edge of the view tissue detection runs on.
pub const DETECTION_EDGE: u32 = 1024;
/// Components smaller than this fraction of the detection view are dropped.
pub const MIN_TISSUE_FRACTION: f64 = 0.0005;
/// Boxes closer than this fraction of the detection edge are merged.
pub const MERGE_GAP_FRACTION: f64 = 0.01;
/// Saturation threshold never drops below this, so glass-only slides yield
/// no tissue instead of thresholded noise.
pub const SATURATION_FLOOR: u8 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TissueBox {
    /// 1-based, row-major by top-left corner.
    pub index: usize,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl TissueBox {
    pub fn bounds(&self) -> PixelBox {
        PixelBox::new(self.x0, self.y0, self.x1, self.y1)
    }
}

fn saturation(p: &image::Rgb<u8>) -> u8 {
    let max = p.0.iter().copied().max().unwrap_or(0) as u32;
    let min = p.0.iter().copied().min().unwrap_or(0) as u32;
    if max == 0 {
        0
    } else {
        (((max - min) * 255 + max / 2) / max) as u8
    }
}

/// Otsu's threshold: foreground is `value > threshold`.
pub(crate) fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w_bg = 0u64;
    let mut sum_bg = 0f64;
    let mut best = (0u8, -1.0f64);
    for t in 0..256 {
        w_bg += hist[t];
        if w_bg == 0 {
            continue;
        }
        let w_fg = total - w_bg;
        if w_fg == 0 {
            break;
        }
        sum_bg += t as f64 * hist[t] as f64;
        let m_bg = sum_bg / w_bg as f64;
        let m_fg = (sum_all - sum_bg) / w_fg as f64;
        let between = w_bg as f64 * w_fg as f64 * (m_bg - m_fg).powi(2);
        if between > best.1 {
            best = (t as u8, between);
        }
    }
    best.0
}

/// Foreground mask of a thumbnail.
pub(crate) fn tissue_mask(thumb: &RasterImage) -> Vec<bool> {
    let sats: Vec<u8> = thumb.pixels().map(saturation).collect();
    let mut hist = [0u64; 256];
    for &s in &sats {
        hist[s as usize] += 1;
    }
    let threshold = otsu_threshold(&hist).max(SATURATION_FLOOR);
    let mask: Vec<bool> = sats.iter().map(|&s| s > threshold).collect();
    close3(&mask, thumb.width() as usize, thumb.height() as usize)
}

fn morph(mask: &[bool], w: usize, h: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            let mut all = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    // Outside pixels are neutral for both operations.
                    let v = if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        !dilate
                    } else {
                        mask[ny as usize * w + nx as usize]
                    };
                    any |= v;
                    all &= v;
                }
            }
            out[y * w + x] = if dilate { any } else { all };
        }
    }
    out
}

fn close3(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let dilated = morph(mask, w, h, true);
    morph(&dilated, w, h, false)
}

/// 8-connected components as (bounding box, pixel count) in mask coordinates.
fn components(mask: &[bool], w: usize, h: usize) -> Vec<(PixelBox, u64)> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0u64;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            count += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push((PixelBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32), count));
    }
    out
}

fn gap(a: &PixelBox, b: &PixelBox) -> u32 {
    let gx = b.x0.saturating_sub(a.x1).max(a.x0.saturating_sub(b.x1));
    let gy = b.y0.saturating_sub(a.y1).max(a.y0.saturating_sub(b.y1));
    gx.max(gy)
}

fn merge_close(mut boxes: Vec<PixelBox>, merge_gap: f64) -> Vec<PixelBox> {
    loop {
        let mut merged = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if (gap(&boxes[i], &boxes[j]) as f64) < merge_gap {
                    let b = boxes.remove(j);
                    let a = &mut boxes[i];
                    *a = PixelBox::new(a.x0.min(b.x0), a.y0.min(b.y0), a.x1.max(b.x1), a.y1.max(b.y1));
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return boxes;
        }
    }
}

/// Tissue boxes in a thumbnail's own coordinates.
pub(crate) fn detect_in_thumbnail(thumb: &RasterImage) -> Vec<PixelBox> {
    let (w, h) = (thumb.width() as usize, thumb.height() as usize);
    let mask = tissue_mask(thumb);
    let min_area = (MIN_TISSUE_FRACTION * (w * h) as f64).ceil() as u64;
    let boxes: Vec<PixelBox> =
        components(&mask, w, h).into_iter().filter(|(_, n)| *n >= min_area.max(1)).map(|(b, _)| b).collect();
    merge_close(boxes, MERGE_GAP_FRACTION * w.max(h) as f64)
}

/// Finds tissue regions, returned in base-level coordinates.
pub fn detect_tissue(slide: &PyramidSlide) -> Vec<TissueBox> {
    let edge = DETECTION_EDGE.min(slide.base_width().max(slide.base_height()));
    let thumb = slide.thumbnail(edge);
    let sx = slide.base_width() as f64 / thumb.width() as f64;
    let sy = slide.base_height() as f64 / thumb.height() as f64;
    let mut boxes: Vec<PixelBox> = detect_in_thumbnail(&thumb)
        .into_iter()
        .map(|b| {
            PixelBox::new(
                (b.x0 as f64 * sx).floor() as u32,
                (b.y0 as f64 * sy).floor() as u32,
                ((b.x1 as f64 * sx).ceil() as u32).min(slide.base_width()),
                ((b.y1 as f64 * sy).ceil() as u32).min(slide.base_height()),
            )
        })
        .collect();
    boxes.sort_by_key(|b| (b.y0, b.x0));
    boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| TissueBox { index: i + 1, x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 })
        .collect()
}

/// Number of cells of a `cell`-pixel grid (anchored at the origin) that
/// intersect any of `boxes`. With `cell` equal to one 896-pixel field at 20x
/// this is the slide's high-power tissue ROI count.
pub fn tissue_roi_count(boxes: &[TissueBox], slide_width: u32, slide_height: u32, cell: u32) -> usize {
    let cols = slide_width.div_ceil(cell);
    let rows = slide_height.div_ceil(cell);
    let mut n = 0;
    for r in 0..rows {
        for c in 0..cols {
            let cb = PixelBox::new(
                c * cell,
                r * cell,
                ((c + 1) * cell).min(slide_width),
                ((r + 1) * cell).min(slide_height),
            );
            if boxes.iter().any(|b| b.bounds().intersects(&cb)) {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn otsu_separates_bimodal() {
        let mut hist = [0u64; 256];
        hist[10] = 500;
        hist[12] = 500;
        hist[90] = 300;
        hist[95] = 300;
        let t = otsu_threshold(&hist);
        assert!((12..90).contains(&t), "{t}");
    }

    #[test]
    fn closing_fills_pinholes() {
        let (w, h) = (9, 9);
        let mut mask = vec![false; w * h];
        for y in 2..7 {
            for x in 2..7 {
                mask[y * w + x] = true;
            }
        }
        mask[4 * w + 4] = false;
        let closed = close3(&mask, w, h);
        assert!(closed[4 * w + 4]);
        assert_eq!(closed.iter().filter(|&&v| v).count(), 25);
        assert!(!closed[0]);
    }

    #[test]
    fn blobs_detected_and_merged() {
        let mut img = RasterImage::from_pixel(200, 100, Rgb([242, 240, 244]));
        for y in 20..60 {
            for x in 10..50 {
                img.put_pixel(x, y, Rgb([228, 160, 198]));
            }
            for x in 51..70 {
                img.put_pixel(x, y, Rgb([228, 160, 198]));
            }
            for x in 120..180 {
                img.put_pixel(x, y, Rgb([228, 160, 198]));
            }
        }
        let boxes = detect_in_thumbnail(&img);
        assert_eq!(boxes, vec![PixelBox::new(10, 20, 70, 60), PixelBox::new(120, 20, 180, 60)]);
    }

    #[test]
    fn blank_image_has_no_tissue() {
        let img = RasterImage::from_fn(64, 64, |x, y| Rgb([240 + (x % 3) as u8, 240 + (y % 4) as u8, 243]));
        assert!(detect_in_thumbnail(&img).is_empty());
    }

    #[test]
    fn roi_grid_count() {
        let boxes = [TissueBox { index: 1, x0: 100, y0: 100, x1: 1000, y1: 200 }];
        assert_eq!(tissue_roi_count(&boxes, 4096, 4096, 896), 2);
    }
}
