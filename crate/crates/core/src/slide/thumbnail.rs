use image::Rgb;

use super::{PyramidSlide, RegionSpec};
use crate::raster::{draw_outline, RasterImage};

pub const VISITED_COLOUR: Rgb<u8> = Rgb([0, 176, 80]);

/// Aspect-preserving thumbnail (longest edge `edge`, at least 64) with each
/// visited region outlined.
pub fn render_thumbnail(slide: &PyramidSlide, visited: &[RegionSpec], edge: u32) -> RasterImage {
    let mut img = slide.thumbnail(edge.max(64));
    annotate(&mut img, slide.base_width(), slide.base_height(), visited);
    img
}

/// Outlines `visited` on an existing whole-slide thumbnail.
pub(crate) fn annotate(img: &mut RasterImage, base_width: u32, base_height: u32, visited: &[RegionSpec]) {
    let sx = img.width() as f64 / base_width as f64;
    let sy = img.height() as f64 / base_height as f64;
    let thickness = if img.width().max(img.height()) >= 512 { 2 } else { 1 };
    for r in visited {
        let x0 = (r.x0 as f64 * sx).floor() as u32;
        let y0 = (r.y0 as f64 * sy).floor() as u32;
        let x1 = ((r.x1 as f64 * sx).ceil() as u32).saturating_sub(1).max(x0);
        let y1 = ((r.y1 as f64 * sy).ceil() as u32).saturating_sub(1).max(y0);
        draw_outline(img, x0, y0, x1, y1, thickness, VISITED_COLOUR);
    }
}
