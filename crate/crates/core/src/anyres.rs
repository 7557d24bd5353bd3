//! AnyRes planning for captioner inputs.
//!
//! An image maps onto a grid of 448x448 tiles of at most 2x2. Images larger
//! than 896 on either edge are first shrunk (aspect preserved) to fit 896x896,
//! then padded (black, top-left anchored) to the grid. Multi-tile grids get a
//! 448x448 thumbnail of the original prepended. Each tile costs 128 tokens.

use image::{GenericImage, GenericImageView, Rgb};
use serde::{Deserialize, Serialize};

use crate::raster::{resize, RasterImage};

pub const TILE_EDGE: u32 = 448;
pub const MAX_GRID_EDGE: u32 = 2 * TILE_EDGE;
pub const TOKENS_PER_TILE: usize = 128;
pub const PAD_COLOUR: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPlan {
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub scaled_width: u32,
    pub scaled_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub include_thumbnail: bool,
}

impl GridPlan {
    pub fn grid_tiles(&self) -> usize {
        (self.grid_cols * self.grid_rows) as usize
    }

    /// Grid tiles plus the thumbnail, if any.
    pub fn tile_count(&self) -> usize {
        self.grid_tiles() + usize::from(self.include_thumbnail)
    }

    pub fn token_count(&self) -> usize {
        TOKENS_PER_TILE * self.tile_count()
    }
}

/// Smallest supported grid that holds the (possibly shrunk) image.
///
/// # Panics
/// If either dimension is zero.
pub fn plan_grid(width: u32, height: u32) -> GridPlan {
    assert!(width >= 1 && height >= 1, "image must be non-empty");
    let (scaled_width, scaled_height) = if width > MAX_GRID_EDGE || height > MAX_GRID_EDGE {
        let k = MAX_GRID_EDGE as f64 / width.max(height) as f64;
        (
            ((width as f64 * k).round() as u32).clamp(1, MAX_GRID_EDGE),
            ((height as f64 * k).round() as u32).clamp(1, MAX_GRID_EDGE),
        )
    } else {
        (width, height)
    };
    let grid_cols = scaled_width.div_ceil(TILE_EDGE);
    let grid_rows = scaled_height.div_ceil(TILE_EDGE);
    GridPlan {
        grid_cols,
        grid_rows,
        scaled_width,
        scaled_height,
        padded_width: grid_cols * TILE_EDGE,
        padded_height: grid_rows * TILE_EDGE,
        include_thumbnail: grid_cols * grid_rows > 1,
    }
}

pub fn token_count(width: u32, height: u32) -> usize {
    plan_grid(width, height).token_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileSequence {
    pub plan: GridPlan,
    pub thumbnail: Option<RasterImage>,
    /// Row-major grid tiles.
    pub tiles: Vec<RasterImage>,
    pub token_count: usize,
}

impl TileSequence {
    /// Tiles in model order: thumbnail first, then the grid.
    pub fn ordered(&self) -> impl Iterator<Item = &RasterImage> {
        self.thumbnail.iter().chain(self.tiles.iter())
    }

    /// Stitches the grid back together and crops the padding.
    pub fn reassemble(&self) -> RasterImage {
        let p = &self.plan;
        let mut canvas = RasterImage::new(p.padded_width, p.padded_height);
        for (i, tile) in self.tiles.iter().enumerate() {
            let (c, r) = (i as u32 % p.grid_cols, i as u32 / p.grid_cols);
            canvas.copy_from(tile, c * TILE_EDGE, r * TILE_EDGE).expect("tile fits canvas");
        }
        canvas.view(0, 0, p.scaled_width, p.scaled_height).to_image()
    }
}

/// Splits an image into its AnyRes tile sequence.
pub fn tile_image(image: &RasterImage) -> TileSequence {
    let plan = plan_grid(image.width(), image.height());
    let scaled = resize(image, plan.scaled_width, plan.scaled_height);
    let mut padded = RasterImage::from_pixel(plan.padded_width, plan.padded_height, PAD_COLOUR);
    padded.copy_from(&scaled, 0, 0).expect("scaled image fits padded canvas");
    let tiles = (0..plan.grid_rows)
        .flat_map(|r| (0..plan.grid_cols).map(move |c| (c, r)))
        .map(|(c, r)| padded.view(c * TILE_EDGE, r * TILE_EDGE, TILE_EDGE, TILE_EDGE).to_image())
        .collect();
    let thumbnail = plan.include_thumbnail.then(|| resize(image, TILE_EDGE, TILE_EDGE));
    TileSequence { plan, thumbnail, tiles, token_count: plan.token_count() }
}

/// One element of a serialized multi-image placeholder sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSegment {
    Image { tokens: usize },
    Newline,
}

/// Placeholder layout of a request carrying several images: each image's
/// tokens, with one newline marker between consecutive images.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTokenPlan {
    pub segments: Vec<PlanSegment>,
}

impl ImageTokenPlan {
    pub fn for_sizes(sizes: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut segments = Vec::new();
        for (i, (w, h)) in sizes.into_iter().enumerate() {
            if i > 0 {
                segments.push(PlanSegment::Newline);
            }
            segments.push(PlanSegment::Image { tokens: token_count(w, h) });
        }
        Self { segments }
    }

    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, PlanSegment::Image { .. })).count()
    }

    pub fn newline_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, PlanSegment::Newline)).count()
    }

    /// Image tokens plus one token per newline marker.
    pub fn total_tokens(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                PlanSegment::Image { tokens } => *tokens,
                PlanSegment::Newline => 1,
            })
            .sum()
    }

    /// Compact text form, e.g. `<image:640>\n<image:128>`.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                PlanSegment::Image { tokens } => format!("<image:{tokens}>"),
                PlanSegment::Newline => "\n".to_string(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_points() {
        let p = plan_grid(448, 448);
        assert_eq!((p.grid_cols, p.grid_rows, p.include_thumbnail), (1, 1, false));
        assert_eq!(p.token_count(), 128);
        let p = plan_grid(896, 896);
        assert_eq!((p.grid_cols, p.grid_rows, p.include_thumbnail), (2, 2, true));
        assert_eq!(p.token_count(), 640);
        let p = plan_grid(500, 448);
        assert_eq!((p.grid_cols, p.grid_rows, p.include_thumbnail), (2, 1, true));
    }

    #[test]
    fn oblong_images_rescale_then_pad() {
        let p = plan_grid(2000, 300);
        assert_eq!((p.scaled_width, p.scaled_height), (896, 134));
        assert_eq!((p.grid_cols, p.grid_rows), (2, 1));
        assert_eq!(token_count(2000, 300), 384);
    }

    #[test]
    fn tiling_small_and_full() {
        let img = RasterImage::from_fn(300, 200, |x, y| Rgb([x as u8, y as u8, 7]));
        let seq = tile_image(&img);
        assert_eq!(seq.tiles.len(), 1);
        assert!(seq.thumbnail.is_none());
        assert_eq!(seq.token_count, 128);
        assert_eq!(*seq.tiles[0].get_pixel(350, 100), PAD_COLOUR);
        assert_eq!(*seq.tiles[0].get_pixel(299, 199), Rgb([43, 199, 7]));

        let img = RasterImage::from_pixel(896, 896, Rgb([9, 9, 9]));
        let seq = tile_image(&img);
        assert_eq!(seq.ordered().count(), 5);
        assert_eq!(seq.token_count, 640);

        let seq = tile_image(&RasterImage::from_pixel(448, 448, Rgb([1, 2, 3])));
        assert_eq!((seq.tiles.len(), seq.token_count), (1, 128));
    }

    #[test]
    fn newline_markers_between_images() {
        let plan = ImageTokenPlan::for_sizes([(896, 896), (448, 448), (500, 448)]);
        assert_eq!(plan.newline_count(), 2);
        assert_eq!(plan.total_tokens(), 640 + 128 + 384 + 2);
        assert_eq!(plan.render(), "<image:640>\n<image:128>\n<image:384>");
        assert_eq!(ImageTokenPlan::for_sizes([(10, 10)]).newline_count(), 0);
    }

    proptest! {
        #[test]
        fn tokens_take_three_values(w in 1u32..4096, h in 1u32..4096) {
            let p = plan_grid(w, h);
            prop_assert!([128, 384, 640].contains(&p.token_count()));
            prop_assert!(p.grid_tiles() <= 4);
            prop_assert_eq!(p.include_thumbnail, p.grid_tiles() > 1);
            prop_assert!(p.scaled_width <= p.padded_width && p.scaled_height <= p.padded_height);
        }

        #[test]
        fn tokens_monotone_below_grid_limit(w in 1u32..896, h in 1u32..896, dw in 0u32..100) {
            let w2 = (w + dw).min(896);
            prop_assert!(token_count(w2, h) >= token_count(w, h));
            prop_assert!(token_count(h, w2) >= token_count(h, w));
        }

        #[test]
        fn tiles_reassemble_input(w in 1u32..1200, h in 1u32..1200, seed in any::<u8>()) {
            let img = RasterImage::from_fn(w, h, |x, y| Rgb([(x as u8) ^ seed, y as u8, (x + y) as u8]));
            let seq = tile_image(&img);
            let expected = resize(&img, seq.plan.scaled_width, seq.plan.scaled_height);
            prop_assert_eq!(seq.reassemble(), expected);
            prop_assert!(seq.ordered().all(|t| t.dimensions() == (TILE_EDGE, TILE_EDGE)));
        }
    }
}
