use image::Rgb;
use proptest::prelude::*;
use slidescout_core::anyres::{plan_grid, tile_image, token_count, ImageTokenPlan, PAD_COLOUR, TILE_EDGE};
use slidescout_core::raster::RasterImage;

fn gradient(w: u32, h: u32) -> RasterImage {
    RasterImage::from_fn(w, h, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, ((x + 3 * y) % 239) as u8 + 1]))
}

#[test]
fn published_token_counts() {
    assert_eq!(token_count(448, 448), 128);
    assert_eq!(token_count(896, 896), 640);
}

#[test]
fn grid_shapes() {
    let p = plan_grid(448, 448);
    assert_eq!((p.grid_cols, p.grid_rows, p.include_thumbnail), (1, 1, false));
    let p = plan_grid(896, 896);
    assert_eq!((p.grid_cols, p.grid_rows, p.include_thumbnail), (2, 2, true));
    let p = plan_grid(500, 448);
    assert_eq!((p.grid_cols, p.grid_rows, p.include_thumbnail), (2, 1, true));
    let p = plan_grid(448, 449);
    assert_eq!((p.grid_cols, p.grid_rows), (1, 2));
}

#[test]
fn oblong_image_is_shrunk_then_padded() {
    let p = plan_grid(2000, 300);
    // 300 * 896 / 2000 = 134.4
    assert_eq!((p.scaled_width, p.scaled_height), (896, 134));
    assert_eq!((p.grid_cols, p.grid_rows), (2, 1));
    assert_eq!(token_count(2000, 300), 384);
}

#[test]
fn shrinking_can_lower_the_count() {
    // Past 896 the aspect-preserving shrink also shrinks the other side.
    assert_eq!(token_count(449, 449), 640);
    assert_eq!(token_count(897, 449), 384);
    assert_eq!(token_count(4096, 500), 384);
}

#[test]
fn tile_sequences() {
    let one = tile_image(&gradient(448, 448));
    assert_eq!((one.tiles.len(), one.thumbnail.is_none(), one.token_count), (1, true, 128));

    let five = tile_image(&gradient(896, 896));
    assert_eq!(five.ordered().count(), 5);
    assert_eq!(five.token_count, 640);
    assert!(five.ordered().all(|t| t.dimensions() == (TILE_EDGE, TILE_EDGE)));

    let small = tile_image(&gradient(300, 200));
    assert_eq!((small.tiles.len(), small.token_count), (1, 128));
    let t = &small.tiles[0];
    assert_eq!(t.dimensions(), (448, 448));
    assert_eq!(*t.get_pixel(299, 199), Rgb([(299 % 251) as u8, (199 % 241) as u8, ((299 + 597) % 239) as u8 + 1]));
    assert_eq!(*t.get_pixel(300, 0), PAD_COLOUR);
    assert_eq!(*t.get_pixel(0, 200), PAD_COLOUR);
    assert_eq!(*t.get_pixel(447, 447), PAD_COLOUR);
}

#[test]
fn thumbnail_leads_the_sequence() {
    let seq = tile_image(&gradient(600, 300));
    let first = seq.ordered().next().unwrap();
    assert_eq!(Some(first), seq.thumbnail.as_ref());
}

#[test]
fn multi_image_plan_counts_newlines() {
    let sizes = [(896, 896), (448, 448), (500, 448), (2000, 300)];
    let plan = ImageTokenPlan::for_sizes(sizes);
    let images: usize = sizes.iter().map(|&(w, h)| token_count(w, h)).sum();
    assert_eq!(plan.image_count(), 4);
    assert_eq!(plan.newline_count(), 3);
    assert_eq!(plan.total_tokens(), images + 3);
    assert_eq!(plan.render(), "<image:640>\n<image:128>\n<image:384>\n<image:384>");
    assert_eq!(ImageTokenPlan::for_sizes([(10, 10)]).newline_count(), 0);
}

#[test]
fn ten_full_size_rois_cost_640_each() {
    let plan = ImageTokenPlan::for_sizes(std::iter::repeat_n((896, 896), 10));
    assert_eq!(plan.total_tokens(), 10 * 640 + 9);
}

proptest! {
    #[test]
    fn token_count_takes_three_values(w in 1u32..=4096, h in 1u32..=4096) {
        let t = token_count(w, h);
        prop_assert!([128, 384, 640].contains(&t), "{}x{} -> {}", w, h, t);
    }

    #[test]
    fn plan_invariants(w in 1u32..=4096, h in 1u32..=4096) {
        let p = plan_grid(w, h);
        prop_assert!(p.grid_cols >= 1 && p.grid_cols <= 2 && p.grid_rows >= 1 && p.grid_rows <= 2);
        prop_assert_eq!(p.include_thumbnail, p.grid_cols * p.grid_rows > 1);
        prop_assert!(p.scaled_width <= p.padded_width && p.scaled_height <= p.padded_height);
        prop_assert_eq!(p.padded_width, p.grid_cols * TILE_EDGE);
        prop_assert_eq!(p.padded_height, p.grid_rows * TILE_EDGE);
        // No smaller grid would do.
        prop_assert!(p.scaled_width > (p.grid_cols - 1) * TILE_EDGE);
        prop_assert!(p.scaled_height > (p.grid_rows - 1) * TILE_EDGE);
        prop_assert_eq!(p.token_count(), 128 * p.tile_count());
    }

    #[test]
    fn token_count_monotone_without_rescale(fixed in 1u32..=896, a in 1u32..=896, b in 1u32..=896) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(token_count(lo, fixed) <= token_count(hi, fixed));
        prop_assert!(token_count(fixed, lo) <= token_count(fixed, hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_reassembles_input(w in 1u32..=896, h in 1u32..=896) {
        let img = gradient(w, h);
        let seq = tile_image(&img);
        prop_assert_eq!(seq.reassemble(), img);
        prop_assert_eq!(seq.ordered().count() * 128, seq.token_count);
    }

    #[test]
    fn shrunk_input_reassembles_to_scaled_size(w in 897u32..=2400, h in 1u32..=2400) {
        let seq = tile_image(&gradient(w, h));
        let p = seq.plan;
        prop_assert_eq!(seq.reassemble().dimensions(), (p.scaled_width, p.scaled_height));
        prop_assert_eq!(p.scaled_width.max(p.scaled_height), 896);
    }
}
