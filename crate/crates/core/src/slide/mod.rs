//! Pyramidal slide storage: open a tiled slide directory, read regions at a
//! requested magnification, find tissue, draw thumbnails and generate
//! synthetic slides with known lesion maps.
//!
//! On disk a slide is a directory:
//!
//! ```text
//! manifest.json            slide id, base geometry, per-level {downsample, cols, rows}
//! level_<k>/tile_<c>_<r>.png
//! truth.json               (synthetic slides only) lesion and tissue ground truth
//! ```
//!
//! Level `k` with downsample `d` is `ceil(base / d)` pixels on each axis and
//! every level pixel is the area average of the level-0 block it covers.

mod synthetic;
mod thumbnail;
mod tissue;

pub use synthetic::{
    generate_synthetic, LesionFocus, SlideTruth, SyntheticSlideSpec, TextureParams, DIAGNOSIS_CATALOG,
};
pub(crate) use thumbnail::annotate;
pub use thumbnail::{render_thumbnail, VISITED_COLOUR};
pub use tissue::{detect_tissue, tissue_roi_count, TissueBox};

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::raster::{apply_taps, area_taps, RasterImage};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Standard objective stops. A slide supports the stops at or below its base
/// magnification, plus the base magnification itself.
pub const MAGNIFICATION_STOPS: [f64; 6] = [1.25, 2.5, 5.0, 10.0, 20.0, 40.0];

const MAG_EPS: f64 = 1e-9;
const TILE_CACHE_CAPACITY: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("manifest not found: {0}")]
    ManifestNotFound(PathBuf),
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("inconsistent level geometry: {0}")]
    Geometry(String),
    #[error("unreadable tile {path}: {message}")]
    Tile { path: PathBuf, message: String },
    #[error("region out of bounds: {0}")]
    OutOfBounds(String),
    #[error("unsupported magnification {requested}x (available: {available:?})")]
    UnsupportedMagnification { requested: f64, available: Vec<f64> },
    #[error("invalid synthetic slide spec: {0}")]
    InvalidSpec(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
}

/// Axis-aligned pixel box in base-level coordinates; `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersection(&self, other: &PixelBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.intersection(other) > 0
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

impl fmt::Display for PixelBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})-({}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// A base-level window plus the magnification it should be viewed at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub magnification: f64,
}

impl RegionSpec {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32, magnification: f64) -> Self {
        Self { x0, y0, x1, y1, magnification }
    }

    pub fn bounds(&self) -> PixelBox {
        PixelBox::new(self.x0, self.y0, self.x1, self.y1)
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }
}

impl fmt::Display for RegionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x={}-{}, y={}-{} @ {}x", self.x0, self.x1, self.y0, self.y1, self.magnification)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub slide_id: String,
    pub base_width: u32,
    pub base_height: u32,
    pub base_magnification: f64,
    pub mpp: Option<f64>,
    pub tile_edge: u32,
    pub levels: Vec<LevelEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub downsample: u32,
    pub cols: u32,
    pub rows: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidLevel {
    pub downsample: u32,
    pub width: u32,
    pub height: u32,
    pub cols: u32,
    pub rows: u32,
}

/// An opened, validated slide. Reads are safe from any number of threads.
pub struct PyramidSlide {
    root: PathBuf,
    manifest: Manifest,
    levels: Vec<PyramidLevel>,
    tiles: RwLock<HashMap<(usize, u32, u32), Arc<RasterImage>>>,
}

impl fmt::Debug for PyramidSlide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PyramidSlide")
            .field("root", &self.root)
            .field("slide_id", &self.manifest.slide_id)
            .field("levels", &self.levels)
            .finish()
    }
}

pub(crate) fn level_dims(base: u32, downsample: u32) -> u32 {
    base.div_ceil(downsample)
}

pub(crate) fn tile_path(root: &Path, level: usize, col: u32, row: u32) -> PathBuf {
    root.join(format!("level_{level}")).join(format!("tile_{col}_{row}.png"))
}

/// Checks manifest geometry and derives per-level dimensions.
pub(crate) fn validate_manifest(m: &Manifest) -> Result<Vec<PyramidLevel>, SlideError> {
    if m.base_width == 0 || m.base_height == 0 {
        return Err(SlideError::Geometry("base dimensions must be positive".into()));
    }
    if m.tile_edge == 0 {
        return Err(SlideError::Geometry("tile_edge must be positive".into()));
    }
    if !(m.base_magnification > 0.0) {
        return Err(SlideError::Geometry("base_magnification must be positive".into()));
    }
    let Some(first) = m.levels.first() else {
        return Err(SlideError::Geometry("no levels".into()));
    };
    if first.downsample != 1 {
        return Err(SlideError::Geometry("level 0 downsample must be 1".into()));
    }
    if m.levels.windows(2).any(|w| w[1].downsample <= w[0].downsample) {
        return Err(SlideError::Geometry("non-monotonic downsamples".into()));
    }
    m.levels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let width = level_dims(m.base_width, l.downsample);
            let height = level_dims(m.base_height, l.downsample);
            let cols = width.div_ceil(m.tile_edge);
            let rows = height.div_ceil(m.tile_edge);
            if (cols, rows) != (l.cols, l.rows) {
                return Err(SlideError::Geometry(format!(
                    "level {k}: expected {cols}x{rows} tiles for {width}x{height} pixels, manifest says {}x{}",
                    l.cols, l.rows
                )));
            }
            Ok(PyramidLevel { downsample: l.downsample, width, height, cols, rows })
        })
        .collect()
}

/// Opens a slide directory, checking the manifest and the header of every tile.
pub fn open_slide(path: impl AsRef<Path>) -> Result<PyramidSlide, SlideError> {
    let root = path.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|_| SlideError::ManifestNotFound(manifest_path.clone()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| SlideError::Manifest { path: manifest_path.clone(), message: e.to_string() })?;
    let levels = validate_manifest(&manifest)?;

    for (k, level) in levels.iter().enumerate() {
        for row in 0..level.rows {
            for col in 0..level.cols {
                let path = tile_path(&root, k, col, row);
                let dims = image::image_dimensions(&path)
                    .map_err(|e| SlideError::Tile { path: path.clone(), message: e.to_string() })?;
                let expect = (
                    manifest.tile_edge.min(level.width - col * manifest.tile_edge),
                    manifest.tile_edge.min(level.height - row * manifest.tile_edge),
                );
                if dims != expect {
                    return Err(SlideError::Tile {
                        path,
                        message: format!("expected {}x{} pixels, found {}x{}", expect.0, expect.1, dims.0, dims.1),
                    });
                }
            }
        }
    }

    Ok(PyramidSlide { root, manifest, levels, tiles: RwLock::new(HashMap::new()) })
}

impl PyramidSlide {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }

    pub fn base_width(&self) -> u32 {
        self.manifest.base_width
    }

    pub fn base_height(&self) -> u32 {
        self.manifest.base_height
    }

    pub fn base_magnification(&self) -> f64 {
        self.manifest.base_magnification
    }

    pub fn tile_edge(&self) -> u32 {
        self.manifest.tile_edge
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn bounds(&self) -> PixelBox {
        PixelBox::new(0, 0, self.base_width(), self.base_height())
    }

    /// Magnifications this slide can be viewed at, ascending.
    pub fn allowed_magnifications(&self) -> Vec<f64> {
        let base = self.base_magnification();
        let mut mags: Vec<f64> = MAGNIFICATION_STOPS.iter().copied().filter(|m| *m <= base + MAG_EPS).collect();
        if !mags.iter().any(|m| (m - base).abs() < MAG_EPS) {
            mags.push(base);
        }
        mags
    }

    pub fn is_allowed_magnification(&self, mag: f64) -> bool {
        self.allowed_magnifications().iter().any(|m| (m - mag).abs() < MAG_EPS)
    }

    /// Every way `region` violates the slide bounds or magnification set.
    pub fn region_violations(&self, region: &RegionSpec) -> Vec<String> {
        let mut out = Vec::new();
        if region.x0 >= region.x1 || region.y0 >= region.y1 {
            out.push(format!("region is empty: {region}"));
        }
        if region.x1 > self.base_width() || region.y1 > self.base_height() {
            out.push(format!("region out of bounds: {region} exceeds {}x{}", self.base_width(), self.base_height()));
        }
        if !self.is_allowed_magnification(region.magnification) {
            out.push(format!(
                "unsupported magnification {}x (available: {:?})",
                region.magnification,
                self.allowed_magnifications()
            ));
        }
        out
    }

    /// Output size of `read_region` before any transfer happens.
    pub fn output_size(&self, region: &RegionSpec, max_edge: u32) -> (u32, u32) {
        let scale = region.magnification / self.base_magnification();
        let w = (region.width() as f64 * scale).round().max(1.0);
        let h = (region.height() as f64 * scale).round().max(1.0);
        let longest = w.max(h);
        if longest > max_edge as f64 {
            let k = max_edge as f64 / longest;
            (((w * k).round().max(1.0)) as u32, ((h * k).round().max(1.0)) as u32)
        } else {
            (w as u32, h as u32)
        }
    }

    /// Reads `region` resampled to its magnification, then shrunk uniformly
    /// so neither edge exceeds `max_edge`.
    pub fn read_region(&self, region: &RegionSpec, max_edge: u32) -> Result<RasterImage, SlideError> {
        if region.x0 >= region.x1
            || region.y0 >= region.y1
            || region.x1 > self.base_width()
            || region.y1 > self.base_height()
        {
            return Err(SlideError::OutOfBounds(format!(
                "{region} on a {}x{} slide",
                self.base_width(),
                self.base_height()
            )));
        }
        if !self.is_allowed_magnification(region.magnification) {
            return Err(SlideError::UnsupportedMagnification {
                requested: region.magnification,
                available: self.allowed_magnifications(),
            });
        }
        let (w, h) = self.output_size(region, max_edge.max(1));
        let factor = self.base_magnification() / region.magnification;
        self.read_scaled(&region.bounds(), w, h, factor)
    }

    /// Pyramid level `read_region(region, max_edge)` reads from.
    pub fn region_level(&self, region: &RegionSpec, max_edge: u32) -> usize {
        let (w, h) = self.output_size(region, max_edge.max(1));
        self.level_for(&region.bounds(), w, h, self.base_magnification() / region.magnification)
    }

    /// Aspect-preserving thumbnail of the whole slide with longest edge `edge`.
    pub fn thumbnail(&self, edge: u32) -> RasterImage {
        let (w, h) = (self.base_width() as f64, self.base_height() as f64);
        let k = edge as f64 / w.max(h);
        let tw = ((w * k).round().max(1.0)) as u32;
        let th = ((h * k).round().max(1.0)) as u32;
        let cap = (w / tw as f64).min(h / th as f64);
        self.read_scaled(&self.bounds(), tw, th, cap).expect("full-slide read is always in bounds")
    }

    /// Index of the level used for a read of `bounds` into `out_w` x `out_h`:
    /// the coarsest level not exceeding `cap` whose pixel grid lines up with
    /// every output pixel boundary. Level 0 always qualifies.
    pub fn level_for(&self, bounds: &PixelBox, out_w: u32, out_h: u32, cap: f64) -> usize {
        self.levels
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| {
                l.downsample as f64 <= cap + MAG_EPS
                    && grid_aligned(bounds.x0, bounds.width(), out_w, l.downsample, self.base_width())
                    && grid_aligned(bounds.y0, bounds.height(), out_h, l.downsample, self.base_height())
            })
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    pub(crate) fn read_scaled(
        &self,
        bounds: &PixelBox,
        out_w: u32,
        out_h: u32,
        cap: f64,
    ) -> Result<RasterImage, SlideError> {
        let k = self.level_for(bounds, out_w, out_h, cap);
        let level = self.levels[k];
        let d = level.downsample;
        let lx0 = bounds.x0 / d;
        let ly0 = bounds.y0 / d;
        let lx1 = bounds.x1.div_ceil(d).min(level.width);
        let ly1 = bounds.y1.div_ceil(d).min(level.height);
        let window = self.read_level(k, lx0, ly0, lx1, ly1)?;

        let d = d as f64;
        let xs = area_taps(
            bounds.x0 as f64 - lx0 as f64 * d,
            bounds.width() as f64,
            out_w as usize,
            d,
            self.base_width() as f64 - lx0 as f64 * d,
        );
        let ys = area_taps(
            bounds.y0 as f64 - ly0 as f64 * d,
            bounds.height() as f64,
            out_h as usize,
            d,
            self.base_height() as f64 - ly0 as f64 * d,
        );
        Ok(apply_taps(&window, &xs, &ys))
    }

    /// Raw pixels of level `k` in level coordinates, stitched from tiles.
    pub fn read_level(&self, k: usize, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<RasterImage, SlideError> {
        let level = *self.levels.get(k).ok_or_else(|| SlideError::OutOfBounds(format!("level {k} does not exist")))?;
        if x0 >= x1 || y0 >= y1 || x1 > level.width || y1 > level.height {
            return Err(SlideError::OutOfBounds(format!(
                "level {k} window ({x0}, {y0})-({x1}, {y1}) outside {}x{}",
                level.width, level.height
            )));
        }
        let edge = self.tile_edge();
        let mut out = RasterImage::new(x1 - x0, y1 - y0);
        let out_stride = (x1 - x0) as usize * 3;
        for row in y0 / edge..=(y1 - 1) / edge {
            for col in x0 / edge..=(x1 - 1) / edge {
                let tile = self.tile(k, col, row)?;
                let tx0 = col * edge;
                let ty0 = row * edge;
                let cx0 = x0.max(tx0);
                let cx1 = x1.min(tx0 + tile.width());
                let cy0 = y0.max(ty0);
                let cy1 = y1.min(ty0 + tile.height());
                let tile_stride = tile.width() as usize * 3;
                let n = (cx1 - cx0) as usize * 3;
                let raw = tile.as_raw();
                let dst = &mut *out;
                for y in cy0..cy1 {
                    let s = (y - ty0) as usize * tile_stride + (cx0 - tx0) as usize * 3;
                    let o = (y - y0) as usize * out_stride + (cx0 - x0) as usize * 3;
                    dst[o..o + n].copy_from_slice(&raw[s..s + n]);
                }
            }
        }
        Ok(out)
    }

    fn tile(&self, k: usize, col: u32, row: u32) -> Result<Arc<RasterImage>, SlideError> {
        if let Some(t) = self.tiles.read().expect("tile cache poisoned").get(&(k, col, row)) {
            return Ok(Arc::clone(t));
        }
        let path = tile_path(&self.root, k, col, row);
        let img =
            image::open(&path).map_err(|e| SlideError::Tile { path: path.clone(), message: e.to_string() })?.to_rgb8();
        let img = Arc::new(img);
        let mut cache = self.tiles.write().expect("tile cache poisoned");
        if cache.len() >= TILE_CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert((k, col, row), Arc::clone(&img));
        Ok(img)
    }
}

/// True when every output pixel boundary `start + j * extent / n` lands on a
/// multiple of `d` (or on the slide edge).
fn grid_aligned(start: u32, extent: u32, n: u32, d: u32, limit: u32) -> bool {
    if d == 1 {
        return true;
    }
    let (start, extent, n, d) = (start as u64, extent as u64, n as u64, d as u64);
    (0..=n).all(|j| {
        let num = start * n + j * extent;
        num % (d * n) == 0 || (j == n && start + extent == limit as u64)
    })
}
