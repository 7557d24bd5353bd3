//! Deterministic synthetic slides with a ground-truth lesion map.
//!
//! Pixels are a pure function of `(seed, x, y)`, so tiles can be generated in
//! any order and in parallel while staying bit-identical across runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    level_dims, open_slide, tile_path, validate_manifest, LevelEntry, Manifest, PixelBox, PyramidSlide, SlideError,
    MANIFEST_FILE, TRUTH_FILE,
};
use crate::raster::{encode_png, RasterImage};

/// Diagnoses used for synthetic lesion labels, each with two look-alikes.
pub const DIAGNOSIS_CATALOG: &[(&str, [&str; 2])] = &[
    ("invasive ductal carcinoma", ["invasive lobular carcinoma", "ductal carcinoma in situ"]),
    ("squamous cell carcinoma", ["basal cell carcinoma", "keratoacanthoma"]),
    ("adenocarcinoma", ["neuroendocrine tumor", "reactive glandular atypia"]),
    ("melanoma", ["dysplastic nevus", "spitz nevus"]),
    ("diffuse large b-cell lymphoma", ["follicular lymphoma", "reactive lymphoid hyperplasia"]),
    ("merkel cell carcinoma", ["small cell carcinoma", "basaloid squamous cell carcinoma"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Peak per-channel noise added to every pixel.
    pub noise_amplitude: u8,
    /// Nucleus grid spacing in normal tissue (pixels).
    pub nuclei_spacing: u32,
    /// Nucleus grid spacing inside lesions (pixels).
    pub lesion_nuclei_spacing: u32,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { noise_amplitude: 6, nuclei_spacing: 16, lesion_nuclei_spacing: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionFocus {
    pub bounds: PixelBox,
    pub label: String,
}

/// Recipe for a synthetic slide. Tissue blobs are ellipses inscribed in
/// their boxes; lesions are rectangles that must lie inside a blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub base_magnification: f64,
    pub mpp: Option<f64>,
    pub tile_edge: u32,
    pub downsamples: Vec<u32>,
    #[serde(default)]
    pub texture: TextureParams,
    pub tissue: Vec<PixelBox>,
    pub lesions: Vec<LesionFocus>,
    pub seed: u64,
}

/// Contents of `truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub slide_id: String,
    pub tissue: Vec<PixelBox>,
    pub lesions: Vec<LesionFocus>,
}

impl SlideTruth {
    pub fn load(slide_dir: impl AsRef<Path>) -> Result<Self, SlideError> {
        let path = slide_dir.as_ref().join(TRUTH_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| SlideError::Manifest { path: path.clone(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| SlideError::Manifest { path, message: e.to_string() })
    }

    /// Slide-level label: the most frequent lesion label, if any.
    pub fn label(&self) -> Option<&str> {
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for l in &self.lesions {
            match counts.iter_mut().find(|(k, _)| *k == l.label) {
                Some((_, n)) => *n += 1,
                None => counts.push((&l.label, 1)),
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        counts.first().map(|(k, _)| *k)
    }
}

fn ellipse_contains(b: &PixelBox, x: f64, y: f64) -> bool {
    let cx = (b.x0 as f64 + b.x1 as f64) / 2.0;
    let cy = (b.y0 as f64 + b.y1 as f64) / 2.0;
    let a = b.width() as f64 / 2.0;
    let c = b.height() as f64 / 2.0;
    let dx = (x - cx) / a;
    let dy = (y - cy) / c;
    dx * dx + dy * dy <= 1.0
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<(), SlideError> {
        let bad = |m: String| Err(SlideError::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.tile_edge < 16 {
            return bad("tile_edge must be at least 16".into());
        }
        if self.downsamples.first() != Some(&1) || self.downsamples.windows(2).any(|w| w[1] <= w[0]) {
            return bad("downsamples must start at 1 and increase strictly".into());
        }
        if !(self.base_magnification > 0.0) {
            return bad("base_magnification must be positive".into());
        }
        if self.texture.nuclei_spacing < 4 || self.texture.lesion_nuclei_spacing < 4 {
            return bad("nuclei spacing must be at least 4".into());
        }
        let slide = PixelBox::new(0, 0, self.width, self.height);
        for t in &self.tissue {
            if t.width() == 0 || t.height() == 0 || !slide.contains(t) {
                return bad(format!("tissue box {t} is empty or outside the slide"));
            }
        }
        for l in &self.lesions {
            let corners = [
                (l.bounds.x0 as f64, l.bounds.y0 as f64),
                (l.bounds.x1 as f64, l.bounds.y0 as f64),
                (l.bounds.x0 as f64, l.bounds.y1 as f64),
                (l.bounds.x1 as f64, l.bounds.y1 as f64),
            ];
            let inside = self.tissue.iter().any(|t| corners.iter().all(|&(x, y)| ellipse_contains(t, x, y)));
            if l.bounds.area() == 0 || !inside {
                return bad(format!("lesion {} does not lie inside tissue", l.bounds));
            }
            if l.label.trim().is_empty() {
                return bad("lesion label is empty".into());
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            slide_id: self.slide_id.clone(),
            base_width: self.width,
            base_height: self.height,
            base_magnification: self.base_magnification,
            mpp: self.mpp,
            tile_edge: self.tile_edge,
            levels: self
                .downsamples
                .iter()
                .map(|&d| LevelEntry {
                    downsample: d,
                    cols: level_dims(self.width, d).div_ceil(self.tile_edge),
                    rows: level_dims(self.height, d).div_ceil(self.tile_edge),
                })
                .collect(),
        }
    }

    pub fn truth(&self) -> SlideTruth {
        SlideTruth { slide_id: self.slide_id.clone(), tissue: self.tissue.clone(), lesions: self.lesions.clone() }
    }

    /// A random but reproducible slide: one or two tissue blobs and one to
    /// three lesion foci sharing a single diagnosis.
    pub fn random(seed: u64, width: u32, height: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let margin = 0.06;
        let tissue: Vec<PixelBox> = if rng.random_bool(0.5) {
            let bw = rng.random_range(0.55..0.85) * w;
            let bh = rng.random_range(0.55..0.85) * h;
            let x0 = rng.random_range(margin * w..(w - bw - margin * w).max(margin * w + 1.0));
            let y0 = rng.random_range(margin * h..(h - bh - margin * h).max(margin * h + 1.0));
            vec![PixelBox::new(x0 as u32, y0 as u32, (x0 + bw) as u32, (y0 + bh) as u32)]
        } else {
            // Two blobs side by side with a clear gap.
            let gap = 0.08 * w;
            let usable = w * (1.0 - 2.0 * margin) - gap;
            let left = rng.random_range(0.42..0.58) * usable;
            let right = usable - left;
            let mut boxes = Vec::new();
            let mut x = margin * w;
            for bw in [left, right] {
                let bh = rng.random_range(0.6..0.86) * h;
                let y0 = rng.random_range(margin * h..(h - bh - margin * h).max(margin * h + 1.0));
                boxes.push(PixelBox::new(x as u32, y0 as u32, (x + bw) as u32, (y0 + bh) as u32));
                x += bw + gap;
            }
            boxes
        };

        let label = DIAGNOSIS_CATALOG[rng.random_range(0..DIAGNOSIS_CATALOG.len())].0.to_string();
        let n_lesions = rng.random_range(1..=3);
        let scale = w.min(h) / 4096.0;
        let mut lesions: Vec<LesionFocus> = Vec::new();
        let mut attempts = 0;
        while lesions.len() < n_lesions && attempts < 1000 {
            attempts += 1;
            let t = tissue[rng.random_range(0..tissue.len())];
            // Inscribed rectangle of the ellipse, shrunk slightly.
            let a = t.width() as f64 / 2.0 * 0.68;
            let b = t.height() as f64 / 2.0 * 0.68;
            let cx = (t.x0 + t.x1) as f64 / 2.0;
            let cy = (t.y0 + t.y1) as f64 / 2.0;
            let lw = rng.random_range(160.0..480.0) * scale;
            let lh = rng.random_range(160.0..480.0) * scale;
            if lw > 2.0 * a || lh > 2.0 * b {
                continue;
            }
            let x0 = rng.random_range(cx - a..cx + a - lw);
            let y0 = rng.random_range(cy - b..cy + b - lh);
            let bounds = PixelBox::new(x0 as u32, y0 as u32, (x0 + lw) as u32, (y0 + lh) as u32);
            let padded = PixelBox::new(
                bounds.x0.saturating_sub(64),
                bounds.y0.saturating_sub(64),
                bounds.x1 + 64,
                bounds.y1 + 64,
            );
            if lesions.iter().any(|l| l.bounds.intersects(&padded)) {
                continue;
            }
            lesions.push(LesionFocus { bounds, label: label.clone() });
        }

        Self {
            slide_id: format!("synthetic-{seed:04}"),
            width,
            height,
            base_magnification: 20.0,
            mpp: Some(0.5),
            tile_edge: 512,
            downsamples: vec![1, 4, 16],
            texture: TextureParams::default(),
            tissue,
            lesions,
            seed,
        }
    }

    /// Small fixed slide used by tests and golden images.
    pub fn fixture() -> Self {
        Self {
            slide_id: "fixture".into(),
            width: 2048,
            height: 1536,
            base_magnification: 20.0,
            mpp: Some(0.5),
            tile_edge: 256,
            downsamples: vec![1, 4, 16],
            texture: TextureParams::default(),
            tissue: vec![PixelBox::new(160, 200, 1100, 1380), PixelBox::new(1280, 260, 1900, 1200)],
            lesions: vec![
                LesionFocus { bounds: PixelBox::new(480, 600, 800, 880), label: "adenocarcinoma".into() },
                LesionFocus { bounds: PixelBox::new(1500, 600, 1700, 760), label: "adenocarcinoma".into() },
            ],
            seed: 7,
        }
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed ^ mix(a)) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

const BACKGROUND: [f64; 3] = [242.0, 240.0, 244.0];
const STROMA: [f64; 3] = [228.0, 160.0, 198.0];
const NUCLEUS: [f64; 3] = [112.0, 72.0, 152.0];
const LESION_STROMA: [f64; 3] = [204.0, 122.0, 184.0];
const LESION_NUCLEUS: [f64; 3] = [80.0, 42.0, 130.0];

/// Pixel colour generator for one spec.
struct Painter<'a> {
    spec: &'a SyntheticSlideSpec,
}

impl Painter<'_> {
    fn nucleus(&self, x: u32, y: u32, spacing: u32, presence: u64, salt: u64) -> bool {
        let (cx, cy) = (x / spacing, y / spacing);
        let h = hash3(self.spec.seed ^ salt, cx as u64, cy as u64);
        if h % 100 >= presence {
            return false;
        }
        let r = (spacing / 4).max(1) + ((h >> 8) % 2) as u32;
        let span = spacing.saturating_sub(2 * r).max(1);
        let ox = cx * spacing + r + ((h >> 16) % span as u64) as u32;
        let oy = cy * spacing + r + ((h >> 32) % span as u64) as u32;
        let dx = x as i64 - ox as i64;
        let dy = y as i64 - oy as i64;
        dx * dx + dy * dy <= (r * r) as i64
    }

    fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let spec = self.spec;
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let amp = spec.texture.noise_amplitude as f64;
        let h = hash3(spec.seed, x as u64, y as u64);
        let noise = |shift: u32, a: f64| -> f64 {
            let v = ((h >> shift) & 0xFF) as f64 / 255.0;
            (v * 2.0 - 1.0) * a
        };
        let base = if !spec.tissue.iter().any(|t| ellipse_contains(t, fx, fy)) {
            return [
                BACKGROUND[0] + noise(0, amp / 2.0),
                BACKGROUND[1] + noise(8, amp / 2.0),
                BACKGROUND[2] + noise(16, amp / 2.0),
            ];
        } else if spec
            .lesions
            .iter()
            .any(|l| x >= l.bounds.x0 && x < l.bounds.x1 && y >= l.bounds.y0 && y < l.bounds.y1)
        {
            if self.nucleus(x, y, spec.texture.lesion_nuclei_spacing, 90, 0xA5A5) {
                LESION_NUCLEUS
            } else {
                LESION_STROMA
            }
        } else if self.nucleus(x, y, spec.texture.nuclei_spacing, 60, 0x5A5A) {
            NUCLEUS
        } else {
            STROMA
        };
        [base[0] + noise(0, amp), base[1] + noise(8, amp), base[2] + noise(16, amp)]
    }
}

fn quantise(p: [f64; 3]) -> [u8; 3] {
    p.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SlideError> {
    std::fs::write(path, bytes).map_err(|source| SlideError::Write { path: path.to_path_buf(), source })
}

/// Writes the slide directory and `truth.json`, then reopens it.
///
/// An existing directory is only reused if it already holds a slide; its
/// previous levels are replaced.
pub fn generate_synthetic(spec: &SyntheticSlideSpec, out: impl AsRef<Path>) -> Result<PyramidSlide, SlideError> {
    spec.validate()?;
    let out = out.as_ref();
    let manifest = spec.manifest();
    let levels = validate_manifest(&manifest)?;
    let werr = |source: std::io::Error| SlideError::Write { path: out.to_path_buf(), source };

    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(werr)?.peekable();
        if entries.peek().is_some() {
            if !out.join(MANIFEST_FILE).exists() {
                return Err(SlideError::Write {
                    path: out.to_path_buf(),
                    source: std::io::Error::other("directory is not empty and is not a slide"),
                });
            }
            for entry in entries {
                let entry = entry.map_err(werr)?;
                if entry.file_name().to_string_lossy().starts_with("level_") {
                    std::fs::remove_dir_all(entry.path()).map_err(werr)?;
                }
            }
        }
    }
    std::fs::create_dir_all(out).map_err(werr)?;

    let painter = Painter { spec };
    for k in 0..levels.len() {
        let dir = out.join(format!("level_{k}"));
        std::fs::create_dir_all(&dir).map_err(|source| SlideError::Write { path: dir.clone(), source })?;
    }

    // Level 0 is painted one tile row at a time; coarser levels accumulate
    // block sums of the quantised level-0 pixels and are written at the end.
    let mut sums: Vec<Vec<u32>> =
        levels.iter().skip(1).map(|l| vec![0u32; l.width as usize * l.height as usize * 3]).collect();
    let base = &levels[0];
    for row in 0..base.rows {
        let tiles: Vec<RasterImage> = (0..base.cols)
            .into_par_iter()
            .map(|col| {
                let x0 = col * spec.tile_edge;
                let y0 = row * spec.tile_edge;
                let tw = spec.tile_edge.min(base.width - x0);
                let th = spec.tile_edge.min(base.height - y0);
                let mut tile = RasterImage::new(tw, th);
                for (x, y, px) in tile.enumerate_pixels_mut() {
                    *px = image::Rgb(quantise(painter.pixel(x0 + x, y0 + y)));
                }
                tile
            })
            .collect();
        tiles
            .par_iter()
            .enumerate()
            .try_for_each(|(col, tile)| write_file(&tile_path(out, 0, col as u32, row), &encode_png(tile)?))?;
        for (level, acc) in levels.iter().skip(1).zip(sums.iter_mut()) {
            let d = level.downsample;
            let lw = level.width as usize;
            for (col, tile) in tiles.iter().enumerate() {
                let x0 = col as u32 * spec.tile_edge;
                let y0 = row * spec.tile_edge;
                for (x, y, px) in tile.enumerate_pixels() {
                    let i = (((y0 + y) / d) as usize * lw + ((x0 + x) / d) as usize) * 3;
                    acc[i] += px[0] as u32;
                    acc[i + 1] += px[1] as u32;
                    acc[i + 2] += px[2] as u32;
                }
            }
        }
    }

    for (k, (level, acc)) in levels.iter().zip(std::iter::once(&Vec::new()).chain(sums.iter())).enumerate().skip(1) {
        let d = level.downsample;
        let lw = level.width as usize;
        let jobs: Vec<(u32, u32)> = (0..level.rows).flat_map(|r| (0..level.cols).map(move |c| (c, r))).collect();
        jobs.par_iter().try_for_each(|&(col, row)| {
            let x0 = col * spec.tile_edge;
            let y0 = row * spec.tile_edge;
            let tw = spec.tile_edge.min(level.width - x0);
            let th = spec.tile_edge.min(level.height - y0);
            let mut tile = RasterImage::new(tw, th);
            for (x, y, px) in tile.enumerate_pixels_mut() {
                let (lx, ly) = (x0 + x, y0 + y);
                let n = ((lx * d + d).min(spec.width) - lx * d) * ((ly * d + d).min(spec.height) - ly * d);
                let i = (ly as usize * lw + lx as usize) * 3;
                *px = image::Rgb([0, 1, 2].map(|c| (acc[i + c] as f64 / n as f64).round() as u8));
            }
            write_file(&tile_path(out, k, col, row), &encode_png(&tile)?)
        })?;
    }

    write_file(&out.join(MANIFEST_FILE), pretty_json(&manifest).as_bytes())?;
    write_file(&out.join(TRUTH_FILE), pretty_json(&spec.truth()).as_bytes())?;
    open_slide(out)
}

pub(crate) fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}
