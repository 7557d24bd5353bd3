//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slidescout_core::slide::{generate_synthetic, PyramidSlide, SyntheticSlideSpec};
use tempfile::TempDir;

/// A generated slide that lives as long as the value.
pub struct BenchSlide {
    pub dir: TempDir,
    pub slide: PyramidSlide,
}

impl BenchSlide {
    pub fn new(spec: &SyntheticSlideSpec) -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let slide = generate_synthetic(spec, dir.path().join("slide")).expect("slide generates");
        Self { dir, slide }
    }

    pub fn fixture() -> Self {
        Self::new(&SyntheticSlideSpec::fixture())
    }

    pub fn path(&self) -> std::path::PathBuf {
        self.dir.path().join("slide")
    }
}

/// `n` Bernoulli(`p`) scores.
pub fn bernoulli_scores(n: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}
