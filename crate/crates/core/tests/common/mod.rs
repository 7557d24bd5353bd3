#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::Value;
use slidescout_core::backends::{BackendError, ChatBackend, ChatRequest, Purpose, RetryPolicy, SweepSettings};
use slidescout_core::explorer::{Explorer, ExplorerSettings};
use slidescout_core::protocol::{DiagnosisReport, TaskSpec, TraceAppender};
use slidescout_core::raster::RasterImage;
use slidescout_core::slide::{generate_synthetic, PyramidSlide, RegionSpec, SyntheticSlideSpec};
use slidescout_core::supervisor::{PlanOutcome, Supervisor, SupervisorError, TaskOutcome};

/// Generated slide whose directory lives as long as the value.
pub struct TempSlide {
    pub dir: tempfile::TempDir,
    pub slide: PyramidSlide,
    pub spec: SyntheticSlideSpec,
}

impl TempSlide {
    pub fn new(spec: SyntheticSlideSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let slide = generate_synthetic(&spec, dir.path().join("slide")).unwrap();
        Self { dir, slide, spec }
    }

    pub fn path(&self) -> PathBuf {
        self.dir.path().join("slide")
    }
}

/// Brute-force area average of the level-0 crop under `region`, resized to
/// `out_w` x `out_h`. Each output pixel weights every source pixel by the
/// exact area it shares with the output pixel's footprint.
pub fn box_downsample_oracle(slide: &PyramidSlide, region: &RegionSpec, out_w: u32, out_h: u32) -> Vec<[f64; 3]> {
    let crop = slide.read_level(0, region.x0, region.y0, region.x1, region.y1).unwrap();
    let (w, h) = (crop.width() as f64, crop.height() as f64);
    let sx = w / out_w as f64;
    let sy = h / out_h as f64;
    let mut out = Vec::with_capacity((out_w * out_h) as usize);
    for j in 0..out_h {
        let (fy0, fy1) = (j as f64 * sy, (j + 1) as f64 * sy);
        for i in 0..out_w {
            let (fx0, fx1) = (i as f64 * sx, (i + 1) as f64 * sx);
            let mut acc = [0f64; 3];
            let mut total = 0.0;
            for y in fy0.floor() as u32..(fy1.ceil() as u32).min(crop.height()) {
                let wy = (fy1.min(y as f64 + 1.0) - fy0.max(y as f64)).max(0.0);
                for x in fx0.floor() as u32..(fx1.ceil() as u32).min(crop.width()) {
                    let wx = (fx1.min(x as f64 + 1.0) - fx0.max(x as f64)).max(0.0);
                    let p = crop.get_pixel(x, y);
                    for c in 0..3 {
                        acc[c] += wx * wy * p[c] as f64;
                    }
                    total += wx * wy;
                }
            }
            out.push(acc.map(|v| v / total));
        }
    }
    out
}

/// Largest per-channel absolute difference between an image and an oracle.
pub fn max_abs_diff(img: &RasterImage, oracle: &[[f64; 3]]) -> f64 {
    assert_eq!(img.pixels().len(), oracle.len());
    img.pixels().zip(oracle).flat_map(|(p, o)| (0..3).map(move |c| (p[c] as f64 - o[c]).abs())).fold(0.0, f64::max)
}

pub fn fixtures_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

type Rewrite = Box<dyn Fn(&ChatRequest, Result<String, BackendError>) -> Result<String, BackendError> + Send + Sync>;

/// Wraps a backend, recording every request and optionally rewriting its
/// replies.
pub struct Scripted<B> {
    pub inner: B,
    rewrite: Rewrite,
    requests: Mutex<Vec<ChatRequest>>,
}

impl<B: ChatBackend> Scripted<B> {
    pub fn new(inner: B) -> Self {
        Self::with(inner, |_, reply| reply)
    }

    pub fn with(
        inner: B,
        rewrite: impl Fn(&ChatRequest, Result<String, BackendError>) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self { inner, rewrite: Box::new(rewrite), requests: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self, purpose: Purpose) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().iter().filter(|r| r.purpose == purpose).cloned().collect()
    }
}

impl<B: ChatBackend> ChatBackend for Scripted<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        (self.rewrite)(request, self.inner.complete(request))
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

/// Edits the JSON object of a reply in place.
pub fn edit_json(reply: Result<String, BackendError>, f: impl FnOnce(&mut Value)) -> Result<String, BackendError> {
    let mut v: Value = serde_json::from_str(&reply?).unwrap();
    f(&mut v);
    Ok(v.to_string())
}

pub fn explorer_settings() -> ExplorerSettings {
    ExplorerSettings { max_edge: 896, retry: RetryPolicy::immediate(3), sweep: SweepSettings::default() }
}

/// Runs one round's tasks serially, committing each buffer in task order.
pub fn run_tasks(
    sup: &mut Supervisor<'_>,
    explorer: &Explorer<'_>,
    trace: &TraceAppender,
    tasks: &[TaskSpec],
) -> Vec<TaskOutcome> {
    let mut outcomes = Vec::new();
    for task in tasks {
        let mut buffer = trace.buffer();
        let result = explorer.run_task(task, &mut buffer);
        sup.commit(buffer).unwrap();
        outcomes.push(TaskOutcome { task_id: task.task_id.clone(), result: result.map_err(|e| e.to_string()) });
    }
    outcomes
}

/// The whole supervisor loop, as the engine drives it but single-threaded.
pub fn drive(
    sup: &mut Supervisor<'_>,
    slide: &PyramidSlide,
    captioner: &dyn ChatBackend,
    policy: &dyn ChatBackend,
    trace: &TraceAppender,
) -> Result<DiagnosisReport, SupervisorError> {
    let slide_context = sup.slide_context().clone();
    let thumbnail = sup.thumbnail().clone();
    let settings = explorer_settings();
    let explorer = Explorer {
        slide,
        slide_context: &slide_context,
        captioner,
        policy,
        settings: &settings,
        thumbnail: &thumbnail,
    };
    sup.init()?;
    loop {
        match sup.plan_round()? {
            PlanOutcome::Tasks(tasks) => {
                let outcomes = run_tasks(sup, &explorer, trace, &tasks);
                sup.review_reports(outcomes)?;
            }
            PlanOutcome::Finished { .. } => {
                sup.review_reports(Vec::new())?;
                break;
            }
        }
    }
    sup.collate_rois()?;
    sup.finalize()
}
