//! Deterministic in-process backends.
//!
//! [`MockCaptioner`] answers caption and differential requests from a
//! synthetic slide's `truth.json`. [`MockPolicy`] is a rule-based supervisor
//! and a sweeping explorer: survey every tissue region at low power, then
//! confirm each localized suspicious focus with one high-power view.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::context::{
    CaptionContext, DifferentialContext, ExplorerContext, InitContext, PlanContext, ReportContext, ReviewContext,
};
use super::decisions::{
    DifferentialDecision, ExplorerDecision, InitDecision, PlanDecision, ReportDecision, ReviewDecision, TaskProposal,
};
use super::{BackendError, ChatBackend, ChatRequest, Purpose};
use crate::protocol::{Confidence, RoiScore};
use crate::slide::{LesionFocus, PixelBox, RegionSpec, SlideError, SlideTruth, DIAGNOSIS_CATALOG};

/// Views at or above this magnification are high-power fields.
pub const HIGH_POWER_MAGNIFICATION: f64 = 10.0;
/// Fraction of the smaller of (view, lesion) that must overlap for the
/// captioner to see the lesion.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.25;
/// Regions proposed by the mock policy are aligned to this many pixels.
pub const REGION_GRID: u32 = 16;

fn context<T: DeserializeOwned>(request: &ChatRequest, backend: &str) -> Result<T, BackendError> {
    serde_json::from_value(request.context.clone()).map_err(|e| BackendError::Malformed {
        endpoint: backend.to_string(),
        message: format!("{} request context: {e}", request.purpose),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data")
}

fn unsupported(backend: &str, purpose: Purpose) -> BackendError {
    BackendError::Unsupported { backend: backend.to_string(), purpose: purpose.as_str().to_string() }
}

/// Ellipse inscribed in `b` intersects the rectangle `r`.
fn ellipse_meets(b: &PixelBox, r: &PixelBox) -> bool {
    let cx = (b.x0 as f64 + b.x1 as f64) / 2.0;
    let cy = (b.y0 as f64 + b.y1 as f64) / 2.0;
    let (a, c) = (b.width() as f64 / 2.0, b.height() as f64 / 2.0);
    let nx = (cx.clamp(r.x0 as f64, r.x1 as f64) - cx) / a;
    let ny = (cy.clamp(r.y0 as f64, r.y1 as f64) - cy) / c;
    nx * nx + ny * ny <= 1.0
}

/// Captioner keyed to a synthetic slide's ground truth.
#[derive(Clone, Debug)]
pub struct MockCaptioner {
    truth: SlideTruth,
    overlap_threshold: f64,
    label_map: BTreeMap<String, [String; 2]>,
}

impl MockCaptioner {
    pub fn new(truth: SlideTruth) -> Self {
        let label_map = DIAGNOSIS_CATALOG
            .iter()
            .map(|(label, d)| (label.to_string(), [d[0].to_string(), d[1].to_string()]))
            .collect();
        Self { truth, overlap_threshold: DEFAULT_OVERLAP_THRESHOLD, label_map }
    }

    pub fn from_slide_dir(dir: impl AsRef<Path>) -> Result<Self, SlideError> {
        Ok(Self::new(SlideTruth::load(dir)?))
    }

    pub fn with_overlap_threshold(mut self, threshold: f64) -> Self {
        self.overlap_threshold = threshold;
        self
    }

    /// Adds or replaces the distractor pair for `label`.
    pub fn with_label(mut self, label: &str, distractors: [&str; 2]) -> Self {
        self.label_map.insert(label.to_string(), distractors.map(str::to_string));
        self
    }

    pub fn truth(&self) -> &SlideTruth {
        &self.truth
    }

    /// Lesions overlapping `view` by at least the threshold fraction of the
    /// smaller of the two boxes, in truth order.
    pub fn visible_lesions(&self, view: &PixelBox) -> Vec<&LesionFocus> {
        self.truth
            .lesions
            .iter()
            .filter(|l| {
                let inter = view.intersection(&l.bounds) as f64;
                inter > 0.0 && inter >= self.overlap_threshold * view.area().min(l.bounds.area()) as f64
            })
            .collect()
    }

    pub fn caption(&self, region: &RegionSpec) -> String {
        let view = region.bounds();
        let lesions = self.visible_lesions(&view);
        if lesions.is_empty() {
            return if self.truth.tissue.iter().any(|t| ellipse_meets(t, &view)) {
                "unremarkable tissue: orderly stroma with bland, evenly spaced nuclei.".into()
            } else {
                "unremarkable tissue: background glass without cellular material.".into()
            };
        }
        let (w, h) = (view.width() as f64, view.height() as f64);
        let mut parts = Vec::new();
        for l in lesions {
            let b = &l.bounds;
            let loc = format!(
                "[{:.4} {:.4} {:.4} {:.4}]",
                (b.x0.max(view.x0) - view.x0) as f64 / w,
                (b.y0.max(view.y0) - view.y0) as f64 / h,
                (b.x1.min(view.x1) - view.x0) as f64 / w,
                (b.y1.min(view.y1) - view.y0) as f64 / h,
            );
            if region.magnification < HIGH_POWER_MAGNIFICATION {
                parts.push(format!("hypercellular focus suspicious for {} at {loc}", l.label));
            } else {
                parts.push(format!(
                    "sheets of atypical cells with marked nuclear atypia, consistent with {} at {loc}",
                    l.label
                ));
            }
        }
        format!("{}.", parts.join("; "))
    }

    pub fn differential(&self, rois: &[RegionSpec]) -> DifferentialDecision {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in rois {
            let mut labels: Vec<&str> = self.visible_lesions(&r.bounds()).iter().map(|l| l.label.as_str()).collect();
            labels.dedup();
            for l in labels {
                *counts.entry(l).or_default() += 1;
            }
        }
        // Majority label; BTreeMap order breaks ties lexicographically.
        let primary = counts.iter().fold(None::<(&str, usize)>, |best, (l, n)| match best {
            Some((_, bn)) if bn >= *n => best,
            _ => Some((l, *n)),
        });
        let Some((primary, _)) = primary else {
            return DifferentialDecision {
                primary: "benign tissue without significant abnormality".into(),
                differentials: vec!["reactive changes".into(), "inflammatory changes".into()],
            };
        };
        let differentials = match self.label_map.get(primary) {
            Some(d) => d.to_vec(),
            None => self.label_map.keys().filter(|k| k.as_str() != primary).take(2).cloned().collect(),
        };
        DifferentialDecision { primary: primary.to_string(), differentials }
    }
}

impl ChatBackend for MockCaptioner {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let name = self.describe();
        match request.purpose {
            Purpose::Caption => {
                let ctx: CaptionContext = context(request, &name)?;
                Ok(self.caption(&ctx.region))
            }
            Purpose::Differential => {
                let ctx: DifferentialContext = context(request, &name)?;
                let regions: Vec<RegionSpec> = ctx.rois.iter().map(|r| r.region).collect();
                Ok(to_json(&self.differential(&regions)))
            }
            p => Err(unsupported(&name, p)),
        }
    }

    fn describe(&self) -> String {
        format!("mock-captioner:{}", self.truth.slide_id)
    }
}

/// Settings of the sweeping explorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// Caption keywords (case-insensitive) that flag a view as relevant.
    pub keywords: Vec<String>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { keywords: vec!["suspicious".into(), "atypia".into(), "atypical".into()] }
    }
}

impl SweepSettings {
    pub fn flags(&self, caption: &str) -> bool {
        let lower = caption.to_lowercase();
        self.keywords.iter().any(|k| lower.contains(&k.to_lowercase()))
    }
}

/// Row-major grid of fields covering `region`, each one `max_edge` output
/// pixels wide at the region's magnification. The last row and column are
/// clipped to the region.
pub fn sweep_cells(region: &RegionSpec, base_magnification: f64, max_edge: u32) -> Vec<RegionSpec> {
    let cell = ((max_edge as f64 * base_magnification / region.magnification).round() as u32).max(1);
    let mut out = Vec::new();
    let mut y = region.y0;
    while y < region.y1 {
        let mut x = region.x0;
        while x < region.x1 {
            out.push(RegionSpec::new(x, y, (x + cell).min(region.x1), (y + cell).min(region.y1), region.magnification));
            x += cell;
        }
        y += cell;
    }
    out
}

/// Expands `b` outwards to the alignment grid, clamped to the slide.
pub fn snap_box(b: &PixelBox, width: u32, height: u32) -> PixelBox {
    let g = REGION_GRID;
    PixelBox::new(
        b.x0 / g * g,
        b.y0 / g * g,
        b.x1.div_ceil(g).saturating_mul(g).min(width),
        b.y1.div_ceil(g).saturating_mul(g).min(height),
    )
}

/// A box of at least `edge` x `edge` centred on `focus`, aligned and
/// shifted to fit inside the slide.
pub fn field_around(focus: &PixelBox, edge: u32, width: u32, height: u32) -> PixelBox {
    let place = |lo: u32, hi: u32, limit: u32| -> (u32, u32) {
        let len = edge.max(hi - lo).div_ceil(REGION_GRID) * REGION_GRID;
        if len >= limit {
            return (0, limit);
        }
        let centre = (lo + hi) / 2;
        let start = centre.saturating_sub(len / 2) / REGION_GRID * REGION_GRID;
        let start = start.min(limit - len);
        (start, start + len)
    };
    let (x0, x1) = place(focus.x0, focus.x1, width);
    let (y0, y1) = place(focus.y0, focus.y1, height);
    PixelBox::new(x0, y0, x1, y1)
}

fn focus_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"suspicious for ([^\[;]+?) at \[([0-9.]+) ([0-9.]+) ([0-9.]+) ([0-9.]+)\]").expect("static pattern")
    })
}

/// Suspicious foci localized in a low-power caption, in slide coordinates.
pub fn localized_foci(caption: &str, view: &RegionSpec) -> Vec<PixelBox> {
    let (w, h) = (view.width() as f64, view.height() as f64);
    focus_pattern()
        .captures_iter(caption)
        .filter_map(|c| {
            let f = |i: usize| c[i].parse::<f64>().ok().map(|v| v.clamp(0.0, 1.0));
            let (fx0, fy0, fx1, fy1) = (f(2)?, f(3)?, f(4)?, f(5)?);
            let x0 = view.x0 + (fx0 * w).floor() as u32;
            let y0 = view.y0 + (fy0 * h).floor() as u32;
            let x1 = (view.x0 + (fx1 * w).ceil() as u32).min(view.x1);
            let y1 = (view.y0 + (fy1 * h).ceil() as u32).min(view.y1);
            (x1 > x0 && y1 > y0).then(|| PixelBox::new(x0, y0, x1, y1))
        })
        .collect()
}

pub const LESION_HYPOTHESIS: &str = "lesion present";
pub const BENIGN_HYPOTHESIS: &str = "benign only";

/// Rule-based supervisor and sweeping explorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockPolicy {
    pub coarse_magnification: f64,
    pub followup_magnification: f64,
    pub max_edge: u32,
    pub sweep: SweepSettings,
}

impl Default for MockPolicy {
    fn default() -> Self {
        Self {
            coarse_magnification: 1.25,
            followup_magnification: 20.0,
            max_edge: 896,
            sweep: SweepSettings::default(),
        }
    }
}

fn nearest_allowed(allowed: &[f64], want: f64) -> f64 {
    allowed.iter().copied().min_by(|a, b| (a - want).abs().total_cmp(&(b - want).abs())).unwrap_or(want)
}

impl MockPolicy {
    pub fn init(&self, ctx: &InitContext) -> InitDecision {
        let s = &ctx.slide;
        if s.tissue_boxes.is_empty() {
            return InitDecision {
                hypotheses: vec![BENIGN_HYPOTHESIS.into(), LESION_HYPOTHESIS.into()],
                plan: "report no tissue".into(),
                current_step: "no tissue detected".into(),
                tasks: Vec::new(),
            };
        }
        let mag = nearest_allowed(&s.allowed_magnifications, self.coarse_magnification);
        let tasks = s
            .tissue_boxes
            .iter()
            .map(|b| {
                let r = snap_box(&b.bounds(), s.width, s.height);
                TaskProposal {
                    tissue_box_index: Some(b.index),
                    region: RegionSpec::new(r.x0, r.y0, r.x1, r.y1, mag),
                    features_to_document: "overall architecture; hypercellular or atypical foci".into(),
                    budget: None,
                }
            })
            .collect();
        InitDecision {
            hypotheses: vec![LESION_HYPOTHESIS.into(), BENIGN_HYPOTHESIS.into()],
            plan: format!(
                "survey each of {} tissue region(s) at {mag}x, then confirm suspicious foci at high power",
                s.tissue_boxes.len()
            ),
            current_step: "low-power survey".into(),
            tasks,
        }
    }

    pub fn plan(&self, ctx: &PlanContext) -> PlanDecision {
        let finished = ctx.pending.is_empty();
        let justification = if finished {
            if ctx.reports.is_empty() {
                "no tissue to examine".to_string()
            } else {
                "all queued tasks have reported; coverage complete".to_string()
            }
        } else {
            format!("{} queued task(s) still to examine", ctx.pending.len())
        };
        PlanDecision {
            hypotheses: ctx.hypotheses.clone(),
            plan: ctx.plan.clone(),
            current_step: if finished { "final report".into() } else { format!("round {}", ctx.round) },
            justification,
            finished,
            tasks: Vec::new(),
        }
    }

    pub fn review(&self, ctx: &ReviewContext) -> ReviewDecision {
        let s = &ctx.slide;
        let mag = nearest_allowed(&s.allowed_magnifications, self.followup_magnification);
        let edge = (self.max_edge as f64 * s.base_magnification / mag).round() as u32;
        let mut justifications = Vec::new();
        let mut scores = Vec::new();
        let mut followups: Vec<TaskProposal> = Vec::new();
        let high_power_regions: Vec<PixelBox> = ctx
            .known_tasks
            .iter()
            .filter(|t| t.region.magnification >= HIGH_POWER_MAGNIFICATION)
            .map(|t| t.region.bounds())
            .collect();
        for report in &ctx.reports {
            let box_index =
                ctx.known_tasks.iter().find(|t| t.task_id == report.task_id).and_then(|t| t.tissue_box_index);
            for roi in report.rois.iter().filter(|r| r.flagged_relevant) {
                let high = roi.region.magnification >= HIGH_POWER_MAGNIFICATION;
                scores.push(RoiScore { roi_id: roi.roi_id.clone(), score: if high { 1.0 } else { 0.5 } });
                if high {
                    continue;
                }
                for focus in localized_foci(&roi.caption, &roi.region) {
                    let covered = high_power_regions.iter().any(|r| r.contains(&focus))
                        || followups.iter().any(|f| f.region.bounds().contains(&focus));
                    if covered {
                        continue;
                    }
                    let field = field_around(&focus, edge, s.width, s.height);
                    justifications.push(format!(
                        "{} localizes a suspicious focus at {focus}; queue a {mag}x field at {field}",
                        roi.roi_id
                    ));
                    followups.push(TaskProposal {
                        tissue_box_index: box_index,
                        region: RegionSpec::new(field.x0, field.y0, field.x1, field.y1, mag),
                        features_to_document: "cytology of the suspicious focus: nuclear atypia, mitoses".into(),
                        budget: None,
                    });
                }
            }
        }
        let flagged_ever = ctx.all_reports.iter().flat_map(|r| &r.rois).any(|r| r.flagged_relevant);
        let hypotheses: Vec<String> = if flagged_ever {
            vec![LESION_HYPOTHESIS.into(), BENIGN_HYPOTHESIS.into()]
        } else {
            vec![BENIGN_HYPOTHESIS.into(), LESION_HYPOTHESIS.into()]
        };
        if hypotheses != ctx.hypotheses {
            justifications.push(if flagged_ever {
                format!("flagged regions support '{LESION_HYPOTHESIS}'; promoted to rank 1")
            } else {
                format!("no flagged regions so far; '{BENIGN_HYPOTHESIS}' promoted to rank 1")
            });
        }
        ReviewDecision { hypotheses, justifications, followups, roi_scores: scores }
    }

    pub fn report(&self, ctx: &ReportContext) -> ReportDecision {
        let primary = ctx.primary.to_lowercase();
        let supported = ctx
            .rois
            .iter()
            .any(|r| r.region.magnification >= HIGH_POWER_MAGNIFICATION && r.caption.to_lowercase().contains(&primary));
        let mut narrative = format!(
            "Primary diagnosis: {}. Differential diagnoses: {}; {}.",
            ctx.primary, ctx.differentials[0], ctx.differentials[1]
        );
        for r in &ctx.rois {
            narrative.push_str(&format!(
                "\n- {}x field at {}: {} [roi:{}]",
                r.region.magnification,
                r.region.bounds(),
                r.caption.trim_end_matches('.'),
                r.roi_id
            ));
        }
        ReportDecision { confidence: if supported { Confidence::High } else { Confidence::Low }, narrative }
    }

    pub fn explore(&self, ctx: &ExplorerContext) -> ExplorerDecision {
        let cells = sweep_cells(&ctx.task.region, ctx.slide.base_magnification, ctx.max_edge);
        let k = ctx.views.len();
        if k < cells.len() && ctx.views_remaining > 0 {
            return ExplorerDecision::View {
                region: cells[k],
                rationale: format!("sweep field {} of {} at {}x", k + 1, cells.len(), ctx.task.region.magnification),
            };
        }
        let flagged: Vec<&super::context::ViewRecord> =
            ctx.views.iter().filter(|v| self.sweep.flags(&v.caption)).collect();
        let findings = if !flagged.is_empty() {
            let details: Vec<String> = flagged.iter().map(|v| format!("{}: {}", v.view_id, v.caption)).collect();
            format!("{} of {} field(s) flagged. {}", flagged.len(), ctx.views.len(), details.join(" "))
        } else {
            format!("no tissue features of concern in {} field(s)", ctx.views.len())
        };
        ExplorerDecision::Submit { findings, key_rois: flagged.iter().map(|v| v.view_id.clone()).collect() }
    }
}

impl ChatBackend for MockPolicy {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let name = self.describe();
        Ok(match request.purpose {
            Purpose::SupervisorInit => to_json(&self.init(&context(request, &name)?)),
            Purpose::SupervisorPlan => to_json(&self.plan(&context(request, &name)?)),
            Purpose::SupervisorReview => to_json(&self.review(&context(request, &name)?)),
            Purpose::SupervisorReport => to_json(&self.report(&context(request, &name)?)),
            Purpose::ExplorerStep => to_json(&self.explore(&context(request, &name)?)),
            p => return Err(unsupported(&name, p)),
        })
    }

    fn describe(&self) -> String {
        "mock-policy".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> SlideTruth {
        SlideTruth {
            slide_id: "s".into(),
            tissue: vec![PixelBox::new(0, 0, 4000, 4000)],
            lesions: vec![
                LesionFocus { bounds: PixelBox::new(1000, 1000, 1400, 1300), label: "melanoma".into() },
                LesionFocus { bounds: PixelBox::new(3000, 3000, 3200, 3200), label: "adenocarcinoma".into() },
            ],
        }
    }

    #[test]
    fn low_power_caption_localizes_focus() {
        let cap = MockCaptioner::new(truth());
        let view = RegionSpec::new(0, 0, 4000, 4000, 1.25);
        let text = cap.caption(&view);
        assert!(text.contains("suspicious for melanoma"), "{text}");
        assert!(text.contains("suspicious for adenocarcinoma"), "{text}");
        let foci = localized_foci(&text, &view);
        assert_eq!(foci, vec![PixelBox::new(1000, 1000, 1400, 1300), PixelBox::new(3000, 3000, 3200, 3200)]);
    }

    #[test]
    fn high_power_caption_names_label() {
        let cap = MockCaptioner::new(truth());
        let text = cap.caption(&RegionSpec::new(800, 800, 1696, 1696, 20.0));
        assert!(text.contains("consistent with melanoma") && text.contains("atypia"), "{text}");
    }

    #[test]
    fn background_and_benign_captions() {
        let cap = MockCaptioner::new(SlideTruth {
            slide_id: "s".into(),
            tissue: vec![PixelBox::new(0, 0, 1000, 1000)],
            lesions: vec![],
        });
        assert!(cap.caption(&RegionSpec::new(100, 100, 300, 300, 20.0)).starts_with("unremarkable tissue"));
        // The ellipse misses the far corner of its box.
        let corner = cap.caption(&RegionSpec::new(0, 0, 100, 100, 20.0));
        assert!(corner.contains("background"), "{corner}");
        assert!(!SweepSettings::default().flags(&corner));
    }

    #[test]
    fn overlap_threshold_is_sharp() {
        let cap = MockCaptioner::new(truth());
        // Lesion 400x300 = 120000; quarter is 30000 = 100 px x 300 px strip.
        let edge = RegionSpec::new(1300, 1000, 2196, 1896, 20.0);
        assert_eq!(cap.visible_lesions(&edge.bounds()).len(), 1);
        let edge = RegionSpec::new(1301, 1000, 2197, 1896, 20.0);
        assert!(cap.visible_lesions(&edge.bounds()).is_empty());
    }

    #[test]
    fn differential_majority_and_ties() {
        let cap = MockCaptioner::new(truth());
        let mel = RegionSpec::new(1000, 1000, 1400, 1300, 20.0);
        let ade = RegionSpec::new(3000, 3000, 3200, 3200, 20.0);
        let d = cap.differential(&[mel, mel, ade]);
        assert_eq!(d.primary, "melanoma");
        assert_eq!(d.differentials, vec!["dysplastic nevus", "spitz nevus"]);
        let d = cap.differential(&[mel, ade]);
        assert_eq!(d.primary, "adenocarcinoma");
    }

    #[test]
    fn sweep_quadrants() {
        let r = RegionSpec::new(0, 0, 1792, 1792, 20.0);
        let cells = sweep_cells(&r, 20.0, 896);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1], RegionSpec::new(896, 0, 1792, 896, 20.0));
        let r = RegionSpec::new(0, 0, 2000, 900, 5.0);
        assert_eq!(sweep_cells(&r, 20.0, 896).len(), 1);
    }

    #[test]
    fn field_placement() {
        let f = field_around(&PixelBox::new(100, 100, 300, 200), 896, 4096, 4096);
        assert_eq!(f, PixelBox::new(0, 0, 896, 896));
        let f = field_around(&PixelBox::new(4000, 2000, 4090, 2100), 896, 4096, 4096);
        assert_eq!((f.x1, f.width(), f.height()), (4096, 896, 896));
        assert!(f.contains(&PixelBox::new(4000, 2000, 4090, 2100)));
        let f = field_around(&PixelBox::new(10, 10, 20, 20), 896, 500, 4096);
        assert_eq!((f.x0, f.x1), (0, 500));
    }
}
