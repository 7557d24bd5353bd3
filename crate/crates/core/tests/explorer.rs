mod common;

use std::sync::OnceLock;

use common::{explorer_settings, Scripted, TempSlide};
use proptest::prelude::*;
use serde_json::json;
use slidescout_core::backends::context::SlideContext;
use slidescout_core::backends::{BackendError, ChatBackend, MockCaptioner, MockPolicy, Purpose};
use slidescout_core::explorer::{Explorer, ExplorerError, ExplorerSettings, ExplorerState, NavigationAction};
use slidescout_core::protocol::{Clock, EventBody, EventBuffer, ExplorerReport, TaskSpec};
use slidescout_core::raster::{digest, RasterImage};
use slidescout_core::slide::{detect_tissue, RegionSpec, SyntheticSlideSpec};

struct Fixture {
    slide: TempSlide,
    context: SlideContext,
    thumbnail: RasterImage,
    captioner: MockCaptioner,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let slide = TempSlide::new(SyntheticSlideSpec::fixture());
        let context = SlideContext::new(&slide.slide, &detect_tissue(&slide.slide));
        let thumbnail = slide.slide.thumbnail(896);
        let captioner = MockCaptioner::from_slide_dir(slide.path()).unwrap();
        Fixture { slide, context, thumbnail, captioner }
    })
}

fn explorer<'a>(policy: &'a dyn ChatBackend, settings: &'a ExplorerSettings) -> Explorer<'a> {
    let f = fixture();
    Explorer {
        slide: &f.slide.slide,
        slide_context: &f.context,
        captioner: &f.captioner,
        policy,
        settings,
        thumbnail: &f.thumbnail,
    }
}

fn task(region: RegionSpec, budget: u32) -> TaskSpec {
    TaskSpec {
        task_id: "t001".into(),
        tissue_box_index: None,
        region,
        features_to_document: "architecture and cytology".into(),
        context: String::new(),
        budget,
    }
}

fn run(policy: &dyn ChatBackend, t: &TaskSpec) -> (ExplorerReport, EventBuffer) {
    let settings = explorer_settings();
    let mut buffer = EventBuffer::new(Clock::Logical);
    let report = explorer(policy, &settings).run_task(t, &mut buffer).unwrap();
    (report, buffer)
}

fn views(buffer: &EventBuffer) -> Vec<RegionSpec> {
    buffer
        .bodies()
        .filter_map(|b| match b {
            EventBody::View(v) => Some(v.region),
            _ => None,
        })
        .collect()
}

fn repairs(buffer: &EventBuffer) -> usize {
    buffer.bodies().filter(|b| matches!(b, EventBody::Repair(_))).count()
}

#[test]
fn budget_of_one_gives_one_view_then_submit() {
    let t = task(RegionSpec::new(0, 0, 2048, 1536, 5.0), 1);
    let (report, buffer) = run(&MockPolicy::default(), &t);
    assert_eq!(views(&buffer).len(), 1);
    assert_eq!(report.views_used, 1);
    assert_eq!(report.rois.len(), 1);
}

#[test]
fn sweep_visits_quadrants_in_row_major_order() {
    // 896-pixel fields at 20x split this region 2x2; the bottom row is clipped.
    let t = task(RegionSpec::new(256, 0, 2048, 1536, 20.0), 24);
    let (report, buffer) = run(&MockPolicy::default(), &t);
    let x0 = 256;
    let expected = vec![
        RegionSpec::new(x0, 0, x0 + 896, 896, 20.0),
        RegionSpec::new(x0 + 896, 0, x0 + 1792, 896, 20.0),
        RegionSpec::new(x0, 896, x0 + 896, 1536, 20.0),
        RegionSpec::new(x0 + 896, 896, x0 + 1792, 1536, 20.0),
    ];
    assert_eq!(views(&buffer), expected);
    assert_eq!(report.views_used, 4);
    assert_eq!(report.rois.iter().map(|r| r.region).collect::<Vec<_>>(), expected);
}

#[test]
fn background_task_reports_nothing_of_concern() {
    // Top-right corner of the fixture holds no tissue.
    let t = task(RegionSpec::new(1920, 0, 2048, 128, 5.0), 24);
    let (report, buffer) = run(&MockPolicy::default(), &t);
    assert!(!views(&buffer).is_empty());
    assert!(report.findings.contains("no tissue features"), "{}", report.findings);
    assert!(report.rois.iter().all(|r| !r.flagged_relevant));
}

#[test]
fn lesion_region_yields_a_flagged_roi_on_the_lesion() {
    let truth = &fixture().slide.spec.lesions[0].bounds;
    let t = task(RegionSpec::new(160, 208, 1104, 1376, 5.0), 24);
    let (report, _) = run(&MockPolicy::default(), &t);
    let flagged: Vec<_> = report.rois.iter().filter(|r| r.flagged_relevant).collect();
    assert!(!flagged.is_empty());
    assert!(flagged.iter().any(|r| r.region.bounds().intersects(truth)));
    assert!(flagged.iter().all(|r| r.caption.contains("adenocarcinoma")));
    assert!(report.findings.contains("flagged"));
}

#[test]
fn flagging_follows_caption_keywords() {
    let policy = MockPolicy::default();
    let cap = Scripted::with(fixture().captioner.clone(), |req, reply| {
        let region = req.context["region"].clone();
        if region["x0"] == json!(0) {
            Ok("nuclear atypia in scattered cells.".into())
        } else {
            reply
        }
    });
    let f = fixture();
    let settings = explorer_settings();
    let ex = Explorer {
        slide: &f.slide.slide,
        slide_context: &f.context,
        captioner: &cap,
        policy: &policy,
        settings: &settings,
        thumbnail: &f.thumbnail,
    };
    let t = task(RegionSpec::new(0, 0, 1792, 128, 20.0), 24);
    let mut buffer = EventBuffer::new(Clock::Logical);
    let report = ex.run_task(&t, &mut buffer).unwrap();
    let flags: Vec<_> = report.rois.iter().map(|r| r.flagged_relevant).collect();
    assert_eq!(flags, [true, false]);
    assert_eq!(report.rois[0].roi_id, "t001-v01");
}

/// Replies to explorer steps with a fixed view; other purposes pass through.
fn fixed_view(region: RegionSpec) -> Scripted<MockPolicy> {
    Scripted::with(MockPolicy::default(), move |req, reply| {
        if req.purpose != Purpose::ExplorerStep {
            return reply;
        }
        Ok(json!({"action": "view", "region": region, "rationale": "look here"}).to_string())
    })
}

#[test]
fn out_of_region_view_is_repaired_once_then_submitted() {
    let t = task(RegionSpec::new(0, 0, 1024, 1024, 5.0), 24);
    let policy = fixed_view(RegionSpec::new(1024, 0, 2048, 1024, 5.0));
    let (report, buffer) = run(&policy, &t);
    assert_eq!(repairs(&buffer), 1);
    assert!(views(&buffer).is_empty());
    assert_eq!(report.views_used, 0);
    assert!(report.findings.contains("invalid navigation decision"), "{}", report.findings);
    assert!(report.findings.contains("leaves the assigned region"), "{}", report.findings);
    assert_eq!(policy.requests(Purpose::ExplorerStep).len(), 2);
}

#[test]
fn disallowed_magnification_is_repaired() {
    let t = task(RegionSpec::new(0, 0, 1024, 1024, 5.0), 24);
    let policy = fixed_view(RegionSpec::new(0, 0, 512, 512, 7.0));
    let (report, buffer) = run(&policy, &t);
    assert_eq!(repairs(&buffer), 1);
    assert!(report.findings.contains("magnification"), "{}", report.findings);
}

#[test]
fn forced_submit_keeps_partial_findings() {
    // Two valid views, then a view outside the slide twice.
    let policy = Scripted::with(MockPolicy::default(), |req, reply| {
        if req.purpose != Purpose::ExplorerStep {
            return reply;
        }
        let seen = req.context["views"].as_array().unwrap().len();
        if seen < 2 {
            let r = RegionSpec::new(480 + 256 * seen as u32, 600, 480 + 256 * (seen as u32 + 1), 856, 20.0);
            Ok(json!({"action": "view", "region": r, "rationale": "focus"}).to_string())
        } else {
            Ok(json!({"action": "view", "region": RegionSpec::new(0, 0, 5000, 5000, 20.0), "rationale": "x"})
                .to_string())
        }
    });
    let t = task(RegionSpec::new(160, 208, 1104, 1376, 20.0), 24);
    let (report, buffer) = run(&policy, &t);
    assert_eq!(views(&buffer).len(), 2);
    assert_eq!(repairs(&buffer), 1);
    assert_eq!(report.views_used, 2);
    assert_eq!(report.rois.len(), 2);
    // Forced submissions flag by the sweep keywords.
    assert!(report.rois.iter().all(|r| r.flagged_relevant));
}

#[test]
fn exhausted_budget_forces_submit() {
    let policy = fixed_view(RegionSpec::new(0, 0, 512, 512, 5.0));
    let settings = explorer_settings();
    let ex = explorer(&policy, &settings);
    let mut state = ExplorerState::new(task(RegionSpec::new(0, 0, 1024, 1024, 5.0), 2));
    let mut buffer = EventBuffer::new(Clock::Logical);
    for _ in 0..2 {
        let NavigationAction::View { region, rationale } = ex.step(&mut state, &mut buffer).unwrap() else {
            panic!("expected a view")
        };
        ex.view(&mut state, region, rationale, &mut buffer).unwrap();
    }
    assert_eq!(state.views_remaining, 0);
    let NavigationAction::Submit(report) = ex.step(&mut state, &mut buffer).unwrap() else {
        panic!("expected a submission")
    };
    assert!(report.findings.contains("view budget exhausted"), "{}", report.findings);
    assert_eq!(report.views_used, 2);
    assert!(state.done);
    assert_eq!(state.report.as_ref(), Some(&report));
    assert!(matches!(ex.step(&mut state, &mut buffer), Err(ExplorerError::Done(_))));
}

#[test]
fn unknown_key_roi_is_repaired() {
    let policy = Scripted::with(MockPolicy::default(), |req, reply| {
        if req.purpose != Purpose::ExplorerStep {
            return reply;
        }
        Ok(json!({"action": "submit", "findings": "done", "key_rois": ["v07"]}).to_string())
    });
    let (report, buffer) = run(&policy, &task(RegionSpec::new(0, 0, 512, 512, 5.0), 4));
    assert_eq!(repairs(&buffer), 1);
    assert!(report.findings.contains("unknown view id v07"), "{}", report.findings);
}

#[test]
fn policy_failure_propagates() {
    let policy = Scripted::with(MockPolicy::default(), |_, _| Err(BackendError::Injected("boom".into())));
    let settings = explorer_settings();
    let mut buffer = EventBuffer::new(Clock::Logical);
    let err = explorer(&policy, &settings).run_task(&task(RegionSpec::new(0, 0, 512, 512, 5.0), 4), &mut buffer);
    assert!(matches!(err, Err(ExplorerError::Policy { .. })));
    assert_eq!(buffer.bodies().filter(|b| matches!(b, EventBody::Retry(_))).count(), 3);
}

#[test]
fn captioner_failure_propagates() {
    let f = fixture();
    let policy = MockPolicy::default();
    let cap = Scripted::with(f.captioner.clone(), |_, _| Err(BackendError::Injected("boom".into())));
    let settings = explorer_settings();
    let ex = Explorer {
        slide: &f.slide.slide,
        slide_context: &f.context,
        captioner: &cap,
        policy: &policy,
        settings: &settings,
        thumbnail: &f.thumbnail,
    };
    let mut buffer = EventBuffer::new(Clock::Logical);
    let err = ex.run_task(&task(RegionSpec::new(0, 0, 512, 512, 5.0), 4), &mut buffer).unwrap_err();
    assert!(matches!(err, ExplorerError::Caption { .. }), "{err}");
}

#[test]
fn step_prompt_shows_visited_fields_on_the_thumbnail() {
    let policy = Scripted::new(MockPolicy::default());
    let t = task(RegionSpec::new(160, 208, 1104, 1376, 5.0), 24);
    run(&policy, &t);
    let steps = policy.requests(Purpose::ExplorerStep);
    assert!(steps.len() >= 2);
    let first = steps[0].images().next().unwrap().image.clone();
    let second = steps[1].images().next().unwrap().image.clone();
    assert_eq!(first.as_ref(), &fixture().thumbnail);
    assert_ne!(first, second);
    assert!(steps[1].prompt_text().contains("v01"));
}

fn check_run_invariants(t: &TaskSpec, report: &ExplorerReport, buffer: &EventBuffer) {
    let slide = &fixture().slide.slide;
    let allowed = slide.allowed_magnifications();
    let mut n_views = 0;
    for body in buffer.bodies() {
        if let EventBody::View(v) = body {
            n_views += 1;
            assert!(v.region.bounds().intersects(&t.region.bounds()));
            assert!(t.region.bounds().contains(&v.region.bounds()));
            assert!(allowed.contains(&v.region.magnification));
            // Re-extraction reproduces the captioned image exactly.
            let again = slide.read_region(&v.region, 896).unwrap();
            assert_eq!(digest(&again), v.image_digest);
            assert!(v.width <= 896 && v.height <= 896);
        }
    }
    assert_eq!(report.views_used, n_views);
    assert!(report.views_used <= t.budget);
    assert_eq!(report.rois.len() as u32, report.views_used);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn views_stay_inside_the_task_and_match_the_budget(
        x0 in 0u32..1500, y0 in 0u32..1000, w in 64u32..1200, h in 64u32..1200,
        mag_i in 0usize..5, budget in 1u32..8,
    ) {
        let mag = [1.25, 2.5, 5.0, 10.0, 20.0][mag_i];
        let region = RegionSpec::new(x0, y0, (x0 + w).min(2048), (y0 + h).min(1536), mag);
        let t = task(region, budget);
        let (report, buffer) = run(&MockPolicy::default(), &t);
        check_run_invariants(&t, &report, &buffer);
    }
}
