//! Runs a whole exploration (supervisor, concurrent explorers, backends,
//! trace), writes its outputs, and replays recorded traces.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendConfig, BackendError, ChaosPolicy, ChatBackend, FlakyBackend, HttpChatBackend, MockCaptioner, MockPolicy,
    RetryPolicy, SweepSettings,
};
use crate::explorer::{Explorer, ExplorerSettings};
use crate::protocol::{
    check_trace, encode_event, replay_states, write_trace, Clock, DiagnosisReport, EventBody, FoldError, RunOutcome,
    SupervisorState, TraceAppender, TraceEvent, TraceViolation,
};
use crate::raster::{digest, encode_png, RasterImage};
use crate::slide::{detect_tissue, open_slide, render_thumbnail, PyramidSlide, RegionSpec, SlideError};
use crate::stats::{MagnificationClass, ViewCounts};
use crate::supervisor::{PlanOutcome, Supervisor, SupervisorError, SupervisorSettings, TaskOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Rule-based policy and ground-truth captioner.
    Mock,
    /// Randomized policy and ground-truth captioner.
    Chaos,
    /// Chat-completions endpoints for both roles.
    Http,
}

impl BackendKind {
    /// Whether a run can be re-executed bit for bit.
    pub fn is_deterministic(self) -> bool {
        matches!(self, BackendKind::Mock | BackendKind::Chaos)
    }
}

/// Flat run configuration; every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub policy_endpoint: String,
    pub policy_model: String,
    pub captioner_endpoint: String,
    pub captioner_model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub temperature: f64,
    pub max_concurrent_requests: usize,
    pub seed: u64,
    pub max_rounds: u32,
    pub fan_out: usize,
    pub explorer_budget: u32,
    pub max_edge: u32,
    pub thumbnail_edge: u32,
    pub coarse_magnification: f64,
    pub followup_magnification: f64,
    pub overlap_threshold: f64,
    pub keywords: Vec<String>,
    /// Explorer threads; 0 means one per task of a round.
    pub parallelism: usize,
    pub clinical_context: String,
    pub clock: Clock,
    /// Fraction of backend calls that fail (chaos backend only).
    pub failure_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backend = BackendConfig::default();
        let policy = MockPolicy::default();
        let supervisor = SupervisorSettings::default();
        Self {
            backend: BackendKind::Mock,
            policy_endpoint: backend.endpoint.clone(),
            policy_model: backend.model.clone(),
            captioner_endpoint: backend.endpoint,
            captioner_model: backend.model,
            timeout_secs: backend.timeout_secs,
            max_retries: backend.max_retries,
            retry_base_delay_ms: backend.retry_base_delay_ms,
            temperature: backend.temperature,
            max_concurrent_requests: backend.max_concurrent_requests,
            seed: 0,
            max_rounds: supervisor.max_rounds,
            fan_out: supervisor.fan_out,
            explorer_budget: supervisor.default_budget,
            max_edge: supervisor.max_edge,
            thumbnail_edge: supervisor.thumbnail_edge,
            coarse_magnification: policy.coarse_magnification,
            followup_magnification: policy.followup_magnification,
            overlap_threshold: crate::backends::mock::DEFAULT_OVERLAP_THRESHOLD,
            keywords: policy.sweep.keywords,
            parallelism: 0,
            clinical_context: String::new(),
            clock: Clock::System,
            failure_rate: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.max_rounds == 0 {
            problems.push("max_rounds must be at least 1");
        }
        if self.fan_out == 0 {
            problems.push("fan_out must be at least 1");
        }
        if self.explorer_budget == 0 {
            problems.push("explorer_budget must be at least 1");
        }
        if !(1..=crate::anyres::MAX_GRID_EDGE).contains(&self.max_edge) {
            problems.push("max_edge must be between 1 and 896");
        }
        if self.thumbnail_edge < 64 {
            problems.push("thumbnail_edge must be at least 64");
        }
        if !(self.timeout_secs > 0.0) {
            problems.push("timeout_secs must be positive");
        }
        if self.max_concurrent_requests == 0 {
            problems.push("max_concurrent_requests must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) || self.overlap_threshold == 0.0 {
            problems.push("overlap_threshold must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.failure_rate) {
            problems.push("failure_rate must be in [0, 1)");
        }
        if self.failure_rate > 0.0 && self.backend != BackendKind::Chaos {
            problems.push("failure_rate is only supported by the chaos backend");
        }
        if !(self.coarse_magnification > 0.0 && self.followup_magnification > 0.0) {
            problems.push("magnifications must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: std::time::Duration::from_millis(self.retry_base_delay_ms),
        }
    }

    fn backend_config(&self, endpoint: &str, model: &str) -> BackendConfig {
        BackendConfig {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            retry_base_delay_ms: self.retry_base_delay_ms,
            temperature: self.temperature,
            seed: self.seed,
            max_concurrent_requests: self.max_concurrent_requests,
        }
    }

    fn supervisor_settings(&self) -> SupervisorSettings {
        SupervisorSettings {
            max_rounds: self.max_rounds,
            fan_out: self.fan_out,
            default_budget: self.explorer_budget,
            thumbnail_edge: self.thumbnail_edge,
            max_edge: self.max_edge,
            retry: self.retry_policy(),
        }
    }

    fn sweep(&self) -> SweepSettings {
        SweepSettings { keywords: self.keywords.clone() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
    #[error("cannot start explorer threads: {0}")]
    Pool(String),
}

type Backends = (Box<dyn ChatBackend>, Box<dyn ChatBackend>);

fn build_backends(config: &RunConfig, slide: &PyramidSlide) -> Result<Backends, EngineError> {
    let mock_captioner = || -> Result<MockCaptioner, EngineError> {
        let captioner = MockCaptioner::from_slide_dir(slide.root()).map_err(|e| {
            EngineError::Config(format!("the {:?} backend needs the slide's ground truth: {e}", config.backend))
        })?;
        Ok(captioner.with_overlap_threshold(config.overlap_threshold))
    };
    Ok(match config.backend {
        BackendKind::Mock => {
            let policy = MockPolicy {
                coarse_magnification: config.coarse_magnification,
                followup_magnification: config.followup_magnification,
                max_edge: config.max_edge,
                sweep: config.sweep(),
            };
            (Box::new(policy), Box::new(mock_captioner()?))
        }
        BackendKind::Chaos => {
            let policy = ChaosPolicy::new(config.seed);
            let captioner = mock_captioner()?;
            if config.failure_rate > 0.0 {
                (
                    Box::new(FlakyBackend::new(policy, config.seed, config.failure_rate)),
                    Box::new(FlakyBackend::new(captioner, config.seed ^ 0x5eed, config.failure_rate)),
                )
            } else {
                (Box::new(policy), Box::new(captioner))
            }
        }
        BackendKind::Http => (
            Box::new(HttpChatBackend::new(config.backend_config(&config.policy_endpoint, &config.policy_model))?),
            Box::new(HttpChatBackend::new(config.backend_config(&config.captioner_endpoint, &config.captioner_model))?),
        ),
    })
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub events: Vec<TraceEvent>,
    /// Supervisor state after each event.
    pub states: Vec<SupervisorState>,
    pub outcome: RunOutcome,
    /// Every viewed region, in trace order.
    pub visited: Vec<RegionSpec>,
    /// Whole-slide thumbnail with the visited regions outlined.
    pub thumbnail: RasterImage,
}

impl RunOutput {
    pub fn report(&self) -> RunReport {
        RunReport::from_events(&self.events)
    }
}

fn drive(
    sup: &mut Supervisor<'_>,
    explorer: &Explorer<'_>,
    pool: &rayon::ThreadPool,
    trace: &TraceAppender,
) -> Result<DiagnosisReport, SupervisorError> {
    sup.init()?;
    loop {
        match sup.plan_round()? {
            PlanOutcome::Tasks(tasks) => {
                // Explorers record into private buffers; the buffers are
                // sequenced in task order once the round's barrier is reached.
                let results: Vec<_> = pool.install(|| {
                    tasks
                        .par_iter()
                        .map(|task| {
                            let mut buffer = trace.buffer();
                            let result = explorer.run_task(task, &mut buffer);
                            (task.task_id.clone(), buffer, result)
                        })
                        .collect()
                });
                let mut outcomes = Vec::with_capacity(results.len());
                for (task_id, buffer, result) in results {
                    sup.commit(buffer)?;
                    outcomes.push(TaskOutcome { task_id, result: result.map_err(|e| e.to_string()) });
                }
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

/// Explores the slide at `slide_dir` under `config`.
pub fn run_exploration(slide_dir: impl AsRef<Path>, config: &RunConfig) -> Result<RunOutput, EngineError> {
    config.validate().map_err(EngineError::Config)?;
    let slide = open_slide(slide_dir)?;
    let (policy, captioner) = build_backends(config, &slide)?;
    let tissue = detect_tissue(&slide);
    let trace = TraceAppender::new(config.clock);
    let run_config = serde_json::to_value(config).expect("plain data");
    let mut sup = Supervisor::new(
        &slide,
        &tissue,
        policy.as_ref(),
        captioner.as_ref(),
        &trace,
        config.supervisor_settings(),
        &config.clinical_context,
        run_config,
    );
    let threads = if config.parallelism == 0 { config.fan_out } else { config.parallelism };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .thread_name(|i| format!("explorer-{i}"))
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))?;
    let slide_context = sup.slide_context().clone();
    let thumbnail = sup.thumbnail().clone();
    let settings = ExplorerSettings { max_edge: config.max_edge, retry: config.retry_policy(), sweep: config.sweep() };
    let explorer = Explorer {
        slide: &slide,
        slide_context: &slide_context,
        captioner: captioner.as_ref(),
        policy: policy.as_ref(),
        settings: &settings,
        thumbnail: &thumbnail,
    };

    let outcome = match drive(&mut sup, &explorer, &pool, &trace) {
        Ok(report) => RunOutcome::Completed { report },
        Err(SupervisorError::Fold(e)) => return Err(SupervisorError::Fold(e).into()),
        Err(e) => {
            let reason = e.to_string();
            log::warn!("run aborted: {reason}");
            sup.abort(&reason)?;
            RunOutcome::Aborted { reason }
        }
    };
    let states = sup.into_history();
    let events = trace.events();
    let visited = visited_regions(&events);
    let thumbnail = render_thumbnail(&slide, &visited, config.thumbnail_edge);
    Ok(RunOutput { events, states, outcome, visited, thumbnail })
}

pub fn visited_regions(events: &[TraceEvent]) -> Vec<RegionSpec> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::View(v) => Some(v.region),
            _ => None,
        })
        .collect()
}

/// Machine-readable run summary. Contains nothing time-dependent, so equal
/// traces give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub slide_id: String,
    /// `completed` or `aborted`.
    pub status: String,
    pub reason: Option<String>,
    pub diagnosis: Option<DiagnosisReport>,
    pub hypotheses: Vec<String>,
    pub rounds: u32,
    pub tasks_issued: usize,
    pub views: ViewCounts,
    pub retries: usize,
    pub repairs: usize,
    pub rejected_proposals: usize,
}

impl RunReport {
    pub fn from_events(events: &[TraceEvent]) -> Self {
        let mut r = RunReport {
            slide_id: String::new(),
            status: "incomplete".into(),
            reason: None,
            diagnosis: None,
            hypotheses: Vec::new(),
            rounds: 0,
            tasks_issued: 0,
            views: ViewCounts::default(),
            retries: 0,
            repairs: 0,
            rejected_proposals: 0,
        };
        for e in events {
            match &e.body {
                EventBody::Init(p) => {
                    r.slide_id = p.slide_id.clone();
                    r.hypotheses = p.hypotheses.clone();
                    r.rejected_proposals += p.rejected.len();
                }
                EventBody::Plan(p) => {
                    r.rounds = p.round;
                    r.hypotheses = p.hypotheses.clone();
                    r.rejected_proposals += p.rejected.len();
                }
                EventBody::Review(p) => {
                    r.hypotheses = p.hypotheses.clone();
                    r.rejected_proposals += p.rejected.len();
                }
                EventBody::TaskIssued(_) => r.tasks_issued += 1,
                EventBody::View(v) => r.views.add(MagnificationClass::of(v.region.magnification)),
                EventBody::Retry(_) => r.retries += 1,
                EventBody::Repair(_) => r.repairs += 1,
                EventBody::Finalize(p) => {
                    r.status = p.outcome.clone();
                    r.reason = p.reason.clone();
                    r.diagnosis = p.report.clone();
                }
                _ => {}
            }
        }
        r
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        match &self.diagnosis {
            Some(d) => {
                md.push_str(&format!("# Slide {}: {}\n\n", self.slide_id, d.primary_diagnosis));
                md.push_str(&format!("**Confidence:** {}\n\n", d.confidence));
                md.push_str(&format!("**Differential diagnoses:** {}; {}\n\n", d.differentials[0], d.differentials[1]));
                md.push_str("## Findings\n\n");
                md.push_str(d.narrative.trim());
                md.push_str("\n\n## Cited regions\n\n");
                if d.cited_rois.is_empty() {
                    md.push_str("None.\n");
                } else {
                    md.push_str("| ROI | Magnification | Region (x0, y0)-(x1, y1) | Caption |\n|---|---|---|---|\n");
                    for roi in &d.cited_rois {
                        md.push_str(&format!(
                            "| {} | {}x | {} | {} |\n",
                            roi.roi_id,
                            roi.region.magnification,
                            roi.region.bounds(),
                            roi.caption.replace('|', "\\|")
                        ));
                    }
                }
            }
            None => {
                md.push_str(&format!("# Slide {}: run {}\n\n", self.slide_id, self.status));
                if let Some(reason) = &self.reason {
                    md.push_str(&format!("**Reason:** {reason}\n"));
                }
            }
        }
        md.push_str("\n## Exploration\n\n");
        md.push_str(&format!("- Rounds: {}\n", self.rounds));
        md.push_str(&format!("- Tasks issued: {}\n", self.tasks_issued));
        md.push_str(&format!(
            "- Regions viewed: {} (high power {}, medium {}, low {})\n",
            self.views.total(),
            self.views.high,
            self.views.medium,
            self.views.low
        ));
        md.push_str(&format!("- Final hypotheses: {}\n", self.hypotheses.join(" > ")));
        md
    }
}

pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const THUMBNAIL_FILE: &str = "thumbnail.png";

/// Writes the trace, both report forms and the annotated thumbnail.
pub fn write_outputs(out_dir: impl AsRef<Path>, output: &RunOutput) -> io::Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join(TRACE_FILE))?;
    write_trace(io::BufWriter::new(file), &output.events)?;
    let report = output.report();
    std::fs::write(dir.join(REPORT_JSON), report.to_json())?;
    std::fs::write(dir.join(REPORT_MD), report.to_markdown())?;
    let png = encode_png(&output.thumbnail).map_err(io::Error::other)?;
    std::fs::write(dir.join(THUMBNAIL_FILE), png)
}

/// Result of checking a recorded trace against its slide.
#[derive(Debug, Default)]
pub struct ReplayOutcome {
    pub events: usize,
    pub violations: Vec<TraceViolation>,
    pub fold_error: Option<FoldError>,
    /// Views re-extracted from the slide.
    pub views_checked: usize,
    pub view_mismatches: Vec<String>,
    /// Whether the run was re-executed; only deterministic backends can be.
    pub reexecuted: bool,
    pub rerun_mismatches: Vec<String>,
    /// The report regenerated from the replayed run.
    pub report_json: Option<String>,
}

impl ReplayOutcome {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
            && self.fold_error.is_none()
            && self.view_mismatches.is_empty()
            && self.rerun_mismatches.is_empty()
    }
}

fn without_time(event: &TraceEvent) -> String {
    let mut e = event.clone();
    e.wall_time = 0;
    encode_event(&e)
}

/// Checks structure and the state fold, re-extracts every view, and for
/// deterministic backends re-executes the run and compares the trace, the
/// state sequence and `report.json`.
pub fn replay(events: &[TraceEvent], slide_dir: impl AsRef<Path>) -> Result<ReplayOutcome, EngineError> {
    let slide_dir = slide_dir.as_ref();
    let slide = open_slide(slide_dir)?;
    let mut out = ReplayOutcome { events: events.len(), violations: check_trace(events), ..Default::default() };
    let states = match replay_states(events) {
        Ok(s) => Some(s),
        Err(e) => {
            out.fold_error = Some(e);
            None
        }
    };
    let init = events.iter().find_map(|e| match &e.body {
        EventBody::Init(p) => Some(p),
        _ => None,
    });
    let config: Option<RunConfig> = init.and_then(|p| serde_json::from_value(p.config.clone()).ok());
    if let Some(p) = init {
        if p.slide_id != slide.slide_id() {
            out.view_mismatches.push(format!(
                "trace is for slide {}, directory holds {}",
                p.slide_id,
                slide.slide_id()
            ));
            return Ok(out);
        }
    }
    let max_edge = config.as_ref().map_or(RunConfig::default().max_edge, |c| c.max_edge);
    let mut view_digests = std::collections::BTreeMap::new();
    for e in events {
        match &e.body {
            EventBody::View(v) => {
                out.views_checked += 1;
                match slide.read_region(&v.region, max_edge) {
                    Ok(img) => {
                        let d = digest(&img);
                        if (img.width(), img.height()) != (v.width, v.height) || d != v.image_digest {
                            out.view_mismatches.push(format!(
                                "event {}: view {} step {} re-extracts differently",
                                e.seq, v.task_id, v.step
                            ));
                        }
                        view_digests.insert((v.task_id.clone(), v.step), d);
                    }
                    Err(err) => out.view_mismatches.push(format!("event {}: {err}", e.seq)),
                }
            }
            EventBody::Caption(c) => {
                let logged = c.request.images.first().map(|i| i.digest.as_str());
                if logged != view_digests.get(&(c.task_id.clone(), c.step)).map(String::as_str) {
                    out.view_mismatches.push(format!(
                        "event {}: caption image for {} step {} is not the viewed image",
                        e.seq, c.task_id, c.step
                    ));
                }
            }
            _ => {}
        }
    }

    let Some(config) = config.filter(|c| c.backend.is_deterministic()) else {
        return Ok(out);
    };
    out.reexecuted = true;
    let rerun = run_exploration(slide_dir, &config)?;
    if rerun.events.len() != events.len() {
        out.rerun_mismatches.push(format!("trace has {} events, re-execution {}", events.len(), rerun.events.len()));
    }
    if let Some((a, b)) = events.iter().zip(&rerun.events).find(|(a, b)| without_time(a) != without_time(b)) {
        out.rerun_mismatches.push(format!(
            "event {} differs: recorded {}, re-executed {}",
            a.seq,
            a.kind().as_str(),
            b.kind().as_str()
        ));
    }
    if let Some(states) = states {
        if states != rerun.states {
            let at = states
                .iter()
                .zip(&rerun.states)
                .position(|(a, b)| a != b)
                .unwrap_or(states.len().min(rerun.states.len()));
            out.rerun_mismatches.push(format!("state sequence diverges after event {at}"));
        }
    }
    let recorded = RunReport::from_events(events).to_json();
    let regenerated = rerun.report().to_json();
    if recorded != regenerated {
        out.rerun_mismatches.push("regenerated report.json differs from the recorded run".into());
    }
    out.report_json = Some(regenerated);
    Ok(out)
}
