//! The supervisor loop: hypotheses and plan, per-round task issue, review of
//! explorer reports, termination, ROI collation and the final report.
//!
//! Every decision is written to the trace and folded into
//! [`SupervisorState`] through the same [`SupervisorState::apply`] replay
//! uses, so the live state and the replayed state cannot drift apart.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::Value;

use crate::backends::context::{InitContext, PlanContext, ReportContext, ReviewContext, SlideContext};
use crate::backends::{
    decide, differential_diagnosis, prompts, ChatBackend, ChatImage, ChatRequest, ChatTurn, Decision, DecisionError,
    InitDecision, PlanDecision, Purpose, ReportDecision, RetryPolicy, ReviewDecision, RoiImage, TaskProposal,
};
use crate::protocol::{
    citations, validate_task, Actor, CollatePayload, Confidence, DiagnosePayload, DiagnosisReport, EventBody,
    EventBuffer, ExplorerReport, FinalizePayload, FoldError, InitPayload, PlanPayload, Recorder, RejectedProposal,
    ReportPayload, ReviewPayload, RoiRecord, SupervisorState, TaskIssuedPayload, TaskSpec, TraceAppender, TraceEvent,
    MAX_CITED_ROIS,
};
use crate::raster::{digest, RasterImage};
use crate::slide::{PyramidSlide, SlideError, TissueBox};

pub const DEFAULT_MAX_ROUNDS: u32 = 8;
pub const DEFAULT_FAN_OUT: usize = 6;
pub const DEFAULT_TASK_BUDGET: u32 = 24;
pub const NON_DIAGNOSTIC: &str = "non-diagnostic";
const BUDGET_EXHAUSTED: &str = "budget exhausted";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisorSettings {
    /// Plan rounds that may issue tasks; the next plan terminates.
    pub max_rounds: u32,
    /// Tasks issued per round; the rest wait for later rounds.
    pub fan_out: usize,
    /// Budget given to proposals that do not name one.
    pub default_budget: u32,
    pub thumbnail_edge: u32,
    /// Edge cap for ROI images sent to the differential call.
    pub max_edge: u32,
    pub retry: RetryPolicy,
}

impl Default for SupervisorSettings {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            fan_out: DEFAULT_FAN_OUT,
            default_budget: DEFAULT_TASK_BUDGET,
            thumbnail_edge: 896,
            max_edge: 896,
            retry: RetryPolicy::immediate(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanOutcome {
    Tasks(Vec<TaskSpec>),
    Finished { justification: String },
}

/// What came back from one issued task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub task_id: String,
    pub result: Result<ExplorerReport, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SupervisorError {
    #[error("initialization failed: {0}")]
    Init(DecisionError),
    #[error("planning failed: {0}")]
    Planning(DecisionError),
    #[error("review failed: {0}")]
    Review(DecisionError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("task {task} failed: {error}")]
    TaskFailed { task: String, error: String },
    #[error("differential diagnosis failed: {0}")]
    Diagnosis(DecisionError),
    #[error("report drafting failed: {0}")]
    Report(DecisionError),
    #[error("cannot read ROI {roi}: {source}")]
    Read { roi: String, source: SlideError },
    #[error("trace does not fold: {0}")]
    Fold(FoldError),
}

/// Trace writer that folds each event into the supervisor state.
struct StateLog<'a> {
    trace: &'a TraceAppender,
    state: SupervisorState,
    history: Vec<SupervisorState>,
    fold_error: Option<FoldError>,
}

impl StateLog<'_> {
    fn absorb(&mut self, event: &TraceEvent) {
        if self.fold_error.is_some() {
            return;
        }
        match self.state.apply(event) {
            Ok(()) => self.history.push(self.state.clone()),
            Err(e) => self.fold_error = Some(e),
        }
    }

    fn check(&mut self) -> Result<(), SupervisorError> {
        match self.fold_error.take() {
            Some(e) => Err(SupervisorError::Fold(e)),
            None => Ok(()),
        }
    }
}

impl Recorder for StateLog<'_> {
    fn record(&mut self, actor: Actor, body: EventBody) {
        let event = self.trace.append(actor, body);
        self.absorb(&event);
    }
}

fn bullet_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    if items.is_empty() {
        "(none)".into()
    } else {
        items.iter().map(|i| format!("- {}", f(i))).collect::<Vec<_>>().join("\n")
    }
}

fn task_line(t: &TaskSpec) -> String {
    format!("{} [{}] {}: {} (budget {})", t.task_id, t.region.magnification, t.region, t.features_to_document, t.budget)
}

fn report_line(r: &ExplorerReport) -> String {
    let mut s = format!("{} ({} views): {}", r.task_id, r.views_used, r.findings);
    for roi in r.rois.iter().filter(|r| r.flagged_relevant) {
        s.push_str(&format!("\n  flagged {} {}: {}", roi.roi_id, roi.region, roi.caption));
    }
    s
}

/// Flagged ROIs ranked by score (unscored flagged ROIs count as 1), then by
/// the round their task was issued in, then by id; at most ten.
pub fn select_rois(
    reports: &[ExplorerReport],
    scores: &BTreeMap<String, f64>,
    task_rounds: &BTreeMap<String, u32>,
) -> Vec<RoiRecord> {
    let mut flagged: Vec<(f64, u32, &RoiRecord)> = reports
        .iter()
        .flat_map(|r| &r.rois)
        .filter(|r| r.flagged_relevant)
        .map(|r| {
            let score = scores.get(&r.roi_id).copied().unwrap_or(1.0);
            let round = task_rounds.get(&r.source_task).copied().unwrap_or(u32::MAX);
            (score, round, r)
        })
        .collect();
    flagged.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then_with(|| a.2.roi_id.cmp(&b.2.roi_id)));
    flagged.into_iter().take(MAX_CITED_ROIS).map(|(_, _, r)| r.clone()).collect()
}

/// Validates proposals, numbering survivors from the next free task id.
#[derive(Clone, Copy)]
struct Vetter<'a> {
    slide: &'a PyramidSlide,
    default_budget: u32,
    tasks_created: u32,
}

impl Vetter<'_> {
    fn vet(&self, proposals: &[TaskProposal], hypotheses: &[String]) -> (Vec<TaskSpec>, Vec<RejectedProposal>) {
        let mut next = self.tasks_created;
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for p in proposals {
            let task = TaskSpec {
                task_id: format!("t{:03}", next + 1),
                tissue_box_index: p.tissue_box_index,
                region: p.region,
                features_to_document: p.features_to_document.clone(),
                context: format!("hypotheses: {}", hypotheses.join(" > ")),
                budget: p.budget.unwrap_or(self.default_budget),
            };
            match validate_task(&task, self.slide) {
                Ok(()) => {
                    next += 1;
                    accepted.push(task);
                }
                Err(violations) => rejected.push(RejectedProposal {
                    region: p.region,
                    features_to_document: p.features_to_document.clone(),
                    violations,
                }),
            }
        }
        (accepted, rejected)
    }

    /// Fails only when there were proposals and none survived validation.
    fn some_valid(&self, proposals: &[TaskProposal], hypotheses: &[String]) -> Result<(), String> {
        let (accepted, rejected) = self.vet(proposals, hypotheses);
        if proposals.is_empty() || !accepted.is_empty() {
            return Ok(());
        }
        let reasons: Vec<String> =
            rejected.iter().map(|r| format!("{}: {}", r.region, r.violations.join(", "))).collect();
        Err(format!("every proposed task is invalid ({})", reasons.join("; ")))
    }
}

pub struct Supervisor<'a> {
    slide: &'a PyramidSlide,
    slide_context: SlideContext,
    policy: &'a dyn ChatBackend,
    captioner: &'a dyn ChatBackend,
    settings: SupervisorSettings,
    clinical_context: String,
    run_config: Value,
    thumbnail: RasterImage,
    /// Every task ever created, in id order.
    tasks: Vec<TaskSpec>,
    reviewed_round: Option<u32>,
    log: StateLog<'a>,
}

impl<'a> Supervisor<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        slide: &'a PyramidSlide,
        tissue: &[TissueBox],
        policy: &'a dyn ChatBackend,
        captioner: &'a dyn ChatBackend,
        trace: &'a TraceAppender,
        settings: SupervisorSettings,
        clinical_context: &str,
        run_config: Value,
    ) -> Self {
        Self {
            slide,
            slide_context: SlideContext::new(slide, tissue),
            policy,
            captioner,
            settings,
            clinical_context: clinical_context.to_string(),
            run_config,
            thumbnail: slide.thumbnail(settings.thumbnail_edge),
            tasks: Vec::new(),
            reviewed_round: None,
            log: StateLog { trace, state: SupervisorState::default(), history: Vec::new(), fold_error: None },
        }
    }

    pub fn state(&self) -> &SupervisorState {
        &self.log.state
    }

    /// State after each event this supervisor has seen.
    pub fn history(&self) -> &[SupervisorState] {
        &self.log.history
    }

    pub fn into_history(self) -> Vec<SupervisorState> {
        self.log.history
    }

    pub fn thumbnail(&self) -> &RasterImage {
        &self.thumbnail
    }

    pub fn slide_context(&self) -> &SlideContext {
        &self.slide_context
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// Sequences an explorer's buffered events into the trace.
    pub fn commit(&mut self, buffer: EventBuffer) -> Result<(), SupervisorError> {
        for event in self.log.trace.commit(buffer) {
            self.log.absorb(&event);
        }
        self.log.check()
    }

    fn emit(&mut self, body: EventBody) -> Result<(), SupervisorError> {
        self.log.record(Actor::Supervisor, body);
        self.log.check()
    }

    fn vetter(&self) -> Vetter<'a> {
        Vetter {
            slide: self.slide,
            default_budget: self.settings.default_budget,
            tasks_created: self.log.state.tasks_created,
        }
    }

    fn request(&self, purpose: Purpose, text: String, images: Vec<ChatImage>, context: Value) -> ChatRequest {
        let user = if images.is_empty() { ChatTurn::user(text) } else { ChatTurn::user_with_images(text, images) };
        ChatRequest::new(purpose, vec![ChatTurn::system(prompts::SUPERVISOR_SYSTEM.trim()), user], context)
    }

    /// Forms hypotheses, a plan and the initial tasks from the slide
    /// geometry, tissue boxes and thumbnail.
    pub fn init(&mut self) -> Result<(), SupervisorError> {
        if self.log.state.initialized {
            return Err(SupervisorError::Protocol("supervisor already initialized".into()));
        }
        let s = &self.slide_context;
        let boxes =
            bullet_list(&s.tissue_boxes, |b| format!("region #{}: {} {} {} {}", b.index, b.x0, b.y0, b.x1, b.y1));
        let text = prompts::render(
            prompts::SUPERVISOR_INIT,
            &[
                ("context", self.clinical_context.as_str()),
                ("slide_id", s.slide_id.as_str()),
                ("width", s.width.to_string().as_str()),
                ("height", s.height.to_string().as_str()),
                ("base_magnification", s.base_magnification.to_string().as_str()),
                ("magnifications", format!("{:?}", s.allowed_magnifications).as_str()),
                ("tissue_boxes", boxes.as_str()),
                ("schema", InitDecision::SCHEMA),
            ],
        );
        let context = InitContext { slide: s.clone(), clinical_context: self.clinical_context.clone() };
        let request = self.request(
            Purpose::SupervisorInit,
            text,
            vec![ChatImage::new(Arc::new(self.thumbnail.clone()))],
            serde_json::to_value(context).expect("plain data"),
        );
        let vetter = self.vetter();
        let (decision, _) =
            decide::<InitDecision>(self.policy, request, self.settings.retry, &mut self.log, &Actor::Supervisor, |d| {
                vetter.some_valid(&d.tasks, &d.hypotheses)
            })
            .map_err(SupervisorError::Init)?;
        self.log.check()?;
        let (initial_tasks, rejected) = vetter.vet(&decision.tasks, &decision.hypotheses);
        self.tasks.extend(initial_tasks.iter().cloned());
        let s = &self.slide_context;
        let payload = InitPayload {
            slide_id: s.slide_id.clone(),
            base_width: s.width,
            base_height: s.height,
            base_magnification: s.base_magnification,
            tissue_boxes: s.tissue_boxes.clone(),
            clinical_context: self.clinical_context.clone(),
            hypotheses: decision.hypotheses,
            plan: decision.plan,
            current_step: decision.current_step,
            initial_tasks,
            rejected,
            thumbnail_digest: digest(&self.thumbnail),
            config: self.run_config.clone(),
        };
        self.emit(EventBody::Init(payload))
    }

    fn ready_to_plan(&self) -> Result<(), SupervisorError> {
        let st = &self.log.state;
        if !st.initialized || st.finished || !st.active_tasks.is_empty() || st.outcome.is_some() {
            return Err(SupervisorError::Protocol("plan requested outside the planning phase".into()));
        }
        if st.round > 0 && self.reviewed_round != Some(st.round) {
            return Err(SupervisorError::Protocol(format!("round {} has not been reviewed", st.round)));
        }
        Ok(())
    }

    /// Decides whether to continue; if so, queues any new tasks and issues
    /// up to `fan_out` pending tasks in creation order.
    pub fn plan_round(&mut self) -> Result<PlanOutcome, SupervisorError> {
        self.ready_to_plan()?;
        let st = &self.log.state;
        let round = st.round + 1;
        if st.round >= self.settings.max_rounds {
            let payload = PlanPayload {
                round,
                hypotheses: st.hypotheses.clone(),
                plan: st.plan.clone(),
                current_step: "final report".into(),
                justifications: vec![BUDGET_EXHAUSTED.into()],
                finished: true,
                new_tasks: Vec::new(),
                rejected: Vec::new(),
                dropped: st.pending_tasks.iter().map(|t| t.task_id.clone()).collect(),
            };
            self.emit(EventBody::Plan(payload))?;
            return Ok(PlanOutcome::Finished { justification: BUDGET_EXHAUSTED.into() });
        }
        let context = PlanContext {
            slide: self.slide_context.clone(),
            round,
            max_rounds: self.settings.max_rounds,
            fan_out: self.settings.fan_out,
            hypotheses: st.hypotheses.clone(),
            plan: st.plan.clone(),
            pending: st.pending_tasks.clone(),
            reports: st.received_reports.clone(),
        };
        let text = prompts::render(
            prompts::SUPERVISOR_PLAN,
            &[
                ("round", round.to_string().as_str()),
                ("max_rounds", self.settings.max_rounds.to_string().as_str()),
                ("fan_out", self.settings.fan_out.to_string().as_str()),
                ("hypotheses", context.hypotheses.join(" > ").as_str()),
                ("plan", context.plan.as_str()),
                ("pending", bullet_list(&context.pending, task_line).as_str()),
                ("findings", bullet_list(&context.reports, report_line).as_str()),
                ("schema", PlanDecision::SCHEMA),
            ],
        );
        let request =
            self.request(Purpose::SupervisorPlan, text, Vec::new(), serde_json::to_value(context).expect("plain data"));
        let vetter = self.vetter();
        let (decision, _) =
            decide::<PlanDecision>(self.policy, request, self.settings.retry, &mut self.log, &Actor::Supervisor, |d| {
                if d.finished {
                    Ok(())
                } else {
                    vetter.some_valid(&d.tasks, &d.hypotheses)
                }
            })
            .map_err(SupervisorError::Planning)?;
        self.log.check()?;

        let (new_tasks, rejected) = if decision.finished {
            (Vec::new(), Vec::new())
        } else {
            vetter.vet(&decision.tasks, &decision.hypotheses)
        };
        let st = &self.log.state;
        let finished = decision.finished || (st.pending_tasks.is_empty() && new_tasks.is_empty());
        let mut justifications = vec![decision.justification.clone()];
        if finished && !decision.finished {
            justifications.push("no valid task left to issue".into());
        }
        let dropped = if finished { st.pending_tasks.iter().map(|t| t.task_id.clone()).collect() } else { Vec::new() };
        self.tasks.extend(new_tasks.iter().cloned());
        self.emit(EventBody::Plan(PlanPayload {
            round,
            hypotheses: decision.hypotheses,
            plan: decision.plan,
            current_step: decision.current_step,
            justifications,
            finished,
            new_tasks,
            rejected,
            dropped,
        }))?;
        if finished {
            return Ok(PlanOutcome::Finished { justification: decision.justification });
        }
        let issue: Vec<TaskSpec> = self.log.state.pending_tasks.iter().take(self.settings.fan_out).cloned().collect();
        for task in &issue {
            self.emit(EventBody::TaskIssued(TaskIssuedPayload { round, task: task.clone() }))?;
        }
        Ok(PlanOutcome::Tasks(issue))
    }

    /// Records the round's outcomes, then lets the policy re-rank
    /// hypotheses, score flagged ROIs and queue follow-ups. Outcomes must
    /// cover the active tasks exactly. A failed task is recorded and then
    /// returned as an error.
    pub fn review_reports(&mut self, outcomes: Vec<TaskOutcome>) -> Result<(), SupervisorError> {
        let st = &self.log.state;
        if !st.initialized || st.outcome.is_some() || self.reviewed_round == Some(st.round) || st.round == 0 {
            return Err(SupervisorError::Protocol("review requested outside the review phase".into()));
        }
        let mut seen = BTreeSet::new();
        for o in &outcomes {
            if !seen.insert(o.task_id.as_str()) {
                return Err(SupervisorError::Protocol(format!("duplicate report for task {}", o.task_id)));
            }
            if !st.active_tasks.iter().any(|t| t.task_id == o.task_id) {
                return Err(SupervisorError::Protocol(format!("report for unknown task {}", o.task_id)));
            }
            if let Ok(r) = &o.result {
                if r.task_id != o.task_id {
                    return Err(SupervisorError::Protocol(format!(
                        "report for {} carries id {}",
                        o.task_id, r.task_id
                    )));
                }
            }
        }
        if let Some(t) = st.active_tasks.iter().find(|t| !seen.contains(t.task_id.as_str())) {
            return Err(SupervisorError::Protocol(format!("no report for issued task {}", t.task_id)));
        }
        let round = st.round;
        for o in &outcomes {
            let (report, error) = match &o.result {
                Ok(r) => (Some(r.clone()), None),
                Err(e) => (None, Some(e.clone())),
            };
            self.log.record(
                Actor::Explorer(o.task_id.clone()),
                EventBody::Report(ReportPayload { task_id: o.task_id.clone(), report, error }),
            );
        }
        self.log.check()?;
        if let Some(o) = outcomes.iter().find(|o| o.result.is_err()) {
            let error = o.result.as_ref().err().cloned().unwrap_or_default();
            return Err(SupervisorError::TaskFailed { task: o.task_id.clone(), error });
        }
        self.reviewed_round = Some(round);
        let st = &self.log.state;
        if outcomes.is_empty() {
            return self.emit(EventBody::Review(ReviewPayload {
                round,
                reviewed: Vec::new(),
                hypotheses: st.hypotheses.clone(),
                justifications: Vec::new(),
                followups: Vec::new(),
                rejected: Vec::new(),
                roi_scores: Vec::new(),
            }));
        }
        let reports: Vec<ExplorerReport> = outcomes.into_iter().filter_map(|o| o.result.ok()).collect();
        let known_rois: BTreeSet<String> =
            st.received_reports.iter().flat_map(|r| &r.rois).map(|r| r.roi_id.clone()).collect();
        let context = ReviewContext {
            slide: self.slide_context.clone(),
            round,
            hypotheses: st.hypotheses.clone(),
            reports: reports.clone(),
            all_reports: st.received_reports.clone(),
            known_tasks: self.tasks.clone(),
        };
        let text = prompts::render(
            prompts::SUPERVISOR_REVIEW,
            &[
                ("round", round.to_string().as_str()),
                ("hypotheses", context.hypotheses.join(" > ").as_str()),
                ("reports", bullet_list(&reports, report_line).as_str()),
                ("schema", ReviewDecision::SCHEMA),
            ],
        );
        let request = self.request(
            Purpose::SupervisorReview,
            text,
            Vec::new(),
            serde_json::to_value(context).expect("plain data"),
        );
        let vetter = self.vetter();
        let (decision, _) = decide::<ReviewDecision>(
            self.policy,
            request,
            self.settings.retry,
            &mut self.log,
            &Actor::Supervisor,
            |d| {
                if let Some(s) = d.roi_scores.iter().find(|s| !known_rois.contains(&s.roi_id)) {
                    return Err(format!("score for unknown ROI {}", s.roi_id));
                }
                vetter.some_valid(&d.followups, &d.hypotheses)
            },
        )
        .map_err(SupervisorError::Review)?;
        self.log.check()?;
        let (followups, rejected) = vetter.vet(&decision.followups, &decision.hypotheses);
        self.tasks.extend(followups.iter().cloned());
        self.emit(EventBody::Review(ReviewPayload {
            round,
            reviewed: reports.iter().map(|r| r.task_id.clone()).collect(),
            hypotheses: decision.hypotheses,
            justifications: decision.justifications,
            followups,
            rejected,
            roi_scores: decision.roi_scores,
        }))
    }

    /// Selects the ROIs the final report may cite.
    pub fn collate_rois(&mut self) -> Result<Vec<RoiRecord>, SupervisorError> {
        let st = &self.log.state;
        if !st.finished || st.outcome.is_some() {
            return Err(SupervisorError::Protocol("collation before termination".into()));
        }
        let rois = select_rois(&st.received_reports, &st.roi_scores, &st.task_rounds);
        self.emit(EventBody::Collate(CollatePayload { rois: rois.clone() }))?;
        Ok(rois)
    }

    /// Obtains the differential from the captioner and drafts the report.
    pub fn finalize(&mut self) -> Result<DiagnosisReport, SupervisorError> {
        let st = &self.log.state;
        if !st.finished || st.outcome.is_some() {
            return Err(SupervisorError::Protocol("finalize before termination".into()));
        }
        let rois = st.collated.clone();
        let report = if rois.is_empty() {
            DiagnosisReport {
                primary_diagnosis: NON_DIAGNOSTIC.into(),
                differentials: ["insufficient sampling".into(), "no lesion identified".into()],
                confidence: Confidence::Low,
                narrative:
                    "No diagnostically relevant region was identified; sampling is insufficient for a diagnosis.".into(),
                cited_rois: Vec::new(),
            }
        } else {
            self.draft(rois)?
        };
        self.emit(EventBody::Finalize(FinalizePayload {
            outcome: "completed".into(),
            report: Some(report.clone()),
            reason: None,
        }))?;
        Ok(report)
    }

    fn draft(&mut self, rois: Vec<RoiRecord>) -> Result<DiagnosisReport, SupervisorError> {
        let mut images = Vec::with_capacity(rois.len());
        for roi in &rois {
            let image = self
                .slide
                .read_region(&roi.region, self.settings.max_edge)
                .map_err(|source| SupervisorError::Read { roi: roi.roi_id.clone(), source })?;
            images.push(RoiImage { roi: roi.clone(), image: Arc::new(image) });
        }
        let (ddx, request) = differential_diagnosis(
            self.captioner,
            &images,
            &self.clinical_context,
            self.settings.retry,
            &mut self.log,
            &Actor::Supervisor,
        )
        .map_err(SupervisorError::Diagnosis)?;
        self.log.check()?;
        let differentials = ddx.differential_pair();
        self.emit(EventBody::Diagnose(DiagnosePayload {
            request,
            primary: ddx.primary.clone(),
            differentials: differentials.clone(),
        }))?;

        let listing = bullet_list(&rois, |r| format!("[roi:{}] {}: {}", r.roi_id, r.region, r.caption));
        let text = prompts::render(
            prompts::SUPERVISOR_REPORT,
            &[
                ("primary", ddx.primary.as_str()),
                ("differentials", differentials.join("; ").as_str()),
                ("rois", listing.as_str()),
                ("schema", ReportDecision::SCHEMA),
            ],
        );
        let context = ReportContext {
            clinical_context: self.clinical_context.clone(),
            primary: ddx.primary.clone(),
            differentials: differentials.clone(),
            rois: rois.clone(),
        };
        let request = self.request(
            Purpose::SupervisorReport,
            text,
            Vec::new(),
            serde_json::to_value(context).expect("plain data"),
        );
        let (decision, _) = decide::<ReportDecision>(
            self.policy,
            request,
            self.settings.retry,
            &mut self.log,
            &Actor::Supervisor,
            |d| {
                let cited = citations(&d.narrative);
                if cited.is_empty() {
                    return Err("the narrative cites no ROI".into());
                }
                match cited.iter().find(|id| !rois.iter().any(|r| &r.roi_id == *id)) {
                    Some(id) => Err(format!("the narrative cites {id}, which is not among the collated ROIs")),
                    None => Ok(()),
                }
            },
        )
        .map_err(SupervisorError::Report)?;
        self.log.check()?;
        Ok(DiagnosisReport {
            primary_diagnosis: ddx.primary,
            differentials,
            confidence: decision.confidence,
            narrative: decision.narrative,
            cited_rois: rois,
        })
    }

    /// Ends the run without a report.
    pub fn abort(&mut self, reason: &str) -> Result<(), SupervisorError> {
        self.emit(EventBody::Finalize(FinalizePayload {
            outcome: "aborted".into(),
            report: None,
            reason: Some(reason.to_string()),
        }))
    }
}
