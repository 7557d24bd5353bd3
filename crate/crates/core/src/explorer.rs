//! The explorer loop: pick a field inside the assigned region, caption it,
//! repeat until the policy submits or the view budget runs out.

use std::sync::Arc;

use crate::backends::context::{CaptionContext, ExplorerContext, SlideContext, ViewRecord};
use crate::backends::{
    caption_region, decide, prompts, CallError, CaptionError, ChatBackend, ChatImage, ChatRequest, ChatTurn, Decision,
    DecisionError, ExplorerDecision, Purpose, RetryPolicy, SweepSettings,
};
use crate::protocol::{Actor, CaptionPayload, EventBody, ExplorerReport, Recorder, RoiRecord, TaskSpec, ViewPayload};
use crate::raster::{digest, RasterImage};
use crate::slide::{annotate, PyramidSlide, RegionSpec, SlideError};

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorerState {
    pub task: TaskSpec,
    pub visited: Vec<RegionSpec>,
    pub captions: Vec<(RegionSpec, String)>,
    pub views_remaining: u32,
    pub done: bool,
    pub report: Option<ExplorerReport>,
}

impl ExplorerState {
    pub fn new(task: TaskSpec) -> Self {
        let views_remaining = task.budget;
        Self { task, visited: Vec::new(), captions: Vec::new(), views_remaining, done: false, report: None }
    }

    fn view_id(index: usize) -> String {
        format!("v{:02}", index + 1)
    }

    fn views(&self) -> Vec<ViewRecord> {
        self.captions
            .iter()
            .enumerate()
            .map(|(i, (region, caption))| ViewRecord {
                view_id: Self::view_id(i),
                region: *region,
                caption: caption.clone(),
            })
            .collect()
    }

    /// Report listing every visited field as an ROI, flagged if its view id
    /// is in `key`.
    fn compose(&self, findings: String, key: &[String]) -> ExplorerReport {
        let rois = self
            .captions
            .iter()
            .enumerate()
            .map(|(i, (region, caption))| {
                let view_id = Self::view_id(i);
                RoiRecord {
                    roi_id: format!("{}-{view_id}", self.task.task_id),
                    region: *region,
                    caption: caption.clone(),
                    source_task: self.task.task_id.clone(),
                    flagged_relevant: key.contains(&view_id),
                }
            })
            .collect();
        ExplorerReport { task_id: self.task.task_id.clone(), findings, rois, views_used: self.visited.len() as u32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NavigationAction {
    View { region: RegionSpec, rationale: String },
    Submit(ExplorerReport),
}

#[derive(Debug, thiserror::Error)]
pub enum ExplorerError {
    #[error("task {task}: {source}")]
    Read { task: String, source: SlideError },
    #[error("task {task}: {source}")]
    Caption { task: String, source: CaptionError },
    #[error("task {task}: {source}")]
    Policy { task: String, source: CallError },
    #[error("task {0} is already done")]
    Done(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorerSettings {
    pub max_edge: u32,
    pub retry: RetryPolicy,
    /// Flags captions when a forced submission has no policy input.
    pub sweep: SweepSettings,
}

/// Everything an explorer needs; shared read-only across concurrent tasks.
pub struct Explorer<'a> {
    pub slide: &'a PyramidSlide,
    pub slide_context: &'a SlideContext,
    pub captioner: &'a dyn ChatBackend,
    pub policy: &'a dyn ChatBackend,
    pub settings: &'a ExplorerSettings,
    /// Whole-slide thumbnail the visited fields are drawn onto.
    pub thumbnail: &'a RasterImage,
}

impl Explorer<'_> {
    fn check_view(&self, state: &ExplorerState, region: &RegionSpec) -> Result<(), String> {
        if state.views_remaining == 0 {
            return Err("view budget exhausted; submit findings".into());
        }
        let mut problems = self.slide.region_violations(region);
        if !state.task.region.bounds().contains(&region.bounds()) {
            problems.push(format!("field {region} leaves the assigned region {}", state.task.region));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    fn request(&self, state: &ExplorerState) -> ChatRequest {
        let views = state.views();
        let visited = if views.is_empty() {
            "(none)".to_string()
        } else {
            views.iter().map(|v| format!("{} {}: {}", v.view_id, v.region, v.caption)).collect::<Vec<_>>().join("\n")
        };
        let mags = format!("{:?}", self.slide_context.allowed_magnifications);
        let text = prompts::render(
            prompts::EXPLORER_STEP,
            &[
                ("task_id", state.task.task_id.as_str()),
                ("features", state.task.features_to_document.as_str()),
                ("region", state.task.region.to_string().as_str()),
                ("base_magnification", self.slide.base_magnification().to_string().as_str()),
                ("magnifications", mags.as_str()),
                ("remaining", state.views_remaining.to_string().as_str()),
                ("visited", visited.as_str()),
                ("schema", ExplorerDecision::SCHEMA),
            ],
        );
        let mut thumb = self.thumbnail.clone();
        annotate(&mut thumb, self.slide.base_width(), self.slide.base_height(), &state.visited);
        let context = ExplorerContext {
            slide: self.slide_context.clone(),
            task: state.task.clone(),
            views,
            views_remaining: state.views_remaining,
            max_edge: self.settings.max_edge,
        };
        ChatRequest::new(
            Purpose::ExplorerStep,
            vec![
                ChatTurn::system(prompts::EXPLORER_SYSTEM.trim()),
                ChatTurn::user_with_images(text, vec![ChatImage::new(Arc::new(thumb))]),
            ],
            serde_json::to_value(context).expect("plain data"),
        )
    }

    /// Asks the policy for the next action. Views are validated against the
    /// task region and the slide; an invalid reply gets one repair reprompt,
    /// after which the explorer submits what it has.
    pub fn step(
        &self,
        state: &mut ExplorerState,
        recorder: &mut dyn Recorder,
    ) -> Result<NavigationAction, ExplorerError> {
        if state.done {
            return Err(ExplorerError::Done(state.task.task_id.clone()));
        }
        let actor = Actor::Explorer(state.task.task_id.clone());
        let known: Vec<String> = (0..state.captions.len()).map(ExplorerState::view_id).collect();
        let decision =
            decide::<ExplorerDecision>(self.policy, self.request(state), self.settings.retry, recorder, &actor, |d| {
                match d {
                    ExplorerDecision::View { region, .. } => self.check_view(state, region),
                    ExplorerDecision::Submit { key_rois, .. } => match key_rois.iter().find(|k| !known.contains(k)) {
                        Some(k) => Err(format!("unknown view id {k}")),
                        None => Ok(()),
                    },
                }
            });
        let action = match decision {
            Ok((ExplorerDecision::View { region, rationale }, _)) => NavigationAction::View { region, rationale },
            Ok((ExplorerDecision::Submit { findings, key_rois }, _)) => {
                NavigationAction::Submit(state.compose(findings, &key_rois))
            }
            Err(DecisionError::Invalid { reason, .. }) => {
                let key: Vec<String> = state
                    .views()
                    .into_iter()
                    .filter(|v| self.settings.sweep.flags(&v.caption))
                    .map(|v| v.view_id)
                    .collect();
                let findings = format!(
                    "submitted after an invalid navigation decision ({reason}); {} field(s) examined",
                    state.visited.len()
                );
                NavigationAction::Submit(state.compose(findings, &key))
            }
            Err(DecisionError::Call(source)) => {
                return Err(ExplorerError::Policy { task: state.task.task_id.clone(), source })
            }
            Err(DecisionError::Precondition(reason)) => {
                unreachable!("explorer decisions have no precondition: {reason}")
            }
        };
        if let NavigationAction::Submit(report) = &action {
            state.done = true;
            state.report = Some(report.clone());
        }
        Ok(action)
    }

    /// Reads, records and captions one validated field.
    pub fn view(
        &self,
        state: &mut ExplorerState,
        region: RegionSpec,
        rationale: String,
        recorder: &mut dyn Recorder,
    ) -> Result<(), ExplorerError> {
        let task_id = state.task.task_id.clone();
        let actor = Actor::Explorer(task_id.clone());
        let max_edge = self.settings.max_edge;
        let image = self
            .slide
            .read_region(&region, max_edge)
            .map_err(|source| ExplorerError::Read { task: task_id.clone(), source })?;
        let step = state.visited.len() as u32 + 1;
        recorder.record(
            actor.clone(),
            EventBody::View(ViewPayload {
                task_id: task_id.clone(),
                step,
                region,
                rationale,
                width: image.width(),
                height: image.height(),
                level: self.slide.region_level(&region, max_edge),
                image_digest: digest(&image),
            }),
        );
        state.visited.push(region);
        state.views_remaining -= 1;

        let prompt = prompts::render(
            prompts::CAPTION_USER,
            &[
                ("region", region.bounds().to_string().as_str()),
                ("magnification", region.magnification.to_string().as_str()),
                ("features", state.task.features_to_document.as_str()),
            ],
        );
        let context = CaptionContext { region, features_to_document: state.task.features_to_document.clone() };
        let (caption, request) = caption_region(
            self.captioner,
            Arc::new(image),
            &prompt,
            serde_json::to_value(context).expect("plain data"),
            self.settings.retry,
            recorder,
        )
        .map_err(|source| ExplorerError::Caption { task: task_id.clone(), source })?;
        recorder.record(
            actor,
            EventBody::Caption(CaptionPayload { task_id, step, region, request, caption: caption.clone() }),
        );
        state.captions.push((region, caption));
        Ok(())
    }

    /// Runs a task to completion.
    pub fn run_task(&self, task: &TaskSpec, recorder: &mut dyn Recorder) -> Result<ExplorerReport, ExplorerError> {
        let mut state = ExplorerState::new(task.clone());
        loop {
            match self.step(&mut state, recorder)? {
                NavigationAction::View { region, rationale } => self.view(&mut state, region, rationale, recorder)?,
                NavigationAction::Submit(report) => return Ok(report),
            }
        }
    }
}
