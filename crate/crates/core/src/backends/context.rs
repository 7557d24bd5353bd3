//! Structured request contexts. The prompt text describes the same content
//! for language models; scripted backends read these instead.

use serde::{Deserialize, Serialize};

use crate::protocol::{ExplorerReport, RoiRecord, TaskSpec};
use crate::slide::{PyramidSlide, RegionSpec, TissueBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideContext {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub base_magnification: f64,
    pub allowed_magnifications: Vec<f64>,
    pub tissue_boxes: Vec<TissueBox>,
}

impl SlideContext {
    pub fn new(slide: &PyramidSlide, tissue_boxes: &[TissueBox]) -> Self {
        Self {
            slide_id: slide.slide_id().to_string(),
            width: slide.base_width(),
            height: slide.base_height(),
            base_magnification: slide.base_magnification(),
            allowed_magnifications: slide.allowed_magnifications(),
            tissue_boxes: tissue_boxes.to_vec(),
        }
    }

    pub fn is_allowed(&self, mag: f64) -> bool {
        self.allowed_magnifications.iter().any(|m| (m - mag).abs() < 1e-9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitContext {
    pub slide: SlideContext,
    pub clinical_context: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanContext {
    pub slide: SlideContext,
    /// The round this decision opens.
    pub round: u32,
    pub max_rounds: u32,
    pub fan_out: usize,
    pub hypotheses: Vec<String>,
    pub plan: String,
    pub pending: Vec<TaskSpec>,
    pub reports: Vec<ExplorerReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewContext {
    pub slide: SlideContext,
    pub round: u32,
    pub hypotheses: Vec<String>,
    /// Reports received this round.
    pub reports: Vec<ExplorerReport>,
    /// Every report received so far, this round included.
    pub all_reports: Vec<ExplorerReport>,
    /// Every task created so far.
    pub known_tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub clinical_context: String,
    pub primary: String,
    pub differentials: [String; 2],
    pub rois: Vec<RoiRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: String,
    pub region: RegionSpec,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorerContext {
    pub slide: SlideContext,
    pub task: TaskSpec,
    pub views: Vec<ViewRecord>,
    pub views_remaining: u32,
    pub max_edge: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionContext {
    pub region: RegionSpec,
    pub features_to_document: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferentialContext {
    pub clinical_context: String,
    pub rois: Vec<RoiRecord>,
}
