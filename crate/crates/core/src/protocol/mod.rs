//! Everything the agents exchange: tasks, reports, ROI records, the final
//! diagnosis, and the append-only trace those values travel through.

mod conformance;
mod state;
mod trace;
mod validate;

pub use conformance::{check_trace, TraceViolation};
pub use state::{replay_states, FoldError, RunOutcome, SupervisorState};
pub use trace::{
    decode_event, encode_event, read_trace, write_trace, Actor, CaptionPayload, Clock, CollatePayload, DiagnosePayload,
    EventBody, EventBuffer, EventKind, FinalizePayload, ImageLog, InitPayload, PlanPayload, Recorder, RejectedProposal,
    RepairPayload, ReportPayload, RequestLog, RetryPayload, ReviewPayload, RoiScore, TaskIssuedPayload, TraceAppender,
    TraceError, TraceEvent, ViewPayload,
};
pub use validate::{modality_violation, validate_task, UNAVAILABLE_MODALITIES};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::slide::RegionSpec;

/// Maximum number of ROIs a diagnosis may cite.
pub const MAX_CITED_ROIS: usize = 10;

/// An explorer assignment issued by the supervisor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// Tissue region the task belongs to; `None` for whole-slide tasks.
    pub tissue_box_index: Option<usize>,
    /// Bounds plus the magnification the task should be carried out at.
    pub region: RegionSpec,
    pub features_to_document: String,
    /// Digest of the supervisor's current hypotheses.
    pub context: String,
    /// Maximum number of region views.
    pub budget: u32,
}

impl TaskSpec {
    pub fn magnification(&self) -> f64 {
        self.region.magnification
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub roi_id: String,
    pub region: RegionSpec,
    pub caption: String,
    pub source_task: String,
    pub flagged_relevant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorerReport {
    pub task_id: String,
    pub findings: String,
    pub rois: Vec<RoiRecord>,
    pub views_used: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Confidence {
    Low,
    High,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::Low => "Low",
            Confidence::High => "High",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub primary_diagnosis: String,
    pub differentials: [String; 2],
    pub confidence: Confidence,
    /// Findings narrative; ROIs are cited as `[roi:<id>]`.
    pub narrative: String,
    pub cited_rois: Vec<RoiRecord>,
}

impl DiagnosisReport {
    /// ROI ids cited in the narrative, in order of first appearance.
    pub fn narrative_citations(&self) -> Vec<String> {
        citations(&self.narrative)
    }

    /// Problems with the report's internal consistency.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.primary_diagnosis.trim().is_empty() {
            out.push("primary diagnosis is empty".to_string());
        }
        if self.differentials.iter().any(|d| d.trim().is_empty()) {
            out.push("differential diagnosis is empty".to_string());
        }
        if self.cited_rois.len() > MAX_CITED_ROIS {
            out.push(format!("{} ROIs cited, at most {MAX_CITED_ROIS} allowed", self.cited_rois.len()));
        }
        for id in self.narrative_citations() {
            if !self.cited_rois.iter().any(|r| r.roi_id == id) {
                out.push(format!("narrative cites unknown ROI {id}"));
            }
        }
        out
    }
}

/// Extracts `[roi:<id>]` citations from free text.
pub fn citations(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("[roi:") {
        rest = &rest[i + 5..];
        let Some(end) = rest.find(']') else { break };
        let id = rest[..end].trim().to_string();
        if !id.is_empty() && !out.contains(&id) {
            out.push(id);
        }
        rest = &rest[end..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn citations_parsed_in_order() {
        let text = "Sheets of cells [roi:t002-v01] and glands [roi:t001-v03]; again [roi:t002-v01]. [roi:";
        assert_eq!(citations(text), vec!["t002-v01", "t001-v03"]);
    }

    #[test]
    fn report_violations() {
        let roi = RoiRecord {
            roi_id: "t001-v01".into(),
            region: RegionSpec::new(0, 0, 10, 10, 20.0),
            caption: "x".into(),
            source_task: "t001".into(),
            flagged_relevant: true,
        };
        let mut r = DiagnosisReport {
            primary_diagnosis: "melanoma".into(),
            differentials: ["a".into(), "b".into()],
            confidence: Confidence::High,
            narrative: "see [roi:t001-v01]".into(),
            cited_rois: vec![roi],
        };
        assert!(r.violations().is_empty());
        r.narrative.push_str(" and [roi:t009-v09]");
        assert_eq!(r.violations(), vec!["narrative cites unknown ROI t009-v09"]);
    }
}
