use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::protocol::{Confidence, RoiScore};
use crate::slide::RegionSpec;

/// A structured reply with a schema shown to the model and a validity check
/// beyond what deserialization enforces.
pub trait Decision: DeserializeOwned {
    const SCHEMA: &'static str;

    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

fn non_empty(field: &str, value: &str) -> Result<(), String> {
    if value.trim().is_empty() {
        Err(format!("`{field}` is empty"))
    } else {
        Ok(())
    }
}

fn hypotheses_ok(h: &[String]) -> Result<(), String> {
    if h.is_empty() || h.iter().any(|s| s.trim().is_empty()) {
        Err("`hypotheses` must hold at least one non-empty entry".into())
    } else {
        Ok(())
    }
}

/// A task as proposed by a policy, before it gets an id and validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProposal {
    #[serde(default)]
    pub tissue_box_index: Option<usize>,
    pub region: RegionSpec,
    pub features_to_document: String,
    #[serde(default)]
    pub budget: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitDecision {
    pub hypotheses: Vec<String>,
    pub plan: String,
    pub current_step: String,
    pub tasks: Vec<TaskProposal>,
}

impl Decision for InitDecision {
    const SCHEMA: &'static str = r#"{"hypotheses": [string, ...], "plan": string, "current_step": string, "tasks": [{"tissue_box_index": integer|null, "region": {"x0": int, "y0": int, "x1": int, "y1": int, "magnification": number}, "features_to_document": string, "budget": integer|null}, ...]}"#;

    fn check(&self) -> Result<(), String> {
        hypotheses_ok(&self.hypotheses)?;
        non_empty("plan", &self.plan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDecision {
    pub hypotheses: Vec<String>,
    pub plan: String,
    pub current_step: String,
    pub justification: String,
    pub finished: bool,
    pub tasks: Vec<TaskProposal>,
}

impl Decision for PlanDecision {
    const SCHEMA: &'static str = r#"{"hypotheses": [string, ...], "plan": string, "current_step": string, "justification": string, "finished": boolean, "tasks": [{"tissue_box_index": integer|null, "region": {"x0": int, "y0": int, "x1": int, "y1": int, "magnification": number}, "features_to_document": string, "budget": integer|null}, ...]}"#;

    fn check(&self) -> Result<(), String> {
        hypotheses_ok(&self.hypotheses)?;
        non_empty("justification", &self.justification)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub hypotheses: Vec<String>,
    pub justifications: Vec<String>,
    pub followups: Vec<TaskProposal>,
    #[serde(default)]
    pub roi_scores: Vec<RoiScore>,
}

impl Decision for ReviewDecision {
    const SCHEMA: &'static str = r#"{"hypotheses": [string, ...], "justifications": [string, ...], "followups": [task, ...], "roi_scores": [{"roi_id": string, "score": number in [0,1]}, ...]}"#;

    fn check(&self) -> Result<(), String> {
        hypotheses_ok(&self.hypotheses)?;
        if let Some(s) = self.roi_scores.iter().find(|s| !(0.0..=1.0).contains(&s.score)) {
            return Err(format!("score {} for {} is outside [0, 1]", s.score, s.roi_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDecision {
    pub confidence: Confidence,
    pub narrative: String,
}

impl Decision for ReportDecision {
    const SCHEMA: &'static str = r#"{"confidence": "Low"|"High", "narrative": string citing ROIs as [roi:<id>]}"#;

    fn check(&self) -> Result<(), String> {
        non_empty("narrative", &self.narrative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ExplorerDecision {
    View { region: RegionSpec, rationale: String },
    Submit { findings: String, key_rois: Vec<String> },
}

impl Decision for ExplorerDecision {
    const SCHEMA: &'static str = r#"{"action": "view", "region": {"x0": int, "y0": int, "x1": int, "y1": int, "magnification": number}, "rationale": string} or {"action": "submit", "findings": string, "key_rois": [view id, ...]}"#;

    fn check(&self) -> Result<(), String> {
        match self {
            ExplorerDecision::View { rationale, .. } => non_empty("rationale", rationale),
            ExplorerDecision::Submit { findings, .. } => non_empty("findings", findings),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferentialDecision {
    pub primary: String,
    pub differentials: Vec<String>,
}

impl DifferentialDecision {
    pub fn differential_pair(&self) -> [String; 2] {
        [self.differentials[0].clone(), self.differentials[1].clone()]
    }
}

impl Decision for DifferentialDecision {
    const SCHEMA: &'static str = r#"{"primary": string, "differentials": [string, string]}"#;

    fn check(&self) -> Result<(), String> {
        non_empty("primary", &self.primary)?;
        if self.differentials.len() != 2 {
            return Err(format!(
                "expected exactly 3 ranked diagnoses (primary + 2 differentials), got {}",
                1 + self.differentials.len()
            ));
        }
        for d in &self.differentials {
            non_empty("differentials", d)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::parse_decision;

    #[test]
    fn differential_needs_three_diagnoses() {
        let err = parse_decision::<DifferentialDecision>(r#"{"primary":"a","differentials":["b"]}"#).unwrap_err();
        assert!(err.contains("exactly 3"), "{err}");
        assert!(parse_decision::<DifferentialDecision>(r#"{"primary":"a","differentials":["b","c"]}"#).is_ok());
    }

    #[test]
    fn explorer_actions_tagged() {
        let d: ExplorerDecision = parse_decision(
            r#"{"action":"view","region":{"x0":0,"y0":0,"x1":896,"y1":896,"magnification":20},"rationale":"look"}"#,
        )
        .unwrap();
        assert!(matches!(d, ExplorerDecision::View { .. }));
        assert!(parse_decision::<ExplorerDecision>(r#"{"action":"fly"}"#).is_err());
    }

    #[test]
    fn scores_must_be_unit_interval() {
        let text = r#"{"hypotheses":["x"],"justifications":[],"followups":[],"roi_scores":[{"roi_id":"t001-v01","score":1.5}]}"#;
        assert!(parse_decision::<ReviewDecision>(text).is_err());
    }
}
