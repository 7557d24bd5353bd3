use std::sync::OnceLock;

use regex::Regex;

use super::TaskSpec;
use crate::slide::PyramidSlide;

/// Modalities the system cannot provide. Tasks asking for them are refused.
pub const UNAVAILABLE_MODALITIES: [&str; 6] =
    ["IHC", "immunohistochemistry", "immunostain", "special stain", "special stains", "molecular testing"];

fn modality_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(ihc|immunohistochemi\w*|immunostain\w*|special\s+stains?|molecular\s+test\w*)\b")
            .expect("static pattern")
    })
}

/// The first unavailable modality named in `text`, as written.
pub fn modality_violation(text: &str) -> Option<String> {
    modality_pattern().find(text).map(|m| m.as_str().to_string())
}

/// Checks a task against the slide and the available modalities, returning
/// every violation at once.
pub fn validate_task(task: &TaskSpec, slide: &PyramidSlide) -> Result<(), Vec<String>> {
    let mut out = Vec::new();
    if task.task_id.trim().is_empty() {
        out.push("task id is empty".to_string());
    }
    out.extend(slide.region_violations(&task.region));
    if task.budget == 0 {
        out.push("budget must be at least one view".to_string());
    }
    if task.features_to_document.trim().is_empty() {
        out.push("features to document are empty".to_string());
    }
    if let Some(m) = modality_violation(&task.features_to_document) {
        out.push(format!("modality not available: {m}"));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
