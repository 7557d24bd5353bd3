//! Prompt templates. Each template is a versioned text file under
//! `prompts/`; placeholders are written `{{name}}`.

/// Bumped whenever any template changes meaning.
pub const PROMPT_VERSION: u32 = 1;

pub const CAPTION_SYSTEM: &str = include_str!("../../prompts/caption_system.v1.txt");
pub const CAPTION_USER: &str = include_str!("../../prompts/caption_user.v1.txt");
pub const DIFFERENTIAL_SYSTEM: &str = include_str!("../../prompts/differential_system.v1.txt");
pub const DIFFERENTIAL_USER: &str = include_str!("../../prompts/differential_user.v1.txt");
pub const SUPERVISOR_SYSTEM: &str = include_str!("../../prompts/supervisor_system.v1.txt");
pub const SUPERVISOR_INIT: &str = include_str!("../../prompts/supervisor_init.v1.txt");
pub const SUPERVISOR_PLAN: &str = include_str!("../../prompts/supervisor_plan.v1.txt");
pub const SUPERVISOR_REVIEW: &str = include_str!("../../prompts/supervisor_review.v1.txt");
pub const SUPERVISOR_REPORT: &str = include_str!("../../prompts/supervisor_report.v1.txt");
pub const EXPLORER_SYSTEM: &str = include_str!("../../prompts/explorer_system.v1.txt");
pub const EXPLORER_STEP: &str = include_str!("../../prompts/explorer_step.v1.txt");
pub const REPAIR: &str = include_str!("../../prompts/repair.v1.txt");

/// Substitutes `{{key}}` placeholders. Unknown placeholders are left as is.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}
