//! Structural checks over a complete trace.

use std::collections::BTreeMap;
use std::fmt;

use super::state::SupervisorState;
use super::trace::{EventBody, EventKind, TraceEvent};
use super::MAX_CITED_ROIS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceViolation {
    pub seq: Option<u64>,
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for TraceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(s) => write!(f, "[{}] event {s}: {}", self.rule, self.message),
            None => write!(f, "[{}] {}", self.rule, self.message),
        }
    }
}

/// Checks that a finished trace obeys the supervisor/explorer protocol:
/// gapless `seq`, init first and finalize last, plan/review alternation,
/// no task issued after termination, exactly one report per issued task,
/// views before their task's report, view accounting, the ROI cap, and a
/// clean state fold.
pub fn check_trace(events: &[TraceEvent]) -> Vec<TraceViolation> {
    let mut out = Vec::new();
    let mut v = |seq: Option<u64>, rule: &'static str, message: String| out.push(TraceViolation { seq, rule, message });

    if events.is_empty() {
        v(None, "structure", "trace is empty".into());
        return out;
    }
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 {
            v(Some(e.seq), "gapless-seq", format!("expected seq {i}"));
            break;
        }
    }
    let last = events.last().expect("non-empty");
    let aborted = matches!(&last.body, EventBody::Finalize(p) if p.outcome == "aborted");
    if last.kind() != EventKind::Finalize {
        v(Some(last.seq), "structure", "last event is not finalize".into());
    }
    // Retries and repairs of the init decision precede the init event; a
    // run whose init failed ends with an aborted finalize and no init.
    let head = events.iter().position(|e| !matches!(e.kind(), EventKind::Retry | EventKind::Repair));
    let init_at = match head {
        Some(i) if events[i].kind() == EventKind::Init => Some(i),
        Some(i) if i == events.len() - 1 && aborted => None,
        Some(i) => {
            v(Some(events[i].seq), "structure", "first event is not init".into());
            Some(i)
        }
        None => None,
    };
    for (i, e) in events[..events.len() - 1].iter().enumerate() {
        if (e.kind() == EventKind::Init && Some(i) != init_at) || e.kind() == EventKind::Finalize {
            v(Some(e.seq), "structure", format!("unexpected {} event", e.kind().as_str()));
        }
    }

    // Plan and review strictly alternate, starting with plan.
    let mut expect_plan = true;
    let (mut plans, mut reviews) = (0usize, 0usize);
    for e in events {
        match e.kind() {
            EventKind::Plan => {
                if !expect_plan {
                    v(Some(e.seq), "plan-review", "plan without a review of the previous round".into());
                }
                plans += 1;
                expect_plan = false;
            }
            EventKind::Review => {
                if expect_plan {
                    v(Some(e.seq), "plan-review", "review without a preceding plan".into());
                }
                reviews += 1;
                expect_plan = true;
            }
            _ => {}
        }
    }
    if plans != reviews && !(aborted && plans == reviews + 1) {
        v(None, "plan-review", format!("{plans} plan events but {reviews} review events"));
    }
    if plans == 0 && !aborted && init_at.is_some() {
        v(None, "plan-review", "no plan events".into());
    }

    let mut finished_at: Option<u64> = None;
    let mut issued: BTreeMap<String, u64> = BTreeMap::new();
    let mut reported: BTreeMap<String, u64> = BTreeMap::new();
    let mut views: BTreeMap<String, u32> = BTreeMap::new();
    let mut views_used_total = 0u64;
    for e in events {
        match &e.body {
            EventBody::Plan(p) if p.finished => finished_at = finished_at.or(Some(e.seq)),
            EventBody::TaskIssued(p) => {
                if finished_at.is_some() {
                    v(Some(e.seq), "finished", format!("task {} issued after termination", p.task.task_id));
                }
                if issued.insert(p.task.task_id.clone(), e.seq).is_some() {
                    v(Some(e.seq), "task-report", format!("task {} issued twice", p.task.task_id));
                }
            }
            EventBody::View(p) => {
                if !issued.contains_key(&p.task_id) {
                    v(Some(e.seq), "causality", format!("view for unissued task {}", p.task_id));
                }
                if reported.contains_key(&p.task_id) {
                    v(Some(e.seq), "causality", format!("view for task {} after its report", p.task_id));
                }
                *views.entry(p.task_id.clone()).or_default() += 1;
            }
            EventBody::Caption(p) => {
                if reported.contains_key(&p.task_id) {
                    v(Some(e.seq), "causality", format!("caption for task {} after its report", p.task_id));
                }
            }
            EventBody::Report(p) => {
                if !issued.contains_key(&p.task_id) {
                    v(Some(e.seq), "task-report", format!("report for unissued task {}", p.task_id));
                }
                if reported.insert(p.task_id.clone(), e.seq).is_some() {
                    v(Some(e.seq), "task-report", format!("second report for task {}", p.task_id));
                }
                if let Some(r) = &p.report {
                    views_used_total += r.views_used as u64;
                    let seen = views.get(&p.task_id).copied().unwrap_or(0);
                    if r.views_used != seen {
                        v(
                            Some(e.seq),
                            "view-accounting",
                            format!("task {} reports {} views, trace has {seen}", p.task_id, r.views_used),
                        );
                    }
                    if r.rois.iter().any(|roi| roi.source_task != p.task_id) {
                        v(Some(e.seq), "task-report", format!("task {} reports an ROI from another task", p.task_id));
                    }
                }
            }
            EventBody::Collate(p) if p.rois.len() > MAX_CITED_ROIS => {
                v(Some(e.seq), "roi-cap", format!("{} ROIs collated", p.rois.len()));
            }
            EventBody::Finalize(p) => {
                if let Some(r) = &p.report {
                    if r.cited_rois.len() > MAX_CITED_ROIS {
                        v(Some(e.seq), "roi-cap", format!("{} ROIs cited", r.cited_rois.len()));
                    }
                    for problem in r.violations() {
                        v(Some(e.seq), "report", problem);
                    }
                }
            }
            _ => {}
        }
    }
    for (task, seq) in &issued {
        if !reported.contains_key(task) {
            v(Some(*seq), "task-report", format!("task {task} has no report"));
        }
    }
    let successful_views: u64 = views
        .iter()
        .filter(|(t, _)| {
            events.iter().any(|e| matches!(&e.body, EventBody::Report(p) if &p.task_id == *t && p.report.is_some()))
        })
        .map(|(_, n)| *n as u64)
        .sum();
    if successful_views != views_used_total {
        v(
            None,
            "view-accounting",
            format!("reports account for {views_used_total} views, trace has {successful_views}"),
        );
    }

    let mut state = SupervisorState::default();
    for e in events {
        if let Err(err) = state.apply(e) {
            v(Some(err.seq), "fold", err.message);
            break;
        }
    }
    out
}
