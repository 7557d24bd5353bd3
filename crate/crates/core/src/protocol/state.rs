//! Supervisor state as a fold over trace events. The live supervisor and
//! trace replay both go through [`SupervisorState::apply`], so a recorded
//! trace reproduces the exact state sequence of the run that wrote it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trace::{EventBody, TraceEvent};
use super::{DiagnosisReport, ExplorerReport, RoiRecord, TaskSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("event {seq}: {message}")]
pub struct FoldError {
    pub seq: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed { report: DiagnosisReport },
    Aborted { reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisorState {
    pub initialized: bool,
    pub hypotheses: Vec<String>,
    pub plan: String,
    pub current_step: String,
    /// Validated tasks waiting to be issued.
    pub pending_tasks: Vec<TaskSpec>,
    /// Tasks issued whose reports have not arrived yet.
    pub active_tasks: Vec<TaskSpec>,
    pub received_reports: Vec<ExplorerReport>,
    /// `(task_id, error)` for tasks that failed.
    pub failed_tasks: Vec<(String, String)>,
    pub justifications: Vec<String>,
    pub finished: bool,
    /// Number of plan decisions taken.
    pub round: u32,
    /// Round each task was issued in.
    pub task_rounds: BTreeMap<String, u32>,
    pub roi_scores: BTreeMap<String, f64>,
    /// Number of task ids handed out so far.
    pub tasks_created: u32,
    pub collated: Vec<RoiRecord>,
    pub outcome: Option<RunOutcome>,
}

impl SupervisorState {
    /// Id the next created task receives.
    pub fn next_task_id(&self) -> String {
        format!("t{:03}", self.tasks_created + 1)
    }

    /// All tasks the supervisor has issued, in issue order.
    pub fn issued_count(&self) -> usize {
        self.task_rounds.len()
    }

    fn create(&mut self, seq: u64, tasks: &[TaskSpec]) -> Result<(), FoldError> {
        for t in tasks {
            let expected = self.next_task_id();
            if t.task_id != expected {
                return Err(FoldError {
                    seq,
                    message: format!("task id {} out of order, expected {expected}", t.task_id),
                });
            }
            self.tasks_created += 1;
            self.pending_tasks.push(t.clone());
        }
        Ok(())
    }

    pub fn apply(&mut self, event: &TraceEvent) -> Result<(), FoldError> {
        let seq = event.seq;
        let err = |message: String| FoldError { seq, message };
        if self.outcome.is_some() {
            return Err(err("event after finalize".into()));
        }
        let pre_init_ok = matches!(
            event.body,
            EventBody::Init(_) | EventBody::Retry(_) | EventBody::Repair(_) | EventBody::Finalize(_)
        );
        if !self.initialized && !pre_init_ok {
            return Err(err(format!("{} before init", event.kind().as_str())));
        }
        match &event.body {
            EventBody::Init(p) => {
                if self.initialized {
                    return Err(err("duplicate init".into()));
                }
                self.initialized = true;
                self.hypotheses = p.hypotheses.clone();
                self.plan = p.plan.clone();
                self.current_step = p.current_step.clone();
                self.create(seq, &p.initial_tasks)?;
            }
            EventBody::Plan(p) => {
                if !self.active_tasks.is_empty() {
                    return Err(err("plan while tasks are still active".into()));
                }
                if p.round != self.round + 1 {
                    return Err(err(format!("plan round {} after round {}", p.round, self.round)));
                }
                self.round = p.round;
                self.hypotheses = p.hypotheses.clone();
                self.plan = p.plan.clone();
                self.current_step = p.current_step.clone();
                self.justifications.extend(p.justifications.iter().cloned());
                self.finished = p.finished;
                for id in &p.dropped {
                    let before = self.pending_tasks.len();
                    self.pending_tasks.retain(|t| &t.task_id != id);
                    if self.pending_tasks.len() == before {
                        return Err(err(format!("dropped unknown pending task {id}")));
                    }
                }
                self.create(seq, &p.new_tasks)?;
            }
            EventBody::TaskIssued(p) => {
                if self.finished {
                    return Err(err("task issued after termination".into()));
                }
                let i = self
                    .pending_tasks
                    .iter()
                    .position(|t| t.task_id == p.task.task_id)
                    .ok_or_else(|| err(format!("issued task {} was never queued", p.task.task_id)))?;
                let task = self.pending_tasks.remove(i);
                if task != p.task {
                    return Err(err(format!("issued task {} differs from the queued one", task.task_id)));
                }
                self.task_rounds.insert(task.task_id.clone(), p.round);
                self.active_tasks.push(task);
            }
            EventBody::Report(p) => {
                let i = self
                    .active_tasks
                    .iter()
                    .position(|t| t.task_id == p.task_id)
                    .ok_or_else(|| err(format!("report for unknown or inactive task {}", p.task_id)))?;
                self.active_tasks.remove(i);
                match (&p.report, &p.error) {
                    (Some(r), None) if r.task_id == p.task_id => self.received_reports.push(r.clone()),
                    (None, Some(e)) => self.failed_tasks.push((p.task_id.clone(), e.clone())),
                    _ => return Err(err(format!("report for {} must carry exactly one of report/error", p.task_id))),
                }
            }
            EventBody::Review(p) => {
                if !self.active_tasks.is_empty() {
                    return Err(err("review while tasks are still active".into()));
                }
                if p.round != self.round {
                    return Err(err(format!("review of round {} during round {}", p.round, self.round)));
                }
                self.hypotheses = p.hypotheses.clone();
                self.justifications.extend(p.justifications.iter().cloned());
                for s in &p.roi_scores {
                    self.roi_scores.insert(s.roi_id.clone(), s.score);
                }
                self.create(seq, &p.followups)?;
            }
            EventBody::Collate(p) => self.collated = p.rois.clone(),
            EventBody::Finalize(p) => {
                self.outcome = Some(match (p.outcome.as_str(), &p.report, &p.reason) {
                    ("completed", Some(r), _) => RunOutcome::Completed { report: r.clone() },
                    ("aborted", None, Some(reason)) => RunOutcome::Aborted { reason: reason.clone() },
                    _ => return Err(err(format!("malformed finalize outcome `{}`", p.outcome))),
                });
            }
            EventBody::View(_)
            | EventBody::Caption(_)
            | EventBody::Diagnose(_)
            | EventBody::Retry(_)
            | EventBody::Repair(_) => {}
        }
        Ok(())
    }
}

/// State after each event of `events`, starting from the empty state.
pub fn replay_states(events: &[TraceEvent]) -> Result<Vec<SupervisorState>, FoldError> {
    let mut state = SupervisorState::default();
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        state.apply(e)?;
        out.push(state.clone());
    }
    Ok(out)
}
