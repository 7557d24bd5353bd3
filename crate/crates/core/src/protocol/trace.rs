//! JSON-lines trace: one event per line, `seq` first.
//!
//! Events are appended through a single [`TraceAppender`], which assigns a
//! gapless `seq`. Work that runs concurrently (explorer tasks) records into
//! its own [`EventBuffer`]; buffers are committed in a fixed order after each
//! round so traces from deterministic backends are byte-identical.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use super::{DiagnosisReport, ExplorerReport, RoiRecord, TaskSpec};
use crate::anyres::ImageTokenPlan;
use crate::slide::{RegionSpec, TissueBox};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Who produced an event.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Actor {
    Supervisor,
    Explorer(String),
    Backend,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Supervisor => f.write_str("supervisor"),
            Actor::Explorer(task) => write!(f, "explorer:{task}"),
            Actor::Backend => f.write_str("backend"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervisor" => Ok(Actor::Supervisor),
            "backend" => Ok(Actor::Backend),
            _ => match s.strip_prefix("explorer:") {
                Some(task) if !task.is_empty() => Ok(Actor::Explorer(task.to_string())),
                _ => Err(format!("unknown actor `{s}`")),
            },
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `Option` that must be present in the input (possibly as `null`).
fn required<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<T>, D::Error> {
    Option::<T>::deserialize(d)
}

/// A proposed task that failed validation, with every violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedProposal {
    pub region: RegionSpec,
    pub features_to_document: String,
    pub violations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPayload {
    pub slide_id: String,
    pub base_width: u32,
    pub base_height: u32,
    pub base_magnification: f64,
    pub tissue_boxes: Vec<TissueBox>,
    pub clinical_context: String,
    pub hypotheses: Vec<String>,
    pub plan: String,
    pub current_step: String,
    pub initial_tasks: Vec<TaskSpec>,
    pub rejected: Vec<RejectedProposal>,
    pub thumbnail_digest: String,
    /// Run configuration, so a trace can be re-executed.
    pub config: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanPayload {
    pub round: u32,
    pub hypotheses: Vec<String>,
    pub plan: String,
    pub current_step: String,
    pub justifications: Vec<String>,
    pub finished: bool,
    /// Newly proposed tasks that passed validation; queued as pending.
    pub new_tasks: Vec<TaskSpec>,
    pub rejected: Vec<RejectedProposal>,
    /// Pending task ids discarded by this decision.
    pub dropped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskIssuedPayload {
    pub round: u32,
    pub task: TaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPayload {
    pub task_id: String,
    pub step: u32,
    pub region: RegionSpec,
    pub rationale: String,
    pub width: u32,
    pub height: u32,
    pub level: usize,
    pub image_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageLog {
    pub digest: String,
    pub width: u32,
    pub height: u32,
    pub tokens: usize,
}

/// A backend request as logged: text in full, images by digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub purpose: String,
    pub backend: String,
    pub prompt: String,
    pub images: Vec<ImageLog>,
    pub token_plan: ImageTokenPlan,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPayload {
    pub task_id: String,
    pub step: u32,
    pub region: RegionSpec,
    pub request: RequestLog,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub task_id: String,
    #[serde(deserialize_with = "required")]
    pub report: Option<ExplorerReport>,
    #[serde(deserialize_with = "required")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiScore {
    pub roi_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewPayload {
    pub round: u32,
    pub reviewed: Vec<String>,
    pub hypotheses: Vec<String>,
    pub justifications: Vec<String>,
    pub followups: Vec<TaskSpec>,
    pub rejected: Vec<RejectedProposal>,
    pub roi_scores: Vec<RoiScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollatePayload {
    pub rois: Vec<RoiRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosePayload {
    pub request: RequestLog,
    pub primary: String,
    pub differentials: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalizePayload {
    /// `completed` or `aborted`.
    pub outcome: String,
    #[serde(deserialize_with = "required")]
    pub report: Option<DiagnosisReport>,
    #[serde(deserialize_with = "required")]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPayload {
    pub call: String,
    pub attempt: u32,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairPayload {
    pub call: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Init,
    Plan,
    TaskIssued,
    View,
    Caption,
    Report,
    Review,
    Collate,
    Diagnose,
    Finalize,
    Retry,
    Repair,
}

impl EventKind {
    pub const ALL: [EventKind; 12] = [
        EventKind::Init,
        EventKind::Plan,
        EventKind::TaskIssued,
        EventKind::View,
        EventKind::Caption,
        EventKind::Report,
        EventKind::Review,
        EventKind::Collate,
        EventKind::Diagnose,
        EventKind::Finalize,
        EventKind::Retry,
        EventKind::Repair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Init => "init",
            EventKind::Plan => "plan",
            EventKind::TaskIssued => "task_issued",
            EventKind::View => "view",
            EventKind::Caption => "caption",
            EventKind::Report => "report",
            EventKind::Review => "review",
            EventKind::Collate => "collate",
            EventKind::Diagnose => "diagnose",
            EventKind::Finalize => "finalize",
            EventKind::Retry => "retry",
            EventKind::Repair => "repair",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventBody {
    Init(InitPayload),
    Plan(PlanPayload),
    TaskIssued(TaskIssuedPayload),
    View(ViewPayload),
    Caption(CaptionPayload),
    Report(ReportPayload),
    Review(ReviewPayload),
    Collate(CollatePayload),
    Diagnose(DiagnosePayload),
    Finalize(FinalizePayload),
    Retry(RetryPayload),
    Repair(RepairPayload),
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::Init(_) => EventKind::Init,
            EventBody::Plan(_) => EventKind::Plan,
            EventBody::TaskIssued(_) => EventKind::TaskIssued,
            EventBody::View(_) => EventKind::View,
            EventBody::Caption(_) => EventKind::Caption,
            EventBody::Report(_) => EventKind::Report,
            EventBody::Review(_) => EventKind::Review,
            EventBody::Collate(_) => EventKind::Collate,
            EventBody::Diagnose(_) => EventKind::Diagnose,
            EventBody::Finalize(_) => EventKind::Finalize,
            EventBody::Retry(_) => EventKind::Retry,
            EventBody::Repair(_) => EventKind::Repair,
        }
    }

    fn payload(&self) -> Value {
        let v = match self {
            EventBody::Init(p) => serde_json::to_value(p),
            EventBody::Plan(p) => serde_json::to_value(p),
            EventBody::TaskIssued(p) => serde_json::to_value(p),
            EventBody::View(p) => serde_json::to_value(p),
            EventBody::Caption(p) => serde_json::to_value(p),
            EventBody::Report(p) => serde_json::to_value(p),
            EventBody::Review(p) => serde_json::to_value(p),
            EventBody::Collate(p) => serde_json::to_value(p),
            EventBody::Diagnose(p) => serde_json::to_value(p),
            EventBody::Finalize(p) => serde_json::to_value(p),
            EventBody::Retry(p) => serde_json::to_value(p),
            EventBody::Repair(p) => serde_json::to_value(p),
        };
        v.expect("payloads are plain data")
    }

    fn from_payload(kind: EventKind, payload: Value) -> Result<Self, serde_json::Error> {
        fn p<T: DeserializeOwned>(v: Value) -> Result<T, serde_json::Error> {
            serde_json::from_value(v)
        }
        Ok(match kind {
            EventKind::Init => EventBody::Init(p(payload)?),
            EventKind::Plan => EventBody::Plan(p(payload)?),
            EventKind::TaskIssued => EventBody::TaskIssued(p(payload)?),
            EventKind::View => EventBody::View(p(payload)?),
            EventKind::Caption => EventBody::Caption(p(payload)?),
            EventKind::Report => EventBody::Report(p(payload)?),
            EventKind::Review => EventBody::Review(p(payload)?),
            EventKind::Collate => EventBody::Collate(p(payload)?),
            EventKind::Diagnose => EventBody::Diagnose(p(payload)?),
            EventKind::Finalize => EventBody::Finalize(p(payload)?),
            EventKind::Retry => EventBody::Retry(p(payload)?),
            EventKind::Repair => EventBody::Repair(p(payload)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub seq: u64,
    /// Milliseconds since the Unix epoch, or `seq` under a logical clock.
    pub wall_time: u64,
    pub actor: Actor,
    pub body: EventBody,
}

impl TraceEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}

#[derive(Serialize)]
struct Line<'a> {
    seq: u64,
    wall_time: u64,
    actor: &'a Actor,
    kind: &'static str,
    payload: Value,
}

pub fn encode_event(event: &TraceEvent) -> String {
    serde_json::to_string(&Line {
        seq: event.seq,
        wall_time: event.wall_time,
        actor: &event.actor,
        kind: event.kind().as_str(),
        payload: event.body.payload(),
    })
    .expect("trace lines serialise")
}

/// Decodes one line. Missing required fields are errors, never defaulted.
pub fn decode_event(line: &str) -> Result<TraceEvent, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed json: {e}"))?;
    let Value::Object(mut obj) = value else {
        return Err("event is not a json object".into());
    };
    let mut take = |key: &str| obj.remove(key).ok_or_else(|| format!("missing field `{key}`"));
    let seq = take("seq")?.as_u64().ok_or("`seq` must be a non-negative integer")?;
    let wall_time = take("wall_time")?.as_u64().ok_or("`wall_time` must be a non-negative integer")?;
    let actor: Actor = take("actor")?.as_str().ok_or("`actor` must be a string")?.parse()?;
    let kind_value = take("kind")?;
    let kind_str = kind_value.as_str().ok_or("`kind` must be a string")?;
    let kind = EventKind::parse(kind_str).ok_or_else(|| format!("unknown event kind `{kind_str}`"))?;
    let payload = take("payload")?;
    let body = EventBody::from_payload(kind, payload).map_err(|e| format!("invalid {kind_str} payload: {e}"))?;
    Ok(TraceEvent { seq, wall_time, actor, body })
}

/// Reads a whole trace; errors carry 1-based line numbers.
pub fn read_trace(reader: impl BufRead) -> Result<Vec<TraceEvent>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_event(&line).map_err(|message| TraceError::Parse { line: i + 1, message })?);
    }
    Ok(out)
}

pub fn write_trace(mut writer: impl Write, events: &[TraceEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(writer, "{}", encode_event(e))?;
    }
    writer.flush()
}

/// Source of `wall_time` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// `wall_time == seq`; makes traces reproducible.
    Logical,
    System,
}

impl Clock {
    fn now(self) -> Option<u64> {
        match self {
            Clock::Logical => None,
            Clock::System => {
                Some(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
            }
        }
    }
}

/// Anything that accepts events for later sequencing.
pub trait Recorder {
    fn record(&mut self, actor: Actor, body: EventBody);
}

/// Events recorded off the main sequence, awaiting commit.
#[derive(Debug)]
pub struct EventBuffer {
    clock: Clock,
    pending: Vec<(Actor, EventBody, Option<u64>)>,
}

impl EventBuffer {
    pub fn new(clock: Clock) -> Self {
        Self { clock, pending: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn bodies(&self) -> impl Iterator<Item = &EventBody> {
        self.pending.iter().map(|(_, b, _)| b)
    }
}

impl Recorder for EventBuffer {
    fn record(&mut self, actor: Actor, body: EventBody) {
        let t = self.clock.now();
        self.pending.push((actor, body, t));
    }
}

struct AppenderInner {
    next_seq: u64,
    events: Vec<TraceEvent>,
    sink: Option<Box<dyn Write + Send>>,
    sink_error: Option<std::io::Error>,
}

/// The single writer that assigns `seq`.
pub struct TraceAppender {
    clock: Clock,
    inner: Mutex<AppenderInner>,
}

impl TraceAppender {
    pub fn new(clock: Clock) -> Self {
        Self {
            clock,
            inner: Mutex::new(AppenderInner { next_seq: 0, events: Vec::new(), sink: None, sink_error: None }),
        }
    }

    /// Also streams every committed line to `sink`.
    pub fn with_sink(self, sink: Box<dyn Write + Send>) -> Self {
        self.inner.lock().expect("trace lock").sink = Some(sink);
        self
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn buffer(&self) -> EventBuffer {
        EventBuffer::new(self.clock)
    }

    pub fn append(&self, actor: Actor, body: EventBody) -> TraceEvent {
        let t = self.clock.now();
        self.push(actor, body, t)
    }

    /// Sequences a buffer's events, preserving their order.
    pub fn commit(&self, buffer: EventBuffer) -> Vec<TraceEvent> {
        buffer.pending.into_iter().map(|(a, b, t)| self.push(a, b, t)).collect()
    }

    fn push(&self, actor: Actor, body: EventBody, time: Option<u64>) -> TraceEvent {
        let mut inner = self.inner.lock().expect("trace lock");
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let event = TraceEvent { seq, wall_time: time.unwrap_or(seq), actor, body };
        if let Some(sink) = inner.sink.as_mut() {
            let res = writeln!(sink, "{}", encode_event(&event)).and_then(|_| sink.flush());
            if let Err(e) = res {
                inner.sink = None;
                inner.sink_error = Some(e);
            }
        }
        inner.events.push(event.clone());
        event
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.inner.lock().expect("trace lock").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("trace lock").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First error hit while streaming, if any.
    pub fn take_sink_error(&self) -> Option<std::io::Error> {
        self.inner.lock().expect("trace lock").sink_error.take()
    }
}

/// A recorder that sequences straight into an appender.
impl Recorder for &TraceAppender {
    fn record(&mut self, actor: Actor, body: EventBody) {
        self.append(actor, body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn retry(attempt: u32) -> EventBody {
        EventBody::Retry(RetryPayload { call: "caption".into(), attempt, error: "timeout".into() })
    }

    #[test]
    fn seq_is_first_key() {
        let e = TraceEvent { seq: 3, wall_time: 3, actor: Actor::Backend, body: retry(1) };
        let line = encode_event(&e);
        assert!(line.starts_with("{\"seq\":3,"), "{line}");
        assert_eq!(decode_event(&line).unwrap(), e);
    }

    #[test]
    fn unknown_kind_rejected() {
        let line = r#"{"seq":0,"wall_time":0,"actor":"supervisor","kind":"teleport","payload":{}}"#;
        let err = decode_event(line).unwrap_err();
        assert!(err.contains("unknown event kind"), "{err}");
    }

    #[test]
    fn missing_fields_rejected_not_defaulted() {
        let line = r#"{"seq":0,"wall_time":0,"actor":"supervisor","kind":"retry","payload":{"call":"x","attempt":1}}"#;
        assert!(decode_event(line).unwrap_err().contains("missing field `error`"));
        let line = r#"{"wall_time":0,"actor":"supervisor","kind":"retry","payload":{}}"#;
        assert!(decode_event(line).unwrap_err().contains("missing field `seq`"));
        // Optional payload members must still be present.
        let line = r#"{"seq":0,"wall_time":0,"actor":"supervisor","kind":"finalize","payload":{"outcome":"aborted","report":null}}"#;
        assert!(decode_event(line).unwrap_err().contains("reason"));
    }

    #[test]
    fn actor_forms() {
        for a in [Actor::Supervisor, Actor::Backend, Actor::Explorer("t004".into())] {
            assert_eq!(a.to_string().parse::<Actor>().unwrap(), a);
        }
        assert!("explorer:".parse::<Actor>().is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let good = encode_event(&TraceEvent { seq: 0, wall_time: 0, actor: Actor::Backend, body: retry(1) });
        let text = format!("{good}\n{{not json\n");
        match read_trace(text.as_bytes()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn buffers_commit_in_order_with_gapless_seq() {
        let app = TraceAppender::new(Clock::Logical);
        app.append(Actor::Supervisor, retry(0));
        let mut b = app.buffer();
        b.record(Actor::Backend, retry(1));
        b.record(Actor::Backend, retry(2));
        let committed = app.commit(b);
        assert_eq!(committed.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
        let all = app.events();
        assert!(all.iter().enumerate().all(|(i, e)| e.seq == i as u64 && e.wall_time == e.seq));
    }
}
