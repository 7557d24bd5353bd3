//! Randomized backends for protocol stress tests. Every reply is a pure
//! function of (seed, request), so a stress run can be reproduced.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::context::{ExplorerContext, InitContext, PlanContext, ReportContext, ReviewContext, SlideContext};
use super::decisions::{ExplorerDecision, InitDecision, PlanDecision, ReportDecision, TaskProposal};
use super::mock::MockPolicy;
use super::{BackendError, ChatBackend, ChatRequest, Purpose};
use crate::protocol::{Confidence, RoiScore};
use crate::slide::RegionSpec;

fn request_rng(seed: u64, request: &ChatRequest, salt: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.to_le_bytes());
    h.update(request.purpose.as_str().as_bytes());
    h.update(request.repair_round.to_le_bytes());
    h.update(request.prompt_text().as_bytes());
    h.update(request.context.to_string().as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data")
}

const FEATURES: [&str; 9] = [
    "overall architecture",
    "nuclear atypia and mitotic activity",
    "margins of the suspicious focus",
    "cellularity and stroma",
    "necrosis or haemorrhage",
    "growth pattern at the edge",
    "order IHC for cytokeratin",
    "request special stains for mucin",
    "send tissue for molecular testing",
];

/// Policy that makes arbitrary but well-typed decisions: random regions
/// (some out of bounds), random magnifications (some unsupported), random
/// early termination, requests for unavailable modalities, and malformed
/// replies that need a repair reprompt.
pub struct ChaosPolicy {
    seed: u64,
    sane: MockPolicy,
    /// Probability that a first-attempt reply is malformed.
    pub malformed_rate: f64,
}

impl ChaosPolicy {
    pub fn new(seed: u64) -> Self {
        Self { seed, sane: MockPolicy::default(), malformed_rate: 0.1 }
    }

    fn region(rng: &mut ChaCha8Rng, slide: &SlideContext, within: Option<&RegionSpec>) -> RegionSpec {
        let mags = [0.5, 1.25, 2.5, 5.0, 10.0, 20.0, 40.0, 60.0];
        let mag = if rng.random_bool(0.85) {
            *slide.allowed_magnifications.choose(rng).expect("non-empty")
        } else {
            *mags.choose(rng).expect("non-empty")
        };
        let (bx0, by0, bx1, by1) = match within {
            Some(r) if rng.random_bool(0.9) => (r.x0, r.y0, r.x1, r.y1),
            _ => (0, 0, slide.width, slide.height),
        };
        let x0 = rng.random_range(bx0..bx1);
        let y0 = rng.random_range(by0..by1);
        let mut x1 = rng.random_range(x0 + 1..=bx1);
        let mut y1 = rng.random_range(y0 + 1..=by1);
        if rng.random_bool(0.05) {
            x1 = slide.width + rng.random_range(1..500);
        }
        if rng.random_bool(0.05) {
            y1 = slide.height + rng.random_range(1..500);
        }
        RegionSpec::new(x0, y0, x1, y1, mag)
    }

    fn tasks(rng: &mut ChaCha8Rng, slide: &SlideContext, n: usize) -> Vec<TaskProposal> {
        (0..n)
            .map(|_| TaskProposal {
                tissue_box_index: slide.tissue_boxes.choose(rng).map(|b| b.index),
                region: Self::region(rng, slide, None),
                features_to_document: FEATURES.choose(rng).expect("non-empty").to_string(),
                budget: rng.random_bool(0.7).then(|| rng.random_range(0..6)),
            })
            .collect()
    }

    fn hypotheses(rng: &mut ChaCha8Rng, current: &[String]) -> Vec<String> {
        let mut h = if current.is_empty() {
            vec!["lesion present".to_string(), "benign only".to_string()]
        } else {
            current.to_vec()
        };
        if rng.random_bool(0.5) {
            h.reverse();
        }
        h
    }

    fn decide(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut rng = request_rng(self.seed, request, 0);
        if request.repair_round == 0 && rng.random_bool(self.malformed_rate) {
            return Ok(match rng.random_range(0..3) {
                0 => "I think we should look more closely.".to_string(),
                1 => json!({"hypotheses": ["?"], "unexpected": true}).to_string(),
                _ => "{\"truncated\": ".to_string(),
            });
        }
        let ctx_err =
            |e: serde_json::Error| BackendError::Malformed { endpoint: "chaos-policy".into(), message: e.to_string() };
        let ctx = request.context.clone();
        Ok(match request.purpose {
            Purpose::SupervisorInit => {
                let c: InitContext = serde_json::from_value(ctx).map_err(ctx_err)?;
                let mut tasks = self.sane.init(&c).tasks;
                tasks.retain(|_| rng.random_bool(0.7));
                let extra = rng.random_range(0..4);
                tasks.extend(Self::tasks(&mut rng, &c.slide, extra));
                to_json(&InitDecision {
                    hypotheses: Self::hypotheses(&mut rng, &[]),
                    plan: "randomized exploration".into(),
                    current_step: "start".into(),
                    tasks,
                })
            }
            Purpose::SupervisorPlan => {
                let c: PlanContext = serde_json::from_value(ctx).map_err(ctx_err)?;
                let finished = rng.random_bool(if c.pending.is_empty() { 0.5 } else { 0.1 });
                let n = if finished { 0 } else { rng.random_range(0..5) };
                to_json(&PlanDecision {
                    hypotheses: Self::hypotheses(&mut rng, &c.hypotheses),
                    plan: c.plan.clone(),
                    current_step: format!("round {}", c.round),
                    justification: if finished { "randomly satisfied".into() } else { format!("propose {n} task(s)") },
                    finished,
                    tasks: Self::tasks(&mut rng, &c.slide, n),
                })
            }
            Purpose::SupervisorReview => {
                let c: ReviewContext = serde_json::from_value(ctx).map_err(ctx_err)?;
                let mut decision = self.sane.review(&c);
                let n = rng.random_range(0..3);
                decision.followups.extend(Self::tasks(&mut rng, &c.slide, n));
                decision.followups.retain(|_| rng.random_bool(0.8));
                decision.hypotheses = Self::hypotheses(&mut rng, &decision.hypotheses);
                decision.roi_scores.clear();
                for r in c.reports.iter().flat_map(|r| &r.rois) {
                    if rng.random_bool(0.7) {
                        decision
                            .roi_scores
                            .push(RoiScore { roi_id: r.roi_id.clone(), score: rng.random_range(0.0..=1.0) });
                    }
                }
                to_json(&decision)
            }
            Purpose::SupervisorReport => {
                let c: ReportContext = serde_json::from_value(ctx).map_err(ctx_err)?;
                let mut narrative = format!("Favour {}.", c.primary);
                for r in c.rois.iter().filter(|_| rng.random_bool(0.6)) {
                    narrative.push_str(&format!(" See [roi:{}].", r.roi_id));
                }
                if rng.random_bool(0.1) {
                    narrative.push_str(" Also [roi:t999-v99].");
                }
                let confidence = if rng.random_bool(0.5) { Confidence::High } else { Confidence::Low };
                to_json(&ReportDecision { confidence, narrative })
            }
            Purpose::ExplorerStep => {
                let c: ExplorerContext = serde_json::from_value(ctx).map_err(ctx_err)?;
                if c.views_remaining > 0 && rng.random_bool(0.75) {
                    to_json(&ExplorerDecision::View {
                        region: Self::region(&mut rng, &c.slide, Some(&c.task.region)),
                        rationale: "random probe".into(),
                    })
                } else {
                    let mut key_rois: Vec<String> =
                        c.views.iter().filter(|_| rng.random_bool(0.5)).map(|v| v.view_id.clone()).collect();
                    if rng.random_bool(0.05) {
                        key_rois.push("v99".into());
                    }
                    to_json(&ExplorerDecision::Submit {
                        findings: format!("{} views examined", c.views.len()),
                        key_rois,
                    })
                }
            }
            p => return Err(BackendError::Unsupported { backend: "chaos-policy".into(), purpose: p.as_str().into() }),
        })
    }
}

impl ChatBackend for ChaosPolicy {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.decide(request)
    }

    fn describe(&self) -> String {
        format!("chaos-policy:{}", self.seed)
    }
}

/// Wraps a backend and fails a seeded fraction of calls. The n-th call with
/// a given request fails or succeeds independently of other requests, so
/// retries can recover.
pub struct FlakyBackend<B> {
    inner: B,
    seed: u64,
    failure_rate: f64,
    calls: Mutex<HashMap<[u8; 32], u64>>,
}

impl<B: ChatBackend> FlakyBackend<B> {
    pub fn new(inner: B, seed: u64, failure_rate: f64) -> Self {
        Self { inner, seed, failure_rate, calls: Mutex::new(HashMap::new()) }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for FlakyBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let key: [u8; 32] = {
            let mut h = Sha256::new();
            h.update(request.prompt_text().as_bytes());
            h.update(request.context.to_string().as_bytes());
            h.finalize().into()
        };
        let n = {
            let mut calls = self.calls.lock().expect("call counter");
            let c = calls.entry(key).or_default();
            *c += 1;
            *c
        };
        let mut rng = request_rng(self.seed, request, n);
        if rng.random_bool(self.failure_rate) {
            return Err(BackendError::Injected(format!("{} call {n} to {}", request.purpose, self.inner.describe())));
        }
        self.inner.complete(request)
    }

    fn describe(&self) -> String {
        format!("flaky({})", self.inner.describe())
    }
}
