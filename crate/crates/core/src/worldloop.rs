//! Per-frame feedback loop between the anchor store (perceptual world model)
//! and the particle tracker (temporary world model).

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorstore::{AnchorStatus, AnchorStore, StoreError, DEFAULT_MAX_TRACK_AGE};
use crate::matcher::{associate, AssociationResult, Decision, MatchError, MatchModel, DEFAULT_THRESHOLD};
use crate::percepts::{Percept, PerceptError, Vec3};
use crate::rpf::{Ensemble, ObjectTrace, TrackerConfig, TrackerError};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("frame time {t} does not advance past {last}")]
    TimeOrder { t: f64, last: f64 },
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("model expects {expected} features; the loop needs 4 or 5")]
    Model { expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub tracker: TrackerConfig,
    pub tracker_enabled: bool,
    pub threshold: f64,
    pub max_track_age: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            tracker: TrackerConfig::default(),
            tracker_enabled: true,
            threshold: DEFAULT_THRESHOLD,
            max_track_age: DEFAULT_MAX_TRACK_AGE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub t: f64,
    pub percepts: Vec<Percept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OcclusionEvent {
    /// `anchor_id` vanished; attachment was proposed to these hosts.
    Attach { anchor_id: String, hosts: Vec<String> },
    /// A tracked anchor was seen again.
    Detach { anchor_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub t: f64,
    pub decisions: AssociationResult,
    /// Anchor id assigned to each percept, in percept order.
    pub percept_anchors: Vec<String>,
    pub acquired: Vec<String>,
    pub tracked_updates: BTreeMap<String, [f64; 3]>,
    pub occlusion_events: Vec<OcclusionEvent>,
}

/// One JSONL trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub percept_anchors: Vec<String>,
    pub decisions: AssociationResult,
    pub statuses: BTreeMap<String, AnchorStatus>,
    pub positions: BTreeMap<String, [f64; 3]>,
    pub estimates: BTreeMap<String, ObjectTrace>,
    pub occlusion_events: Vec<OcclusionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub anchor_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    model: MatchModel,
    store: AnchorStore,
    ensemble: Option<Ensemble>,
    rng: ChaCha8Rng,
    last_t: Option<f64>,
    /// Anchors matched in the latest frame, with their percept positions.
    matched_last: BTreeMap<String, Vec3>,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl World {
    pub fn new(config: WorldConfig, model: MatchModel) -> Result<Self, WorldError> {
        if !(4..=5).contains(&model.feature_count) {
            return Err(WorldError::Model { expected: model.feature_count });
        }
        let ensemble = if config.tracker_enabled {
            Some(Ensemble::new(config.tracker.clone())?)
        } else {
            config.tracker.validate()?;
            None
        };
        Ok(World {
            store: AnchorStore::new(config.max_track_age),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            ensemble,
            last_t: None,
            matched_last: BTreeMap::new(),
            config,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn store(&self) -> &AnchorStore {
        &self.store
    }

    /// Direct access for diagnostics and fault injection.
    pub fn store_mut(&mut self) -> &mut AnchorStore {
        &mut self.store
    }

    pub fn ensemble(&self) -> Option<&Ensemble> {
        self.ensemble.as_ref()
    }

    /// Processes one frame. On error nothing is changed.
    pub fn step(&mut self, frame: &FrameInput) -> Result<FrameReport, WorldError> {
        let t = frame.t;
        if let Some(last) = self.last_t {
            if !(t > last) {
                return Err(WorldError::TimeOrder { t, last });
            }
        }
        for p in &frame.percepts {
            p.validate()?;
        }

        let mut store = self.store.clone();
        let mut ensemble = self.ensemble.clone();
        let mut rng = self.rng.clone();

        let anchors: Vec<_> = store.anchors().collect();
        let decisions = associate(&frame.percepts, &anchors, &self.model, self.config.threshold, t)?;
        let was_tracked: BTreeSet<String> = anchors
            .iter()
            .filter(|a| a.status == AnchorStatus::Tracked)
            .map(|a| a.id.clone())
            .collect();

        let mut percept_anchors = Vec::with_capacity(frame.percepts.len());
        let mut acquired = Vec::new();
        let mut matched: BTreeMap<String, Vec3> = BTreeMap::new();
        for (p, decision) in frame.percepts.iter().zip(&decisions.decisions) {
            let id = match decision {
                Decision::ReAcquire { anchor_id, .. } => {
                    store.re_acquire(anchor_id, p, t)?;
                    anchor_id.clone()
                }
                Decision::Acquire => {
                    let id = store.acquire(p, t);
                    acquired.push(id.clone());
                    id
                }
            };
            matched.insert(id.clone(), p.position);
            percept_anchors.push(id);
        }

        let mut occlusion_events = Vec::new();
        let mut tracked_updates = BTreeMap::new();
        if let Some(ens) = ensemble.as_mut() {
            if let Some(last) = self.last_t {
                ens.predict(t - last, &mut rng)?;
            }
            for id in &acquired {
                ens.init_object(id, matched[id], &mut rng)?;
            }
            let observations: BTreeMap<String, Vec3> = matched
                .iter()
                .filter(|(id, _)| !acquired.contains(id))
                .map(|(id, z)| (id.clone(), *z))
                .collect();
            let unmatched: Vec<String> = store
                .anchors()
                .filter(|a| !matched.contains_key(&a.id) && a.status != AnchorStatus::Lost)
                .map(|a| a.id.clone())
                .collect();
            let occluders: Vec<Vec3> = frame.percepts.iter().map(|p| p.position).collect();
            ens.weight_and_resample_with(&observations, &unmatched, &occluders, &mut rng)?;

            for id in observations.keys().filter(|id| was_tracked.contains(*id)) {
                ens.detach_on_reveal(id)?;
                occlusion_events.push(OcclusionEvent::Detach { anchor_id: id.clone() });
            }

            let radius = 2.0 * ens.config().lambda_attach;
            for id in &unmatched {
                let Some(last_seen) = self.matched_last.get(id) else {
                    continue;
                };
                let hosts: Vec<(String, Vec3)> = percept_anchors
                    .iter()
                    .zip(&frame.percepts)
                    .filter(|(_, p)| (p.position - last_seen).norm() <= radius)
                    .map(|(h, p)| (h.clone(), p.position))
                    .collect();
                ens.propose_attachments(id, &hosts, *last_seen, &mut rng)?;
                occlusion_events.push(OcclusionEvent::Attach {
                    anchor_id: id.clone(),
                    hosts: hosts.into_iter().map(|(h, _)| h).collect(),
                });
            }

            for id in &unmatched {
                let mean = ens.estimate(id)?.mean;
                store.track(id, mean, t)?;
                tracked_updates.insert(id.clone(), arr(&mean));
            }
        }

        store.age(t, |id| matched.contains_key(id) || tracked_updates.contains_key(id));

        self.store = store;
        self.ensemble = ensemble;
        self.rng = rng;
        self.last_t = Some(t);
        self.matched_last = matched;
        Ok(FrameReport {
            t,
            decisions,
            percept_anchors,
            acquired,
            tracked_updates,
            occlusion_events,
        })
    }

    /// Checks that the two world models agree. Returns every violation.
    pub fn consonance_check(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut flag = |id: &str, reason: String| {
            out.push(Violation { anchor_id: id.to_string(), reason })
        };
        for a in self.store.anchors() {
            match a.status {
                AnchorStatus::Lost => {}
                AnchorStatus::Tracked => match self.ensemble.as_ref().map(|e| e.estimate(&a.id)) {
                    Some(Ok(est)) if est.mean == a.position() => {}
                    Some(Ok(est)) => flag(&a.id, format!("tracked at {:?}, tracker mean {:?}", arr(&a.position()), arr(&est.mean))),
                    Some(Err(_)) => flag(&a.id, "tracked anchor unknown to the tracker".into()),
                    None => flag(&a.id, "tracked anchor with the tracker disabled".into()),
                },
                AnchorStatus::Observed => match self.matched_last.get(&a.id) {
                    Some(z) if *z == a.position() => {}
                    Some(z) => flag(&a.id, format!("observed at {:?}, percept at {:?}", arr(&a.position()), arr(z))),
                    // Without a tracker unmatched anchors keep their last percept.
                    None if self.ensemble.is_none() => {}
                    None => flag(&a.id, "unmatched anchor was not tracked".into()),
                },
            }
        }
        out
    }

    pub fn trace_record(&self, report: &FrameReport) -> TraceRecord {
        let estimates = self
            .ensemble
            .as_ref()
            .map(|e| e.trace_record(report.t).objects)
            .unwrap_or_default();
        TraceRecord {
            t: report.t,
            percept_anchors: report.percept_anchors.clone(),
            decisions: report.decisions.clone(),
            statuses: self.store.anchors().map(|a| (a.id.clone(), a.status)).collect(),
            positions: self.store.anchors().map(|a| (a.id.clone(), arr(&a.position()))).collect(),
            estimates,
            occlusion_events: report.occlusion_events.clone(),
        }
    }
}
