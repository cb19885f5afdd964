//! The permanent world model: every object that has ever been anchored,
//! with its most recent attributes and lifecycle status.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::percepts::{Percept, Vec3};

pub const SNAPSHOT_VERSION: u32 = 1;

/// Default silence (no percept, no track feed) before an anchor is lost.
pub const DEFAULT_MAX_TRACK_AGE: f64 = 30.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown anchor {0:?}")]
    UnknownAnchor(String),
    #[error("time regression for {id}: {t} < last observed {last}")]
    TimeRegression { id: String, t: f64, last: f64 },
    #[error("snapshot version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorStatus {
    Observed,
    Tracked,
    Lost,
}

/// What happened to an anchor during one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameEvent {
    PerceptMatch,
    TrackFeed,
    Neither,
}

impl AnchorStatus {
    /// Lifecycle transition. `silent_for` is the time since the anchor last
    /// received a percept or a track feed; it only matters for `Neither`.
    pub fn next(self, event: FrameEvent, silent_for: f64, max_track_age: f64) -> AnchorStatus {
        match event {
            FrameEvent::PerceptMatch => AnchorStatus::Observed,
            FrameEvent::TrackFeed => AnchorStatus::Tracked,
            FrameEvent::Neither if silent_for > max_track_age => AnchorStatus::Lost,
            FrameEvent::Neither => self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: String,
    pub attributes: Percept,
    pub last_observed: f64,
    pub status: AnchorStatus,
    pub history_len: u64,
    /// Time of the last track feed, if any since the last percept.
    #[serde(default)]
    pub last_tracked: Option<f64>,
}

impl Anchor {
    pub fn position(&self) -> Vec3 {
        self.attributes.position
    }

    fn last_activity(&self) -> f64 {
        self.last_tracked
            .map_or(self.last_observed, |t| t.max(self.last_observed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorStore {
    anchors: BTreeMap<String, Anchor>,
    counters: BTreeMap<String, u64>,
    clock: Option<f64>,
    max_track_age: f64,
}

impl Default for AnchorStore {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_TRACK_AGE)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    counters: BTreeMap<String, u64>,
    clock: Option<f64>,
    max_track_age: f64,
    anchors: Vec<Anchor>,
}

impl AnchorStore {
    pub fn new(max_track_age: f64) -> Self {
        Self {
            anchors: BTreeMap::new(),
            counters: BTreeMap::new(),
            clock: None,
            max_track_age,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Anchor> {
        self.anchors.get(id)
    }

    /// Anchors in id order.
    pub fn anchors(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.values()
    }

    pub fn clock(&self) -> Option<f64> {
        self.clock
    }

    pub fn max_track_age(&self) -> f64 {
        self.max_track_age
    }

    /// Creates a new anchor named `<category>-<n>` for an unmatched percept.
    pub fn acquire(&mut self, percept: &Percept, t: f64) -> String {
        let counter = self
            .counters
            .entry(percept.category.as_str().to_string())
            .or_insert(0);
        *counter += 1;
        let id = format!("{}-{}", percept.category, counter);
        let anchor = Anchor {
            id: id.clone(),
            attributes: percept.clone(),
            last_observed: t,
            status: AnchorStatus::Observed,
            history_len: 1,
            last_tracked: None,
        };
        self.anchors.insert(id.clone(), anchor);
        self.advance_clock(t);
        id
    }

    /// Extends a matched anchor to time `t`, replacing all attributes with
    /// those of the new percept.
    pub fn re_acquire(&mut self, id: &str, percept: &Percept, t: f64) -> Result<&Anchor, StoreError> {
        let anchor = self
            .anchors
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownAnchor(id.to_string()))?;
        if t < anchor.last_observed {
            return Err(StoreError::TimeRegression {
                id: id.to_string(),
                t,
                last: anchor.last_observed,
            });
        }
        anchor.attributes = percept.clone();
        anchor.last_observed = t;
        anchor.status = AnchorStatus::Observed;
        anchor.history_len += 1;
        anchor.last_tracked = None;
        self.advance_clock(t);
        Ok(&self.anchors[id])
    }

    /// Extends an unperceived anchor from a position estimate. Only the
    /// position attribute changes; `last_observed` does not move.
    pub fn track(&mut self, id: &str, position: Vec3, t: f64) -> Result<&Anchor, StoreError> {
        let anchor = self
            .anchors
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownAnchor(id.to_string()))?;
        anchor.attributes.position = position;
        anchor.status = AnchorStatus::Tracked;
        anchor.last_tracked = Some(t);
        anchor.history_len += 1;
        self.advance_clock(t);
        Ok(&self.anchors[id])
    }

    /// Applies the lost policy to every anchor that neither matched a
    /// percept nor received a track feed at time `t`.
    pub fn age(&mut self, t: f64, touched: impl Fn(&str) -> bool) {
        let max_age = self.max_track_age;
        for anchor in self.anchors.values_mut() {
            if touched(&anchor.id) {
                continue;
            }
            let silent_for = t - anchor.last_activity();
            anchor.status = anchor.status.next(FrameEvent::Neither, silent_for, max_age);
        }
        self.advance_clock(t);
    }

    fn advance_clock(&mut self, t: f64) {
        self.clock = Some(self.clock.map_or(t, |c| c.max(t)));
    }

    pub fn to_json(&self) -> Result<String, StoreError> {
        let snapshot = Snapshot {
            version: SNAPSHOT_VERSION,
            counters: self.counters.clone(),
            clock: self.clock,
            max_track_age: self.max_track_age,
            anchors: self.anchors.values().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&snapshot)?)
    }

    pub fn from_json(json: &str) -> Result<Self, StoreError> {
        let snapshot: Snapshot = serde_json::from_str(json)?;
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(StoreError::Version {
                found: snapshot.version,
                expected: SNAPSHOT_VERSION,
            });
        }
        Ok(Self {
            anchors: snapshot
                .anchors
                .into_iter()
                .map(|a| (a.id.clone(), a))
                .collect(),
            counters: snapshot.counters,
            clock: snapshot.clock,
            max_track_age: snapshot.max_track_age,
        })
    }

    pub fn snapshot(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn restore(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percepts::CategoryLabel;

    fn percept(category: &str, x: f64, t: f64) -> Percept {
        Percept {
            category: CategoryLabel::new(category).unwrap(),
            confidence: 0.9,
            color_hist: vec![0.7, 0.2, 0.1],
            size_box: Vec3::new(0.1, 0.1, 0.12),
            position: Vec3::new(x, 0.0, 0.0),
            timestamp: t,
        }
    }

    #[test]
    fn ids_count_per_category() {
        let mut store = AnchorStore::default();
        assert_eq!(store.acquire(&percept("cup", 0.0, 0.0), 0.0), "cup-1");
        assert_eq!(store.acquire(&percept("ball", 0.0, 0.0), 0.0), "ball-1");
        assert_eq!(store.acquire(&percept("cup", 0.0, 0.0), 0.0), "cup-2");
        store.acquire(&percept("cup", 0.0, 0.0), 0.0);
        assert_eq!(store.acquire(&percept("cup", 0.0, 0.0), 0.0), "cup-4");
    }

    #[test]
    fn re_acquire_replaces_attributes() {
        let mut store = AnchorStore::default();
        let id = store.acquire(&percept("cup", 0.0, 1.0), 1.0);
        store.track(&id, Vec3::new(5.0, 0.0, 0.0), 3.0).unwrap();
        assert_eq!(store.get(&id).unwrap().status, AnchorStatus::Tracked);
        let mut fresh = percept("cup", 0.4, 6.0);
        fresh.color_hist = vec![0.1, 0.2, 0.7];
        let anchor = store.re_acquire(&id, &fresh, 6.0).unwrap();
        assert_eq!(anchor.last_observed, 6.0);
        assert_eq!(anchor.status, AnchorStatus::Observed);
        assert_eq!(anchor.attributes, fresh);
        assert_eq!(anchor.position(), Vec3::new(0.4, 0.0, 0.0));
    }

    #[test]
    fn re_acquire_errors() {
        let mut store = AnchorStore::default();
        let id = store.acquire(&percept("cup", 0.0, 5.0), 5.0);
        assert!(matches!(
            store.re_acquire(&id, &percept("cup", 0.0, 4.0), 4.0),
            Err(StoreError::TimeRegression { .. })
        ));
        assert!(matches!(
            store.re_acquire("cup-9", &percept("cup", 0.0, 6.0), 6.0),
            Err(StoreError::UnknownAnchor(_))
        ));
        assert!(store.track("ball-1", Vec3::zeros(), 6.0).is_err());
    }

    #[test]
    fn track_writes_only_position() {
        let mut store = AnchorStore::default();
        let p = percept("ball", 0.0, 1.0);
        let id = store.acquire(&p, 1.0);
        let est = Vec3::new(0.31, -0.2, 0.05);
        let anchor = store.track(&id, est, 2.0).unwrap();
        assert_eq!(anchor.position(), est);
        assert_eq!(anchor.attributes.color_hist, p.color_hist);
        assert_eq!(anchor.attributes.size_box, p.size_box);
        assert_eq!(anchor.attributes.category, p.category);
        assert_eq!(anchor.last_observed, 1.0);
    }

    #[test]
    fn lifecycle_table_is_total() {
        use AnchorStatus::*;
        use FrameEvent::*;
        for status in [Observed, Tracked, Lost] {
            assert_eq!(status.next(PerceptMatch, 100.0, 30.0), Observed);
            assert_eq!(status.next(TrackFeed, 100.0, 30.0), Tracked);
            assert_eq!(status.next(Neither, 100.0, 30.0), Lost);
            assert_eq!(status.next(Neither, 1.0, 30.0), status);
        }
    }

    #[test]
    fn aging_marks_silent_anchors_lost() {
        let mut store = AnchorStore::new(2.0);
        let a = store.acquire(&percept("cup", 0.0, 0.0), 0.0);
        let b = store.acquire(&percept("ball", 1.0, 0.0), 0.0);
        store.track(&b, Vec3::zeros(), 2.5).unwrap();
        store.age(2.5, |id| id == b);
        assert_eq!(store.get(&a).unwrap().status, AnchorStatus::Lost);
        assert_eq!(store.get(&b).unwrap().status, AnchorStatus::Tracked);
        store.age(4.0, |_| false);
        assert_eq!(store.get(&b).unwrap().status, AnchorStatus::Tracked);
        store.age(4.6, |_| false);
        assert_eq!(store.get(&b).unwrap().status, AnchorStatus::Lost);
    }

    #[test]
    fn snapshot_round_trip_keeps_counters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let empty = AnchorStore::default();
        empty.snapshot(&path).unwrap();
        assert_eq!(AnchorStore::restore(&path).unwrap(), empty);

        let mut store = AnchorStore::default();
        for i in 0..3 {
            store.acquire(&percept("cup", i as f64, 0.0), 0.0);
        }
        store.snapshot(&path).unwrap();
        let mut restored = AnchorStore::restore(&path).unwrap();
        assert_eq!(restored, store);
        assert_eq!(restored.acquire(&percept("cup", 0.0, 1.0), 1.0), "cup-4");
    }

    #[test]
    fn snapshot_version_mismatch() {
        let json = AnchorStore::default().to_json().unwrap().replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            AnchorStore::from_json(&json),
            Err(StoreError::Version { found: 7, .. })
        ));
    }
}
