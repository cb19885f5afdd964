//! Scripted desk-top scenarios, synthetic percepts and evaluation metrics.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorstore::{Anchor, AnchorStatus};
use crate::matcher::{self, build_similarity_vector, Algorithm, LabeledSample, MatchError, MatchModel, Metrics, TrainConfig};
use crate::percepts::{CategoryLabel, Percept, PerceptError, Vec3, HIST_BINS};
use crate::rpf::FREE;
use crate::worldloop::{TraceRecord, World, WorldConfig, WorldError};

pub const DEFAULT_DATASET_SIZE: usize = 5400;
pub const FRAME_RATE: f64 = 10.0;
const BINS_PER_CHANNEL: usize = HIST_BINS / 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("dataset size must be >= 10, got {0}")]
    DatasetSize(usize),
    #[error("unknown builtin scenario {0:?}")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_pos: f64,
    /// Relative standard deviation per size extent.
    pub sigma_size: f64,
    /// Dirichlet concentration; 0 disables histogram jitter.
    pub hist_concentration: f64,
    pub confidence: (f64, f64),
    /// Probability that a percept carries a wrong category.
    pub label_flip: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_pos: 0.01,
            sigma_size: 0.05,
            hist_concentration: 200.0,
            confidence: (0.6, 0.99),
            label_flip: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            sigma_pos: 0.0,
            sigma_size: 0.0,
            hist_concentration: 0.0,
            confidence: (0.9, 0.9),
            label_flip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub category: String,
    pub color_hist: Vec<f64>,
    pub size: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub position: [f64; 3],
    pub visible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub t: f64,
    pub objects: BTreeMap<String, ObjectState>,
}

/// The object of interest and the frame at which its container is queried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub object: String,
    pub query_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub objects: Vec<ObjectSpec>,
    pub frames: Vec<FrameSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<Probe>,
}

/// True object behind each emitted percept, and true positions of hidden
/// objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub percept_objects: Vec<String>,
    pub hidden: BTreeMap<String, [f64; 3]>,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.frames.is_empty() {
            return bad(format!("{}: no frames", self.name));
        }
        for o in &self.objects {
            CategoryLabel::new(o.category.clone())?;
            crate::percepts::check_histogram(&o.color_hist)?;
            if o.size.iter().any(|s| !(*s > 0.0)) {
                return bad(format!("{}: object {} has a degenerate size", self.name, o.id));
            }
        }
        let known = |id: &str| self.objects.iter().any(|o| o.id == id);
        let mut offsets: BTreeMap<&str, (&str, Vec3)> = BTreeMap::new();
        for (k, f) in self.frames.iter().enumerate() {
            if k > 0 && !(f.t > self.frames[k - 1].t) {
                return bad(format!("{}: frame {k} time does not increase", self.name));
            }
            for (id, s) in &f.objects {
                if !known(id) {
                    return bad(format!("{}: frame {k} mentions unknown object {id}", self.name));
                }
                match &s.attached_to {
                    Some(host) => {
                        let Some(h) = f.objects.get(host) else {
                            return bad(format!("{}: frame {k}: {id} attached to absent {host}", self.name));
                        };
                        let offset = v3(s.position) - v3(h.position);
                        if let Some((prev_host, prev)) = offsets.get(id.as_str()) {
                            if *prev_host == host && (offset - prev).amax() > 1e-9 {
                                return bad(format!("{}: frame {k}: {id} drifts relative to {host}", self.name));
                            }
                        }
                        offsets.insert(id, (host, offset));
                    }
                    None => {
                        offsets.remove(id.as_str());
                    }
                }
            }
        }
        if let Some(p) = &self.probe {
            if !known(&p.object) || p.query_frame >= self.frames.len() {
                return bad(format!("{}: probe refers outside the scenario", self.name));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

}

/// Percepts for one frame, one per visible object in object order.
pub fn generate_frame<R: Rng + ?Sized>(scenario: &Scenario, index: usize, rng: &mut R) -> (Vec<Percept>, FrameTruth) {
    let frame = &scenario.frames[index];
    let noise = &scenario.noise;
    let categories: Vec<&str> = {
        let mut c: Vec<&str> = scenario.objects.iter().map(|o| o.category.as_str()).collect();
        c.sort();
        c.dedup();
        c
    };
    let mut percepts = Vec::new();
    let mut truth = FrameTruth { percept_objects: Vec::new(), hidden: BTreeMap::new() };
    for spec in &scenario.objects {
        let Some(state) = frame.objects.get(&spec.id) else {
            continue;
        };
        if !state.visible {
            truth.hidden.insert(spec.id.clone(), state.position);
            continue;
        }
        let mut position = v3(state.position);
        if noise.sigma_pos > 0.0 {
            let n = Normal::new(0.0, noise.sigma_pos).expect("finite sigma");
            position += Vec3::from_fn(|_, _| n.sample(rng));
        }
        let mut size = v3(spec.size);
        if noise.sigma_size > 0.0 {
            let n = Normal::new(1.0, noise.sigma_size).expect("finite sigma");
            size = size.map(|s| (s * n.sample(rng)).max(s * 0.05));
        }
        let color_hist = if noise.hist_concentration > 0.0 {
            jitter_histogram(&spec.color_hist, noise.hist_concentration, rng)
        } else {
            spec.color_hist.clone()
        };
        let (lo, hi) = noise.confidence;
        let confidence = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mut category = spec.category.as_str();
        if noise.label_flip > 0.0 && categories.len() > 1 && rng.random::<f64>() < noise.label_flip {
            let others: Vec<&str> = categories.iter().copied().filter(|c| *c != category).collect();
            category = others[rng.random_range(0..others.len())];
        }
        percepts.push(Percept {
            category: CategoryLabel::new(category).expect("validated category"),
            confidence,
            color_hist,
            size_box: size,
            position,
            timestamp: frame.t,
        });
        truth.percept_objects.push(spec.id.clone());
    }
    (percepts, truth)
}

fn jitter_histogram<R: Rng + ?Sized>(hist: &[f64], concentration: f64, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = hist
        .iter()
        .map(|p| Gamma::new((concentration * p).max(1e-6), 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        hist.to_vec()
    }
}

/// A histogram peaked at one bin of each HSV channel, with a small floor.
pub fn canonical_histogram(h: usize, s: usize, v: usize) -> Vec<f64> {
    let mut out = vec![0.0; HIST_BINS];
    for (channel, center) in [h, s, v].into_iter().enumerate() {
        for b in 0..BINS_PER_CHANNEL {
            let d = b as f64 - center as f64;
            out[channel * BINS_PER_CHANNEL + b] = 0.002 + (-0.5 * d * d / 1.2).exp();
        }
    }
    let total: f64 = out.iter().sum();
    out.iter().map(|x| x / total).collect()
}

// ---------------------------------------------------------------------------
// Builtin scenarios

fn object(id: &str, category: &str, hsv: (usize, usize, usize), size: [f64; 3]) -> ObjectSpec {
    ObjectSpec {
        id: id.into(),
        category: category.into(),
        color_hist: canonical_histogram(hsv.0, hsv.1, hsv.2),
        size,
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Progress of frame `k` through the segment `[start, end)`.
fn progress(k: usize, start: usize, end: usize) -> f64 {
    if k <= start {
        0.0
    } else if k >= end {
        1.0
    } else {
        (k - start) as f64 / (end - start) as f64
    }
}

fn visible(position: [f64; 3]) -> ObjectState {
    ObjectState { position, visible: true, attached_to: None }
}

fn hidden(position: [f64; 3], host: Option<&str>) -> ObjectState {
    ObjectState { position, visible: false, attached_to: host.map(str::to_string) }
}

fn frames(n: usize, mut build: impl FnMut(usize) -> Vec<(&'static str, ObjectState)>) -> Vec<FrameSpec> {
    (0..n)
        .map(|k| FrameSpec {
            t: k as f64 / FRAME_RATE,
            objects: build(k).into_iter().map(|(id, s)| (id.to_string(), s)).collect(),
        })
        .collect()
}

/// A ball rolls behind a cup, stays hidden for two seconds and rolls out.
pub fn simple_occlusion() -> Scenario {
    let cup = [0.0, 0.0, 0.05];
    let start = [0.30, 0.12, 0.025];
    let behind = [0.0, 0.07, 0.025];
    let out = [0.10, 0.10, 0.025];
    let frames = frames(45, |k| {
        let ball = match k {
            0..=11 => visible(lerp(start, behind, progress(k, 0, 12))),
            12..=31 => hidden(behind, Some("cup")),
            _ => visible(lerp(behind, out, progress(k, 32, 40))),
        };
        vec![("cup", visible(cup)), ("ball", ball)]
    });
    Scenario {
        name: "simple-occlusion".into(),
        objects: vec![
            object("cup", "cup", (0, 12, 10), [0.08, 0.08, 0.10]),
            object("ball", "ball", (10, 12, 12), [0.05, 0.05, 0.05]),
        ],
        frames,
        noise: NoiseSpec::default(),
        probe: Some(Probe { object: "ball".into(), query_frame: 31 }),
    }
}

const GLOVE_HEIGHT: f64 = 0.06;

/// A glove covers an apple, carries it 0.6 m and reveals it.
pub fn moving_occluded() -> Scenario {
    let apple = [0.0, 0.0, 0.03];
    let glove_start = [0.30, 0.25, GLOVE_HEIGHT + 0.04];
    let over = [0.0, 0.0, GLOVE_HEIGHT];
    let dest = [0.60, 0.0, GLOVE_HEIGHT];
    let away = [0.60, 0.25, GLOVE_HEIGHT + 0.06];
    let offset = [apple[0] - over[0], apple[1] - over[1], apple[2] - over[2]];
    let frames = frames(60, |k| {
        let glove = match k {
            0..=19 => lerp(glove_start, over, progress(k, 5, 20)),
            20..=44 => lerp(over, dest, progress(k, 22, 42)),
            _ => lerp(dest, away, progress(k, 45, 52)),
        };
        let apple_state = match k {
            0..=19 => visible(apple),
            20..=44 => hidden(add(glove, offset), Some("glove")),
            _ => visible(add(dest, offset)),
        };
        vec![("glove", visible(glove)), ("apple", apple_state)]
    });
    Scenario {
        name: "moving-occluded".into(),
        objects: vec![
            object("glove", "skin", (1, 5, 13), [0.10, 0.09, 0.04]),
            object("apple", "apple", (5, 12, 9), [0.07, 0.07, 0.07]),
        ],
        frames,
        noise: NoiseSpec::default(),
        probe: Some(Probe { object: "apple".into(), query_frame: 44 }),
    }
}

/// As [`moving_occluded`], but the glove already hides a second, differently
/// coloured ball that it drops mid-way.
pub fn hidden_second_object() -> Scenario {
    let ball1 = [0.0, 0.0, 0.025];
    let glove_start = [0.30, 0.25, GLOVE_HEIGHT];
    let over = [0.0, 0.0, GLOVE_HEIGHT];
    let dest = [0.60, 0.0, GLOVE_HEIGHT];
    let away = [0.60, 0.25, GLOVE_HEIGHT + 0.06];
    let off1 = [0.0, 0.0, 0.025 - GLOVE_HEIGHT];
    let off2 = [0.0, 0.03, 0.025 - GLOVE_HEIGHT];
    let frames = frames(66, |k| {
        let glove = match k {
            0..=19 => lerp(glove_start, over, progress(k, 5, 20)),
            20..=49 => lerp(over, dest, progress(k, 22, 48)),
            _ => lerp(dest, away, progress(k, 50, 57)),
        };
        let b1 = match k {
            0..=19 => visible(ball1),
            20..=49 => hidden(add(glove, off1), Some("glove")),
            _ => visible(add(dest, off1)),
        };
        // dropped at frame 38 and left behind
        let drop = add(lerp(over, dest, progress(38, 22, 48)), off2);
        let b2 = match k {
            0..=37 => hidden(add(glove, off2), Some("glove")),
            _ => visible(drop),
        };
        vec![("glove", visible(glove)), ("ball-a", b1), ("ball-b", b2)]
    });
    Scenario {
        name: "hidden-second-object".into(),
        objects: vec![
            object("glove", "skin", (1, 5, 13), [0.10, 0.09, 0.04]),
            object("ball-a", "ball", (10, 12, 12), [0.05, 0.05, 0.05]),
            object("ball-b", "ball", (3, 13, 14), [0.05, 0.05, 0.05]),
        ],
        frames,
        noise: NoiseSpec::default(),
        probe: Some(Probe { object: "ball-a".into(), query_frame: 49 }),
    }
}

pub const SHELL_SPACING: f64 = 0.35;
const SHELL_SWAPS: [(usize, usize); 4] = [(0, 1), (1, 2), (0, 2), (0, 1)];
const SWAP_FRAMES: usize = 15;

/// Three identical containers; one covers a small block and the three are
/// shuffled before the covering one is lifted.
pub fn shell_game() -> Scenario {
    let z = 0.04;
    let slot = |i: usize| [(i as f64 - 1.0) * SHELL_SPACING, 0.0, z];
    let block_pos = [0.0, -0.2, 0.015];
    let offset = [0.0, 0.0, block_pos[2] - z];
    let cover = [block_pos[0], block_pos[1], z];
    let ids = ["shell-1", "shell-2", "shell-3"];

    // slot occupied by each container, per phase
    let mut slots_after = vec![[0usize, 1, 2]];
    for &(a, b) in &SHELL_SWAPS {
        let mut s = *slots_after.last().unwrap();
        for slot in s.iter_mut() {
            if *slot == a {
                *slot = b;
            } else if *slot == b {
                *slot = a;
            }
        }
        slots_after.push(s);
    }

    let cover_in = 5..15; // shell-2 slides over the block
    let cover_out = 15..25; // and back to its slot
    let swap_start = 25;
    let swap_end = swap_start + SHELL_SWAPS.len() * SWAP_FRAMES;
    let query_frame = swap_end + 4;
    let lift = query_frame + 1;
    let n = lift + 12;
    let final_slots = *slots_after.last().unwrap();

    let frames = frames(n, |k| {
        let mut shells = [slot(0), slot(1), slot(2)];
        if k >= swap_start {
            let phase = ((k - swap_start) / SWAP_FRAMES).min(SHELL_SWAPS.len());
            let s = progress(k, swap_start + phase * SWAP_FRAMES, swap_start + (phase + 1) * SWAP_FRAMES);
            let before = slots_after[phase];
            for (c, pos) in shells.iter_mut().enumerate() {
                let from = slot(before[c]);
                *pos = from;
                if phase < SHELL_SWAPS.len() {
                    let (a, b) = SHELL_SWAPS[phase];
                    if before[c] == a || before[c] == b {
                        let to = slot(if before[c] == a { b } else { a });
                        let sign = if before[c] == a { 1.0 } else { -1.0 };
                        *pos = lerp(from, to, s);
                        // wider arcs for longer swaps keep clear of the middle container
                        let amplitude = SHELL_SPACING * (1.0 + 0.45 * (b.abs_diff(a) as f64 - 1.0));
                        pos[1] = sign * amplitude * (std::f64::consts::PI * s).sin();
                    }
                }
            }
        } else if cover_in.contains(&k) {
            shells[1] = lerp(slot(1), cover, progress(k, cover_in.start, cover_in.end - 1));
        } else if cover_out.contains(&k) {
            shells[1] = lerp(cover, slot(1), progress(k, cover_out.start, cover_out.end - 1));
        }
        if k >= lift {
            let c = 1;
            let base = slot(final_slots[c]);
            shells[c] = lerp(base, [base[0], base[1] + 0.25, z + 0.1], progress(k, lift, lift + 6));
        }
        let block = if k < cover_in.end {
            visible(block_pos)
        } else if k < lift {
            hidden(add(shells[1], offset), Some("shell-2"))
        } else {
            visible(add(slot(final_slots[1]), offset))
        };
        let mut out: Vec<(&'static str, ObjectState)> =
            ids.iter().zip(shells).map(|(id, p)| (*id, visible(p))).collect();
        out.push(("block", block));
        out
    });
    let container = |id: &str| object(id, "block", (8, 1, 8), [0.08, 0.08, 0.08]);
    Scenario {
        name: "shell-game".into(),
        objects: vec![
            container("shell-1"),
            container("shell-2"),
            container("shell-3"),
            object("block", "block", (2, 14, 12), [0.03, 0.03, 0.03]),
        ],
        frames,
        noise: NoiseSpec::default(),
        probe: Some(Probe { object: "block".into(), query_frame }),
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["simple-occlusion", "moving-occluded", "hidden-second-object", "shell-game"];

pub fn builtin_scenarios() -> Vec<Scenario> {
    vec![simple_occlusion(), moving_occluded(), hidden_second_object(), shell_game()]
}

/// Looks up a builtin by name or by its 1-based number.
pub fn builtin(name: &str) -> Result<Scenario> {
    let index = match name.parse::<usize>() {
        Ok(i) if (1..=BUILTIN_NAMES.len()).contains(&i) => i - 1,
        _ => BUILTIN_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| SimError::UnknownBuiltin(name.to_string()))?,
    };
    Ok(builtin_scenarios().swap_remove(index))
}

// ---------------------------------------------------------------------------
// Matcher dataset

/// Replays `scenarios` with ground-truth association and returns labelled
/// similarity vectors: one positive per continued object and one negative
/// per other anchor. Hidden objects keep an anchor at their (noisy) true
/// position, as a perfect tracker would.
pub fn generate_matcher_dataset<R: Rng + ?Sized>(
    scenarios: &[Scenario],
    rng: &mut R,
    n_target: usize,
) -> Result<Vec<LabeledSample>> {
    if n_target < 10 {
        return Err(SimError::DatasetSize(n_target));
    }
    if scenarios.is_empty() {
        return Err(SimError::Scenario("no scenarios to replay".into()));
    }
    let mut samples = Vec::with_capacity(n_target + 1024);
    let mut last_len = usize::MAX;
    while samples.len() < n_target {
        if last_len == samples.len() {
            return Err(SimError::Scenario("scenarios produce no samples".into()));
        }
        last_len = samples.len();
        for scenario in scenarios {
            replay_for_dataset(scenario, rng, &mut samples)?;
        }
    }
    use rand::seq::SliceRandom;
    samples.shuffle(rng);
    samples.truncate(n_target);
    Ok(samples)
}

fn replay_for_dataset<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R, out: &mut Vec<LabeledSample>) -> Result<()> {
    let mut anchors: BTreeMap<String, Anchor> = BTreeMap::new();
    let noise = Normal::new(0.0, scenario.noise.sigma_pos.max(0.0)).expect("finite sigma");
    for k in 0..scenario.frames.len() {
        let (percepts, truth) = generate_frame(scenario, k, rng);
        let t = scenario.frames[k].t;
        for (p, owner) in percepts.iter().zip(&truth.percept_objects) {
            for a in anchors.values() {
                let v = build_similarity_vector(p, a, t)?;
                out.push(LabeledSample { features: v, is_match: a.id == *owner });
            }
        }
        for (p, owner) in percepts.iter().zip(&truth.percept_objects) {
            let a = anchors.entry(owner.clone()).or_insert_with(|| Anchor {
                id: owner.clone(),
                attributes: p.clone(),
                last_observed: t,
                status: AnchorStatus::Observed,
                history_len: 0,
                last_tracked: None,
            });
            a.attributes = p.clone();
            a.last_observed = t;
            a.history_len += 1;
        }
        for (id, pos) in &truth.hidden {
            if let Some(a) = anchors.get_mut(id) {
                let jitter = if scenario.noise.sigma_pos > 0.0 {
                    Vec3::from_fn(|_, _| noise.sample(rng))
                } else {
                    Vec3::zeros()
                };
                a.attributes.position = v3(*pos) + jitter;
                a.status = AnchorStatus::Tracked;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelBalance {
    pub positives: usize,
    pub negatives: usize,
}

pub fn label_balance(samples: &[LabeledSample]) -> LabelBalance {
    let positives = samples.iter().filter(|s| s.is_match).count();
    LabelBalance { positives, negatives: samples.len() - positives }
}

pub const DEFAULT_MODEL_SEED: u64 = 7;

/// Logistic matcher trained on a builtin-scenario dataset with a fixed seed.
pub fn default_model() -> &'static MatchModel {
    &default_model_with_metrics().0
}

/// The default model together with its held-out metrics.
pub fn default_model_with_metrics() -> &'static (MatchModel, Metrics) {
    static MODEL: OnceLock<(MatchModel, Metrics)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_MODEL_SEED);
        let data = generate_matcher_dataset(&builtin_scenarios(), &mut rng, DEFAULT_DATASET_SIZE)
            .expect("builtin scenarios generate samples");
        let config = TrainConfig::new(Algorithm::Logistic).with_seed(DEFAULT_MODEL_SEED);
        matcher::train(&data, &config).expect("builtin dataset has both labels")
    })
}

// ---------------------------------------------------------------------------
// Running and scoring

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matcher_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matcher_f1: Option<f64>,
    pub id_switches: usize,
    pub id_switches_per_object: BTreeMap<String, usize>,
    pub acquire_count: usize,
    /// Over frames in which an object is invisible; `None` if there are none.
    pub occluded_rmse: Option<f64>,
    /// Whether the probe object kept its first anchor id.
    pub probe_identity_kept: Option<bool>,
    /// Whether the attachment argmax named the true container at the query frame.
    pub probe_container_correct: Option<bool>,
    pub consonance_violations: usize,
    pub pass: bool,
}

/// Scores a trace against ground truth.
pub fn evaluate(scenario: &Scenario, trace: &[TraceRecord], truth: &[FrameTruth]) -> MetricsReport {
    let mut first_anchor: BTreeMap<String, String> = BTreeMap::new();
    let mut current: BTreeMap<String, String> = BTreeMap::new();
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    let mut switches: BTreeMap<String, usize> = scenario.objects.iter().map(|o| (o.id.clone(), 0)).collect();
    let mut acquire_count = 0;
    let mut sq_err = 0.0;
    let mut n_err = 0usize;
    let mut probe_container_correct = None;

    for (k, (rec, gt)) in trace.iter().zip(truth).enumerate() {
        acquire_count += rec
            .decisions
            .decisions
            .iter()
            .filter(|d| matches!(d, matcher::Decision::Acquire))
            .count();
        for (anchor, obj) in rec.percept_anchors.iter().zip(&gt.percept_objects) {
            owner.entry(anchor.clone()).or_insert_with(|| obj.clone());
            first_anchor.entry(obj.clone()).or_insert_with(|| anchor.clone());
            if let Some(prev) = current.insert(obj.clone(), anchor.clone()) {
                if prev != *anchor {
                    *switches.entry(obj.clone()).or_default() += 1;
                }
            }
        }
        for (obj, pos) in &gt.hidden {
            if let Some(p) = current.get(obj).and_then(|a| rec.positions.get(a)) {
                sq_err += (v3(*p) - v3(*pos)).norm_squared();
                n_err += 1;
            }
        }
        if let Some(probe) = scenario.probe.as_ref().filter(|p| p.query_frame == k) {
            let truth_host = scenario.frames[k].objects.get(&probe.object).and_then(|s| s.attached_to.clone());
            if let Some(truth_host) = truth_host {
                let guess = current
                    .get(&probe.object)
                    .and_then(|a| rec.estimates.get(a))
                    .and_then(|e| {
                        e.attachment
                            .iter()
                            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
                            .map(|(h, _)| h.clone())
                    })
                    .filter(|h| h != FREE)
                    .and_then(|h| owner.get(&h).cloned());
                probe_container_correct = Some(guess.as_deref() == Some(truth_host.as_str()));
            }
        }
    }

    let probe_identity_kept = scenario.probe.as_ref().and_then(|p| {
        let first = first_anchor.get(&p.object)?;
        Some(current.get(&p.object) == Some(first) && switches.get(&p.object) == Some(&0))
    });
    let id_switches = switches.values().sum();
    MetricsReport {
        scenario: scenario.name.clone(),
        matcher_accuracy: None,
        matcher_f1: None,
        id_switches,
        id_switches_per_object: switches,
        acquire_count,
        occluded_rmse: (n_err > 0).then(|| (sq_err / n_err as f64).sqrt()),
        probe_identity_kept,
        probe_container_correct,
        consonance_violations: 0,
        pass: id_switches == 0 && probe_container_correct != Some(false),
    }
}

/// Everything produced by one seeded scenario run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Vec<TraceRecord>,
    pub truth: Vec<FrameTruth>,
    pub report: MetricsReport,
}

/// Runs the loop over every frame of `scenario`. Percept noise is seeded
/// from `seed`; the world uses `config.seed`.
pub fn run_scenario(scenario: &Scenario, config: &WorldConfig, model: &MatchModel, seed: u64) -> Result<RunOutcome> {
    scenario.validate()?;
    let mut world = World::new(config.clone(), model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(scenario.frames.len());
    let mut truth = Vec::with_capacity(scenario.frames.len());
    let mut violations = 0;
    for k in 0..scenario.frames.len() {
        let (percepts, gt) = generate_frame(scenario, k, &mut rng);
        let report = world.step(&crate::worldloop::FrameInput { t: scenario.frames[k].t, percepts })?;
        violations += world.consonance_check().len();
        trace.push(world.trace_record(&report));
        truth.push(gt);
    }
    let mut report = evaluate(scenario, &trace, &truth);
    report.consonance_violations = violations;
    report.pass &= violations == 0;
    Ok(RunOutcome { trace, truth, report })
}
