//! Learned anchoring matcher: similarity vectors, classifiers trained on
//! labeled match/no-match samples, and winner-takes-all association.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorstore::Anchor;
use crate::percepts::{
    class_similarity, color_similarity, position_similarity, size_similarity, time_similarity,
    Percept, PerceptError,
};

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DATASET_HEADER: [&str; 6] = ["d_class", "d_color", "d_pos", "d_size", "d_time", "label"];

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported feature count {0} (expected 4 or 5)")]
    FeatureCount(usize),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("malformed dataset row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("model version {found} is not supported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The five attribute similarities between a candidate percept and an
/// anchor, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub d_class: f64,
    pub d_color: f64,
    pub d_pos: f64,
    pub d_size: f64,
    pub d_time: f64,
}

impl SimilarityVector {
    pub fn to_array(&self) -> [f64; 5] {
        [self.d_class, self.d_color, self.d_pos, self.d_size, self.d_time]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            d_class: v[0],
            d_color: v[1],
            d_pos: v[2],
            d_size: v[3],
            d_time: v[4],
        }
    }

    /// Leading `count` features; 4 drops `d_time`.
    fn project(&self, count: usize) -> Vec<f64> {
        let all = self.to_array();
        all[..count].to_vec()
    }
}

/// Compares a candidate percept with an anchor at time `t_now`.
pub fn build_similarity_vector(
    candidate: &Percept,
    anchor: &Anchor,
    t_now: f64,
) -> Result<SimilarityVector, MatchError> {
    let attrs = &anchor.attributes;
    Ok(SimilarityVector {
        d_class: class_similarity(
            (&candidate.category, candidate.confidence),
            (&attrs.category, attrs.confidence),
        ),
        d_color: color_similarity(&candidate.color_hist, &attrs.color_hist)?,
        d_pos: position_similarity(&candidate.position, &attrs.position),
        d_size: size_similarity(&candidate.size_box, &attrs.size_box)?,
        d_time: time_similarity(t_now, anchor.last_observed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: SimilarityVector,
    pub is_match: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Knn,
    Bayes,
    Logistic,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Knn, Algorithm::Bayes, Algorithm::Logistic];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Knn => "knn",
            Algorithm::Bayes => "bayes",
            Algorithm::Logistic => "logistic",
        }
    }
}

impl FromStr for Algorithm {
    type Err = MatchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knn" => Ok(Algorithm::Knn),
            "bayes" => Ok(Algorithm::Bayes),
            "logistic" => Ok(Algorithm::Logistic),
            other => Err(MatchError::UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub feature_count: usize,
    pub split_seed: u64,
    pub knn_k: usize,
    /// L2 penalty on logistic weights (not the bias).
    pub l2: f64,
    /// Newton iterations for logistic regression.
    pub iterations: usize,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            feature_count: 5,
            split_seed: 0,
            knn_k: 3,
            l2: 1e-4,
            iterations: 50,
        }
    }

    pub fn with_features(mut self, count: usize) -> Self {
        self.feature_count = count;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split_seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Knn {
        k: usize,
        points: Vec<Vec<f64>>,
        labels: Vec<bool>,
    },
    /// Gaussian naive Bayes; index 0 is no-match, 1 is match.
    Bayes {
        log_prior: [f64; 2],
        means: [Vec<f64>; 2],
        variances: [Vec<f64>; 2],
    },
    Logistic {
        weights: Vec<f64>,
        bias: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchModel {
    pub version: u32,
    pub algorithm: Algorithm,
    pub feature_count: usize,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl MatchModel {
    /// Logistic model with all-zero weights (scores 0.5 everywhere).
    pub fn zero_logistic(feature_count: usize) -> Self {
        Self {
            version: MODEL_VERSION,
            algorithm: Algorithm::Logistic,
            feature_count,
            params: ModelParams::Logistic {
                weights: vec![0.0; feature_count],
                bias: 0.0,
            },
        }
    }

    /// Match score in `[0, 1]` for a raw feature slice.
    pub fn score(&self, x: &[f64]) -> Result<f64, MatchError> {
        if x.len() != self.feature_count {
            return Err(MatchError::Dimension {
                expected: self.feature_count,
                got: x.len(),
            });
        }
        Ok(match &self.params {
            ModelParams::Knn { k, points, labels } => knn_score(points, labels, *k, x),
            ModelParams::Bayes {
                log_prior,
                means,
                variances,
            } => {
                let ll = |c: usize| {
                    log_prior[c]
                        + x.iter()
                            .zip(&means[c])
                            .zip(&variances[c])
                            .map(|((xi, m), v)| {
                                -0.5 * ((xi - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln())
                            })
                            .sum::<f64>()
                };
                let (l0, l1) = (ll(0), ll(1));
                // P(match) = 1 / (1 + exp(l0 - l1))
                sigmoid(l1 - l0)
            }
            ModelParams::Logistic { weights, bias } => {
                sigmoid(bias + weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            }
        })
    }

    pub fn predict(&self, v: &SimilarityVector) -> f64 {
        self.score(&v.project(self.feature_count))
            .expect("feature count validated at construction")
    }

    pub fn evaluate(&self, samples: &[LabeledSample], threshold: f64) -> Metrics {
        let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
        for s in samples {
            let predicted = self.predict(&s.features) >= threshold;
            match (predicted, s.is_match) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            if predicted == s.is_match {
                correct += 1;
            }
        }
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        Metrics {
            accuracy: if samples.is_empty() {
                0.0
            } else {
                correct as f64 / samples.len() as f64
            },
            f1,
            n_train: 0,
            n_test: samples.len(),
        }
    }

    pub fn to_json(&self) -> Result<String, MatchError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self, MatchError> {
        let model: MatchModel = serde_json::from_str(json)?;
        if model.version != MODEL_VERSION {
            return Err(MatchError::ModelVersion {
                found: model.version,
                expected: MODEL_VERSION,
            });
        }
        check_feature_count(model.feature_count)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MatchError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MatchError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_feature_count(count: usize) -> Result<(), MatchError> {
    if count == 4 || count == 5 {
        Ok(())
    } else {
        Err(MatchError::FeatureCount(count))
    }
}

/// Fraction of match labels among the `k` nearest points (Euclidean);
/// equal distances keep training order.
fn knn_score(points: &[Vec<f64>], labels: &[bool], k: usize, x: &[f64]) -> f64 {
    let mut dists: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
        .collect();
    let k = k.min(dists.len()).max(1);
    dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let matches = dists[..k].iter().filter(|(_, i)| labels[*i]).count();
    matches as f64 / k as f64
}

/// Fits a model on every sample (no hold-out).
pub fn fit(samples: &[LabeledSample], config: &TrainConfig) -> Result<MatchModel, MatchError> {
    check_feature_count(config.feature_count)?;
    let positives = samples.iter().filter(|s| s.is_match).count();
    if positives == 0 || positives == samples.len() {
        return Err(MatchError::DegenerateTrainingSet(
            "training split contains a single label".into(),
        ));
    }
    let d = config.feature_count;
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.features.project(d)).collect();
    let ys: Vec<bool> = samples.iter().map(|s| s.is_match).collect();
    let params = match config.algorithm {
        Algorithm::Knn => ModelParams::Knn {
            k: config.knn_k,
            points: xs,
            labels: ys,
        },
        Algorithm::Bayes => fit_bayes(&xs, &ys, d),
        Algorithm::Logistic => fit_logistic(&xs, &ys, d, config.l2, config.iterations),
    };
    Ok(MatchModel {
        version: MODEL_VERSION,
        algorithm: config.algorithm,
        feature_count: d,
        params,
    })
}

fn fit_bayes(xs: &[Vec<f64>], ys: &[bool], d: usize) -> ModelParams {
    let mut counts = [0usize; 2];
    let mut means = [vec![0.0; d], vec![0.0; d]];
    for (x, &y) in xs.iter().zip(ys) {
        let c = y as usize;
        counts[c] += 1;
        for j in 0..d {
            means[c][j] += x[j];
        }
    }
    for c in 0..2 {
        for m in &mut means[c] {
            *m /= counts[c] as f64;
        }
    }
    let mut variances = [vec![0.0; d], vec![0.0; d]];
    for (x, &y) in xs.iter().zip(ys) {
        let c = y as usize;
        for j in 0..d {
            variances[c][j] += (x[j] - means[c][j]).powi(2);
        }
    }
    // Variance floor relative to the widest feature keeps constant features finite.
    let mut max_var: f64 = 0.0;
    for c in 0..2 {
        for v in &mut variances[c] {
            *v /= counts[c] as f64;
            max_var = max_var.max(*v);
        }
    }
    let floor = 1e-9 * max_var.max(1e-12);
    for v in variances.iter_mut().flatten() {
        *v += floor;
    }
    let n = xs.len() as f64;
    ModelParams::Bayes {
        log_prior: [(counts[0] as f64 / n).ln(), (counts[1] as f64 / n).ln()],
        means,
        variances,
    }
}

/// Penalised maximum likelihood by Newton's method (IRLS).
fn fit_logistic(xs: &[Vec<f64>], ys: &[bool], d: usize, l2: f64, iterations: usize) -> ModelParams {
    // parameter layout: [w_0 .. w_{d-1}, bias]
    let mut theta = DVector::<f64>::zeros(d + 1);
    let n = xs.len() as f64;
    let augmented = |x: &[f64]| DVector::from_iterator(d + 1, x.iter().copied().chain(std::iter::once(1.0)));
    for _ in 0..iterations {
        let mut grad = DVector::<f64>::zeros(d + 1);
        let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
        for (x, &y) in xs.iter().zip(ys) {
            let xa = augmented(x);
            let p = sigmoid(theta.dot(&xa));
            grad.axpy(p - if y { 1.0 } else { 0.0 }, &xa, 1.0);
            hess.ger(p * (1.0 - p), &xa, &xa, 1.0);
        }
        grad /= n;
        hess /= n;
        for j in 0..d {
            grad[j] += l2 * theta[j];
            hess[(j, j)] += l2;
        }
        // keeps the system solvable when the bias column is collinear
        hess[(d, d)] += 1e-12;
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        theta -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    ModelParams::Logistic {
        weights: theta.rows(0, d).iter().copied().collect(),
        bias: theta[d],
    }
}

/// Shuffles with `split_seed`, trains on the first 70% and reports
/// accuracy and match-F1 on the remaining 30%.
pub fn train(
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<(MatchModel, Metrics), MatchError> {
    let positives = samples.iter().filter(|s| s.is_match).count();
    let negatives = samples.len() - positives;
    if positives < 2 || negatives < 2 {
        return Err(MatchError::DegenerateTrainingSet(format!(
            "need at least 2 samples of each label, got {positives} match / {negatives} no-match"
        )));
    }
    let (train_set, test_set) = split(samples, config.split_seed);
    let model = fit(&train_set, config)?;
    let mut metrics = model.evaluate(&test_set, DEFAULT_THRESHOLD);
    metrics.n_train = train_set.len();
    Ok((model, metrics))
}

/// Deterministic 70/30 split.
pub fn split(samples: &[LabeledSample], seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = samples.len() * 7 / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i]).collect::<Vec<_>>();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Decision {
    ReAcquire { anchor_id: String, score: f64 },
    Acquire,
}

/// One decision per percept, in percept order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssociationResult {
    pub decisions: Vec<Decision>,
}

impl AssociationResult {
    pub fn anchor_for(&self, percept: usize) -> Option<&str> {
        match self.decisions.get(percept)? {
            Decision::ReAcquire { anchor_id, .. } => Some(anchor_id),
            Decision::Acquire => None,
        }
    }
}

/// One scored percept/anchor pair.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub percept: usize,
    pub anchor_id: &'a str,
    pub score: f64,
    /// Time since the anchor was last observed; smaller wins ties.
    pub time_gap: f64,
}

/// Greedy one-to-one assignment: highest score first, skipping consumed
/// percepts/anchors and scores below `threshold`.
pub fn winner_takes_all(n_percepts: usize, mut candidates: Vec<Candidate<'_>>, threshold: f64) -> AssociationResult {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.time_gap.total_cmp(&b.time_gap))
            .then_with(|| a.anchor_id.cmp(b.anchor_id))
            .then(a.percept.cmp(&b.percept))
    });
    let mut decisions = vec![Decision::Acquire; n_percepts];
    let mut percept_used = vec![false; n_percepts];
    let mut anchor_used: Vec<&str> = Vec::new();
    for c in candidates {
        if c.score < threshold || percept_used[c.percept] || anchor_used.contains(&c.anchor_id) {
            continue;
        }
        percept_used[c.percept] = true;
        anchor_used.push(c.anchor_id);
        decisions[c.percept] = Decision::ReAcquire {
            anchor_id: c.anchor_id.to_string(),
            score: c.score,
        };
    }
    AssociationResult { decisions }
}

/// Scores every percept against every anchor and resolves the frame
/// winner-takes-all.
pub fn associate(
    percepts: &[Percept],
    anchors: &[&Anchor],
    model: &MatchModel,
    threshold: f64,
    t_now: f64,
) -> Result<AssociationResult, MatchError> {
    let mut candidates = Vec::with_capacity(percepts.len() * anchors.len());
    for (i, p) in percepts.iter().enumerate() {
        for a in anchors {
            let v = build_similarity_vector(p, a, t_now)?;
            candidates.push(Candidate {
                percept: i,
                anchor_id: &a.id,
                score: model.predict(&v),
                time_gap: t_now - a.last_observed,
            });
        }
    }
    Ok(winner_takes_all(percepts.len(), candidates, threshold))
}

pub fn write_dataset<W: Write>(writer: W, samples: &[LabeledSample]) -> Result<(), MatchError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATASET_HEADER)?;
    for s in samples {
        let mut row: Vec<String> = s
            .features
            .to_array()
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        row.push(if s.is_match { "1" } else { "0" }.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the dataset CSV; the header line is optional.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<LabeledSample>, MatchError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut samples = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && record.iter().eq(DATASET_HEADER.iter().copied()) {
            continue;
        }
        let malformed = |reason: String| MatchError::MalformedRow { line, reason };
        if record.len() != 6 {
            return Err(malformed(format!("expected 6 fields, got {}", record.len())));
        }
        let mut v = [0.0; 5];
        for (j, field) in record.iter().take(5).enumerate() {
            v[j] = field
                .parse::<f64>()
                .map_err(|e| malformed(format!("field {}: {e}", DATASET_HEADER[j])))?;
        }
        let is_match = match record[5].trim() {
            "1" => true,
            "0" => false,
            other => return Err(malformed(format!("label must be 0 or 1, got {other:?}"))),
        };
        samples.push(LabeledSample {
            features: SimilarityVector::from_array(v),
            is_match,
        });
    }
    Ok(samples)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[LabeledSample]) -> Result<(), MatchError> {
    write_dataset(File::create(path)?, samples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>, MatchError> {
    read_dataset(File::open(path)?)
}
