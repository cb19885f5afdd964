//! Percepts, their attributes, and the pairwise attribute similarities used
//! by the anchoring matcher.
//!
//! Every similarity maps into `[0, 1]`, with 1 meaning "identical", so the
//! five values can be stacked into one commensurable feature vector.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3-D vector in meters (positions, box extents).
pub type Vec3 = nalgebra::Vector3<f64>;

/// Histogram size: 16 bins per HSV channel, concatenated.
pub const HIST_BINS: usize = 48;

const HIST_SUM_TOL: f64 = 1e-9;
const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptError {
    #[error("histogram dimension mismatch ({0} vs {1})")]
    HistogramDimension(usize, usize),
    #[error("degenerate box: extents must be > 0, got {0:?}")]
    DegenerateBox([f64; 3]),
    #[error("non-monotonic timestamps: now {now} < last {last}")]
    NonMonotonicTime { now: f64, last: f64 },
    #[error("empty category label")]
    EmptyLabel,
    #[error("category {0:?} is not in the vocabulary")]
    UnknownCategory(String),
    #[error("histogram is not normalized (sum {0})")]
    UnnormalizedHistogram(f64),
    #[error("histogram has a negative bin")]
    NegativeBin,
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("non-finite attribute value")]
    NonFinite,
}

/// Object category symbol produced by the classifier (e.g. `cup`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CategoryLabel(String);

impl CategoryLabel {
    pub fn new(symbol: impl Into<String>) -> Result<Self, PerceptError> {
        let symbol = symbol.into();
        if symbol.trim().is_empty() {
            return Err(PerceptError::EmptyLabel);
        }
        Ok(Self(symbol))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CategoryLabel {
    type Error = PerceptError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<CategoryLabel> for String {
    fn from(label: CategoryLabel) -> Self {
        label.0
    }
}

impl fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The finite set of category symbols the classifier may emit.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    labels: BTreeSet<String>,
}

impl Vocabulary {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.labels.contains(symbol)
    }

    pub fn label(&self, symbol: &str) -> Result<CategoryLabel, PerceptError> {
        if !self.contains(symbol) {
            return Err(PerceptError::UnknownCategory(symbol.to_string()));
        }
        CategoryLabel::new(symbol)
    }
}

/// One segmented observation of an object in a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percept {
    pub category: CategoryLabel,
    /// Classifier confidence for `category`.
    pub confidence: f64,
    pub color_hist: Vec<f64>,
    /// Bounding-box extents in meters.
    pub size_box: Vec3,
    /// Geometric center in meters.
    pub position: Vec3,
    /// Seconds.
    pub timestamp: f64,
}

impl Percept {
    /// Checks the attribute invariants (normalized histogram, positive box,
    /// confidence in range, finite values).
    pub fn validate(&self) -> Result<(), PerceptError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PerceptError::Confidence(self.confidence));
        }
        check_histogram(&self.color_hist)?;
        check_box(&self.size_box)?;
        let finite = self.position.iter().all(|v| v.is_finite()) && self.timestamp.is_finite();
        if !finite {
            return Err(PerceptError::NonFinite);
        }
        Ok(())
    }
}

pub fn check_histogram(hist: &[f64]) -> Result<(), PerceptError> {
    if hist.iter().any(|v| !v.is_finite()) {
        return Err(PerceptError::NonFinite);
    }
    if hist.iter().any(|&v| v < 0.0) {
        return Err(PerceptError::NegativeBin);
    }
    let sum: f64 = hist.iter().sum();
    if (sum - 1.0).abs() > HIST_SUM_TOL {
        return Err(PerceptError::UnnormalizedHistogram(sum));
    }
    Ok(())
}

fn check_box(extents: &Vec3) -> Result<(), PerceptError> {
    if extents.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(PerceptError::DegenerateBox([extents.x, extents.y, extents.z]));
    }
    Ok(())
}

/// Exponentially decaying relative L1 distance between two classifier
/// confidences; zero when the category symbols differ.
pub fn class_similarity(x: (&CategoryLabel, f64), y: (&CategoryLabel, f64)) -> f64 {
    let ((label_x, conf_x), (label_y, conf_y)) = (x, y);
    if label_x != label_y {
        return 0.0;
    }
    let denom = conf_x + conf_y;
    if denom < DEGENERATE_EPS {
        return 1.0;
    }
    (-(conf_x - conf_y).abs() / denom).exp()
}

/// Pearson correlation of two histograms mapped from `[-1, 1]` to `[0, 1]`.
///
/// A histogram with (numerically) zero variance carries no shape
/// information, so the neutral midpoint 0.5 is returned.
pub fn color_similarity(hx: &[f64], hy: &[f64]) -> Result<f64, PerceptError> {
    if hx.len() != hy.len() {
        return Err(PerceptError::HistogramDimension(hx.len(), hy.len()));
    }
    let n = hx.len() as f64;
    let mean_x = hx.iter().sum::<f64>() / n;
    let mean_y = hy.iter().sum::<f64>() / n;
    let (mut cov, mut var_x, mut var_y) = (0.0, 0.0, 0.0);
    for (a, b) in hx.iter().zip(hy) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x < DEGENERATE_EPS || var_y < DEGENERATE_EPS {
        return Ok(0.5);
    }
    let pearson = cov / (var_x * var_y).sqrt();
    Ok((0.5 * (1.0 + pearson)).clamp(0.0, 1.0))
}

/// `exp(-‖px − py‖₂)`.
pub fn position_similarity(px: &Vec3, py: &Vec3) -> f64 {
    (-(px - py).norm()).exp()
}

/// Generalized Jaccard similarity of two bounding-box extents.
pub fn size_similarity(sx: &Vec3, sy: &Vec3) -> Result<f64, PerceptError> {
    check_box(sx)?;
    check_box(sy)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..3 {
        num += sx[i].min(sy[i]);
        den += sx[i].max(sy[i]);
    }
    Ok(num / den)
}

/// `2 / (1 + e^k)` with `k = t_now − t_last`.
pub fn time_similarity(t_now: f64, t_last: f64) -> Result<f64, PerceptError> {
    if t_now < t_last {
        return Err(PerceptError::NonMonotonicTime {
            now: t_now,
            last: t_last,
        });
    }
    let k = t_now - t_last;
    // e^k overflows past ~709; the limit is 0.
    Ok(2.0 / (1.0 + k.exp()))
}

/// Maps histogram bins to color predicate symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingTable {
    symbols: Vec<String>,
}

impl GroundingTable {
    pub fn new(symbols: Vec<String>) -> Self {
        Self { symbols }
    }

    /// Builds a table from sparse `(bin, symbol)` pairs; bins without an
    /// entry map to `fallback`.
    pub fn from_pairs<'a>(
        bins: usize,
        pairs: impl IntoIterator<Item = (usize, &'a str)>,
        fallback: &str,
    ) -> Self {
        let mut symbols = vec![fallback.to_string(); bins];
        for (bin, symbol) in pairs {
            if bin < bins {
                symbols[bin] = symbol.to_string();
            }
        }
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, bin: usize) -> Option<&str> {
        self.symbols.get(bin).map(String::as_str)
    }
}

/// Grounds a color predicate from the histogram peak. Ties go to the lowest
/// bin index. `None` if the histogram is empty or the table has no entry for
/// the peak bin.
pub fn ground_color_predicate<'t>(hist: &[f64], table: &'t GroundingTable) -> Option<&'t str> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in hist.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.and_then(|(i, _)| table.symbol(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(s: &str) -> CategoryLabel {
        CategoryLabel::new(s).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1e-300)
    }

    #[test]
    fn class_examples() {
        assert_eq!(class_similarity((&label("cup"), 0.8), (&label("mug"), 0.8)), 0.0);
        assert_eq!(class_similarity((&label("cup"), 0.8), (&label("cup"), 0.8)), 1.0);
        let v = class_similarity((&label("cup"), 0.9), (&label("cup"), 0.7));
        assert!(close(v, (-0.2f64 / 1.6).exp()));
        assert!((v - 0.8825).abs() < 1e-4);
    }

    #[test]
    fn class_degenerate_confidences() {
        assert_eq!(class_similarity((&label("cup"), 0.0), (&label("cup"), 0.0)), 1.0);
        assert_eq!(class_similarity((&label("cup"), 0.0), (&label("ball"), 0.0)), 0.0);
    }

    #[test]
    fn color_examples() {
        let h = [0.5, 0.3, 0.2];
        assert!(close(color_similarity(&h, &h).unwrap(), 1.0));
        assert!(color_similarity(&[0.75, 0.25], &[0.25, 0.75]).unwrap().abs() < 1e-12);
        let flat = [0.25; 4];
        assert_eq!(color_similarity(&flat, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.5);
        assert_eq!(color_similarity(&[0.1, 0.2, 0.3, 0.4], &flat).unwrap(), 0.5);
    }

    #[test]
    fn color_dimension_mismatch() {
        let err = color_similarity(&[0.5, 0.5], &[0.2, 0.3, 0.5]).unwrap_err();
        assert!(err.to_string().contains("histogram dimension mismatch"));
    }

    #[test]
    fn position_examples() {
        let a = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(position_similarity(&a, &a), 1.0);
        let b = a + Vec3::new(0.0, 1.0, 0.0);
        assert!(close(position_similarity(&a, &b), (-1.0f64).exp()));
        let c = a + Vec3::new(6.0, 8.0, 0.0);
        assert!(close(position_similarity(&a, &c), (-10.0f64).exp()));
    }

    #[test]
    fn size_examples() {
        let a = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(size_similarity(&a, &a).unwrap(), 1.0);
        let b = Vec3::new(2.0, 2.0, 3.0);
        assert!(close(size_similarity(&a, &b).unwrap(), 6.0 / 7.0));
        let err = size_similarity(&a, &Vec3::new(0.0, 1.0, 1.0)).unwrap_err();
        assert!(err.to_string().contains("degenerate box"));
    }

    #[test]
    fn time_examples() {
        assert_eq!(time_similarity(3.0, 3.0).unwrap(), 1.0);
        assert!(close(time_similarity(1.0, 0.0).unwrap(), 2.0 / (1.0 + 1f64.exp())));
        assert!(time_similarity(50.0, 0.0).unwrap() < 1e-20);
        assert_eq!(time_similarity(1e6, 0.0).unwrap(), 0.0);
        let err = time_similarity(1.0, 2.0).unwrap_err();
        assert!(err.to_string().contains("non-monotonic timestamps"));
    }

    #[test]
    fn grounding_examples() {
        let table = GroundingTable::from_pairs(
            HIST_BINS,
            [(0, "black"), (2, "green"), (6, "red")],
            "other",
        );
        let mut hist = vec![0.01; HIST_BINS];
        hist[6] = 1.0 - 0.01 * (HIST_BINS as f64 - 1.0);
        assert_eq!(ground_color_predicate(&hist, &table), Some("red"));

        let uniform = vec![1.0 / HIST_BINS as f64; HIST_BINS];
        assert_eq!(ground_color_predicate(&uniform, &table), Some("black"));

        let mut hist = vec![0.0; HIST_BINS];
        hist[2] = 0.7;
        hist[30] = 0.3;
        assert_eq!(ground_color_predicate(&hist, &table), Some("green"));
        assert_eq!(ground_color_predicate(&[], &table), None);
    }

    #[test]
    fn percept_validation() {
        let mut p = Percept {
            category: label("cup"),
            confidence: 0.9,
            color_hist: vec![0.5, 0.5],
            size_box: Vec3::new(0.1, 0.1, 0.1),
            position: Vec3::zeros(),
            timestamp: 0.0,
        };
        assert!(p.validate().is_ok());
        p.color_hist = vec![0.5, 0.6];
        assert!(matches!(p.validate(), Err(PerceptError::UnnormalizedHistogram(_))));
        p.color_hist = vec![0.5, 0.5];
        p.confidence = 1.2;
        assert!(matches!(p.validate(), Err(PerceptError::Confidence(_))));
    }

    #[test]
    fn labels_and_vocabulary() {
        assert!(CategoryLabel::new("").is_err());
        let vocab = Vocabulary::new(["cup", "ball"]);
        assert_eq!(vocab.label("cup").unwrap().as_str(), "cup");
        assert!(vocab.label("apple").is_err());
        let json = serde_json::to_string(&label("cup")).unwrap();
        assert_eq!(json, "\"cup\"");
        assert!(serde_json::from_str::<CategoryLabel>("\"\"").is_err());
    }
}
