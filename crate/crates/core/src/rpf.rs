//! Relational particle filter over object positions, velocities and
//! attachment relations.
//!
//! Each object has its own weighted particle cloud of [`ObjectBelief`]s. Hidden
//! objects can be attached to a visible host, in which case they move
//! rigidly with it. Observations weight particles by a product of Gaussian
//! densities; free objects that should be visible but are not seen are
//! penalised by `p_miss`.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::percepts::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("object {0} is already tracked")]
    DuplicateObject(String),
    #[error("unknown object {0}")]
    UnknownObject(String),
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error("time step must be finite and >= 0, got {0}")]
    TimeStep(f64),
}

pub type Result<T> = std::result::Result<T, TrackerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub particles: usize,
    pub sigma_init: Matrix3<f64>,
    /// Per second of elapsed time.
    pub sigma_motion: Matrix3<f64>,
    pub sigma_obs: Matrix3<f64>,
    pub p_miss: f64,
    /// Resample when ESS falls below this fraction of the particle count.
    pub resample_threshold: f64,
    pub lambda_attach: f64,
    pub w_free: f64,
    /// Scale on the motion covariance applied to attached objects.
    pub carry_jitter: f64,
    pub reestimate_velocity: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            particles: 1000,
            sigma_init: Matrix3::identity() * 0.02f64.powi(2),
            sigma_motion: Matrix3::identity() * 0.05f64.powi(2),
            sigma_obs: Matrix3::identity() * 0.02f64.powi(2),
            p_miss: 0.1,
            resample_threshold: 0.5,
            lambda_attach: 0.15,
            w_free: 0.05,
            carry_jitter: 0.01,
            reestimate_velocity: true,
        }
    }
}

impl TrackerConfig {
    pub fn with_particles(mut self, n: usize) -> Self {
        self.particles = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrackerError::Config(m.to_string()));
        if self.particles == 0 {
            return bad("particle count must be >= 1");
        }
        for (name, m) in [("sigma_init", &self.sigma_init), ("sigma_motion", &self.sigma_motion)] {
            if Factor::new(m).is_none() {
                return Err(TrackerError::Config(format!("{name} must be symmetric positive semi-definite")));
            }
        }
        if !is_symmetric(&self.sigma_obs) || self.sigma_obs.cholesky().is_none() {
            return bad("sigma_obs must be symmetric positive definite");
        }
        if !(self.p_miss > 0.0 && self.p_miss < 1.0) {
            return bad("p_miss must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return bad("resample threshold must lie in [0, 1]");
        }
        if !(self.lambda_attach > 0.0 && self.lambda_attach.is_finite()) {
            return bad("lambda_attach must be > 0");
        }
        if !(self.w_free >= 0.0 && self.w_free.is_finite()) {
            return bad("w_free must be >= 0");
        }
        if !(self.carry_jitter >= 0.0 && self.carry_jitter.is_finite()) {
            return bad("carry_jitter must be >= 0");
        }
        Ok(())
    }
}

fn is_symmetric(m: &Matrix3<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

/// A matrix `A` with `A Aᵀ = Σ` for a positive semi-definite `Σ`.
#[derive(Debug, Clone, PartialEq)]
struct Factor(Matrix3<f64>);

impl Factor {
    fn new(sigma: &Matrix3<f64>) -> Option<Self> {
        if !is_symmetric(sigma) {
            return None;
        }
        if (0..3).all(|i| (0..3).all(|j| i == j || sigma[(i, j)] == 0.0)) {
            let d = sigma.diagonal();
            if d.iter().any(|&v| v < 0.0) {
                return None;
            }
            return Some(Factor(Matrix3::from_diagonal(&d.map(f64::sqrt))));
        }
        if let Some(c) = sigma.cholesky() {
            return Some(Factor(c.l()));
        }
        let eig = SymmetricEigen::new(*sigma);
        let tol = 1e-12 * sigma.amax();
        if eig.eigenvalues.iter().any(|&l| l < -tol) {
            return None;
        }
        let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Some(Factor(eig.eigenvectors * Matrix3::from_diagonal(&root)))
    }

    fn scaled(&self, variance_scale: f64) -> Factor {
        Factor(self.0 * variance_scale.sqrt())
    }

    fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        self.0 * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Relation {
    Free,
    /// `host` indexes [`Ensemble::ids`].
    Attached { host: usize, offset: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBelief {
    pub position: Vec3,
    pub velocity: Vec3,
    pub relation: Relation,
    /// Position before the latest predict, used to re-estimate velocity.
    #[serde(skip)]
    prev_position: Vec3,
}

impl ObjectBelief {
    fn free(position: Vec3) -> Self {
        ObjectBelief {
            position,
            velocity: Vec3::zeros(),
            relation: Relation::Free,
            prev_position: position,
        }
    }
}

/// The particle cloud of one object. Particle `i` of an attached object
/// rides on particle `i` of its host.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCloud {
    pub id: String,
    pub beliefs: Vec<ObjectBelief>,
    /// Normalised to sum to 1.
    pub weights: Vec<f64>,
    /// ESS just before the latest resampling decision.
    pub last_ess: f64,
}

impl ObjectCloud {
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Weighted mean position of one object and its relation posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefEstimate {
    pub mean: Vec3,
    /// Host id (or `"free"`) to probability.
    pub attachment: BTreeMap<String, f64>,
}

pub const FREE: &str = "free";

impl BeliefEstimate {
    /// Most probable host, if attachment outweighs staying free.
    pub fn likely_host(&self) -> Option<&str> {
        self.attachment
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(k, _)| k.as_str())
            .filter(|k| *k != FREE)
    }

    pub fn probability(&self, host: &str) -> f64 {
        self.attachment.get(host).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrace {
    pub mean: [f64; 3],
    pub attachment: BTreeMap<String, f64>,
    pub ess: f64,
}

/// One JSONL trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub objects: BTreeMap<String, ObjectTrace>,
}

/// Particle ensemble with one weighted cloud per object. Objects are
/// weighted and resampled independently; attachment couples them through
/// shared particle indices.
#[derive(Debug, Clone)]
pub struct Ensemble {
    config: TrackerConfig,
    init_factor: Factor,
    motion_factor: Factor,
    obs_chol: Cholesky<f64, nalgebra::U3>,
    clouds: Vec<ObjectCloud>,
    last_dt: Option<f64>,
}

impl Ensemble {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Ensemble {
            init_factor: Factor::new(&config.sigma_init).expect("validated"),
            motion_factor: Factor::new(&config.sigma_motion).expect("validated"),
            obs_chol: config.sigma_obs.cholesky().expect("validated"),
            clouds: Vec::new(),
            last_dt: None,
            config,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn particle_count(&self) -> usize {
        self.config.particles
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.clouds.iter().map(|c| c.id.as_str())
    }

    pub fn cloud(&self, id: &str) -> Option<&ObjectCloud> {
        self.clouds.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index(id).is_some()
    }

    fn index(&self, id: &str) -> Option<usize> {
        self.clouds.iter().position(|c| c.id == id)
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.index(id).ok_or_else(|| TrackerError::UnknownObject(id.to_string()))
    }

    pub fn init_object<R: Rng + ?Sized>(&mut self, id: &str, observed: Vec3, rng: &mut R) -> Result<()> {
        if self.contains(id) {
            return Err(TrackerError::DuplicateObject(id.to_string()));
        }
        let n = self.config.particles;
        let zero = self.init_factor.is_zero();
        let beliefs = (0..n)
            .map(|_| {
                let pos = if zero { observed } else { observed + self.init_factor.draw(rng) };
                ObjectBelief::free(pos)
            })
            .collect();
        self.clouds.push(ObjectCloud {
            id: id.to_string(),
            beliefs,
            weights: vec![1.0 / n as f64; n],
            last_ess: n as f64,
        });
        Ok(())
    }

    /// Advances every particle by `dt` seconds.
    pub fn predict<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> Result<()> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(TrackerError::TimeStep(dt));
        }
        let free_noise = self.motion_factor.scaled(dt);
        let carry_noise = self.motion_factor.scaled(dt * self.config.carry_jitter);
        let (free_zero, carry_zero) = (free_noise.is_zero(), carry_noise.is_zero());
        for cloud in &mut self.clouds {
            for o in &mut cloud.beliefs {
                o.prev_position = o.position;
                if matches!(o.relation, Relation::Free) {
                    o.position += o.velocity * dt;
                    if !free_zero {
                        o.position += free_noise.draw(rng);
                    }
                }
            }
        }
        // Attached objects follow their (already moved) hosts.
        let mut done = vec![false; self.clouds.len()];
        for i in 0..self.config.particles {
            for (o, d) in done.iter_mut().enumerate() {
                *d = matches!(self.clouds[o].beliefs[i].relation, Relation::Free);
            }
            for o in 0..self.clouds.len() {
                place(&mut self.clouds, &mut done, o, i, &carry_noise, carry_zero, rng);
            }
        }
        self.last_dt = Some(dt);
        Ok(())
    }

    pub fn weight_and_resample<R: Rng + ?Sized>(
        &mut self,
        observations: &BTreeMap<String, Vec3>,
        unobserved: &[String],
        rng: &mut R,
    ) -> Result<()> {
        self.weight_and_resample_with(observations, unobserved, &[], rng)
    }

    /// As [`Self::weight_and_resample`], with extra visible positions that
    /// shield nearby unobserved objects from the miss penalty.
    pub fn weight_and_resample_with<R: Rng + ?Sized>(
        &mut self,
        observations: &BTreeMap<String, Vec3>,
        unobserved: &[String],
        occluders: &[Vec3],
        rng: &mut R,
    ) -> Result<()> {
        let observed: Vec<(usize, Vec3)> = observations
            .iter()
            .map(|(id, z)| self.require(id).map(|i| (i, *z)))
            .collect::<Result<_>>()?;
        let missing: Vec<usize> = unobserved.iter().map(|id| self.require(id)).collect::<Result<_>>()?;
        let shields: Vec<Vec3> = observed.iter().map(|(_, z)| *z).chain(occluders.iter().copied()).collect();
        let radius = 2.0 * self.config.lambda_attach;
        let ln_miss = self.config.p_miss.ln();
        let log_norm = self.obs_log_norm();

        for &(o, z) in &observed {
            let log_lik: Vec<f64> = self.clouds[o]
                .beliefs
                .iter()
                .map(|b| self.log_obs_kernel(&(z - b.position)) + log_norm)
                .collect();
            self.reweight(o, &log_lik, rng);
        }
        for &o in &missing {
            let log_lik: Vec<f64> = self.clouds[o]
                .beliefs
                .iter()
                .map(|b| {
                    let exposed = matches!(b.relation, Relation::Free)
                        && shields.iter().all(|s| (s - b.position).norm() > radius);
                    if exposed {
                        ln_miss
                    } else {
                        0.0
                    }
                })
                .collect();
            self.reweight(o, &log_lik, rng);
        }

        if self.config.reestimate_velocity {
            if let Some(dt) = self.last_dt.filter(|dt| *dt > 0.0) {
                for &(o, _) in &observed {
                    for b in &mut self.clouds[o].beliefs {
                        if matches!(b.relation, Relation::Free) {
                            b.velocity = (b.position - b.prev_position) / dt;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn reweight<R: Rng + ?Sized>(&mut self, o: usize, log_lik: &[f64], rng: &mut R) {
        let cloud = &mut self.clouds[o];
        let log_w: Vec<f64> = cloud.weights.iter().zip(log_lik).map(|(w, l)| w.ln() + l).collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = log_w.iter().map(|lw| (lw - max).exp()).sum();
        let ln_total = max + total.ln();
        for (w, lw) in cloud.weights.iter_mut().zip(&log_w) {
            *w = (lw - ln_total).exp();
        }
        cloud.last_ess = cloud.ess();
        if cloud.last_ess < self.config.resample_threshold * cloud.weights.len() as f64 {
            resample(cloud, rng);
        }
    }

    fn obs_log_norm(&self) -> f64 {
        let log_det = 2.0 * self.obs_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (log_det + 3.0 * (2.0 * std::f64::consts::PI).ln())
    }

    fn log_obs_kernel(&self, diff: &Vec3) -> f64 {
        -0.5 * diff.dot(&self.obs_chol.solve(diff))
    }

    /// Resamples the relation of `vanished` in every particle among
    /// attachment to each candidate host and staying free.
    pub fn propose_attachments<R: Rng + ?Sized>(
        &mut self,
        vanished: &str,
        hosts: &[(String, Vec3)],
        last_seen: Vec3,
        rng: &mut R,
    ) -> Result<()> {
        let v = self.require(vanished)?;
        let mut candidates = Vec::with_capacity(hosts.len());
        for (id, pos) in hosts {
            let h = self.require(id)?;
            if h != v {
                let offset = last_seen - pos;
                candidates.push((h, offset, (-offset.norm() / self.config.lambda_attach).exp()));
            }
        }
        if candidates.is_empty() {
            return Ok(());
        }
        let w_free = self.config.w_free;
        for i in 0..self.config.particles {
            // Hosts that (transitively) ride on the vanished object would form a cycle.
            let weights: Vec<f64> = candidates
                .iter()
                .map(|(h, _, w)| if rides_on(&self.clouds, i, *h, v) { 0.0 } else { *w })
                .collect();
            let total = w_free + weights.iter().sum::<f64>();
            if total <= 0.0 {
                continue;
            }
            let mut u = rng.random::<f64>() * total;
            let mut chosen = Relation::Free;
            for ((h, offset, _), w) in candidates.iter().zip(&weights) {
                if u < *w {
                    chosen = Relation::Attached { host: *h, offset: *offset };
                    break;
                }
                u -= w;
            }
            self.clouds[v].beliefs[i].relation = chosen;
        }
        Ok(())
    }

    /// Overrides the velocity of every free particle of `id`.
    pub fn set_velocity(&mut self, id: &str, velocity: Vec3) -> Result<()> {
        let o = self.require(id)?;
        for b in &mut self.clouds[o].beliefs {
            if matches!(b.relation, Relation::Free) {
                b.velocity = velocity;
            }
        }
        Ok(())
    }

    pub fn detach_on_reveal(&mut self, id: &str) -> Result<()> {
        let o = self.require(id)?;
        for b in &mut self.clouds[o].beliefs {
            b.relation = Relation::Free;
            b.velocity = Vec3::zeros();
        }
        Ok(())
    }

    pub fn estimate(&self, id: &str) -> Result<BeliefEstimate> {
        let cloud = &self.clouds[self.require(id)?];
        let mut mean = Vec3::zeros();
        let mut attachment = BTreeMap::new();
        for (b, w) in cloud.beliefs.iter().zip(&cloud.weights) {
            mean += b.position * *w;
            let key = match &b.relation {
                Relation::Free => FREE,
                Relation::Attached { host, .. } => self.clouds[*host].id.as_str(),
            };
            *attachment.entry(key.to_string()).or_insert(0.0) += w;
        }
        let total: f64 = cloud.weights.iter().sum();
        mean /= total;
        for v in attachment.values_mut() {
            *v /= total;
        }
        // Guard against rounding when every particle agrees.
        if attachment.len() == 1 {
            attachment.values_mut().for_each(|v| *v = 1.0);
        }
        if cloud.beliefs.iter().all(|b| b.position == cloud.beliefs[0].position) {
            mean = cloud.beliefs[0].position;
        }
        Ok(BeliefEstimate { mean, attachment })
    }

    pub fn trace_record(&self, t: f64) -> TraceRecord {
        let objects = self
            .clouds
            .iter()
            .map(|c| {
                let est = self.estimate(&c.id).expect("own id");
                let trace = ObjectTrace {
                    mean: [est.mean.x, est.mean.y, est.mean.z],
                    attachment: est.attachment,
                    ess: c.last_ess,
                };
                (c.id.clone(), trace)
            })
            .collect();
        TraceRecord { t, objects }
    }
}

/// Systematic resampling; weights become uniform.
fn resample<R: Rng + ?Sized>(cloud: &mut ObjectCloud, rng: &mut R) {
    let n = cloud.weights.len();
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut cumulative = cloud.weights[0];
    let mut j = 0;
    let mut next = Vec::with_capacity(n);
    for _ in 0..n {
        while u > cumulative && j + 1 < n {
            j += 1;
            cumulative += cloud.weights[j];
        }
        next.push(cloud.beliefs[j].clone());
        u += step;
    }
    cloud.beliefs = next;
    cloud.weights = vec![step; n];
}

/// Whether object `obj` in particle `i` rides, directly or through a chain,
/// on `target`.
fn rides_on(clouds: &[ObjectCloud], i: usize, mut obj: usize, target: usize) -> bool {
    for _ in 0..=clouds.len() {
        if obj == target {
            return true;
        }
        match clouds[obj].beliefs[i].relation {
            Relation::Attached { host, .. } => obj = host,
            Relation::Free => return false,
        }
    }
    true
}

fn place<R: Rng + ?Sized>(
    clouds: &mut [ObjectCloud],
    done: &mut [bool],
    o: usize,
    i: usize,
    jitter: &Factor,
    jitter_zero: bool,
    rng: &mut R,
) {
    if done[o] {
        return;
    }
    done[o] = true;
    if let Relation::Attached { host, offset } = clouds[o].beliefs[i].relation.clone() {
        place(clouds, done, host, i, jitter, jitter_zero, rng);
        let mut pos = clouds[host].beliefs[i].position + offset;
        if !jitter_zero {
            pos += jitter.draw(rng);
        }
        clouds[o].beliefs[i].position = pos;
    }
}
