use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution as _, Poisson, StandardNormal};

use super::{DcError, Value};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// A distribution with every parameter resolved to a number.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Poisson { lambda: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Scalar when `mean.len() == 1` and `scalar` is set; `cov` is row-major.
    Gaussian { mean: Vec<f64>, cov: Vec<f64>, scalar: bool },
    Finite { outcomes: Vec<(f64, Value)> },
}

impl Distribution {
    pub fn poisson(lambda: f64) -> Result<Self, DcError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(DcError::InvalidDistribution(format!("poisson rate must be > 0, got {lambda}")));
        }
        Ok(Distribution::Poisson { lambda })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self, DcError> {
        if !(hi > lo) {
            return Err(DcError::InvalidDistribution(format!("uniform needs hi > lo, got ({lo}, {hi})")));
        }
        Ok(Distribution::Uniform { lo, hi })
    }

    pub fn gaussian(mean: f64, variance: f64) -> Result<Self, DcError> {
        if !(variance >= 0.0) {
            return Err(DcError::InvalidDistribution(format!("variance must be >= 0, got {variance}")));
        }
        Ok(Distribution::Gaussian { mean: vec![mean], cov: vec![variance], scalar: true })
    }

    /// Multivariate Gaussian. The covariance must be symmetric and either
    /// positive definite or exactly zero (a point mass).
    pub fn multivariate(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self, DcError> {
        let d = mean.len();
        if d == 0 || cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(DcError::InvalidDistribution(format!("covariance must be {d}x{d}")));
        }
        let flat: Vec<f64> = cov.into_iter().flatten().collect();
        for i in 0..d {
            for j in 0..d {
                if (flat[i * d + j] - flat[j * d + i]).abs() > 1e-12 {
                    return Err(DcError::InvalidDistribution("covariance is not symmetric".into()));
                }
            }
        }
        let dist = Distribution::Gaussian { mean, cov: flat, scalar: false };
        if !dist.is_point_mass() && dist.cholesky().is_none() {
            return Err(DcError::InvalidDistribution("covariance is not positive definite".into()));
        }
        Ok(dist)
    }

    pub fn finite(outcomes: Vec<(f64, Value)>) -> Result<Self, DcError> {
        if outcomes.is_empty() || outcomes.iter().any(|(p, _)| !(*p >= 0.0)) {
            return Err(DcError::InvalidDistribution("finite weights must be >= 0".into()));
        }
        let total: f64 = outcomes.iter().map(|(p, _)| p).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(DcError::InvalidDistribution(format!("finite weights sum to {total}, not 1")));
        }
        Ok(Distribution::Finite { outcomes })
    }

    fn is_point_mass(&self) -> bool {
        matches!(self, Distribution::Gaussian { cov, .. } if cov.iter().all(|&c| c == 0.0))
    }

    fn cholesky(&self) -> Option<DMatrix<f64>> {
        let Distribution::Gaussian { mean, cov, .. } = self else {
            return None;
        };
        let d = mean.len();
        DMatrix::from_row_slice(d, d, cov).cholesky().map(|c| c.l())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Distribution::Poisson { lambda } => {
                let k: f64 = Poisson::new(*lambda).expect("validated rate").sample(rng);
                Value::Int(k as i64)
            }
            Distribution::Uniform { lo, hi } => Value::Real(rng.random_range(*lo..*hi)),
            Distribution::Gaussian { mean, scalar: true, cov } => {
                let z: f64 = StandardNormal.sample(rng);
                Value::Real(mean[0] + cov[0].sqrt() * z)
            }
            Distribution::Gaussian { mean, .. } => {
                let d = mean.len();
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                if self.is_point_mass() {
                    return Value::Vector(mean.clone());
                }
                let l = self.cholesky().expect("validated covariance");
                let x = DVector::from_vec(mean.clone()) + l * DVector::from_vec(z);
                Value::Vector(x.iter().copied().collect())
            }
            Distribution::Finite { outcomes } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (p, v) in outcomes {
                    acc += p;
                    if u < acc {
                        return v.clone();
                    }
                }
                outcomes
                    .iter()
                    .rev()
                    .find(|(p, _)| *p > 0.0)
                    .map(|(_, v)| v.clone())
                    .expect("weights sum to one")
            }
        }
    }

    /// Density (or mass) at `value`. Values outside the support, or of the
    /// wrong kind, have density 0.
    pub fn density_at(&self, value: &Value) -> f64 {
        match self {
            Distribution::Poisson { lambda } => match value.as_int() {
                Some(k) if k >= 0 => {
                    let ln_fact: f64 = (2..=k).map(|i| (i as f64).ln()).sum();
                    (k as f64 * lambda.ln() - lambda - ln_fact).exp()
                }
                _ => 0.0,
            },
            Distribution::Uniform { lo, hi } => match value.as_f64() {
                Some(x) if x >= *lo && x <= *hi => 1.0 / (hi - lo),
                _ => 0.0,
            },
            Distribution::Gaussian { mean, cov, .. } => {
                let x = match value {
                    Value::Vector(v) => v.clone(),
                    other => match other.as_f64() {
                        Some(x) => vec![x],
                        None => return 0.0,
                    },
                };
                if x.len() != mean.len() {
                    return 0.0;
                }
                let d = mean.len();
                let sigma = DMatrix::from_row_slice(d, d, cov);
                let Some(chol) = sigma.cholesky() else {
                    return 0.0;
                };
                let diff = DVector::from_vec(x) - DVector::from_column_slice(mean);
                let sol = chol.solve(&diff);
                let maha = diff.dot(&sol);
                let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (-0.5 * (maha + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())).exp()
            }
            Distribution::Finite { outcomes } => outcomes
                .iter()
                .filter(|(_, v)| v == value)
                .map(|(p, _)| p)
                .sum(),
        }
    }
}

/// Free-standing form of [`Distribution::density_at`].
pub fn density_at(distribution: &Distribution, value: &Value) -> f64 {
    distribution.density_at(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn densities() {
        let g = Distribution::multivariate(
            vec![0.0; 3],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let expected = (2.0 * std::f64::consts::PI).powf(-1.5);
        assert!((g.density_at(&Value::Vector(vec![0.0; 3])) - expected).abs() < 1e-15);
        assert!((expected - 0.06349).abs() < 1e-5);

        let u = Distribution::uniform(0.0, 2.0).unwrap();
        assert_eq!(u.density_at(&Value::Int(1)), 0.5);
        assert_eq!(u.density_at(&Value::Real(3.0)), 0.0);

        let f = Distribution::finite(vec![(0.99, Value::sym("t")), (0.01, Value::sym("f"))]).unwrap();
        assert_eq!(f.density_at(&Value::sym("f")), 0.01);
        assert_eq!(f.density_at(&Value::sym("maybe")), 0.0);

        let p = Distribution::poisson(6.0).unwrap();
        assert!((p.density_at(&Value::Int(0)) - (-6.0f64).exp()).abs() < 1e-15);
        assert!((p.density_at(&Value::Int(2)) - 18.0 * (-6.0f64).exp()).abs() < 1e-14);
        assert_eq!(p.density_at(&Value::Int(-1)), 0.0);

        let s = Distribution::gaussian(1.0, 4.0).unwrap();
        let expected = (-0.5f64 * 0.25).exp() / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((s.density_at(&Value::Real(2.0)) - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_parameters() {
        assert!(Distribution::poisson(0.0).is_err());
        assert!(Distribution::uniform(1.0, 1.0).is_err());
        assert!(Distribution::gaussian(0.0, -1.0).is_err());
        assert!(Distribution::finite(vec![(0.5, Value::sym("a"))]).is_err());
        assert!(Distribution::multivariate(vec![0.0; 2], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Distribution::finite(vec![(1.0, Value::sym("a"))]).unwrap();
        for _ in 0..100 {
            assert_eq!(f.sample(&mut rng), Value::sym("a"));
        }
        let g = Distribution::gaussian(2.5, 0.0).unwrap();
        assert_eq!(g.sample(&mut rng), Value::Real(2.5));
        let m = Distribution::multivariate(vec![1.0, 2.0], vec![vec![0.0; 2]; 2]).unwrap();
        assert_eq!(m.sample(&mut rng), Value::Vector(vec![1.0, 2.0]));
    }
}
