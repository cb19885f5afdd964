//! Compares the particle filter with an exact scalar Kalman filter on a
//! 1-D random walk observed in Gaussian noise.
//!
//! cargo run --release --example kalman_check [particles] [seed]

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use semtrack::{Ensemble, TrackerConfig, Vec3};

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let n = args.next().flatten().unwrap_or(2000) as usize;
    let seed = args.next().flatten().unwrap_or(0);
    let (p0, q, r) = (0.02f64.powi(2), 0.05f64.powi(2), 0.02f64.powi(2));
    let config = TrackerConfig {
        particles: n,
        sigma_init: Matrix3::identity() * p0,
        sigma_motion: Matrix3::identity() * q,
        sigma_obs: Matrix3::identity() * r,
        reestimate_velocity: false,
        ..TrackerConfig::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_noise = Normal::new(0.0, r.sqrt()).unwrap();
    let walk = Normal::new(0.0, q.sqrt()).unwrap();
    let mut truth = 0.0;
    let z0 = truth + obs_noise.sample(&mut rng);
    let mut pf = Ensemble::new(config).unwrap();
    pf.init_object("x", Vec3::new(z0, 0.0, 0.0), &mut rng).unwrap();
    let (mut m, mut p) = (z0, p0);

    println!("{:>4} {:>9} {:>9} {:>9} {:>7} {:>7}", "step", "truth", "kalman", "particle", "ess", "err/se");
    for step in 1..=50 {
        truth += walk.sample(&mut rng);
        let z = truth + obs_noise.sample(&mut rng);
        p += q;
        let gain = p / (p + r);
        m += gain * (z - m);
        p *= 1.0 - gain;

        pf.predict(1.0, &mut rng).unwrap();
        let obs = BTreeMap::from([("x".to_string(), Vec3::new(z, 0.0, 0.0))]);
        pf.weight_and_resample(&obs, &[], &mut rng).unwrap();
        let est = pf.estimate("x").unwrap().mean.x;
        let ess = pf.cloud("x").unwrap().last_ess;
        // error in units of the posterior sd over sqrt(N)
        let ratio = (est - m) / (p.sqrt() / (n as f64).sqrt());
        println!("{step:>4} {truth:>9.4} {m:>9.4} {est:>9.4} {ess:>7.0} {ratio:>7.2}");
    }
}
