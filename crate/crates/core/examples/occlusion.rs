//! Runs the moving-occlusion scenario with and without the tracker and
//! prints which anchor the hidden apple ends up with.
//!
//! cargo run --release --example occlusion [seed]

use semtrack::{simkit, WorldConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scenario = simkit::builtin("moving-occluded").unwrap();
    for tracker_enabled in [true, false] {
        let config = WorldConfig { tracker_enabled, seed, ..WorldConfig::default() };
        let outcome = simkit::run_scenario(&scenario, &config, simkit::default_model(), seed).unwrap();
        let last = outcome.trace.last().unwrap();
        let truth = outcome.truth.last().unwrap();
        println!("tracker {}:", if tracker_enabled { "on" } else { "off" });
        for (anchor, object) in last.percept_anchors.iter().zip(&truth.percept_objects) {
            println!("  {object:<6} -> {anchor}");
        }
        let r = &outcome.report;
        println!(
            "  id switches {}, acquisitions {}, occluded rmse {}",
            r.id_switches,
            r.acquire_count,
            r.occluded_rmse.map_or("-".into(), |e| format!("{e:.3} m"))
        );
    }
}
