//! Three identical containers are shuffled over a hidden block. Prints the
//! attachment posterior of the block at the query frame and whether the
//! block keeps its anchor when revealed.
//!
//! cargo run --release --example shell_game [seed]

use semtrack::{simkit, WorldConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scenario = simkit::builtin("shell-game").unwrap();
    let probe = scenario.probe.clone().unwrap();
    let config = WorldConfig { seed, ..WorldConfig::default() };
    let outcome = simkit::run_scenario(&scenario, &config, simkit::default_model(), seed).unwrap();

    // anchor ids of the visible containers at the query frame
    let rec = &outcome.trace[probe.query_frame];
    let truth = &outcome.truth[probe.query_frame];
    for (anchor, object) in rec.percept_anchors.iter().zip(&truth.percept_objects) {
        println!("{object} is anchored as {anchor}");
    }
    let container = scenario.frames[probe.query_frame].objects[&probe.object].attached_to.clone();
    println!("{} is under {}", probe.object, container.as_deref().unwrap_or("nothing"));
    for (anchor, est) in &rec.estimates {
        if est.attachment.len() > 1 || !est.attachment.contains_key("free") {
            let mut hosts: Vec<_> = est.attachment.iter().collect();
            hosts.sort_by(|a, b| b.1.total_cmp(a.1));
            println!("attachment posterior of {anchor}:");
            for (host, p) in hosts.iter().filter(|(_, p)| **p > 1e-3) {
                println!("  {host:<8} {p:.3}");
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&outcome.report).unwrap());
}
