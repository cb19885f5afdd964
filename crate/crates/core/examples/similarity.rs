//! Scores one percept against an anchor with each of the five similarity
//! features, then asks the default matcher for a match probability.
//!
//! cargo run --example similarity

use semtrack::matcher::build_similarity_vector;
use semtrack::percepts::{ground_color_predicate, GroundingTable, HIST_BINS};
use semtrack::{simkit, Anchor, AnchorStatus, CategoryLabel, Percept, Vec3};

fn main() {
    let hist = simkit::canonical_histogram(6, 10, 10);
    let cup = |position: Vec3, confidence: f64, t: f64| Percept {
        category: CategoryLabel::new("cup").unwrap(),
        confidence,
        color_hist: hist.clone(),
        size_box: Vec3::new(0.08, 0.08, 0.1),
        position,
        timestamp: t,
    };

    let anchor = Anchor {
        id: "cup-1".into(),
        attributes: cup(Vec3::new(0.2, 0.0, 0.05), 0.9, 1.0),
        last_observed: 1.0,
        status: AnchorStatus::Observed,
        history_len: 10,
        last_tracked: None,
    };

    let model = simkit::default_model();
    for (label, percept) in [
        ("same place, 0.1 s later", cup(Vec3::new(0.21, 0.0, 0.05), 0.85, 1.1)),
        ("moved 0.5 m, 3 s later", cup(Vec3::new(0.7, 0.0, 0.05), 0.85, 4.0)),
    ] {
        let v = build_similarity_vector(&percept, &anchor, percept.timestamp).unwrap();
        println!("{label}");
        println!(
            "  class {:.4}  color {:.4}  position {:.4}  size {:.4}  time {:.4}",
            v.d_class, v.d_color, v.d_pos, v.d_size, v.d_time
        );
        println!("  match probability {:.4}", model.predict(&v));
    }

    let names: Vec<String> = (0..HIST_BINS).map(|b| format!("hue-{}", b / 4)).collect();
    let table = GroundingTable::new(names);
    println!("dominant color predicate: {:?}", ground_color_predicate(&hist, &table));
}
