//! Forward sampling of the two bundled distributional-clause programs:
//! a random number of objects with a noisy `left` relation, and objects
//! moving by 3 per step.
//!
//! cargo run --release --example dclite_appendix

use semtrack::dclite::{self, Atom, Event};

fn main() {
    let objects = dclite::example_objects_program();
    let world = dclite::sample_world(&objects, 0, 1).unwrap();
    println!("one sampled world:");
    for (name, time) in [("n", None), ("pos", None), ("left", None)] {
        for (args, value) in world.groundings(name, time) {
            println!("  {name}{args:?} = {value:?}");
        }
    }

    for query in ["n > 5", "left(1,2) = t", "left(2,1) = t & left(1,2) = t"] {
        let event: Event = query.parse().unwrap();
        let est = dclite::query(&objects, 0, |w| event.holds(w), 100_000, 7).unwrap();
        println!("P({query}) = {:.4} +- {:.4}", est.probability, est.std_error);
    }

    let dynamics = dclite::example_dynamics_program(0.0);
    let w = dclite::sample_world(&dynamics, 4, 3).unwrap();
    if let Some(n) = w.get("n", &[], None).and_then(|v| v.as_int()).filter(|n| *n > 0) {
        let track: Vec<f64> = (0..=4)
            .filter_map(|t| w.get("pos", &[Atom::Int(1)], Some(t)).and_then(|v| v.as_f64()))
            .collect();
        println!("noise-free motion of object 1 of {n}: {track:.2?}");
    }
}
