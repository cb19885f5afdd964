//! Semantic anchoring with a relational particle tracker.
//!
//! Percepts from a perception front end are associated with long-lived
//! anchors by a learned matcher. Objects that leave view are kept alive by a
//! particle filter that reasons about attachment to visible hosts, and a small
//! distributional-clause engine answers probabilistic queries over worlds.
//!
//! ```no_run
//! use semtrack::{simkit, worldloop::WorldConfig};
//!
//! let scenario = simkit::builtin("shell-game").unwrap();
//! let outcome = simkit::run_scenario(&scenario, &WorldConfig::default(), simkit::default_model(), 0).unwrap();
//! println!("{}", serde_json::to_string_pretty(&outcome.report).unwrap());
//! ```

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchorstore;
pub mod cli;
pub mod dclite;
pub mod matcher;
pub mod percepts;
pub mod rpf;
pub mod simkit;
pub mod worldloop;

pub use anchorstore::{Anchor, AnchorStatus, AnchorStore};
pub use matcher::{Algorithm, MatchModel, SimilarityVector};
pub use percepts::{CategoryLabel, Percept, Vec3};
pub use rpf::{Ensemble, TrackerConfig};
pub use worldloop::{FrameInput, World, WorldConfig};
