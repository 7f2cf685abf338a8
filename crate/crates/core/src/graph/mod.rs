//! Graph container, splits, scenarios, synthetic generation, and I/O.

pub mod container;
pub mod scenario;
pub mod split;
pub mod synth;

pub use container::{load_graph, Graph};
pub use scenario::{build_scenario, Scenario, ScenarioPlan};
pub use split::{make_split, Role, SplitAssignment};
pub use synth::{generate_synthetic, SynthConfig};
