//! Scenario runner, attack matrix, interleaving explorer and the other
//! drivers the command line and the acceptance suite use.

pub mod attacks;
pub mod fuzz;
pub mod interleave;
pub mod montecarlo;
pub mod runner;
pub mod scenario;
pub mod storm;

pub use attacks::{attack_matrix, load_scenario, scenario_dir};
pub use interleave::{interleave_explore, InterleaveError};
pub use montecarlo::{monte_carlo_guess, MonteCarloResult};
pub use runner::{run_scenario, Report, RunError};
pub use scenario::{parse_scenario, Scenario};
pub use storm::{signal_storm, StormReport};
