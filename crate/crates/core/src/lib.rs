//! A deterministic simulator of an in-process nested monitor that isolates
//! trusted code from the rest of the program using protection keys and
//! virtualizes the syscalls, signals and mappings it could be attacked
//! through.
//!
//! The [`formal_state`] machine holds the whole process; every change goes
//! through [`formal_state::apply_transition`], which rolls back anything
//! that would break the four safety properties. [`transition::Transition`]
//! is the set of steps the monitor and an attacker can take, and [`harness`]
//! drives them from scenario scripts.

pub mod config;
pub mod domain_mgr;
pub mod formal_state;
pub mod harness;
pub mod nexpoline;
pub mod signal_virt;
pub mod syscall_monitor;
pub mod transition;

pub use config::MonitorConfig;
pub use formal_state::{apply_transition, new_initial, safety_check, MachineState};
pub use transition::Transition;
