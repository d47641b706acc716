//! Monitor configuration shared by a process and every child it forks.

use std::collections::BTreeSet;

use crate::formal_state::Signo;
use crate::nexpoline::GateMechanism;
use crate::signal_virt::SIGSYS;
use crate::syscall_monitor::SyscallTable;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MonitorConfig {
    pub gate: GateMechanism,
    pub tsx_enabled: bool,
    /// Handlers work from monitor-owned copies of pointer arguments. Turning
    /// this off models a monitor vulnerable to argument races.
    pub copy_args: bool,
    /// Also reject executable pages containing a raw syscall instruction.
    pub scan_syscall_opcode: bool,
    pub sensitive_paths: Vec<String>,
    pub reserved_signals: BTreeSet<Signo>,
    pub xcall_arg_slots: usize,
    pub syscall_table: SyscallTable,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            gate: GateMechanism::default(),
            tsx_enabled: false,
            copy_args: true,
            scan_syscall_opcode: false,
            sensitive_paths: Vec::new(),
            reserved_signals: BTreeSet::from([SIGSYS]),
            xcall_arg_slots: 6,
            syscall_table: SyscallTable::builtin(),
        }
    }
}

impl MonitorConfig {
    pub fn with_gate(gate: GateMechanism) -> Self {
        MonitorConfig {
            gate,
            ..MonitorConfig::default()
        }
    }
}
