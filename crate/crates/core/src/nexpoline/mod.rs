//! Secure syscall call gates: the randomized, ephemeral and CET trampolines,
//! the kernel-side filter that confines syscalls to them, and the probes an
//! attacker can throw at each.

mod shadow;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

pub use shadow::ShadowStack;

use crate::formal_state::{
    layout, Addr, DenyReason, DomainId, MachineState, PageAttr, PageRecord, PermSet, Signo, Tid,
    PAGE_SIZE,
};

/// `syscall` (2 bytes) followed by `ret` (1 byte).
pub const GADGET_LEN: u64 = 3;
/// Trampoline pages used by the randomized gate.
pub const RANDOM_PAGES: u64 = 16;
/// Where the ephemeral and CET gates place the gadget in their page.
pub const FIXED_GADGET_OFFSET: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    Seccomp,
    Dispatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateVariant {
    Random { pages: u64, rerand_freq: u64 },
    Ephemeral,
    Cet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateMechanism {
    pub filter: FilterKind,
    pub variant: GateVariant,
}

impl Default for GateMechanism {
    fn default() -> Self {
        GateMechanism {
            filter: FilterKind::Seccomp,
            variant: GateVariant::Ephemeral,
        }
    }
}

impl GateMechanism {
    pub fn is_random(&self) -> bool {
        matches!(self.variant, GateVariant::Random { .. })
    }
}

impl fmt::Display for GateMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let filter = match self.filter {
            FilterKind::Seccomp => "secc",
            FilterKind::Dispatch => "disp",
        };
        match self.variant {
            GateVariant::Random { rerand_freq, .. } => write!(f, "{filter}_rand:{rerand_freq}"),
            GateVariant::Ephemeral => write!(f, "{filter}_eph"),
            GateVariant::Cet => write!(f, "{filter}_cet"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown gate variant {0:?} (expected secc_rand:<freq>, secc_eph, disp_eph, secc_cet or disp_cet)")]
pub struct UnknownVariant(pub String);

impl FromStr for GateMechanism {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UnknownVariant(s.to_string());
        let (filter, variant) = match s {
            "secc_eph" => (FilterKind::Seccomp, GateVariant::Ephemeral),
            "disp_eph" => (FilterKind::Dispatch, GateVariant::Ephemeral),
            "secc_cet" => (FilterKind::Seccomp, GateVariant::Cet),
            "disp_cet" => (FilterKind::Dispatch, GateVariant::Cet),
            _ => {
                let freq = s.strip_prefix("secc_rand:").ok_or_else(bad)?;
                let rerand_freq: u64 = freq.parse().map_err(|_| bad())?;
                if rerand_freq == 0 {
                    return Err(bad());
                }
                (
                    FilterKind::Seccomp,
                    GateVariant::Random {
                        pages: RANDOM_PAGES,
                        rerand_freq,
                    },
                )
            }
        };
        Ok(GateMechanism { filter, variant })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ByteClass {
    Int3,
    SyscallByte,
    RetByte,
}

const GADGET_BYTES: [ByteClass; GADGET_LEN as usize] = [
    ByteClass::SyscallByte,
    ByteClass::SyscallByte,
    ByteClass::RetByte,
];

/// A trampoline region: every byte is `int3` except the gadget, if placed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trampoline {
    pub base: Addr,
    pub pages: u64,
    pub gadget_at: Option<u64>,
}

impl Trampoline {
    pub fn len(&self) -> u64 {
        self.pages * PAGE_SIZE
    }

    pub fn is_empty(&self) -> bool {
        self.pages == 0
    }

    pub fn contains(&self, addr: Addr) -> bool {
        addr.0 >= self.base.0 && addr.0 < self.base.0 + self.len()
    }

    pub fn byte_at_offset(&self, off: u64) -> ByteClass {
        match self.gadget_at {
            Some(g) if off >= g && off < g + GADGET_LEN => GADGET_BYTES[(off - g) as usize],
            _ => ByteClass::Int3,
        }
    }

    /// Non-`int3` bytes by offset.
    pub fn contents(&self) -> BTreeMap<u64, ByteClass> {
        match self.gadget_at {
            Some(g) => (0..GADGET_LEN)
                .map(|i| (g + i, GADGET_BYTES[i as usize]))
                .collect(),
            None => BTreeMap::new(),
        }
    }

    pub fn has_syscall_byte(&self) -> bool {
        self.gadget_at.is_some()
    }

    pub fn gadget_addr(&self) -> Option<Addr> {
        self.gadget_at.map(|g| self.base.add(g))
    }
}

/// Number of positions the gadget can occupy in `pages` trampoline pages.
pub fn gadget_positions(pages: u64) -> u64 {
    pages * PAGE_SIZE - GADGET_LEN + 1
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrampolineState {
    /// Trampolines by owner. The randomized gate has one process-wide
    /// trampoline under key 0; the other gates have one per thread.
    pub pads: BTreeMap<Tid, Trampoline>,
    /// The trampoline each thread's filter permits syscalls from.
    pub filters: BTreeMap<Tid, Tid>,
    pub rerand_counter: u64,
    pub rerandomizations: u64,
    pub gadget_len: u64,
    pub shadow: BTreeMap<Tid, ShadowStack>,
    /// Legal indirect-branch targets (end-branch landing pads).
    pub endbr: BTreeSet<Addr>,
    pub queen_spawns: u64,
}

impl TrampolineState {
    pub fn pad_for(&self, tid: Tid) -> Option<&Trampoline> {
        self.filters
            .get(&tid)
            .and_then(|owner| self.pads.get(owner))
    }

    pub fn pad_containing(&self, addr: Addr) -> Option<&Trampoline> {
        self.pads.values().find(|p| p.contains(addr))
    }

    pub fn byte_at(&self, addr: Addr) -> Option<ByteClass> {
        self.pad_containing(addr)
            .map(|p| p.byte_at_offset(addr.0 - p.base.0))
    }

    pub fn any_syscall_byte(&self) -> bool {
        self.pads.values().any(Trampoline::has_syscall_byte)
    }
}

fn per_thread_base(tid: Tid) -> Addr {
    Addr(layout::PER_THREAD_TRAMPOLINE.0 + tid as u64 * PAGE_SIZE)
}

fn map_trampoline_pages(s: &mut MachineState, base: Addr, pages: u64) {
    for i in 0..pages {
        // Executable for everyone, readable and writable only by the monitor key.
        s.pages.insert(
            base.page() + i,
            PageRecord::anon(DomainId::Trusted, PermSet::RX, PageAttr::Exec),
        );
    }
}

/// Sets up the gate for `tid` in a fresh process: trampoline, filter and,
/// for CET, the shadow stack.
pub fn install(s: &mut MachineState, tid: Tid) {
    let gate = s.config.gate;
    s.trampoline.gadget_len = GADGET_LEN;
    s.trampoline.endbr = [
        layout::GATE_ENTRY,
        layout::SIGNAL_ENTRY,
        layout::XCALL_ENTRY,
    ]
    .into_iter()
    .collect();
    match gate.variant {
        GateVariant::Random { pages, .. } => {
            map_trampoline_pages(s, layout::TRAMPOLINE, pages);
            s.trampoline.pads.insert(
                0,
                Trampoline {
                    base: layout::TRAMPOLINE,
                    pages,
                    gadget_at: None,
                },
            );
            rerandomize(s);
            s.trampoline.rerandomizations = 0;
        }
        GateVariant::Ephemeral | GateVariant::Cet => {}
    }
    attach_thread(s, tid);
}

/// Gives `tid` its filter region (and per-thread trampoline where the
/// variant uses one).
pub(crate) fn attach_thread(s: &mut MachineState, tid: Tid) {
    match s.config.gate.variant {
        GateVariant::Random { .. } => {
            s.trampoline.filters.insert(tid, 0);
        }
        GateVariant::Ephemeral | GateVariant::Cet => {
            let base = per_thread_base(tid);
            map_trampoline_pages(s, base, 1);
            let gadget_at = match s.config.gate.variant {
                GateVariant::Cet => Some(FIXED_GADGET_OFFSET),
                _ => None,
            };
            s.trampoline.pads.insert(
                tid,
                Trampoline {
                    base,
                    pages: 1,
                    gadget_at,
                },
            );
            s.trampoline.filters.insert(tid, tid);
        }
    }
    if matches!(s.config.gate.variant, GateVariant::Cet) {
        s.trampoline.shadow.entry(tid).or_default();
    }
}

/// Drops every per-thread gate resource of `tid`.
pub fn detach_thread(s: &mut MachineState, tid: Tid) {
    s.trampoline.filters.remove(&tid);
    s.trampoline.shadow.remove(&tid);
    if !s.config.gate.is_random() {
        if let Some(pad) = s.trampoline.pads.remove(&tid) {
            for i in 0..pad.pages {
                s.pages.remove(&(pad.base.page() + i));
            }
        }
    }
}

/// Gate entry for a thread that has just switched into the monitor.
pub fn gate_enter(s: &mut MachineState, tid: Tid) {
    match s.config.gate.variant {
        GateVariant::Random { rerand_freq, .. } => {
            if s.trampoline.rerand_counter >= rerand_freq {
                rerandomize(s);
            }
            // The gadget address sits in monitor data; only the monitor's key reads it.
            let _gadget = s.read_u64(layout::GADGET_POINTER);
        }
        GateVariant::Ephemeral => {
            if let Some(pad) = s.trampoline.pads.get_mut(&tid) {
                pad.gadget_at = Some(FIXED_GADGET_OFFSET);
            }
        }
        GateVariant::Cet => {
            s.trampoline
                .shadow
                .entry(tid)
                .or_default()
                .push(layout::GATE_ENTRY.add(0x10));
        }
    }
    s.trampoline.rerand_counter += 1;
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GateFault {
    #[error("shadow stack mismatch on return")]
    CetControlFault,
    #[error("gadget still visible while leaving the monitor")]
    GadgetVisible,
}

/// Gate exit for a thread about to drop back to its untrusted domain.
pub fn gate_exit(s: &mut MachineState, tid: Tid) -> Result<(), GateFault> {
    match s.config.gate.variant {
        GateVariant::Random { .. } => Ok(()),
        GateVariant::Ephemeral => {
            cleanup_transaction(s, tid, &[]);
            if s.trampoline
                .pads
                .get(&tid)
                .is_some_and(Trampoline::has_syscall_byte)
            {
                return Err(GateFault::GadgetVisible);
            }
            Ok(())
        }
        GateVariant::Cet => {
            let expected = layout::GATE_ENTRY.add(0x10);
            match s.trampoline.shadow.entry(tid).or_default().pop() {
                Some(ret) if ret == expected => Ok(()),
                _ => Err(GateFault::CetControlFault),
            }
        }
    }
}

/// Moves the randomized gadget to a fresh uniformly drawn position.
pub fn rerandomize(s: &mut MachineState) {
    let Some(pad) = s.trampoline.pads.get(&0) else {
        return;
    };
    let n = gadget_positions(pad.pages);
    let at = s.rng.below(n);
    let pad = s.trampoline.pads.get_mut(&0).expect("random trampoline");
    pad.gadget_at = Some(at);
    s.trampoline.rerand_counter = 0;
    s.trampoline.rerandomizations += 1;
    let addr = pad.base.add(at);
    s.write_u64(layout::GADGET_POINTER, addr.0);
}

/// Closed-form success probability of guessing the randomized gadget:
/// `2 * freq / (PAGE_SIZE * pages)`.
pub fn guess_probability(pages: u64, freq: u64) -> Ratio<u64> {
    assert!(pages >= 1 && freq >= 1, "pages and freq must be positive");
    Ratio::new(2 * freq, PAGE_SIZE * pages)
}

/// Probability that at least one of `freq` independent uniform guesses hits
/// one of `gadget_positions(pages)` positions.
pub fn window_hit_probability(pages: u64, freq: u64) -> f64 {
    let n = gadget_positions(pages) as f64;
    1.0 - (1.0 - 1.0 / n).powf(freq as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeOutcome {
    KilledByFilter,
    Int3Fault,
    CetControlFault,
    UncheckedSyscallExecuted,
    /// Landed on the `ret`: control simply comes back to the attacker.
    Returned,
    TxAbort,
    TxCommit,
}

impl ProbeOutcome {
    pub fn is_bypass(self) -> bool {
        self == ProbeOutcome::UncheckedSyscallExecuted
    }
}

/// An untrusted thread jumps straight at `target`, hoping to execute the
/// gadget without going through the gate.
pub fn attack_jump(s: &MachineState, tid: Tid, target: Addr) -> ProbeOutcome {
    let permitted = s.trampoline.pad_for(tid);
    if !permitted.is_some_and(|p| p.contains(target)) {
        return ProbeOutcome::KilledByFilter;
    }
    let pad = permitted.expect("checked above");
    let off = target.0 - pad.base.0;
    let byte = pad.byte_at_offset(off);
    if byte == ByteClass::Int3 {
        return ProbeOutcome::Int3Fault;
    }
    if matches!(s.config.gate.variant, GateVariant::Cet) && !s.trampoline.endbr.contains(&target) {
        return ProbeOutcome::CetControlFault;
    }
    match (byte, pad.gadget_at) {
        (ByteClass::SyscallByte, Some(g)) if g == off => ProbeOutcome::UncheckedSyscallExecuted,
        // Second opcode byte decodes into an instruction that runs on into int3.
        (ByteClass::SyscallByte, _) => ProbeOutcome::Int3Fault,
        _ => ProbeOutcome::Returned,
    }
}

/// Transactional probe of `target`: commits only if the byte there is a
/// lone `ret`. Nothing faults and nothing changes.
pub fn tsx_probe(s: &MachineState, _tid: Tid, target: Addr) -> Result<ProbeOutcome, DenyReason> {
    if !s.config.tsx_enabled {
        return Err(DenyReason::TsxDisabled);
    }
    Ok(match s.trampoline.byte_at(target) {
        Some(ByteClass::RetByte) => ProbeOutcome::TxCommit,
        _ => ProbeOutcome::TxAbort,
    })
}

/// Creates a new thread for `parent_tid`. Under seccomp the queen thread
/// (which carries no filter) does the creation so the child gets its own
/// per-thread filter instead of inheriting the parent's.
pub fn spawn_thread(s: &mut MachineState, parent_tid: Tid) -> Result<Tid, DenyReason> {
    let parent = s.thread(parent_tid).ok_or(DenyReason::NoSuchThread)?;
    let domain = parent
        .return_chain
        .first()
        .map(|f| f.caller)
        .unwrap_or(parent.current_domain);
    Ok(spawn_thread_in(s, domain))
}

/// Creates a thread that starts running in `domain` (the application domain
/// if `domain` is the monitor's).
pub fn spawn_thread_in(s: &mut MachineState, domain: DomainId) -> Tid {
    let domain = if domain.is_trusted() {
        DomainId::APP
    } else {
        domain
    };
    if s.config.gate.filter == FilterKind::Seccomp {
        s.trampoline.queen_spawns += 1;
    }
    let tid = s.next_tid;
    s.next_tid += 1;
    let sp = s.map_thread_stack(tid, domain);
    s.threads.insert(
        tid,
        crate::formal_state::ThreadCtx::untrusted_thread(tid, domain, sp),
    );
    attach_thread(s, tid);
    tid
}

/// One syscall by the victim process as seen by the randomized gate: the
/// counter advances and the gadget moves once it reaches the frequency.
pub fn victim_syscall_tick(s: &mut MachineState) {
    if let GateVariant::Random { rerand_freq, .. } = s.config.gate.variant {
        s.trampoline.rerand_counter += 1;
        if s.trampoline.rerand_counter >= rerand_freq {
            rerandomize(s);
        }
    }
}

/// Thread creation that bypasses the queen: a seccomp filter would be
/// inherited by the child, so this path is refused under seccomp.
pub fn spawn_thread_direct(s: &mut MachineState, parent_tid: Tid) -> Result<Tid, DenyReason> {
    if s.config.gate.filter == FilterKind::Seccomp {
        return Err(DenyReason::QueenRequired);
    }
    spawn_thread(s, parent_tid)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanupReport {
    pub passes: u32,
    pub restarts: u32,
    /// Signals that interrupted the cleanup and were queued for later.
    pub queued: Vec<Signo>,
}

/// The ephemeral gate's exit cleanup, run as a restartable transaction: it
/// overwrites the gadget one byte per step, and a signal arriving at step
/// `k` sends execution back to step 0 after the signal is queued.
///
/// `interrupts` lists, per pass, the signal that arrives and the step it
/// arrives at. A signal whose pending slot is already occupied is held by
/// the kernel and does not interrupt.
pub fn cleanup_transaction(
    s: &mut MachineState,
    tid: Tid,
    interrupts: &[(Signo, u64)],
) -> CleanupReport {
    let mut report = CleanupReport::default();
    // Only the ephemeral gate has anything to clean up.
    if s.config.gate.variant != GateVariant::Ephemeral {
        return report;
    }
    let mut pending_interrupts = interrupts.iter();
    loop {
        report.passes += 1;
        let mut next = pending_interrupts.next();
        let mut restarted = false;
        for step in 0..GADGET_LEN {
            if let Some(&(signo, at)) = next {
                if at == step {
                    next = None;
                    if crate::signal_virt::interrupt_monitor(s, tid, signo) {
                        report.queued.push(signo);
                        report.restarts += 1;
                        restarted = true;
                        break;
                    }
                }
            }
            if let Some(pad) = s.trampoline.pads.get_mut(&tid) {
                if pad.gadget_at.is_some() && step == GADGET_LEN - 1 {
                    pad.gadget_at = None;
                }
            }
        }
        if !restarted {
            break;
        }
    }
    report
}

#[cfg(test)]
mod tests;
