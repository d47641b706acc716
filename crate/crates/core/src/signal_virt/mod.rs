//! Signal virtualization: the virtual handler table, the one-deep pending
//! queue with its kernel mask, the from-kernel flag protocol at the monitor
//! entrypoint, frame issue and virtual sigreturn.

use std::collections::BTreeMap;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::formal_state::{
    layout, Access, Addr, DenyReason, DomainId, MachineState, Pkru, Rejection, Signo, Tid,
};

pub const SIGINT: Signo = 2;
pub const SIGKILL: Signo = 9;
pub const SIGUSR1: Signo = 10;
pub const SIGSEGV: Signo = 11;
pub const SIGUSR2: Signo = 12;
pub const SIGCHLD: Signo = 17;
pub const SIGSTOP: Signo = 19;
pub const SIGURG: Signo = 23;
pub const SIGWINCH: Signo = 28;
pub const SIGSYS: Signo = 31;
pub const NSIG: Signo = 64;

/// Space reserved below the stack pointer for one signal frame.
pub const FRAME_SIZE: u64 = 0x200;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SigSet(pub u64);

impl SigSet {
    pub const EMPTY: SigSet = SigSet(0);

    pub fn of(signos: &[Signo]) -> SigSet {
        let mut s = SigSet::EMPTY;
        for &n in signos {
            s.insert(n);
        }
        s
    }

    fn bit(signo: Signo) -> u64 {
        debug_assert!((1..=NSIG).contains(&signo));
        1u64 << (signo - 1)
    }

    pub fn contains(self, signo: Signo) -> bool {
        (1..=NSIG).contains(&signo) && self.0 & Self::bit(signo) != 0
    }

    pub fn insert(&mut self, signo: Signo) {
        self.0 |= Self::bit(signo);
    }

    pub fn remove(&mut self, signo: Signo) {
        self.0 &= !Self::bit(signo);
    }

    pub fn iter(self) -> impl Iterator<Item = Signo> {
        (1..=NSIG).filter(move |&n| self.contains(n))
    }
}

impl fmt::Display for SigSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v: Vec<String> = self.iter().map(|n| n.to_string()).collect();
        write!(f, "{{{}}}", v.join(","))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Handler {
    #[default]
    Default,
    Ignore,
    At(Addr),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SigAction {
    pub handler: Handler,
    pub mask: SigSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PendingSignal {
    pub signo: Signo,
    pub target: Tid,
}

/// A frame the monitor hands to an untrusted handler. The monitor keeps its
/// own copy; the untrusted copy is only trusted as far as its token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SigFrame {
    pub tid: Tid,
    pub signo: Signo,
    pub pkru: Pkru,
    pub handler: Addr,
    pub frame_addr: Addr,
    pub on_altstack: bool,
    /// Return value of the syscall the signal interrupted, if any.
    pub retval: Option<u64>,
    pub saved_domain: DomainId,
    pub saved_stack_ptr: Addr,
    pub saved_stack_domain: DomainId,
    pub token: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignalState {
    pub table: BTreeMap<Signo, SigAction>,
    /// One slot per signal number.
    pub pending: BTreeMap<Signo, PendingSignal>,
    pub kernel_mask: SigSet,
    /// Instances the kernel holds because the signal is masked at its level.
    pub kernel_held: BTreeMap<Signo, u32>,
    pub override_mask: Option<SigSet>,
    pub user_mask: SigSet,
    /// Top of each thread's registered alternate stack.
    pub altstack: BTreeMap<Tid, Addr>,
    /// Frames issued and not yet returned from, innermost last.
    pub issued: BTreeMap<Tid, Vec<SigFrame>>,
    pub entry_active: bool,
    pub reentries: u64,
    /// Signals that reached the monitor entrypoint.
    pub accepted: u64,
    pub delivered: u64,
    /// Signals consumed by an ignore or default action.
    pub disposed: u64,
    pub trusted_frames: u64,
    pub terminated: Option<Signo>,
}

impl SignalState {
    pub fn held_total(&self) -> u64 {
        self.kernel_held.values().map(|&n| n as u64).sum()
    }

    /// The queue invariant: a slot is occupied exactly when the kernel mask
    /// bit for that signal is set.
    pub fn queue_consistent(&self) -> bool {
        (1..=NSIG).all(|n| self.pending.contains_key(&n) == self.kernel_mask.contains(n))
            && self.pending.iter().all(|(n, p)| *n == p.signo)
    }
}

/// Where the delivery found the target thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Interrupted {
    InUntrusted,
    InMonitor,
    InSubdomain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryOutcome {
    /// Masked at the kernel level; the kernel keeps it.
    Held,
    Deferred(Interrupted),
    Delivered(Box<SigFrame>),
    /// Consumed by an ignore or default action on arrival.
    Disposed,
    Terminated,
    Stopped,
}

fn check_signo(signo: Signo) -> Result<(), DenyReason> {
    if (1..=NSIG).contains(&signo) {
        Ok(())
    } else {
        Err(DenyReason::BadArgs(format!("signal {signo}")))
    }
}

/// Updates the virtual handler table. The kernel-side registration keeps
/// pointing at the monitor entrypoint, with every signal masked while it
/// runs, so nothing changes there.
pub fn vsigaction(
    s: &mut MachineState,
    signo: Signo,
    handler: Handler,
    mask: SigSet,
) -> Result<Option<SigAction>, DenyReason> {
    check_signo(signo)?;
    if signo == SIGKILL || signo == SIGSTOP {
        return Err(DenyReason::Uncatchable);
    }
    if s.config.reserved_signals.contains(&signo) {
        return Err(DenyReason::ReservedSignal);
    }
    if let Handler::At(addr) = handler {
        match s.page(addr.page()) {
            Some(rec) if rec.domain.is_trusted() => return Err(DenyReason::PointsIntoTrusted),
            Some(rec) if rec.perms.x => {}
            _ => return Err(DenyReason::BadArgs(format!("handler {addr} is not code"))),
        }
    }
    Ok(s.signals.table.insert(signo, SigAction { handler, mask }))
}

fn interrupted_context(s: &MachineState, tid: Tid) -> Interrupted {
    match s.thread(tid) {
        Some(t) if t.in_monitor || t.current_domain.is_trusted() => Interrupted::InMonitor,
        Some(t) if t.sig_blocked => Interrupted::InSubdomain,
        _ => Interrupted::InUntrusted,
    }
}

/// The monitor entrypoint for a genuine kernel delivery. The kernel runs it
/// under the registering (monitor) key, so raising the flag succeeds.
fn run_entrypoint(s: &mut MachineState, tid: Tid, signo: Signo) {
    if s.signals.entry_active {
        s.signals.reentries += 1;
    }
    s.signals.entry_active = true;
    s.write_u64(layout::SIGNAL_FLAG, 1);
    let genuine = s.read_u64(layout::SIGNAL_FLAG) == 1;
    s.write_u64(layout::SIGNAL_FLAG, 0);
    if genuine {
        s.signals.accepted += 1;
        s.signals
            .pending
            .insert(signo, PendingSignal { signo, target: tid });
        s.signals.kernel_mask.insert(signo);
    }
    s.signals.entry_active = false;
}

fn terminate(s: &mut MachineState, signo: Signo) {
    s.signals.terminated = Some(signo);
    s.exited = true;
}

/// A signal raised by the kernel at thread `tid`.
pub fn kernel_deliver(
    s: &mut MachineState,
    tid: Tid,
    signo: Signo,
) -> Result<DeliveryOutcome, Rejection> {
    check_signo(signo)?;
    if s.exited {
        return Err(DenyReason::NoSuchProcess.into());
    }
    if s.thread(tid).is_none() {
        return Err(DenyReason::NoSuchThread.into());
    }
    match signo {
        SIGKILL => {
            terminate(s, signo);
            return Ok(DeliveryOutcome::Terminated);
        }
        SIGSTOP => return Ok(DeliveryOutcome::Stopped),
        _ => {}
    }
    if s.signals.kernel_mask.contains(signo) || s.signals.entry_active {
        *s.signals.kernel_held.entry(signo).or_default() += 1;
        return Ok(DeliveryOutcome::Held);
    }
    run_entrypoint(s, tid, signo);
    let ctx = interrupted_context(s, tid);
    if ctx != Interrupted::InUntrusted {
        return Ok(DeliveryOutcome::Deferred(ctx));
    }
    // Untrusted code was interrupted: resume through the exit gate, which
    // delivers whatever is pending.
    let before = s.signals.disposed;
    match try_deliver(s, tid, None) {
        Some(frame) => Ok(DeliveryOutcome::Delivered(Box::new(frame))),
        None if s.exited => Ok(DeliveryOutcome::Terminated),
        None if s.signals.disposed > before => Ok(DeliveryOutcome::Disposed),
        None => Ok(DeliveryOutcome::Deferred(ctx)),
    }
}

/// Signal arriving while `tid` runs inside the monitor. Returns `true` when
/// the entrypoint ran (so the interrupted monitor code observes it), `false`
/// when the kernel held it.
pub fn interrupt_monitor(s: &mut MachineState, tid: Tid, signo: Signo) -> bool {
    matches!(
        kernel_deliver(s, tid, signo),
        Ok(DeliveryOutcome::Deferred(_))
    )
}

/// Where in the entrypoint a forged entry lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Landing {
    /// At the first instruction, which raises the flag.
    Start,
    /// Past the flag write, at the key switch and flag check.
    AfterFlagSet,
    /// Past the check, straight into the delivery code.
    AfterCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForgeOutcome {
    /// Raising the flag under the untrusted key faults.
    FlagWriteFaulted,
    /// The key switch is followed by the flag check, which fails and exits.
    FlagCheckFailed,
    /// The delivery code touches monitor data under the unchanged key.
    NoPrivilege,
}

/// Untrusted code jumps into the monitor's signal entrypoint with a crafted
/// frame. Every landing is rejected and no state changes.
pub fn forged_entry(
    s: &MachineState,
    tid: Tid,
    landing: Landing,
) -> Result<ForgeOutcome, DenyReason> {
    let t = s.thread(tid).ok_or(DenyReason::NoSuchThread)?;
    if !t.is_untrusted() || t.in_monitor {
        return Err(DenyReason::NotUntrusted);
    }
    let flag_write = s.check_access(tid, layout::SIGNAL_FLAG, 8, Access::Write);
    Ok(match landing {
        Landing::Start => {
            debug_assert!(flag_write.is_err());
            ForgeOutcome::FlagWriteFaulted
        }
        Landing::AfterFlagSet => {
            // The switch to the monitor key is only trusted after the flag
            // reads back as 1; it reads 0 because no kernel raised it.
            if s.read_u64(layout::SIGNAL_FLAG) == 1 {
                unreachable!("flag is reset after every genuine delivery");
            }
            ForgeOutcome::FlagCheckFailed
        }
        Landing::AfterCheck => {
            debug_assert!(s
                .check_access(tid, layout::SECRET, 8, Access::Read)
                .is_err());
            ForgeOutcome::NoPrivilege
        }
    })
}

/// Lowest pending signal not blocked by the override mask (when set) or the
/// user mask. The override mask is consumed by this call.
pub fn select_pending(s: &mut MachineState) -> Option<Signo> {
    let mask = s
        .signals
        .override_mask
        .take()
        .unwrap_or(s.signals.user_mask);
    s.signals
        .pending
        .keys()
        .copied()
        .find(|&n| !mask.contains(n))
}

/// Builds the frame for `signo` on the untrusted (or alternate) stack and
/// points the thread at the handler.
pub fn deliver_to_untrusted(
    s: &mut MachineState,
    tid: Tid,
    signo: Signo,
    handler: Addr,
    retval: Option<u64>,
) -> SigFrame {
    let t = s.thread(tid).expect("delivery target exists").clone();
    let on_alt_already = s
        .signals
        .issued
        .get(&tid)
        .is_some_and(|fs| fs.iter().any(|f| f.on_altstack));
    let (top, on_altstack) = match s.signals.altstack.get(&tid) {
        Some(&alt) if !on_alt_already => (alt, true),
        _ => (t.stack_ptr, false),
    };
    let frame_addr = Addr((top.0.saturating_sub(FRAME_SIZE)) & !0xf);
    let frame = SigFrame {
        tid,
        signo,
        pkru: Pkru::for_domain(t.current_domain),
        handler,
        frame_addr,
        on_altstack,
        retval,
        saved_domain: t.current_domain,
        saved_stack_ptr: t.stack_ptr,
        saved_stack_domain: t.stack_domain,
        token: s.rng.next_u64(),
    };
    s.signals.issued.entry(tid).or_default().push(frame.clone());
    s.signals.delivered += 1;
    if frame.pkru.grants_trusted() {
        s.signals.trusted_frames += 1;
    }
    let t = s.thread_mut(tid).expect("delivery target exists");
    t.stack_ptr = frame_addr;
    frame
}

fn default_ignores(signo: Signo) -> bool {
    matches!(signo, SIGCHLD | SIGURG | SIGWINCH)
}

/// Delivers the next deliverable pending signal to `tid` if it is about to
/// run untrusted code with signals enabled.
pub fn try_deliver(s: &mut MachineState, tid: Tid, retval: Option<u64>) -> Option<SigFrame> {
    let t = s.thread(tid)?;
    if !t.is_untrusted() || t.in_monitor || t.sig_blocked || s.exited {
        return None;
    }
    loop {
        let signo = select_pending(s)?;
        s.signals.pending.remove(&signo);
        s.signals.kernel_mask.remove(signo);
        // Unmasking lets the kernel re-deliver one held instance; the
        // entrypoint runs while the monitor is still delivering and parks it
        // in the slot.
        if let Some(n) = s.signals.kernel_held.get_mut(&signo) {
            *n -= 1;
            if *n == 0 {
                s.signals.kernel_held.remove(&signo);
            }
            s.signals
                .pending
                .insert(signo, PendingSignal { signo, target: tid });
            s.signals.kernel_mask.insert(signo);
            s.signals.accepted += 1;
        }
        let action = s.signals.table.get(&signo).copied().unwrap_or_default();
        match action.handler {
            Handler::At(addr) => return Some(deliver_to_untrusted(s, tid, signo, addr, retval)),
            Handler::Ignore => s.signals.disposed += 1,
            Handler::Default if default_ignores(signo) => s.signals.disposed += 1,
            Handler::Default => {
                s.signals.disposed += 1;
                terminate(s, signo);
                return None;
            }
        }
    }
}

/// Checks that `frame` is the innermost frame issued to `tid`. Only the
/// token, the signal number and the key image are compared: everything else
/// is restored from the monitor's copy anyway.
pub fn check_frame(s: &MachineState, tid: Tid, frame: &SigFrame) -> Result<(), DenyReason> {
    let issued = s
        .signals
        .issued
        .get(&tid)
        .and_then(|v| v.last())
        .ok_or(DenyReason::TamperedFrame)?;
    if frame.token != issued.token || frame.signo != issued.signo || frame.pkru != issued.pkru {
        return Err(DenyReason::TamperedFrame);
    }
    Ok(())
}

/// Restores the context saved in the innermost issued frame of `tid`.
pub fn restore_frame(s: &mut MachineState, tid: Tid) -> Option<SigFrame> {
    let frame = s.signals.issued.get_mut(&tid)?.pop()?;
    if s.signals.issued.get(&tid).is_some_and(Vec::is_empty) {
        s.signals.issued.remove(&tid);
    }
    let t = s.thread_mut(tid)?;
    let domain = if frame.saved_domain.is_trusted() {
        DomainId::APP
    } else {
        frame.saved_domain
    };
    t.current_domain = domain;
    t.pkru = Pkru::for_domain(domain);
    t.in_monitor = false;
    t.stack_ptr = frame.saved_stack_ptr;
    t.stack_domain = frame.saved_stack_domain;
    Some(frame)
}

/// Virtual sigreturn: verify, restore, then chain delivery of anything
/// pending before a single untrusted instruction runs.
pub fn vsigreturn(
    s: &mut MachineState,
    tid: Tid,
    frame: &SigFrame,
) -> Result<Option<SigFrame>, DenyReason> {
    check_frame(s, tid, frame)?;
    restore_frame(s, tid);
    Ok(try_deliver(s, tid, None))
}

/// The innermost frame issued to `tid`, as the untrusted handler sees it.
pub fn current_frame(s: &MachineState, tid: Tid) -> Option<&SigFrame> {
    s.signals.issued.get(&tid).and_then(|v| v.last())
}

/// Sets the user mask (`how`: 0 block, 1 unblock, 2 set). Uncatchable and
/// reserved signals are never masked.
pub fn sigprocmask(s: &mut MachineState, how: u64, set: SigSet) -> Result<SigSet, DenyReason> {
    let old = s.signals.user_mask;
    let mut new = match how {
        0 => SigSet(old.0 | set.0),
        1 => SigSet(old.0 & !set.0),
        2 => set,
        _ => return Err(DenyReason::BadArgs(format!("sigprocmask how {how}"))),
    };
    new.0 &= (1u64 << (NSIG - 1) << 1).wrapping_sub(1);
    for n in [SIGKILL, SIGSTOP] {
        new.remove(n);
    }
    for &n in &s.config.reserved_signals {
        new.remove(n);
    }
    s.signals.user_mask = new;
    Ok(old)
}

#[cfg(test)]
mod tests;
