//! Transition framework: a transition either commits a safe successor state,
//! is rejected by policy (state untouched), or trips a safety breach.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::machine::{AccessFault, MachineState};
use super::safety::{safety_check, SafetyVerdict};

/// Reasons the monitor refuses a request.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
pub enum DenyReason {
    #[error("inode is on the sensitive list")]
    SensitiveInode,
    #[error("argument points into trusted memory")]
    PointsIntoTrusted,
    #[error("argument points into another domain")]
    PointsIntoForeignDomain,
    #[error("bad file descriptor")]
    BadFd,
    #[error("writable and executable")]
    WXViolation,
    #[error("file region already mapped by another domain")]
    AliasViolation,
    #[error("pages belong to another domain")]
    ForeignDomain,
    #[error("forbidden opcode at offset {offset}")]
    ScanFailed { offset: u64 },
    #[error("shared pages cannot become executable")]
    SharedToExec,
    #[error("only retired pages can become executable")]
    NotRetired,
    #[error("executable mappings are locked down")]
    ExecLocked,
    #[error("address range not mapped")]
    NotMapped,
    #[error("address or length not page aligned")]
    Misaligned,
    #[error("forbidden system call {0}")]
    ForbiddenSyscall(String),
    #[error("unknown system call {0}")]
    UnknownSyscall(String),
    #[error("clone flags share the address space")]
    ForbiddenCloneFlags,
    #[error("cross-process memory access")]
    CrossProcessMemory,
    #[error("thread creation must go through the queen thread")]
    QueenRequired,
    #[error("signal frame failed the integrity check")]
    TamperedFrame,
    #[error("signal entry not raised by the kernel")]
    ForgedSignal,
    #[error("signal reserved by the monitor")]
    ReservedSignal,
    #[error("signal cannot be caught")]
    Uncatchable,
    #[error("no such entrypoint")]
    BadEntrypoint,
    #[error("returns must unwind in nested order")]
    ReturnOrder,
    #[error("caller does not own the page")]
    NotOwner,
    #[error("grants only flow to less privileged domains")]
    UpwardGrant,
    #[error("lateral call between peer domains")]
    LateralCall,
    #[error("caller is already in the target domain")]
    SameDomain,
    #[error("no protection key left")]
    DomainsExhausted,
    #[error("page owned by another domain")]
    PageOwnedElsewhere,
    #[error("too many call arguments")]
    TooManyArgs,
    #[error("transactional memory disabled")]
    TsxDisabled,
    #[error("no such thread")]
    NoSuchThread,
    #[error("no such process")]
    NoSuchProcess,
    #[error("caller must be running untrusted")]
    NotUntrusted,
    #[error("probe found nothing")]
    NothingLeaked,
    #[error("would block on a lock held by thread {0}")]
    WouldBlock(u32),
    #[error("malformed arguments: {0}")]
    BadArgs(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
pub enum FaultReason {
    #[error("memory access fault: {0:?}")]
    Access(AccessFault),
    #[error("control-flow protection fault")]
    CetControl,
    #[error("trap instruction executed")]
    Int3,
    #[error("killed by the syscall filter")]
    KilledByFilter,
    #[error("invalid opcode")]
    InvalidOpcode,
}

impl From<AccessFault> for FaultReason {
    fn from(f: AccessFault) -> Self {
        FaultReason::Access(f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
pub enum Rejection {
    #[error("denied: {0}")]
    Denied(DenyReason),
    #[error("fault: {0}")]
    Fault(FaultReason),
}

impl From<DenyReason> for Rejection {
    fn from(r: DenyReason) -> Self {
        Rejection::Denied(r)
    }
}

impl From<FaultReason> for Rejection {
    fn from(f: FaultReason) -> Self {
        Rejection::Fault(f)
    }
}

impl From<AccessFault> for Rejection {
    fn from(f: AccessFault) -> Self {
        Rejection::Fault(FaultReason::Access(f))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("policy denied: {0}")]
    PolicyDenied(Rejection),
    #[error("safety breach: {0:?}")]
    SafetyBreach(SafetyVerdict),
}

/// What a committed transition produced besides the new state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effect {
    pub value: u64,
    /// Domain switches recorded on the way (two per dispatched syscall).
    pub pkru_transitions: u32,
    /// The step reached something it must never reach (attack succeeded).
    pub bypass: bool,
}

impl Effect {
    pub fn value(value: u64) -> Self {
        Effect {
            value,
            ..Effect::default()
        }
    }
}

/// Anything that can be applied to a machine state.
pub trait Step {
    fn step(&self, s: &mut MachineState) -> Result<Effect, Rejection>;
}

/// The identity transition.
pub struct Noop;

impl Step for Noop {
    fn step(&self, _: &mut MachineState) -> Result<Effect, Rejection> {
        Ok(Effect::default())
    }
}

/// Applies `t` to a copy of `s`. Rejections and breaches leave `s` as it was;
/// a committed successor always passes [`safety_check`].
pub fn apply_transition<T: Step + ?Sized>(
    s: &MachineState,
    t: &T,
) -> Result<(MachineState, Effect), TransitionError> {
    let mut next = s.clone();
    let effect = t.step(&mut next).map_err(TransitionError::PolicyDenied)?;
    let verdict = safety_check(&next);
    if !verdict.is_safe() {
        return Err(TransitionError::SafetyBreach(verdict));
    }
    Ok((next, effect))
}

#[derive(Clone, Debug)]
pub struct TraceReport {
    pub final_state: MachineState,
    pub steps: usize,
    pub denials: usize,
    pub denied: Vec<(usize, Rejection)>,
    pub breach: Option<(usize, SafetyVerdict)>,
    pub pkru_transitions: u64,
    pub bypasses: usize,
}

impl TraceReport {
    pub fn breached(&self) -> bool {
        self.breach.is_some()
    }
}

/// Applies transitions in order, recording denials and stopping at the
/// first safety breach.
pub fn run_trace<'a, T, I>(s0: MachineState, ts: I) -> TraceReport
where
    T: Step + ?Sized + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut report = TraceReport {
        final_state: s0,
        steps: 0,
        denials: 0,
        denied: Vec::new(),
        breach: None,
        pkru_transitions: 0,
        bypasses: 0,
    };
    for (i, t) in ts.into_iter().enumerate() {
        report.steps = i + 1;
        match apply_transition(&report.final_state, t) {
            Ok((next, effect)) => {
                report.final_state = next;
                report.pkru_transitions += effect.pkru_transitions as u64;
                report.bypasses += effect.bypass as usize;
            }
            Err(TransitionError::PolicyDenied(r)) => {
                report.denials += 1;
                report.denied.push((i, r));
            }
            Err(TransitionError::SafetyBreach(v)) => {
                report.breach = Some((i, v));
                break;
            }
        }
    }
    report
}
