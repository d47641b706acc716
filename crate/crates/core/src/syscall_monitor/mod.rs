//! The monitor's syscall path. A syscall runs in four phases (enter through
//! the gate, screen and lock, handle, exit through the gate); `dispatch` runs
//! them back to back, while the interleaving explorer schedules them one at
//! a time.

mod args;
mod file_ops;
mod mem_ops;
mod proc_ops;
mod scan;
mod sig_ops;
mod table;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use args::{
    parse_iovec, screen_args, touches_trusted, Arg, ArgCopy, ArgSnapshot, RawArg, ScreenVerdict,
    SyscallRequest, IOVEC_SIZE, PATH_MAX,
};
pub use mem_ops::{
    MAP_ANONYMOUS, MAP_FIXED, MAP_PRIVATE, MAP_SHARED, MREMAP_FIXED, MREMAP_MAYMOVE, PROT_EXEC,
    PROT_READ, PROT_WRITE,
};
pub use proc_ops::{CLONE_THREAD, CLONE_VM};
pub use scan::{code_scan, ScanResult, SCAN_CHUNK, SYSCALL, SYSENTER, WRPKRU};
pub use table::{classify, HandlerId, SyscallClass, SyscallTable, TableError};

use crate::formal_state::{
    pages_spanned, Access, AccessFault, Addr, DenyReason, DomainId, FaultReason, Fd, MachineState,
    Pkru, Rejection, Tid,
};
use crate::nexpoline;
use crate::signal_virt::{self, SigFrame};

pub const PR_SET_SECCOMP: u64 = 22;
pub const PR_SET_SYSCALL_USER_DISPATCH: u64 = 59;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LockKey {
    PerFd(Fd),
    Mapping,
    Signal,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LockTable {
    pub per_fd: BTreeMap<Fd, Tid>,
    pub mapping_global: Option<Tid>,
    pub signal_global: Option<Tid>,
    pub acquisitions: u64,
}

impl LockTable {
    pub fn holder(&self, key: LockKey) -> Option<Tid> {
        match key {
            LockKey::PerFd(fd) => self.per_fd.get(&fd).copied(),
            LockKey::Mapping => self.mapping_global,
            LockKey::Signal => self.signal_global,
        }
    }

    /// Takes `key` for `tid`, or reports the thread holding it.
    pub fn try_acquire(&mut self, key: LockKey, tid: Tid) -> Result<(), Tid> {
        match self.holder(key) {
            Some(h) if h != tid => return Err(h),
            Some(_) => return Ok(()),
            None => {}
        }
        match key {
            LockKey::PerFd(fd) => {
                self.per_fd.insert(fd, tid);
            }
            LockKey::Mapping => self.mapping_global = Some(tid),
            LockKey::Signal => self.signal_global = Some(tid),
        }
        self.acquisitions += 1;
        Ok(())
    }

    pub fn release(&mut self, key: LockKey, tid: Tid) {
        if self.holder(key) != Some(tid) {
            return;
        }
        match key {
            LockKey::PerFd(fd) => {
                self.per_fd.remove(&fd);
            }
            LockKey::Mapping => self.mapping_global = None,
            LockKey::Signal => self.signal_global = None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_fd.is_empty() && self.mapping_global.is_none() && self.signal_global.is_none()
    }
}

/// The lock a request must hold while it is screened and handled.
pub fn lock_for(req: &SyscallRequest) -> Option<LockKey> {
    match req.name.as_str() {
        "read" | "write" | "pread64" | "pwrite64" | "readv" | "writev" | "preadv" | "pwritev"
        | "lseek" | "close" | "dup" | "dup2" | "fstat" => Some(LockKey::PerFd(req.int(0) as Fd)),
        "mmap" | "mprotect" | "munmap" | "mremap" | "brk" => Some(LockKey::Mapping),
        "rt_sigaction" | "rt_sigprocmask" | "sigaltstack" | "rt_sigsuspend" => {
            Some(LockKey::Signal)
        }
        _ => None,
    }
}

/// Kernel-side access check on behalf of `domain`: the hardware keeps
/// enforcing the caller's key even in supervisor mode.
pub fn kernel_access(
    s: &MachineState,
    domain: DomainId,
    addr: Addr,
    len: u64,
    access: Access,
) -> Result<(), AccessFault> {
    let pkru = Pkru::for_domain(domain);
    for page in pages_spanned(addr, len.max(1)) {
        let at = Addr::from_page(page).max(addr);
        let rec = s.page(page).ok_or(AccessFault::Unmapped(at))?;
        let perm = match access {
            Access::Read => rec.perms.r,
            Access::Write => rec.perms.w,
            Access::Exec => rec.perms.x,
        };
        if !perm {
            return Err(AccessFault::PagePermission(at));
        }
        let key = pkru.access(rec.domain);
        let by_key = match access {
            Access::Read => key.read,
            Access::Write => key.write,
            Access::Exec => true,
        };
        if !by_key && !s.domains.is_granted(page, domain) {
            return Err(AccessFault::KeyDenied(at));
        }
    }
    Ok(())
}

/// What a handler sees of the request.
pub struct Ctx<'a> {
    pub tid: Tid,
    pub caller: DomainId,
    pub req: &'a SyscallRequest,
    pub snap: &'a ArgSnapshot,
}

impl Ctx<'_> {
    pub fn int(&self, i: usize) -> u64 {
        self.req.int(i)
    }

    pub fn fd(&self, i: usize) -> Fd {
        self.req.int(i) as Fd
    }

    /// A path argument, from the monitor's copy (or straight from memory
    /// when argument copying is off).
    pub fn path(&self, s: &MachineState, i: usize) -> Result<String, DenyReason> {
        let p = match self.req.args.get(i) {
            Some(Arg::Str(p)) => p.clone(),
            Some(Arg::CStr(addr)) => {
                if s.config.copy_args {
                    match self.snap.get(i) {
                        Some(ArgCopy::Path(p)) => p.clone(),
                        _ => String::new(),
                    }
                } else {
                    let bytes = s.read_bytes(*addr, PATH_MAX.min(64));
                    let end = bytes.iter().position(|b| *b == 0).unwrap_or(bytes.len());
                    String::from_utf8_lossy(&bytes[..end]).into_owned()
                }
            }
            _ => String::new(),
        };
        if p.is_empty() {
            return Err(DenyReason::BadArgs("empty path".into()));
        }
        Ok(p)
    }

    /// Input buffer contents and whether any byte came from a trusted page.
    pub fn input(&self, s: &MachineState, i: usize) -> (Vec<u8>, bool) {
        match self.req.args.get(i) {
            Some(Arg::Ptr { addr, len }) => {
                if s.config.copy_args {
                    match self.snap.get(i) {
                        Some(ArgCopy::Bytes(b)) => (b.clone(), false),
                        _ => (Vec::new(), false),
                    }
                } else {
                    let len = (*len).min(args::MAX_COPY);
                    (s.read_bytes(*addr, len), touches_trusted(s, *addr, len))
                }
            }
            _ => (Vec::new(), false),
        }
    }

    /// iovec entries, from the copy or re-read from memory.
    pub fn iov_entries(&self, s: &MachineState, i: usize) -> Vec<(Addr, u64)> {
        match self.req.args.get(i) {
            Some(Arg::IoVec { addr, count }) => {
                if s.config.copy_args {
                    match self.snap.get(i) {
                        Some(ArgCopy::IoVec(v, _)) => v.clone(),
                        _ => Vec::new(),
                    }
                } else {
                    let count = (*count).min(args::MAX_IOV);
                    parse_iovec(&s.read_bytes(*addr, count * IOVEC_SIZE))
                }
            }
            _ => Vec::new(),
        }
    }

    /// Concatenated input described by an iovec argument.
    pub fn iov_input(&self, s: &MachineState, i: usize) -> (Vec<u8>, bool) {
        if s.config.copy_args {
            if let Some(ArgCopy::IoVec(_, bufs)) = self.snap.get(i) {
                return (bufs.concat(), false);
            }
            return (Vec::new(), false);
        }
        let mut out = Vec::new();
        let mut tainted = false;
        for (base, len) in self.iov_entries(s, i) {
            let len = len.min(args::MAX_COPY);
            out.extend(s.read_bytes(base, len));
            tainted |= touches_trusted(s, base, len);
        }
        (out, tainted)
    }

    /// Kernel write of `data` into the caller's buffer at `addr`.
    pub fn output(&self, s: &mut MachineState, addr: Addr, data: &[u8]) -> Result<(), Rejection> {
        if data.is_empty() {
            return Ok(());
        }
        kernel_access(s, self.caller, addr, data.len() as u64, Access::Write)?;
        s.write_bytes(addr, data);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Screen,
    Handle,
    Exit,
    Done,
}

/// A syscall between its phases.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InFlight {
    pub req: SyscallRequest,
    pub caller: DomainId,
    pub phase: Phase,
    pub lock: Option<LockKey>,
    pub snapshot: Option<ArgSnapshot>,
    pub outcome: Option<Result<u64, Rejection>>,
    pub pkru_transitions: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyscallStatus {
    Ok(u64),
    Denied(DenyReason),
    Fault(FaultReason),
}

impl SyscallStatus {
    pub fn from_outcome(r: Result<u64, Rejection>) -> Self {
        match r {
            Ok(v) => SyscallStatus::Ok(v),
            Err(Rejection::Denied(d)) => SyscallStatus::Denied(d),
            Err(Rejection::Fault(f)) => SyscallStatus::Fault(f),
        }
    }

    pub fn into_result(self) -> Result<u64, Rejection> {
        match self {
            SyscallStatus::Ok(v) => Ok(v),
            SyscallStatus::Denied(d) => Err(Rejection::Denied(d)),
            SyscallStatus::Fault(f) => Err(Rejection::Fault(f)),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, SyscallStatus::Ok(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallResult {
    pub status: SyscallStatus,
    /// Domain switches on the way in and out of the monitor.
    pub pkru_transitions: u32,
    /// Signal frame handed to the caller on the way out, if any.
    pub delivered: Option<Box<SigFrame>>,
}

/// Enter phase: the thread passes the gate and the monitor takes over.
pub fn begin(s: &mut MachineState, req: SyscallRequest) -> Result<InFlight, Rejection> {
    if s.exited {
        return Err(DenyReason::NoSuchProcess.into());
    }
    let tid = req.tid;
    let t = s.thread(tid).ok_or(DenyReason::NoSuchThread)?;
    if !t.is_untrusted() || t.in_monitor {
        return Err(DenyReason::NotUntrusted.into());
    }
    let caller = t.current_domain;
    let t = s.thread_mut(tid).expect("checked");
    t.current_domain = DomainId::Trusted;
    t.pkru = Pkru::trusted();
    t.in_monitor = true;
    nexpoline::gate_enter(s, tid);
    Ok(InFlight {
        req,
        caller,
        phase: Phase::Screen,
        lock: None,
        snapshot: None,
        outcome: None,
        pkru_transitions: 1,
    })
}

/// Screen phase: copy and check pointer arguments, then take the lock the
/// request needs. Returns the holder if the lock is taken; nothing changes
/// in that case and the phase can be retried.
pub fn screen(s: &mut MachineState, fl: &mut InFlight) -> Result<(), Tid> {
    debug_assert_eq!(fl.phase, Phase::Screen);
    let snap = screen_args(s, fl.caller, &fl.req);
    if let Err(d) = snap.verdict.into_result() {
        fl.outcome = Some(Err(d.into()));
    } else if let Some(key) = lock_for(&fl.req) {
        s.locks.try_acquire(key, fl.req.tid)?;
        fl.lock = Some(key);
    }
    fl.snapshot = Some(snap);
    fl.phase = Phase::Handle;
    Ok(())
}

fn run_handler(s: &mut MachineState, fl: &InFlight, snap: &ArgSnapshot) -> Result<u64, Rejection> {
    let class = s.config.syscall_table.classify(&fl.req.name)?;
    let ctx = Ctx {
        tid: fl.req.tid,
        caller: fl.caller,
        req: &fl.req,
        snap,
    };
    match class {
        SyscallClass::Denied => Err(DenyReason::ForbiddenSyscall(fl.req.name.clone()).into()),
        SyscallClass::Passthrough => proc_ops::passthrough(s, &ctx),
        SyscallClass::Virtualized(HandlerId::File) => file_ops::handle(s, &ctx),
        SyscallClass::Virtualized(HandlerId::Mem) => mem_ops::handle(s, &ctx),
        SyscallClass::Virtualized(HandlerId::Proc) => proc_ops::handle(s, &ctx),
        SyscallClass::Virtualized(HandlerId::Sig) => sig_ops::handle(s, &ctx),
        SyscallClass::Virtualized(HandlerId::Prctl) => sig_ops::prctl(s, &ctx),
    }
}

/// Handle phase: classify and run the handler. A rejected handler leaves
/// the state as it was; the lock is released either way.
pub fn handle(s: &mut MachineState, fl: &mut InFlight) {
    debug_assert_eq!(fl.phase, Phase::Handle);
    if fl.outcome.is_none() {
        let snap = fl.snapshot.clone().unwrap_or(ArgSnapshot {
            copies: Vec::new(),
            verdict: ScreenVerdict::Ok,
        });
        let mut next = s.clone();
        let r = run_handler(&mut next, fl, &snap);
        if r.is_ok() {
            *s = next;
        }
        fl.outcome = Some(r);
    }
    if let Some(key) = fl.lock.take() {
        s.locks.release(key, fl.req.tid);
    }
    fl.phase = Phase::Exit;
}

/// Exit phase: leave through the gate, drop back to the caller's domain and
/// deliver anything pending.
pub fn finish(s: &mut MachineState, mut fl: InFlight) -> SyscallResult {
    debug_assert_eq!(fl.phase, Phase::Exit);
    let tid = fl.req.tid;
    let mut outcome = fl.outcome.take().unwrap_or(Ok(0));
    let mut delivered = None;
    if s.thread(tid).is_some() {
        if let Err(f) = nexpoline::gate_exit(s, tid) {
            let reason = match f {
                nexpoline::GateFault::CetControlFault => FaultReason::CetControl,
                nexpoline::GateFault::GadgetVisible => FaultReason::Int3,
            };
            outcome = Err(reason.into());
        }
        let sigreturn = fl.req.name == "rt_sigreturn" && outcome.is_ok();
        if !(sigreturn && signal_virt::restore_frame(s, tid).is_some()) {
            let t = s.thread_mut(tid).expect("checked");
            t.current_domain = fl.caller;
            t.pkru = Pkru::for_domain(fl.caller);
            t.in_monitor = false;
        }
        fl.pkru_transitions += 1;
        let retval = outcome.as_ref().ok().copied();
        if !s.exited {
            delivered = signal_virt::try_deliver(s, tid, retval).map(Box::new);
        }
    } else {
        // The thread is gone (exit); it still left the monitor once.
        fl.pkru_transitions += 1;
    }
    fl.phase = Phase::Done;
    SyscallResult {
        status: SyscallStatus::from_outcome(outcome),
        pkru_transitions: fl.pkru_transitions,
        delivered,
    }
}

/// Runs a syscall to completion. A denied or faulting syscall returns the
/// input state untouched.
pub fn dispatch(s: &MachineState, req: SyscallRequest) -> (MachineState, SyscallResult) {
    let mut next = s.clone();
    let mut fl = match begin(&mut next, req) {
        Ok(fl) => fl,
        Err(r) => {
            return (
                s.clone(),
                SyscallResult {
                    status: SyscallStatus::from_outcome(Err(r)),
                    pkru_transitions: 0,
                    delivered: None,
                },
            )
        }
    };
    if let Err(holder) = screen(&mut next, &mut fl) {
        fl.outcome = Some(Err(DenyReason::WouldBlock(holder).into()));
        fl.phase = Phase::Handle;
    }
    handle(&mut next, &mut fl);
    let result = finish(&mut next, fl);
    if result.status.is_ok() {
        (next, result)
    } else {
        (s.clone(), result)
    }
}

#[cfg(test)]
mod tests;
