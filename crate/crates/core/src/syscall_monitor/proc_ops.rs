//! Process virtualization (fork, exec, thread creation, cross-process memory)
//! and the passthrough calls.

use rand::RngCore;

use crate::formal_state::{
    layout, pages_spanned, Access, Addr, DenyReason, DomainId, MachineState, OpenFile, Pkru,
    Rejection, Tid,
};
use crate::nexpoline;
use crate::signal_virt::{Handler, SignalState};

use super::{kernel_access, Ctx};

pub const CLONE_VM: u64 = 0x100;
pub const CLONE_THREAD: u64 = 0x10000;

/// Largest buffer a passthrough call fills.
const MAX_OUT: u64 = 4096;

pub fn passthrough(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    match ctx.req.name.as_str() {
        "getpid" => Ok(s.pid),
        "getppid" => Ok(s.pid / 1000),
        "gettid" => Ok(ctx.tid as u64),
        "getuid" => Ok(1000),
        "nanosleep" | "sched_yield" | "futex" => Ok(0),
        "clock_gettime" => {
            let now = s.trampoline.rerand_counter.to_le_bytes();
            let mut ts = [0u8; 16];
            ts[8..].copy_from_slice(&now);
            ctx.output(s, Addr(ctx.int(1)), &ts)?;
            Ok(0)
        }
        "uname" => {
            let mut buf = vec![0u8; 390];
            buf[..7].copy_from_slice(b"endosim");
            ctx.output(s, Addr(ctx.int(0)), &buf)?;
            Ok(0)
        }
        "getrandom" => {
            let mut buf = vec![0u8; ctx.int(1).min(MAX_OUT) as usize];
            s.rng.fill_bytes(&mut buf);
            ctx.output(s, Addr(ctx.int(0)), &buf)?;
            Ok(buf.len() as u64)
        }
        "socket" => {
            let fd = s.lowest_free_fd();
            let path = format!("socket:[{fd}]");
            let inode = s.fs.resolve_or_create(&path);
            s.open_files.insert(
                fd,
                OpenFile {
                    fd,
                    inode,
                    path,
                    offset: 0,
                    sensitive: false,
                },
            );
            Ok(fd as u64)
        }
        "exit" => {
            exit_thread(s, ctx.tid);
            Ok(0)
        }
        "exit_group" => {
            s.exited = true;
            Ok(0)
        }
        other => Err(DenyReason::UnknownSyscall(other.to_string()).into()),
    }
}

fn exit_thread(s: &mut MachineState, tid: Tid) {
    nexpoline::detach_thread(s, tid);
    s.threads.remove(&tid);
    s.signals.issued.remove(&tid);
    s.signals.altstack.remove(&tid);
    if s.threads.is_empty() {
        s.exited = true;
    }
}

pub fn handle(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    match ctx.req.name.as_str() {
        "fork" | "vfork" => fork(s, ctx),
        "clone" => {
            let flags = ctx.int(0);
            if flags & CLONE_VM != 0 && flags & CLONE_THREAD == 0 {
                return Err(DenyReason::ForbiddenCloneFlags.into());
            }
            if flags & CLONE_THREAD != 0 {
                Ok(nexpoline::spawn_thread_in(s, ctx.caller) as u64)
            } else {
                fork(s, ctx)
            }
        }
        "execve" => execve(s, ctx),
        "process_vm_readv" => process_vm(s, ctx, false),
        "process_vm_writev" => process_vm(s, ctx, true),
        other => Err(DenyReason::UnknownSyscall(other.to_string()).into()),
    }
}

/// Fork (and vfork, which is emulated by it): the child is a full copy
/// under the same configuration, holding only the calling thread, and joins
/// the protection sphere.
fn fork(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    let index = s.children.len() as u64 + 1;
    let pid = s
        .pid
        .checked_mul(1000)
        .and_then(|p| p.checked_add(index))
        .ok_or_else(|| DenyReason::BadArgs("process tree too deep".into()))?;
    let mut child = s.clone();
    child.pid = pid;
    child.children.clear();
    child.locks = Default::default();
    child.fs.mark_sensitive(&format!("/proc/{pid}/mem"));
    let others: Vec<Tid> = child
        .threads
        .keys()
        .copied()
        .filter(|t| *t != ctx.tid)
        .collect();
    for t in others {
        nexpoline::detach_thread(&mut child, t);
        child.threads.remove(&t);
        child.signals.issued.remove(&t);
        child.signals.altstack.remove(&t);
    }
    // Pending signals are not inherited.
    child.signals = SignalState {
        table: child.signals.table.clone(),
        user_mask: child.signals.user_mask,
        altstack: child.signals.altstack.clone(),
        issued: child.signals.issued.clone(),
        ..SignalState::default()
    };
    // The child returns to user code through the same exit gate.
    nexpoline::gate_exit(&mut child, ctx.tid)
        .map_err(|_| DenyReason::BadArgs("gate state".into()))?;
    if let Some(t) = child.thread_mut(ctx.tid) {
        t.current_domain = ctx.caller;
        t.pkru = Pkru::for_domain(ctx.caller);
        t.in_monitor = false;
    }
    s.children.push(child);
    Ok(pid)
}

/// Replaces the program image. The monitor, its filter and every policy
/// table survive; user mappings do not. Open descriptors are inherited.
fn execve(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    if ctx.caller != DomainId::APP {
        return Err(DenyReason::ForeignDomain.into());
    }
    let path = ctx.path(s, 0)?;
    let ino =
        s.fs.resolve(&path)
            .ok_or_else(|| DenyReason::BadArgs(format!("no such file {path}")))?;
    if s.fs.is_sensitive(ino) {
        return Err(DenyReason::SensitiveInode.into());
    }
    let seed = s.rng.next_u64();
    let mut next = MachineState::with_config((*s.config).clone(), seed);
    next.config = s.config.clone();
    next.pid = s.pid;
    next.fs = s.fs.clone();
    next.open_files = s.open_files.clone();
    next.children = std::mem::take(&mut s.children);
    next.signals.user_mask = s.signals.user_mask;
    next.signals.table = s
        .signals
        .table
        .iter()
        .filter(|(_, a)| a.handler == Handler::Ignore)
        .map(|(n, a)| (*n, *a))
        .collect();
    next.start_app();
    let tid = ctx.tid;
    if tid != 0 {
        nexpoline::detach_thread(&mut next, 0);
        next.threads.remove(&0);
        next.pages
            .remove(&(Addr(layout::STACKS_TOP.0 - crate::formal_state::PAGE_SIZE).page()));
        let sp = next.map_thread_stack(tid, DomainId::APP);
        next.threads.insert(
            tid,
            crate::formal_state::ThreadCtx::untrusted_thread(tid, DomainId::APP, sp),
        );
        nexpoline::attach_thread(&mut next, tid);
    }
    next.next_tid = s.next_tid.max(tid + 1);
    // The caller is still inside the monitor; it leaves through the new
    // image's exit gate.
    let t = next.thread_mut(tid).expect("caller thread");
    t.current_domain = DomainId::Trusted;
    t.pkru = Pkru::trusted();
    t.in_monitor = true;
    nexpoline::gate_enter(&mut next, tid);
    *s = next;
    Ok(0)
}

/// Same-process only; the remote range is screened like any pointer.
fn process_vm(s: &mut MachineState, ctx: &Ctx<'_>, write: bool) -> Result<u64, Rejection> {
    let pid = ctx.int(0);
    if pid != 0 && pid != s.pid {
        return Err(DenyReason::CrossProcessMemory.into());
    }
    let local = Addr(ctx.int(1));
    let remote = Addr(ctx.int(2));
    let len = ctx.int(3).min(super::args::MAX_COPY);
    for page in pages_spanned(remote, len) {
        match s.page(page) {
            Some(r) if r.domain.is_trusted() => return Err(DenyReason::PointsIntoTrusted.into()),
            Some(r) if r.domain != ctx.caller && !s.domains.is_granted(page, ctx.caller) => {
                return Err(DenyReason::PointsIntoForeignDomain.into())
            }
            _ => {}
        }
    }
    if write {
        let (data, _) = ctx.input(s, 1);
        kernel_access(s, ctx.caller, remote, data.len() as u64, Access::Write)?;
        s.write_bytes(remote, &data);
        Ok(data.len() as u64)
    } else {
        kernel_access(s, ctx.caller, remote, len, Access::Read)?;
        let data = s.read_bytes(remote, len);
        ctx.output(s, local, &data)?;
        Ok(len)
    }
}
