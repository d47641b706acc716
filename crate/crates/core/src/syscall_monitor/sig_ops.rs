//! Signal-related syscalls, routed to the signal virtualization layer, and
//! the prctl filter.

use crate::formal_state::{Addr, DenyReason, MachineState, Pid, Rejection, Signo, Tid};
use crate::signal_virt::{self, Handler, SigSet, NSIG};

use super::{Arg, Ctx, PR_SET_SECCOMP, PR_SET_SYSCALL_USER_DISPATCH};

fn signo(v: u64) -> Result<Signo, DenyReason> {
    match Signo::try_from(v) {
        Ok(n) if (1..=NSIG).contains(&n) => Ok(n),
        _ => Err(DenyReason::BadArgs(format!("signal {v}"))),
    }
}

pub fn handle(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    match ctx.req.name.as_str() {
        "rt_sigaction" => {
            let handler = match ctx.int(1) {
                0 => Handler::Default,
                1 => Handler::Ignore,
                a => Handler::At(Addr(a)),
            };
            signal_virt::vsigaction(s, signo(ctx.int(0))?, handler, SigSet(ctx.int(2)))?;
            Ok(0)
        }
        "rt_sigprocmask" => Ok(signal_virt::sigprocmask(s, ctx.int(0), SigSet(ctx.int(1)))?.0),
        "rt_sigsuspend" => {
            s.signals.override_mask = Some(SigSet(ctx.int(0)));
            Ok(0)
        }
        "sigaltstack" => {
            let (ss, size) = (ctx.int(0), ctx.int(1));
            if ss == 0 {
                s.signals.altstack.remove(&ctx.tid);
            } else {
                let top = ss
                    .checked_add(size)
                    .ok_or_else(|| DenyReason::BadArgs("altstack range".into()))?;
                s.signals.altstack.insert(ctx.tid, Addr(top));
            }
            Ok(0)
        }
        // The frame is checked here; the context is restored on the way out.
        "rt_sigreturn" => match ctx.req.args.first() {
            Some(Arg::Frame(frame)) => {
                signal_virt::check_frame(s, ctx.tid, frame)?;
                Ok(frame.retval.unwrap_or(0))
            }
            _ => Err(DenyReason::TamperedFrame.into()),
        },
        "kill" => {
            let sig = ctx.int(1);
            send(s, ctx, ctx.int(0), None, sig)
        }
        "tgkill" => {
            let sig = ctx.int(2);
            send(s, ctx, ctx.int(0), Some(ctx.int(1) as Tid), sig)
        }
        other => Err(DenyReason::UnknownSyscall(other.to_string()).into()),
    }
}

fn send(
    s: &mut MachineState,
    ctx: &Ctx<'_>,
    pid: Pid,
    tid: Option<Tid>,
    sig: u64,
) -> Result<u64, Rejection> {
    if sig == 0 {
        return if pid == 0 || s.process(pid).is_some() {
            Ok(0)
        } else {
            Err(DenyReason::NoSuchProcess.into())
        };
    }
    let n = signo(sig)?;
    if s.config.reserved_signals.contains(&n) {
        return Err(DenyReason::ReservedSignal.into());
    }
    let pid = if pid == 0 { s.pid } else { pid };
    let target = s.process_mut(pid).ok_or(DenyReason::NoSuchProcess)?;
    let tid = match tid {
        Some(t) => t,
        None if pid == target.pid && target.threads.contains_key(&ctx.tid) => ctx.tid,
        None => *target
            .threads
            .keys()
            .next()
            .ok_or(DenyReason::NoSuchThread)?,
    };
    signal_virt::kernel_deliver(target, tid, n)?;
    Ok(0)
}

pub fn prctl(_s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    match ctx.int(0) {
        PR_SET_SECCOMP | PR_SET_SYSCALL_USER_DISPATCH => {
            Err(DenyReason::ForbiddenSyscall("prctl".into()).into())
        }
        _ => Ok(0),
    }
}
