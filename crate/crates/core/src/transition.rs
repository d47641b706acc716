//! Every step the simulated program (or an attacker inside it) can take,
//! as one enum that plugs into [`apply_transition`](crate::formal_state::apply_transition).

use serde::{Deserialize, Serialize};

use crate::domain_mgr::{self, DomainSpec};
use crate::formal_state::{
    Access, Addr, DenyReason, DomainId, Effect, FaultReason, MachineState, PageId, Pkru, Rejection,
    Step, Tid, SECRET_BYTES,
};
use crate::nexpoline::{self, ProbeOutcome};
use crate::signal_virt::{self, DeliveryOutcome, Landing};
use crate::syscall_monitor::{self, Arg, SyscallRequest, SyscallStatus, WRPKRU};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    Noop,
    /// Maps the application and drops thread 0 out of the monitor.
    StartApp,
    Syscall(SyscallRequest),
    /// A syscall during which `signo` arrives while the monitor handles it
    /// and again while the exit cleanup runs.
    SyscallInterrupted {
        req: SyscallRequest,
        signo: u8,
    },
    KernelSignal {
        tid: Tid,
        signo: u8,
    },
    ForgedSignal {
        tid: Tid,
        landing: Landing,
    },
    /// Returns from the innermost handler, optionally with the saved key
    /// image rewritten to the monitor's.
    SigReturn {
        tid: Tid,
        tamper: bool,
    },
    CreateDomain {
        tid: Tid,
        spec: DomainSpec,
    },
    IsolateLibrary {
        tid: Tid,
        code: (Addr, u64),
        data: (Addr, u64),
        exports: Vec<Addr>,
    },
    XCall {
        tid: Tid,
        target: DomainId,
        entry: u32,
        args: Vec<u64>,
    },
    XReturn {
        tid: Tid,
        claim: Option<DomainId>,
    },
    Grant {
        tid: Tid,
        page: PageId,
        grantee: DomainId,
    },
    Revoke {
        tid: Tid,
        page: PageId,
    },
    DirectJump {
        tid: Tid,
        target: Addr,
    },
    Load {
        tid: Tid,
        addr: Addr,
        len: u64,
    },
    Store {
        tid: Tid,
        addr: Addr,
        bytes: Vec<u8>,
    },
    /// Jumps to a `wrpkru` at `at`, loading an all-access key image.
    ExecWrpkru {
        tid: Tid,
        at: Addr,
    },
    /// Jumps into a trampoline hoping to hit the syscall gadget.
    GateJump {
        tid: Tid,
        target: Addr,
    },
    TsxProbe {
        tid: Tid,
        target: Addr,
    },
    /// Probes every byte of the thread's trampoline transactionally, then
    /// jumps to where the gadget should start if a `ret` turned up.
    TsxScan {
        tid: Tid,
    },
    /// Brute-forces the gadget from forked children: each guess runs in a
    /// fresh child and the victim keeps making syscalls in between.
    ForkBomb {
        tid: Tid,
        guesses: u64,
    },
    SpawnDirect {
        tid: Tid,
    },
    /// Succeeds (as a bypass) when the file holds trusted bytes.
    Exfil {
        path: String,
    },
    /// Succeeds (as a bypass) when the secret shows up in readable memory.
    Leak {
        tid: Tid,
        addr: Addr,
        len: u64,
    },
}

fn bypass(value: u64) -> Effect {
    Effect {
        value,
        pkru_transitions: 0,
        bypass: true,
    }
}

fn probe_result(outcome: ProbeOutcome, value: u64) -> Result<Effect, Rejection> {
    match outcome {
        ProbeOutcome::UncheckedSyscallExecuted => Ok(bypass(value)),
        ProbeOutcome::Returned | ProbeOutcome::TxAbort => Ok(Effect::value(0)),
        ProbeOutcome::TxCommit => Ok(Effect::value(1)),
        ProbeOutcome::KilledByFilter => Err(FaultReason::KilledByFilter.into()),
        ProbeOutcome::Int3Fault => Err(FaultReason::Int3.into()),
        ProbeOutcome::CetControlFault => Err(FaultReason::CetControl.into()),
    }
}

fn untrusted(s: &MachineState, tid: Tid) -> Result<(), DenyReason> {
    let t = s.thread(tid).ok_or(DenyReason::NoSuchThread)?;
    if !t.is_untrusted() || t.in_monitor {
        return Err(DenyReason::NotUntrusted);
    }
    Ok(())
}

fn contains_secret(bytes: &[u8]) -> bool {
    bytes.windows(SECRET_BYTES.len()).any(|w| w == SECRET_BYTES)
}

/// Runs a syscall phase by phase with `signo` arriving mid-handle and again
/// during the exit cleanup.
fn interrupted_syscall(
    s: &mut MachineState,
    req: &SyscallRequest,
    signo: u8,
) -> Result<Effect, Rejection> {
    let tid = req.tid;
    let mut fl = syscall_monitor::begin(s, req.clone())?;
    if let Err(holder) = syscall_monitor::screen(s, &mut fl) {
        fl.outcome = Some(Err(DenyReason::WouldBlock(holder).into()));
        fl.phase = syscall_monitor::Phase::Handle;
    }
    signal_virt::kernel_deliver(s, tid, signo)?;
    syscall_monitor::handle(s, &mut fl);
    nexpoline::cleanup_transaction(s, tid, &[(signo, 1)]);
    let result = syscall_monitor::finish(s, fl);
    let leaked = result
        .delivered
        .as_ref()
        .is_some_and(|f| f.pkru.grants_trusted());
    let pad_visible = s.thread(tid).is_some_and(|t| t.is_untrusted())
        && matches!(s.config.gate.variant, nexpoline::GateVariant::Ephemeral)
        && s.trampoline
            .pads
            .get(&tid)
            .is_some_and(|p| p.has_syscall_byte());
    match result.status {
        _ if leaked || pad_visible => Ok(bypass(0)),
        SyscallStatus::Ok(v) => Ok(Effect {
            value: v,
            pkru_transitions: result.pkru_transitions,
            bypass: false,
        }),
        SyscallStatus::Denied(d) => Err(d.into()),
        SyscallStatus::Fault(f) => Err(f.into()),
    }
}

impl Step for Transition {
    fn step(&self, s: &mut MachineState) -> Result<Effect, Rejection> {
        match self {
            Transition::Noop => Ok(Effect::default()),
            Transition::StartApp => {
                if s.start_app() {
                    Ok(Effect::default())
                } else {
                    Err(DenyReason::BadArgs("application already running".into()).into())
                }
            }
            Transition::Syscall(req) => {
                let (next, result) = syscall_monitor::dispatch(s, req.clone());
                let leaked = result
                    .delivered
                    .as_ref()
                    .is_some_and(|f| f.pkru.grants_trusted());
                match result.status {
                    SyscallStatus::Ok(v) => {
                        *s = next;
                        Ok(Effect {
                            value: v,
                            pkru_transitions: result.pkru_transitions,
                            bypass: leaked,
                        })
                    }
                    SyscallStatus::Denied(d) => Err(d.into()),
                    SyscallStatus::Fault(f) => Err(f.into()),
                }
            }
            Transition::SyscallInterrupted { req, signo } => interrupted_syscall(s, req, *signo),
            Transition::KernelSignal { tid, signo } => {
                match signal_virt::kernel_deliver(s, *tid, *signo)? {
                    DeliveryOutcome::Delivered(frame) if frame.pkru.grants_trusted() => {
                        Ok(bypass(0))
                    }
                    DeliveryOutcome::Delivered(frame) => Ok(Effect::value(frame.handler.0)),
                    _ => Ok(Effect::default()),
                }
            }
            // A forged entry never gets past the flag protocol.
            Transition::ForgedSignal { tid, landing } => {
                signal_virt::forged_entry(s, *tid, *landing)?;
                Err(DenyReason::ForgedSignal.into())
            }
            Transition::SigReturn { tid, tamper } => {
                let mut frame = signal_virt::current_frame(s, *tid)
                    .cloned()
                    .ok_or(DenyReason::TamperedFrame)?;
                if *tamper {
                    frame.pkru = Pkru::trusted();
                }
                let req = SyscallRequest {
                    tid: *tid,
                    name: "rt_sigreturn".into(),
                    args: vec![Arg::Frame(Box::new(frame))],
                };
                Transition::Syscall(req).step(s)
            }
            Transition::CreateDomain { tid, spec } => {
                let id = domain_mgr::iv_create_domain(s, *tid, spec)?;
                Ok(Effect::value(domain_index(id)))
            }
            Transition::IsolateLibrary {
                tid,
                code,
                data,
                exports,
            } => {
                let id = domain_mgr::isolate_library(s, *tid, *code, *data, exports)?;
                Ok(Effect::value(domain_index(id)))
            }
            Transition::XCall {
                tid,
                target,
                entry,
                args,
            } => Ok(domain_mgr::xcall(s, *tid, *target, *entry, args)?),
            Transition::XReturn { tid, claim } => Ok(domain_mgr::xreturn(s, *tid, *claim)?),
            Transition::Grant { tid, page, grantee } => {
                domain_mgr::grant(s, *tid, *page, *grantee)?;
                Ok(Effect::default())
            }
            Transition::Revoke { tid, page } => {
                domain_mgr::revoke(s, *tid, *page)?;
                Ok(Effect::default())
            }
            Transition::DirectJump { tid, target } => {
                untrusted(s, *tid)?;
                domain_mgr::direct_jump(s, *tid, *target)?;
                Ok(Effect::default())
            }
            Transition::Load { tid, addr, len } => {
                untrusted(s, *tid)?;
                s.check_access(*tid, *addr, *len, Access::Read)?;
                let bytes = s.read_bytes(*addr, (*len).min(8));
                let mut word = [0u8; 8];
                word[..bytes.len()].copy_from_slice(&bytes);
                Ok(Effect::value(u64::from_le_bytes(word)))
            }
            Transition::Store { tid, addr, bytes } => {
                untrusted(s, *tid)?;
                s.check_access(*tid, *addr, bytes.len() as u64, Access::Write)?;
                s.write_bytes(*addr, bytes);
                Ok(Effect::default())
            }
            Transition::ExecWrpkru { tid, at } => {
                untrusted(s, *tid)?;
                s.check_access(*tid, *at, WRPKRU.len() as u64, Access::Exec)?;
                let owner = s.page(at.page()).map(|r| r.domain);
                // The monitor's own wrpkru sites are followed by a check of
                // the entry path, which a stray jump does not pass.
                if owner.is_some_and(|d| d.is_trusted())
                    || s.read_bytes(*at, WRPKRU.len() as u64) != WRPKRU
                {
                    return Err(FaultReason::InvalidOpcode.into());
                }
                s.thread_mut(*tid).expect("checked").pkru = Pkru::trusted();
                Ok(bypass(0))
            }
            Transition::GateJump { tid, target } => {
                untrusted(s, *tid)?;
                probe_result(nexpoline::attack_jump(s, *tid, *target), target.0)
            }
            Transition::TsxProbe { tid, target } => {
                untrusted(s, *tid)?;
                probe_result(nexpoline::tsx_probe(s, *tid, *target)?, target.0)
            }
            Transition::TsxScan { tid } => {
                untrusted(s, *tid)?;
                let pad = s
                    .trampoline
                    .pad_for(*tid)
                    .cloned()
                    .ok_or(DenyReason::NoSuchThread)?;
                let mut target = pad.base;
                for off in 0..pad.len() {
                    if nexpoline::tsx_probe(s, *tid, pad.base.add(off))? == ProbeOutcome::TxCommit {
                        target = pad.base.add(off.saturating_sub(nexpoline::GADGET_LEN - 1));
                        break;
                    }
                }
                probe_result(nexpoline::attack_jump(s, *tid, target), target.0)
            }
            Transition::ForkBomb { tid, guesses } => fork_bomb(s, *tid, *guesses),
            Transition::SpawnDirect { tid } => {
                let t = nexpoline::spawn_thread_direct(s, *tid)?;
                Ok(Effect::value(t as u64))
            }
            Transition::Exfil { path } => {
                let leaked =
                    s.fs.resolve(path)
                        .and_then(|ino| s.fs.file(ino))
                        .is_some_and(|f| f.tainted || contains_secret(&f.bytes));
                if leaked {
                    Ok(bypass(0))
                } else {
                    Err(DenyReason::NothingLeaked.into())
                }
            }
            Transition::Leak { tid, addr, len } => {
                untrusted(s, *tid)?;
                let len = (*len).min(1 << 16);
                let readable = s.check_access(*tid, *addr, len, Access::Read).is_ok();
                if readable && contains_secret(&s.read_bytes(*addr, len)) {
                    Ok(bypass(0))
                } else {
                    Err(DenyReason::NothingLeaked.into())
                }
            }
        }
    }
}

fn domain_index(id: DomainId) -> u64 {
    match id {
        DomainId::Untrusted(i) => i as u64,
        DomainId::Trusted => u64::MAX,
    }
}

/// Each guess jumps to a uniformly drawn gadget position in a fresh child
/// (a copy of the victim, so a crash costs the attacker nothing); between
/// guesses the victim makes one syscall.
fn fork_bomb(s: &mut MachineState, tid: Tid, guesses: u64) -> Result<Effect, Rejection> {
    untrusted(s, tid)?;
    let pad = s
        .trampoline
        .pad_for(tid)
        .cloned()
        .ok_or(DenyReason::NoSuchThread)?;
    let positions = nexpoline::gadget_positions(pad.pages);
    for i in 0..guesses {
        let target = pad.base.add(s.rng.below(positions));
        if nexpoline::attack_jump(s, tid, target).is_bypass() {
            return Ok(bypass(i + 1));
        }
        nexpoline::victim_syscall_tick(s);
    }
    Err(FaultReason::Int3.into())
}
