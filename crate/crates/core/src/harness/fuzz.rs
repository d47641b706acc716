//! Random syscall traces against the monitor.
//!
//! Arguments come from pools biased toward the interesting cases: the
//! monitor's addresses, the trampolines, buffers the trace itself mapped,
//! sensitive paths, and permission and flag combinations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::MonitorConfig;
use crate::formal_state::{apply_transition, layout, Addr, MachineState, Tid, TransitionError};
use crate::nexpoline::{GateMechanism, GateVariant};
use crate::signal_virt::{SIGCHLD, SIGINT, SIGKILL, SIGSEGV, SIGSTOP, SIGSYS, SIGUSR1, SIGUSR2};
use crate::syscall_monitor::{
    RawArg, SyscallRequest, CLONE_THREAD, CLONE_VM, MAP_ANONYMOUS, MAP_FIXED, MAP_PRIVATE,
    MAP_SHARED, PROT_EXEC, PROT_READ, PROT_WRITE, PR_SET_SECCOMP, SYSCALL, WRPKRU,
};
use crate::transition::Transition;

/// Variants the fuzzer cycles through, one per trace.
pub const FUZZ_VARIANTS: [&str; 5] = [
    "secc_rand:32",
    "secc_eph",
    "disp_eph",
    "secc_cet",
    "disp_cet",
];

const PATHS: &[&str] = &[
    "/tmp/a",
    "/tmp/b",
    "/proc/self/mem",
    "/proc/1/mem",
    "/proc/1001/mem",
    "/dev/mem",
    "/tmp/link",
];

const SIGNALS: &[u8] = &[
    SIGINT, SIGUSR1, SIGUSR2, SIGCHLD, SIGSEGV, SIGKILL, SIGSTOP, SIGSYS, 0, 70,
];

/// Weighted syscall names; process-level calls are rarer so traces stay
/// in one address space most of the time.
const CALLS: &[(&str, u32)] = &[
    ("open", 8),
    ("openat", 2),
    ("read", 6),
    ("write", 6),
    ("pread64", 3),
    ("pwrite64", 3),
    ("readv", 3),
    ("writev", 3),
    ("preadv", 2),
    ("pwritev", 2),
    ("lseek", 3),
    ("close", 4),
    ("dup", 2),
    ("dup2", 2),
    ("fstat", 2),
    ("stat", 2),
    ("link", 2),
    ("symlink", 2),
    ("rename", 2),
    ("unlink", 2),
    ("mmap", 10),
    ("mprotect", 8),
    ("munmap", 4),
    ("mremap", 4),
    ("brk", 1),
    ("fork", 1),
    ("vfork", 1),
    ("clone", 2),
    ("execve", 1),
    ("process_vm_readv", 2),
    ("process_vm_writev", 2),
    ("rt_sigaction", 4),
    ("rt_sigprocmask", 3),
    ("rt_sigreturn", 1),
    ("rt_sigsuspend", 1),
    ("sigaltstack", 2),
    ("kill", 3),
    ("tgkill", 2),
    ("prctl", 2),
    ("getpid", 1),
    ("gettid", 1),
    ("getrandom", 2),
    ("clock_gettime", 1),
    ("uname", 1),
    ("nanosleep", 1),
    ("exit", 1),
    ("ptrace", 1),
    ("pkey_mprotect", 1),
    ("seccomp", 1),
    ("socket", 1),
];

struct Gen {
    rng: ChaCha8Rng,
    /// Values syscalls returned: mapped addresses, descriptors.
    seen: Vec<u64>,
}

impl Gen {
    fn addr(&mut self, s: &MachineState, tid: Tid) -> u64 {
        let pad = s
            .trampoline
            .pad_for(tid)
            .map(|p| p.base.0)
            .unwrap_or(layout::TRAMPOLINE.0);
        let base = match self.rng.gen_range(0..10) {
            0 => layout::SECRET.0,
            1 => layout::MONITOR_CODE.0,
            2 => pad,
            3 => layout::APP_CODE.0,
            4 => layout::SIGNAL_ENTRY.0,
            5 => s.thread(tid).map(|t| t.stack_ptr.0 - 0x100).unwrap_or(0),
            6 => layout::TRAMPOLINE.0 + self.rng.gen_range(0..3) * 0x1000,
            _ => self
                .seen
                .choose(&mut self.rng)
                .copied()
                .unwrap_or(layout::HEAP.0),
        };
        match self.rng.gen_range(0..4) {
            0 => base + self.rng.gen_range(0..0x2000),
            1 => base.wrapping_sub(self.rng.gen_range(1..8)),
            _ => base,
        }
    }

    fn prot(&mut self) -> u64 {
        [
            PROT_READ,
            PROT_READ | PROT_WRITE,
            PROT_READ | PROT_EXEC,
            PROT_READ | PROT_WRITE | PROT_EXEC,
            0,
            PROT_EXEC,
        ][self.rng.gen_range(0..6)]
    }

    fn flags(&mut self) -> u64 {
        let mut f = if self.rng.gen_bool(0.5) {
            MAP_PRIVATE
        } else {
            MAP_SHARED
        };
        if self.rng.gen_bool(0.6) {
            f |= MAP_ANONYMOUS;
        }
        if self.rng.gen_bool(0.2) {
            f |= MAP_FIXED;
        }
        f
    }

    fn fd(&mut self) -> u64 {
        self.rng.gen_range(0..8)
    }

    fn len(&mut self) -> u64 {
        [1, 8, 16, 64, 4096, 8192, 0, 1 << 21][self.rng.gen_range(0..8)]
    }

    fn path(&mut self, s: &MachineState, tid: Tid) -> RawArg {
        if self.rng.gen_bool(0.15) {
            RawArg::Int(self.addr(s, tid))
        } else {
            RawArg::Str(PATHS.choose(&mut self.rng).expect("non-empty").to_string())
        }
    }

    fn pick_call(&mut self) -> &'static str {
        CALLS
            .choose_weighted(&mut self.rng, |(_, w)| *w)
            .map(|(n, _)| *n)
            .expect("weights are positive")
    }

    fn syscall(&mut self, s: &MachineState, tid: Tid) -> SyscallRequest {
        use RawArg::Int;
        let name = self.pick_call();
        let args = match name {
            "open" => vec![self.path(s, tid), Int(self.rng.gen_range(0..0o102))],
            "openat" => vec![Int(-100i64 as u64), self.path(s, tid), Int(2)],
            "read" | "write" => vec![Int(self.fd()), Int(self.addr(s, tid)), Int(self.len())],
            "pread64" | "pwrite64" => vec![
                Int(self.fd()),
                Int(self.addr(s, tid)),
                Int(self.len()),
                Int(self.rng.gen_range(0..0x3000)),
            ],
            "readv" | "writev" | "preadv" | "pwritev" => vec![
                Int(self.fd()),
                Int(self.addr(s, tid)),
                Int(self.rng.gen_range(0..4)),
                Int(0),
            ],
            "lseek" => vec![
                Int(self.fd()),
                Int(self.addr(s, tid)),
                Int(self.rng.gen_range(0..3)),
            ],
            "close" | "dup" | "fstat" => vec![Int(self.fd()), Int(self.addr(s, tid))],
            "dup2" => vec![Int(self.fd()), Int(self.fd())],
            "stat" | "unlink" | "execve" => vec![self.path(s, tid), Int(self.addr(s, tid))],
            "link" | "symlink" | "rename" => vec![self.path(s, tid), self.path(s, tid)],
            "mmap" => vec![
                Int(self.addr(s, tid)),
                Int(self.len()),
                Int(self.prot()),
                Int(self.flags()),
                Int(self.fd()),
                Int(0),
            ],
            "mprotect" => vec![Int(self.addr(s, tid)), Int(self.len()), Int(self.prot())],
            "munmap" => vec![Int(self.addr(s, tid)), Int(self.len())],
            "mremap" => vec![
                Int(self.addr(s, tid)),
                Int(self.len()),
                Int(self.len()),
                Int(self.rng.gen_range(0..4)),
                Int(self.addr(s, tid)),
            ],
            "clone" => vec![Int(if self.rng.gen_bool(0.7) {
                CLONE_VM | CLONE_THREAD
            } else {
                0
            })],
            "process_vm_readv" | "process_vm_writev" => vec![
                Int([0, s.pid, 1001, 7][self.rng.gen_range(0..4)]),
                Int(self.addr(s, tid)),
                Int(self.addr(s, tid)),
                Int(self.len()),
            ],
            "rt_sigaction" => vec![
                Int(*SIGNALS.choose(&mut self.rng).expect("non-empty") as u64),
                Int([0, 1, layout::APP_CODE.0, self.addr(s, tid)][self.rng.gen_range(0..4)]),
                Int(self.rng.gen()),
            ],
            "rt_sigprocmask" => vec![Int(self.rng.gen_range(0..4)), Int(self.rng.gen())],
            "rt_sigsuspend" => vec![Int(self.rng.gen())],
            "sigaltstack" => vec![Int(self.addr(s, tid)), Int(self.len())],
            "kill" => vec![
                Int([0, s.pid, 1001][self.rng.gen_range(0..3)]),
                Int(*SIGNALS.choose(&mut self.rng).expect("non-empty") as u64),
            ],
            "tgkill" => vec![
                Int(s.pid),
                Int(self.rng.gen_range(0..4)),
                Int(*SIGNALS.choose(&mut self.rng).expect("non-empty") as u64),
            ],
            "prctl" => vec![
                Int([PR_SET_SECCOMP, 59, 15][self.rng.gen_range(0..3)]),
                Int(1),
            ],
            "getrandom" => vec![Int(self.addr(s, tid)), Int(self.len()), Int(0)],
            "clock_gettime" => vec![Int(0), Int(self.addr(s, tid))],
            "uname" | "nanosleep" => vec![Int(self.addr(s, tid))],
            "rt_sigreturn" => vec![],
            _ => (0..self.rng.gen_range(0..4))
                .map(|_| Int(self.rng.gen()))
                .collect(),
        };
        SyscallRequest::tagged(tid, name, args)
    }

    /// Non-syscall moves interleaved with the syscalls: planting
    /// forbidden bytes, kernel signals, signal returns, forged entries.
    fn extra(&mut self, s: &MachineState, tid: Tid) -> Transition {
        match self.rng.gen_range(0..5) {
            0 | 1 => {
                let bytes = if self.rng.gen_bool(0.5) {
                    WRPKRU.to_vec()
                } else {
                    SYSCALL.to_vec()
                };
                Transition::Store {
                    tid,
                    addr: Addr(self.addr(s, tid)),
                    bytes,
                }
            }
            2 => Transition::KernelSignal {
                tid,
                signo: *SIGNALS[..4].choose(&mut self.rng).expect("non-empty"),
            },
            3 => Transition::SigReturn {
                tid,
                tamper: self.rng.gen_bool(0.5),
            },
            _ => Transition::ExecWrpkru {
                tid,
                at: Addr(self.addr(s, tid)),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FuzzSummary {
    pub traces: u64,
    pub syscalls: u64,
    pub other_steps: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub sp_violations: u64,
    /// Steps that reported a successful attack.
    pub breaches: u64,
    /// Ephemeral-gate states with a syscall byte visible while an untrusted
    /// thread exists.
    pub eph_visible: u64,
    /// Dispatched syscalls that did not record exactly two transitions.
    pub transition_mismatches: u64,
    pub first_failure: Option<String>,
}

impl FuzzSummary {
    fn merge(mut self, o: FuzzSummary) -> FuzzSummary {
        self.traces += o.traces;
        self.syscalls += o.syscalls;
        self.other_steps += o.other_steps;
        self.accepted += o.accepted;
        self.rejected += o.rejected;
        self.sp_violations += o.sp_violations;
        self.breaches += o.breaches;
        self.eph_visible += o.eph_visible;
        self.transition_mismatches += o.transition_mismatches;
        self.first_failure = self.first_failure.or(o.first_failure);
        self
    }

    pub fn clean(&self) -> bool {
        self.sp_violations == 0
            && self.breaches == 0
            && self.eph_visible == 0
            && self.transition_mismatches == 0
    }
}

fn trace_seed(seed: u64, i: u64) -> u64 {
    seed ^ (i + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs one random trace of `syscalls` syscalls.
pub fn fuzz_trace(variant: &str, syscalls: u64, seed: u64) -> FuzzSummary {
    let gate: GateMechanism = variant.parse().expect("fuzz variants are valid");
    let eph = gate.variant == GateVariant::Ephemeral;
    let fresh = |seed: u64| {
        let mut s = MachineState::with_config(MonitorConfig::with_gate(gate), seed);
        s.start_app();
        s
    };
    let mut s = fresh(seed);
    let mut restarts = 0u64;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seen: vec![layout::HEAP.0],
    };
    let mut out = FuzzSummary {
        traces: 1,
        ..FuzzSummary::default()
    };
    let fail = |out: &mut FuzzSummary, what: String| {
        if out.first_failure.is_none() {
            out.first_failure = Some(format!("{variant} seed {seed}: {what}"));
        }
    };
    while out.syscalls < syscalls {
        let tids: Vec<Tid> = s.untrusted_threads().map(|t| t.tid).collect();
        let Some(&tid) = tids.choose(&mut g.rng).filter(|_| !s.exited) else {
            // The process is gone; the rest of the trace runs in a new one.
            restarts += 1;
            s = fresh(trace_seed(seed, restarts));
            g.seen.truncate(1);
            continue;
        };
        let is_syscall = g.rng.gen_bool(0.8);
        let t = if is_syscall {
            out.syscalls += 1;
            Transition::Syscall(g.syscall(&s, tid))
        } else {
            out.other_steps += 1;
            g.extra(&s, tid)
        };
        match apply_transition(&s, &t) {
            Ok((next, effect)) => {
                out.accepted += 1;
                if effect.bypass {
                    out.breaches += 1;
                    fail(&mut out, format!("bypass by {t:?}"));
                }
                if is_syscall && effect.pkru_transitions != 2 {
                    out.transition_mismatches += 1;
                    fail(
                        &mut out,
                        format!("{} transitions for {t:?}", effect.pkru_transitions),
                    );
                }
                if effect.value > 0x1000 && g.seen.len() < 64 {
                    g.seen.push(effect.value);
                }
                s = next;
            }
            Err(TransitionError::PolicyDenied(_)) => out.rejected += 1,
            Err(TransitionError::SafetyBreach(v)) => {
                out.sp_violations += v.violations.len() as u64;
                fail(&mut out, format!("{:?} after {t:?}", v.properties()));
            }
        }
        if eph && s.untrusted_threads().next().is_some() && s.trampoline.any_syscall_byte() {
            out.eph_visible += 1;
            fail(&mut out, format!("syscall byte visible after {t:?}"));
        }
    }
    out
}

/// `traces` traces of `syscalls` syscalls each, variants in rotation.
pub fn run_fuzz(traces: u64, syscalls: u64, seed: u64) -> FuzzSummary {
    (0..traces)
        .into_par_iter()
        .map(|i| {
            let v = FUZZ_VARIANTS[(i % FUZZ_VARIANTS.len() as u64) as usize];
            fuzz_trace(v, syscalls, trace_seed(seed, i))
        })
        .reduce(FuzzSummary::default, FuzzSummary::merge)
}
