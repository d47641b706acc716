//! Exhaustive signal storms: every sequence of signal events, up to a
//! length bound, against a process with two threads and three handled
//! signals, with the queue invariants checked after every step.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use serde::Serialize;

use crate::config::MonitorConfig;
use crate::formal_state::{apply_transition, layout, MachineState, Signo, Tid};
use crate::nexpoline::{self, GateMechanism, GateVariant, UnknownVariant};
use crate::signal_virt::{self, Handler, SigSet, SIGINT, SIGUSR1, SIGUSR2};
use crate::syscall_monitor::{RawArg, SyscallRequest};
use crate::transition::Transition;

pub const STORM_SIGNALS: [Signo; 3] = [SIGINT, SIGUSR1, SIGUSR2];
pub const STORM_THREADS: [Tid; 2] = [0, 1];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StormReport {
    pub depth: u32,
    pub states: u64,
    pub steps: u64,
    pub deliveries: u64,
    /// Slot occupied without the kernel-mask bit, or the other way round.
    pub queue_mismatches: u64,
    /// A signal held by the kernel while its slot is free, which would let
    /// a second instance queue.
    pub depth_violations: u64,
    pub trusted_frames: u64,
    pub reentries: u64,
    /// Raised signals neither delivered, disposed, pending nor held.
    pub lost: u64,
    pub first_failure: Option<String>,
}

impl StormReport {
    pub fn clean(&self) -> bool {
        self.queue_mismatches == 0
            && self.depth_violations == 0
            && self.trusted_frames == 0
            && self.reentries == 0
            && self.lost == 0
    }
}

/// Two application threads with a handler installed for every storm signal.
pub fn storm_initial(variant: &str, seed: u64) -> Result<MachineState, UnknownVariant> {
    let gate: GateMechanism = variant.parse()?;
    let mut s = MachineState::with_config(MonitorConfig::with_gate(gate), seed);
    s.start_app();
    nexpoline::spawn_thread(&mut s, 0).expect("second thread");
    for (i, &n) in STORM_SIGNALS.iter().enumerate() {
        let at = layout::APP_CODE.add(0x40 * i as u64);
        signal_virt::vsigaction(&mut s, n, Handler::At(at), SigSet::default()).expect("handler");
    }
    Ok(s)
}

fn moves() -> Vec<Transition> {
    let mut out = Vec::new();
    for &tid in &STORM_THREADS {
        for &signo in &STORM_SIGNALS {
            out.push(Transition::KernelSignal { tid, signo });
            out.push(Transition::SyscallInterrupted {
                req: SyscallRequest::tagged(tid, "getpid", vec![]),
                signo,
            });
        }
        out.push(Transition::Syscall(SyscallRequest::tagged(
            tid,
            "getpid",
            vec![],
        )));
        out.push(Transition::SigReturn { tid, tamper: false });
    }
    // Masks are process-wide: block and unblock one signal.
    for how in [0u64, 1] {
        out.push(Transition::Syscall(SyscallRequest::tagged(
            0,
            "rt_sigprocmask",
            vec![RawArg::Int(how), RawArg::Int(SigSet::of(&[SIGUSR1]).0)],
        )));
    }
    out
}

/// Signals a move raises. Under the ephemeral gate an interrupted call
/// takes the same signal a second time during the exit cleanup.
fn raised(s: &MachineState, t: &Transition) -> u64 {
    match t {
        Transition::KernelSignal { .. } => 1,
        Transition::SyscallInterrupted { .. }
            if s.config.gate.variant == GateVariant::Ephemeral =>
        {
            2
        }
        Transition::SyscallInterrupted { .. } => 1,
        _ => 0,
    }
}

struct Storm {
    moves: Vec<Transition>,
    /// Fingerprints of visited (state, raised, remaining) triples.
    seen: HashSet<u64>,
    report: StormReport,
}

impl Storm {
    fn check(&mut self, s: &MachineState, sent: u64, path: &[usize]) {
        let sig = &s.signals;
        let fail = |r: &mut StormReport, what: &str| {
            if r.first_failure.is_none() {
                r.first_failure = Some(format!("{what} after moves {path:?}"));
            }
        };
        if !sig.queue_consistent() {
            self.report.queue_mismatches += 1;
            fail(&mut self.report, "slot and kernel mask disagree");
        }
        if sig
            .kernel_held
            .iter()
            .any(|(n, &k)| k > 0 && !sig.pending.contains_key(n))
        {
            self.report.depth_violations += 1;
            fail(&mut self.report, "held signal with a free slot");
        }
        let bad_frames = sig
            .issued
            .values()
            .flatten()
            .filter(|f| f.pkru.grants_trusted())
            .count() as u64;
        if bad_frames > 0 || sig.trusted_frames > 0 {
            self.report.trusted_frames += bad_frames.max(sig.trusted_frames);
            fail(&mut self.report, "frame carries the monitor's key");
        }
        if sig.reentries > 0 {
            self.report.reentries += sig.reentries;
            fail(&mut self.report, "entrypoint re-entered");
        }
        // Every raised signal is held by the kernel or reached the monitor,
        // and every one that reached it is delivered, disposed or pending.
        if sent != sig.accepted + sig.held_total()
            || sig.accepted != sig.delivered + sig.disposed + sig.pending.len() as u64
        {
            self.report.lost += 1;
            fail(&mut self.report, "signal lost");
        }
    }

    fn explore(&mut self, s: &MachineState, sent: u64, left: u32, path: &mut Vec<usize>) {
        let mut h = DefaultHasher::new();
        (s, sent, left).hash(&mut h);
        if !self.seen.insert(h.finish()) {
            return;
        }
        self.report.states += 1;
        if left == 0 || s.exited {
            return;
        }
        for i in 0..self.moves.len() {
            let t = &self.moves[i];
            let Ok((next, effect)) = apply_transition(s, t) else {
                continue;
            };
            self.report.steps += 1;
            if effect.bypass {
                self.report.trusted_frames += 1;
            }
            let sent = sent + raised(s, t);
            path.push(i);
            self.report.deliveries = self.report.deliveries.max(next.signals.delivered);
            self.check(&next, sent, path);
            self.explore(&next, sent, left - 1, path);
            path.pop();
        }
    }
}

/// Every sequence of up to `depth` storm moves from [`storm_initial`].
pub fn signal_storm(variant: &str, depth: u32, seed: u64) -> Result<StormReport, UnknownVariant> {
    let s = storm_initial(variant, seed)?;
    let mut st = Storm {
        moves: moves(),
        seen: HashSet::new(),
        report: StormReport {
            depth,
            ..StormReport::default()
        },
    };
    st.check(&s, 0, &[]);
    st.explore(&s, 0, depth, &mut Vec::new());
    Ok(st.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_storm_is_clean() {
        for v in ["secc_rand:32", "secc_eph", "secc_cet"] {
            let r = signal_storm(v, 3, 0).unwrap();
            assert!(r.clean(), "{v}: {r:?}");
            assert!(r.deliveries > 0);
        }
    }

    #[test]
    fn storm_sees_held_signals() {
        // Two raises of one signal before any return: the second is held.
        let s = storm_initial("secc_cet", 0).unwrap();
        let m = moves();
        let (s, _) = apply_transition(
            &s,
            &Transition::Syscall(SyscallRequest::tagged(
                0,
                "rt_sigprocmask",
                vec![RawArg::Int(0), RawArg::Int(SigSet::of(&[SIGUSR1]).0)],
            )),
        )
        .unwrap();
        let usr1 = m
            .iter()
            .find(|t| matches!(t, Transition::KernelSignal { tid: 0, signo } if *signo == SIGUSR1))
            .unwrap();
        let (s, _) = apply_transition(&s, usr1).unwrap();
        let (s, _) = apply_transition(&s, usr1).unwrap();
        assert!(s.signals.pending.contains_key(&SIGUSR1));
        assert_eq!(s.signals.held_total(), 1);
        assert!(s.signals.queue_consistent());
    }
}
