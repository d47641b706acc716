//! Bounded exhaustive exploration of thread interleavings.
//!
//! A syscall is four steps (enter, screen, handle, exit) and any other event
//! is one. A schedule is a complete sequence of steps. Switching away from a
//! thread that could have kept running costs one unit of the depth budget;
//! switching away from a blocked or finished thread is free. Identical
//! search nodes are merged, so counts stay exact while work stays small.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use super::runner::{
    build_transition, classify, classify_syscall, initial_state, missing_binding, syscall_request,
    Bindings, EventReport, Outcome, Report, RunError,
};
use super::scenario::{Event, Scenario};
use crate::formal_state::{apply_transition, safety_check, MachineState, TransitionError};
use crate::syscall_monitor::{self, InFlight, LockKey, Phase};

pub const MAX_THREADS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Limits {
    pub max_schedules: u64,
    pub max_nodes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_schedules: 50_000_000,
            max_nodes: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterleaveError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{0} threads; at most {MAX_THREADS} can be explored")]
    TooManyThreads(usize),
    #[error("more than {0} schedules or search nodes; lower the depth")]
    BudgetExceeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Node {
    s: MachineState,
    pcs: Vec<usize>,
    inflight: Vec<Option<InFlight>>,
    bindings: Bindings,
    last: Option<usize>,
    switches: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Tally {
    schedules: u64,
    failing: u64,
    breached: u64,
}

impl Tally {
    fn add(&mut self, o: Tally) {
        self.schedules = self.schedules.saturating_add(o.schedules);
        self.failing = self.failing.saturating_add(o.failing);
        self.breached = self.breached.saturating_add(o.breached);
    }
}

/// What one step did.
struct Step {
    /// None when the step ended the schedule with a safety breach.
    next: Option<Node>,
    report: Option<EventReport>,
    /// The step broke an expectation or the lock discipline.
    fail: bool,
    pkru: u64,
}

struct Explorer<'a> {
    variant: &'a str,
    threads: Vec<Vec<&'a Event>>,
    depth: u32,
    limits: Limits,
    memo: HashMap<Node, Tally>,
}

impl Explorer<'_> {
    fn done(&self, n: &Node, t: usize) -> bool {
        n.pcs[t] >= self.threads[t].len() && n.inflight[t].is_none()
    }

    fn finished(&self, n: &Node) -> bool {
        (0..self.threads.len()).all(|t| self.done(n, t))
    }

    fn step(&self, n: &Node, t: usize) -> Result<Option<Step>, RunError> {
        if self.done(n, t) {
            return Ok(None);
        }
        let mut next = n.clone();
        if let Some(fl) = next.inflight[t].as_mut() {
            let ev = self.threads[t][n.pcs[t]];
            match fl.phase {
                Phase::Screen => {
                    if syscall_monitor::screen(&mut next.s, fl).is_err() {
                        return Ok(None);
                    }
                    return Ok(Some(self.settle(next, t, None, false, 0)));
                }
                Phase::Handle => {
                    // A close may only complete while it holds its own fd lock.
                    let lock_broken = fl.req.name == "close"
                        && fl.outcome.is_none()
                        && next.s.locks.holder(LockKey::PerFd(fl.req.int(0) as _))
                            != Some(fl.req.tid);
                    syscall_monitor::handle(&mut next.s, fl);
                    return Ok(Some(self.settle(next, t, None, lock_broken, 0)));
                }
                Phase::Exit | Phase::Done => {
                    let fl = next.inflight[t].take().expect("in flight");
                    let r = syscall_monitor::finish(&mut next.s, fl);
                    let o = classify_syscall(&r);
                    if let (Some(name), Some(v)) = (&ev.bind, o.value) {
                        next.bindings.insert(name.clone(), v);
                    }
                    next.pcs[t] += 1;
                    let rep = EventReport::new(ev, self.variant, &o);
                    let fail = !rep.pass;
                    return Ok(Some(self.settle(
                        next,
                        t,
                        Some(rep),
                        fail,
                        o.pkru_transitions as u64,
                    )));
                }
            }
        }
        let ev = self.threads[t][n.pcs[t]];
        if missing_binding(&n.s, &n.bindings, ev).is_some() {
            return Ok(None);
        }
        if ev.is_syscall() {
            let req = syscall_request(&n.s, &n.bindings, ev)?;
            return Ok(Some(match syscall_monitor::begin(&mut next.s, req) {
                Ok(fl) => {
                    next.inflight[t] = Some(fl);
                    self.settle(next, t, None, false, 0)
                }
                Err(rej) => {
                    next.pcs[t] += 1;
                    let o = classify(&Err(TransitionError::PolicyDenied(rej)));
                    let rep = EventReport::new(ev, self.variant, &o);
                    let fail = !rep.pass;
                    self.settle(next, t, Some(rep), fail, 0)
                }
            }));
        }
        let tr = build_transition(&n.s, &n.bindings, ev)?;
        let r = apply_transition(&n.s, &tr);
        let o: Outcome = classify(&r);
        let rep = EventReport::new(ev, self.variant, &o);
        let fail = !rep.pass;
        Ok(Some(match r {
            Ok((s, effect)) => {
                next.s = s;
                next.pcs[t] += 1;
                if let Some(name) = &ev.bind {
                    next.bindings.insert(name.clone(), effect.value);
                }
                self.settle(next, t, Some(rep), fail, effect.pkru_transitions as u64)
            }
            Err(TransitionError::SafetyBreach(_)) => Step {
                next: None,
                report: Some(rep),
                fail: true,
                pkru: 0,
            },
            Err(TransitionError::PolicyDenied(_)) => {
                next.pcs[t] += 1;
                self.settle(next, t, Some(rep), fail, 0)
            }
        }))
    }

    /// Bookkeeping after a step, including the safety check of the new state.
    fn settle(
        &self,
        mut next: Node,
        t: usize,
        report: Option<EventReport>,
        fail: bool,
        pkru: u64,
    ) -> Step {
        if !safety_check(&next.s).is_safe() {
            return Step {
                next: None,
                report,
                fail: true,
                pkru,
            };
        }
        next.last = Some(t);
        Step {
            next: Some(next),
            report,
            fail,
            pkru,
        }
    }

    /// Steps available from `n`, with the context switches each one costs.
    fn moves(&self, n: &Node) -> Result<Vec<(usize, Step, u32)>, RunError> {
        let mut steps = Vec::new();
        for t in 0..self.threads.len() {
            if let Some(st) = self.step(n, t)? {
                steps.push((t, st));
            }
        }
        let last_runnable = n.last.is_some_and(|l| steps.iter().any(|(t, _)| *t == l));
        Ok(steps
            .into_iter()
            .filter_map(|(t, mut st)| {
                let cost = u32::from(last_runnable && n.last != Some(t));
                if n.switches + cost > self.depth {
                    return None;
                }
                if let Some(next) = st.next.as_mut() {
                    next.switches = n.switches + cost;
                }
                Some((t, st, cost))
            })
            .collect())
    }

    fn explore(&mut self, n: &Node) -> Result<Tally, InterleaveError> {
        if let Some(t) = self.memo.get(n) {
            return Ok(*t);
        }
        if self.memo.len() >= self.limits.max_nodes {
            return Err(InterleaveError::BudgetExceeded(
                self.limits.max_nodes as u64,
            ));
        }
        let moves = self.moves(n)?;
        let tally = if moves.is_empty() {
            // Either every thread is done or the rest can never run.
            let stuck = !self.finished(n);
            Tally {
                schedules: 1,
                failing: u64::from(stuck),
                breached: 0,
            }
        } else {
            let mut tally = Tally::default();
            for (_, st, _) in moves {
                let sub = match &st.next {
                    Some(next) => self.explore(next)?,
                    None => Tally {
                        schedules: 1,
                        failing: 1,
                        breached: 1,
                    },
                };
                let failing = if st.fail { sub.schedules } else { sub.failing };
                tally.add(Tally { failing, ..sub });
            }
            tally
        };
        if tally.schedules > self.limits.max_schedules {
            return Err(InterleaveError::BudgetExceeded(self.limits.max_schedules));
        }
        self.memo.insert(n.clone(), tally);
        Ok(tally)
    }

    /// Replays one schedule, preferring a failing one, for the report.
    fn witness(&mut self, root: &Node) -> Result<(Vec<EventReport>, u64), InterleaveError> {
        let mut events = Vec::new();
        let mut pkru = 0;
        let mut n = root.clone();
        loop {
            let moves = self.moves(&n)?;
            let mut pick = None;
            for (i, (_, st, _)) in moves.iter().enumerate() {
                let failing = st.fail
                    || match &st.next {
                        Some(next) => self.explore(next)?.failing > 0,
                        None => true,
                    };
                if failing {
                    pick = Some(i);
                    break;
                }
            }
            let Some((_, st, _)) = moves.into_iter().nth(pick.unwrap_or(0)) else {
                if !self.finished(&n) {
                    for t in 0..self.threads.len() {
                        if let Some(ev) = self.threads[t].get(n.pcs[t]) {
                            events.push(stuck_report(ev, self.variant));
                        }
                    }
                }
                return Ok((events, pkru));
            };
            pkru += st.pkru;
            events.extend(st.report);
            match st.next {
                Some(next) => n = next,
                None => return Ok((events, pkru)),
            }
        }
    }
}

fn stuck_report(ev: &Event, variant: &str) -> EventReport {
    let mut r = EventReport::new(
        ev,
        variant,
        &Outcome {
            kind: super::scenario::Expect::Deny,
            detail: String::new(),
            value: None,
            breach: false,
            pkru_transitions: 0,
        },
    );
    r.detail = "never ran".into();
    r.pass = false;
    r
}

/// Explores every schedule of `sc` with at most `depth` preemptions.
pub fn interleave_explore(
    variant: &str,
    sc: &Scenario,
    depth: u32,
    seed: u64,
) -> Result<Report, InterleaveError> {
    interleave_explore_with(variant, sc, depth, seed, Limits::default())
}

pub fn interleave_explore_with(
    variant: &str,
    sc: &Scenario,
    depth: u32,
    seed: u64,
    limits: Limits,
) -> Result<Report, InterleaveError> {
    let tids = sc.threads();
    if tids.len() > MAX_THREADS {
        return Err(InterleaveError::TooManyThreads(tids.len()));
    }
    let s = initial_state(variant, sc, seed)?;
    let root = Node {
        s,
        pcs: vec![0; tids.len()],
        inflight: vec![None; tids.len()],
        bindings: Bindings::new(),
        last: None,
        switches: 0,
    };
    let mut ex = Explorer {
        variant,
        threads: tids.iter().map(|t| sc.thread_events(*t)).collect(),
        depth,
        limits,
        memo: HashMap::new(),
    };
    let tally = ex.explore(&root)?;
    let (events, pkru) = ex.witness(&root)?;
    Ok(Report {
        scenario: sc.name.clone(),
        variant: variant.to_string(),
        seed,
        events,
        sp_violations: tally.breached as usize,
        pkru_transitions: pkru,
        schedules: tally.schedules,
        failing_schedules: tally.failing,
        pass: tally.failing == 0,
    })
}
