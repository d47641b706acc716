//! Sequential execution of a scenario and the report it produces.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::scenario::{ArgExpr, Event, Expect, Scenario};
use crate::config::MonitorConfig;
use crate::domain_mgr::{DomainSpec, Ring};
use crate::formal_state::{
    apply_transition, layout, Addr, DomainId, Effect, MachineState, Rejection, Tid, TransitionError,
};
use crate::nexpoline::{self, GateMechanism, GateVariant, UnknownVariant};
use crate::signal_virt::Landing;
use crate::syscall_monitor::{RawArg, SyscallRequest, SyscallResult, SyscallStatus};
use crate::transition::Transition;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error(transparent)]
    Variant(#[from] UnknownVariant),
    #[error("config: {0}")]
    Config(String),
    #[error("line {line}: @{name} is not bound")]
    Unbound { line: usize, name: String },
    #[error("line {line}: {msg}")]
    BadEvent { line: usize, msg: String },
    #[error("scenario spawns t{want} but the machine created t{got}")]
    Spawn { want: Tid, got: Tid },
}

/// Values bound by `as name`.
pub type Bindings = BTreeMap<String, u64>;

fn flag(v: &str) -> Result<bool, RunError> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(RunError::Config(format!(
            "expected on or off, got {other:?}"
        ))),
    }
}

/// The monitor configuration for `variant` with the scenario's overrides.
pub fn build_config(variant: &str, sc: &Scenario) -> Result<MonitorConfig, RunError> {
    let gate: GateMechanism = variant.parse()?;
    let mut cfg = MonitorConfig::with_gate(gate);
    for (k, v) in &sc.config {
        match k.as_str() {
            "tsx" => cfg.tsx_enabled = flag(v)?,
            "copy_args" => cfg.copy_args = flag(v)?,
            "scan_syscall" => cfg.scan_syscall_opcode = flag(v)?,
            // Read by the attack matrix, not by the monitor.
            "explore" => {}
            "sensitive" => cfg
                .sensitive_paths
                .extend(v.split(',').filter(|p| !p.is_empty()).map(String::from)),
            other => return Err(RunError::Config(format!("unknown key {other:?}"))),
        }
    }
    Ok(cfg)
}

/// Machine state after the scenario's setup lines: files created, the
/// application started, extra threads spawned.
pub fn initial_state(variant: &str, sc: &Scenario, seed: u64) -> Result<MachineState, RunError> {
    let mut s = MachineState::with_config(build_config(variant, sc)?, seed);
    for f in &sc.files {
        let ino = s.fs.resolve_or_create(&f.path);
        if f.sensitive {
            s.fs.mark_sensitive(&f.path);
        }
        s.fs.file_mut(ino).write_at(0, &f.content, false);
    }
    s.start_app();
    for &want in &sc.spawns {
        let got =
            nexpoline::spawn_thread(&mut s, 0).map_err(|e| RunError::Config(e.to_string()))?;
        if got != want {
            return Err(RunError::Spawn { want, got });
        }
    }
    Ok(s)
}

/// Looks a binding up: scenario bindings first, then the built-in names.
/// `pad<N>` is the trampoline thread N may jump into; `trampoline` is the
/// calling thread's.
pub fn lookup(s: &MachineState, bindings: &Bindings, tid: Tid, name: &str) -> Option<u64> {
    if let Some(v) = bindings.get(name) {
        return Some(*v);
    }
    let pad = |t: Tid| s.trampoline.pad_for(t).map(|p| p.base.0);
    match name {
        "secret" => Some(layout::SECRET.0),
        "flag" => Some(layout::SIGNAL_FLAG.0),
        "monitor_code" => Some(layout::MONITOR_CODE.0),
        "app_code" => Some(layout::APP_CODE.0),
        "gate_entry" => Some(layout::GATE_ENTRY.0),
        "signal_entry" => Some(layout::SIGNAL_ENTRY.0),
        "trampoline" => pad(tid),
        _ => name
            .strip_prefix("pad")
            .and_then(|n| n.parse().ok())
            .and_then(pad),
    }
}

/// The first binding `ev` needs that is not available yet.
pub fn missing_binding(s: &MachineState, bindings: &Bindings, ev: &Event) -> Option<String> {
    ev.needs()
        .find(|n| lookup(s, bindings, ev.tid, n).is_none())
        .map(String::from)
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Val {
    Int(u64),
    Str(String),
    Bytes(Vec<u8>),
}

struct Args<'a> {
    ev: &'a Event,
    vals: Vec<Val>,
}

impl Args<'_> {
    fn bad<T>(&self, msg: impl Into<String>) -> Result<T, RunError> {
        Err(RunError::BadEvent {
            line: self.ev.line,
            msg: format!("{}: {}", self.ev.verb, msg.into()),
        })
    }

    fn int(&self, i: usize) -> Result<u64, RunError> {
        match self.vals.get(i) {
            Some(Val::Int(v)) => Ok(*v),
            Some(_) => self.bad(format!("argument {} must be a number", i + 1)),
            None => self.bad(format!("missing argument {}", i + 1)),
        }
    }

    fn int_or(&self, i: usize, default: u64) -> Result<u64, RunError> {
        if self.vals.len() <= i {
            Ok(default)
        } else {
            self.int(i)
        }
    }

    fn addr(&self, i: usize) -> Result<Addr, RunError> {
        self.int(i).map(Addr)
    }

    fn word(&self, i: usize) -> Result<String, RunError> {
        match self.vals.get(i) {
            Some(Val::Str(w)) => Ok(w.clone()),
            Some(Val::Bytes(b)) => Ok(String::from_utf8_lossy(b).into_owned()),
            _ => self.bad(format!("argument {} must be a word", i + 1)),
        }
    }

    fn domain(&self, i: usize) -> Result<DomainId, RunError> {
        match self.vals.get(i) {
            Some(Val::Int(v)) => u8::try_from(*v)
                .map(DomainId::Untrusted)
                .or_else(|_| self.bad(format!("domain index {v}"))),
            Some(Val::Str(w)) => w.parse().or_else(|m: String| self.bad(m)),
            _ => self.bad(format!("argument {} must be a domain", i + 1)),
        }
    }

    fn ints_from(&self, i: usize) -> Result<Vec<u64>, RunError> {
        (i..self.vals.len()).map(|j| self.int(j)).collect()
    }

    fn raw(&self, from: usize) -> Vec<RawArg> {
        self.vals[from.min(self.vals.len())..]
            .iter()
            .map(|v| match v {
                Val::Int(n) => RawArg::Int(*n),
                Val::Str(s) => RawArg::Str(s.clone()),
                Val::Bytes(b) => RawArg::Str(String::from_utf8_lossy(b).into_owned()),
            })
            .collect()
    }
}

fn resolve_args<'a>(
    s: &MachineState,
    bindings: &Bindings,
    ev: &'a Event,
) -> Result<Args<'a>, RunError> {
    let vals = ev
        .args
        .iter()
        .map(|a| match a {
            ArgExpr::Int(v) => Ok(Val::Int(*v)),
            ArgExpr::Str(w) => Ok(Val::Str(w.clone())),
            ArgExpr::Bytes(b) => Ok(Val::Bytes(b.clone())),
            ArgExpr::Bind { name, offset } => lookup(s, bindings, ev.tid, name)
                .map(|v| Val::Int(v.wrapping_add(*offset)))
                .ok_or_else(|| RunError::Unbound {
                    line: ev.line,
                    name: name.clone(),
                }),
        })
        .collect::<Result<_, _>>()?;
    Ok(Args { ev, vals })
}

/// The syscall request for a syscall event.
pub fn syscall_request(
    s: &MachineState,
    bindings: &Bindings,
    ev: &Event,
) -> Result<SyscallRequest, RunError> {
    let a = resolve_args(s, bindings, ev)?;
    Ok(SyscallRequest::tagged(ev.tid, &ev.verb, a.raw(0)))
}

/// Guesses a fork-bomb attacker gets: forty windows per expected hit under
/// the closed form. The real per-window rate is about half the closed form,
/// which still leaves a miss chance near e^-20.
pub fn fork_bomb_budget(gate: GateMechanism) -> u64 {
    let (pages, freq) = match gate.variant {
        GateVariant::Random { pages, rerand_freq } => (pages, rerand_freq),
        GateVariant::Ephemeral | GateVariant::Cet => (1, 1),
    };
    let p = nexpoline::guess_probability(pages, freq);
    let windows = (40 * p.denom()).div_ceil(*p.numer());
    windows * freq
}

/// Turns an event into the transition it stands for.
pub fn build_transition(
    s: &MachineState,
    bindings: &Bindings,
    ev: &Event,
) -> Result<Transition, RunError> {
    let a = resolve_args(s, bindings, ev)?;
    let tid = ev.tid;
    if ev.is_syscall() {
        return Ok(Transition::Syscall(SyscallRequest::tagged(
            tid,
            &ev.verb,
            a.raw(0),
        )));
    }
    Ok(match ev.verb.as_str() {
        "load" => Transition::Load {
            tid,
            addr: a.addr(0)?,
            len: a.int_or(1, 8)?,
        },
        "store" => {
            let bytes = match a.vals.get(1) {
                Some(Val::Int(v)) => v.to_le_bytes().to_vec(),
                Some(Val::Bytes(b)) => b.clone(),
                Some(Val::Str(w)) => w.as_bytes().to_vec(),
                None => return a.bad("missing data"),
            };
            Transition::Store {
                tid,
                addr: a.addr(0)?,
                bytes,
            }
        }
        "iovec" => {
            let mut bytes = a.int(1)?.to_le_bytes().to_vec();
            bytes.extend_from_slice(&a.int(2)?.to_le_bytes());
            Transition::Store {
                tid,
                addr: a.addr(0)?,
                bytes,
            }
        }
        "exec-wrpkru" => Transition::ExecWrpkru {
            tid,
            at: a.addr(0)?,
        },
        "jump-pad" => Transition::GateJump {
            tid,
            target: a.addr(0)?,
        },
        "direct-jump" => Transition::DirectJump {
            tid,
            target: a.addr(0)?,
        },
        "tsx-scan" => Transition::TsxScan { tid },
        "forkbomb" => Transition::ForkBomb {
            tid,
            guesses: a.int_or(0, fork_bomb_budget(s.config.gate))?,
        },
        "forge" => {
            let landing = match a.word(0)?.as_str() {
                "start" => Landing::Start,
                "after-flag" => Landing::AfterFlagSet,
                "after-check" => Landing::AfterCheck,
                other => return a.bad(format!("unknown landing {other:?}")),
            };
            Transition::ForgedSignal { tid, landing }
        }
        "signal" => Transition::KernelSignal {
            tid,
            signo: signo(&a, 0)?,
        },
        "sigreturn" => Transition::SigReturn {
            tid,
            tamper: match a.vals.first() {
                None => false,
                Some(Val::Str(w)) if w == "tamper" => true,
                _ => return a.bad("expected nothing or `tamper`"),
            },
        },
        "syscall-interrupted" => Transition::SyscallInterrupted {
            signo: signo(&a, 0)?,
            req: SyscallRequest::tagged(tid, &a.word(1)?, a.raw(2)),
        },
        "create-domain" => Transition::CreateDomain {
            tid,
            spec: DomainSpec {
                code: (a.addr(0)?, a.int(1)?),
                data: (a.addr(2)?, a.int(3)?),
                ring: a.word(4)?.parse::<Ring>().or_else(|m| a.bad(m))?,
                entrypoints: a.ints_from(5)?.into_iter().map(Addr).collect(),
            },
        },
        "isolate-lib" => Transition::IsolateLibrary {
            tid,
            code: (a.addr(0)?, a.int(1)?),
            data: (a.addr(2)?, a.int(3)?),
            exports: a.ints_from(4)?.into_iter().map(Addr).collect(),
        },
        "xcall" => Transition::XCall {
            tid,
            target: a.domain(0)?,
            entry: u32::try_from(a.int(1)?).or_else(|_| a.bad("entry index"))?,
            args: a.ints_from(2)?,
        },
        "xreturn" => Transition::XReturn {
            tid,
            claim: if a.vals.is_empty() {
                None
            } else {
                Some(a.domain(0)?)
            },
        },
        "grant" => Transition::Grant {
            tid,
            page: a.addr(0)?.page(),
            grantee: a.domain(1)?,
        },
        "revoke" => Transition::Revoke {
            tid,
            page: a.addr(0)?.page(),
        },
        "exfil" => Transition::Exfil { path: a.word(0)? },
        "leak" => Transition::Leak {
            tid,
            addr: a.addr(0)?,
            len: a.int_or(1, 64)?,
        },
        "spawn-direct" => Transition::SpawnDirect { tid },
        other => return a.bad(format!("no transition for {other:?}")),
    })
}

fn signo(a: &Args<'_>, i: usize) -> Result<u8, RunError> {
    u8::try_from(a.int(i)?).or_else(|_| a.bad("signal number"))
}

/// What one event did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub kind: Expect,
    pub detail: String,
    /// The value produced, when the step committed.
    pub value: Option<u64>,
    pub breach: bool,
    pub pkru_transitions: u32,
}

pub fn classify(r: &Result<(MachineState, Effect), TransitionError>) -> Outcome {
    match r {
        Ok((_, e)) => Outcome {
            kind: if e.bypass { Expect::Bypass } else { Expect::Ok },
            detail: if e.bypass {
                "attack succeeded".into()
            } else {
                String::new()
            },
            value: Some(e.value),
            breach: false,
            pkru_transitions: e.pkru_transitions,
        },
        Err(TransitionError::PolicyDenied(rej)) => rejection(rej),
        Err(TransitionError::SafetyBreach(v)) => Outcome {
            kind: Expect::Bypass,
            detail: format!("safety breach: {:?}", v.properties()),
            value: None,
            breach: true,
            pkru_transitions: 0,
        },
    }
}

fn rejection(r: &Rejection) -> Outcome {
    let (kind, detail) = match r {
        Rejection::Denied(d) => (Expect::Deny, d.to_string()),
        Rejection::Fault(f) => (Expect::Fault, f.to_string()),
    };
    Outcome {
        kind,
        detail,
        value: None,
        breach: false,
        pkru_transitions: 0,
    }
}

/// Outcome of a syscall run phase by phase.
pub fn classify_syscall(r: &SyscallResult) -> Outcome {
    let leaked = r
        .delivered
        .as_ref()
        .is_some_and(|f| f.pkru.grants_trusted());
    let mut o = match &r.status {
        SyscallStatus::Ok(v) => Outcome {
            kind: if leaked { Expect::Bypass } else { Expect::Ok },
            detail: if leaked {
                "frame carries the monitor's key".into()
            } else {
                String::new()
            },
            value: Some(*v),
            breach: false,
            pkru_transitions: 0,
        },
        SyscallStatus::Denied(d) => rejection(&Rejection::Denied(d.clone())),
        SyscallStatus::Fault(f) => rejection(&Rejection::Fault(f.clone())),
    };
    o.pkru_transitions = r.pkru_transitions;
    o
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EventReport {
    pub line: usize,
    pub thread: Tid,
    pub verb: String,
    pub expected: Vec<Expect>,
    pub actual: Expect,
    pub detail: String,
    pub pass: bool,
}

impl EventReport {
    pub fn new(ev: &Event, variant: &str, o: &Outcome) -> Self {
        let expected = ev.expect.for_variant(variant);
        EventReport {
            line: ev.line,
            thread: ev.tid,
            verb: ev.verb.clone(),
            expected: expected.iter().copied().collect(),
            actual: o.kind,
            detail: o.detail.clone(),
            pass: expected.contains(&o.kind) && !o.breach,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    /// Per-event results (for an exploration, those of the first failing
    /// schedule, or of the first schedule when all pass).
    pub events: Vec<EventReport>,
    pub sp_violations: usize,
    pub pkru_transitions: u64,
    pub schedules: u64,
    pub failing_schedules: u64,
    pub pass: bool,
}

impl Report {
    /// 0 pass, 1 expectation mismatch, 2 safety breach.
    pub fn exit_code(&self) -> i32 {
        if self.sp_violations > 0 {
            2
        } else if !self.pass {
            1
        } else {
            0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Whether any event reached something it must never reach.
    pub fn any_bypass(&self) -> bool {
        self.events.iter().any(|e| e.actual == Expect::Bypass)
    }
}

/// Runs the events in file order. Deterministic in (variant, scenario, seed).
pub fn run_scenario(variant: &str, sc: &Scenario, seed: u64) -> Result<Report, RunError> {
    let mut s = initial_state(variant, sc, seed)?;
    let mut bindings = Bindings::new();
    let mut events = Vec::with_capacity(sc.events.len());
    let mut sp_violations = 0;
    let mut pkru = 0u64;
    for ev in &sc.events {
        let t = build_transition(&s, &bindings, ev)?;
        let r = apply_transition(&s, &t);
        let o = classify(&r);
        if let Err(TransitionError::SafetyBreach(v)) = &r {
            sp_violations += v.violations.len().max(1);
        }
        if let Ok((next, effect)) = r {
            s = next;
            pkru += effect.pkru_transitions as u64;
            if let Some(name) = &ev.bind {
                bindings.insert(name.clone(), effect.value);
            }
        }
        events.push(EventReport::new(ev, variant, &o));
    }
    let pass = sp_violations == 0 && events.iter().all(|e| e.pass);
    Ok(Report {
        scenario: sc.name.clone(),
        variant: variant.to_string(),
        seed,
        events,
        sp_violations,
        pkru_transitions: pkru,
        schedules: 1,
        failing_schedules: u64::from(!pass),
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::parse_scenario;

    #[test]
    fn budget_from_the_closed_form() {
        let g: GateMechanism = "secc_rand:32".parse().unwrap();
        assert_eq!(fork_bomb_budget(g), 40 * 1024 * 32);
        assert_eq!(fork_bomb_budget(GateMechanism::default()), 40 * 2048);
    }

    #[test]
    fn builtin_bindings_resolve() {
        let sc = parse_scenario("spawn t1").unwrap();
        let s = initial_state("secc_eph", &sc, 1).unwrap();
        let b = Bindings::new();
        assert_eq!(lookup(&s, &b, 0, "secret"), Some(layout::SECRET.0));
        assert_ne!(
            lookup(&s, &b, 0, "trampoline"),
            lookup(&s, &b, 1, "trampoline")
        );
        assert_eq!(lookup(&s, &b, 1, "pad0"), lookup(&s, &b, 0, "trampoline"));
        assert_eq!(lookup(&s, &b, 0, "pad7"), None);
        let s = initial_state("secc_rand:8", &sc, 1).unwrap();
        assert_eq!(lookup(&s, &b, 1, "pad0"), lookup(&s, &b, 1, "trampoline"));
    }

    #[test]
    fn unbound_reference_is_an_error() {
        let sc = parse_scenario("t0: write 3 @nowhere 4 expect deny").unwrap();
        assert_eq!(
            run_scenario("secc_eph", &sc, 0),
            Err(RunError::Unbound {
                line: 1,
                name: "nowhere".into()
            })
        );
    }

    #[test]
    fn wx_is_denied_under_every_variant() {
        let sc = parse_scenario(
            "t0: mmap 0 4096 PROT_READ|PROT_WRITE|PROT_EXEC MAP_PRIVATE|MAP_ANONYMOUS -1 0 expect deny",
        )
        .unwrap();
        for v in [
            "secc_rand:32",
            "secc_eph",
            "disp_eph",
            "secc_cet",
            "disp_cet",
        ] {
            let r = run_scenario(v, &sc, 3).unwrap();
            assert!(r.pass, "{v}: {}", r.to_json());
            assert_eq!(r.events[0].detail, "writable and executable");
        }
    }

    #[test]
    fn reports_are_byte_identical() {
        let sc = parse_scenario(
            "t0: open /tmp/a 0 as fd expect ok\nt0: getrandom @app_code 8 0 expect ok|fault",
        )
        .unwrap();
        let a = run_scenario("secc_rand:4", &sc, 11).unwrap().to_json();
        let b = run_scenario("secc_rand:4", &sc, 11).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_variant_is_reported() {
        let sc = Scenario::default();
        assert!(matches!(
            run_scenario("bogus", &sc, 0),
            Err(RunError::Variant(_))
        ));
    }
}
