use super::*;
use crate::formal_state::{layout, new_initial, DomainId};

fn app() -> MachineState {
    let mut s = new_initial();
    s.start_app();
    s
}

fn handler(s: &mut MachineState, signo: Signo) {
    vsigaction(s, signo, Handler::At(layout::APP_CODE), SigSet::EMPTY).unwrap();
}

fn enter_monitor(s: &mut MachineState, tid: Tid) {
    let t = s.thread_mut(tid).unwrap();
    t.in_monitor = true;
    t.current_domain = DomainId::Trusted;
    t.pkru = Pkru::trusted();
}

fn leave_monitor(s: &mut MachineState, tid: Tid) {
    let t = s.thread_mut(tid).unwrap();
    t.in_monitor = false;
    t.current_domain = DomainId::APP;
    t.pkru = Pkru::for_domain(DomainId::APP);
}

#[test]
fn sigset_basics() {
    let mut m = SigSet::of(&[SIGINT, SIGUSR1]);
    assert!(m.contains(SIGINT) && !m.contains(SIGUSR2));
    m.insert(SIGUSR2);
    m.remove(SIGINT);
    assert_eq!(m.iter().collect::<Vec<_>>(), vec![SIGUSR1, SIGUSR2]);
}

#[test]
fn delivery_to_untrusted_code_builds_an_untrusted_frame() {
    let mut s = app();
    handler(&mut s, SIGUSR1);
    let out = kernel_deliver(&mut s, 0, SIGUSR1).unwrap();
    let DeliveryOutcome::Delivered(frame) = out else {
        panic!("expected delivery, got {out:?}");
    };
    assert_eq!(frame.pkru, Pkru::for_domain(DomainId::APP));
    assert!(!frame.pkru.grants_trusted());
    assert_eq!(frame.handler, layout::APP_CODE);
    assert!(s.signals.queue_consistent());
    assert_eq!(s.signals.delivered, 1);
    assert_eq!(s.read_u64(layout::SIGNAL_FLAG), 0);
}

#[test]
fn one_slot_per_signal_while_in_the_monitor() {
    let mut s = app();
    handler(&mut s, SIGUSR1);
    enter_monitor(&mut s, 0);
    assert_eq!(
        kernel_deliver(&mut s, 0, SIGUSR1).unwrap(),
        DeliveryOutcome::Deferred(Interrupted::InMonitor)
    );
    for _ in 0..3 {
        assert_eq!(
            kernel_deliver(&mut s, 0, SIGUSR1).unwrap(),
            DeliveryOutcome::Held
        );
    }
    assert_eq!(s.signals.pending.len(), 1);
    assert_eq!(s.signals.held_total(), 3);
    assert!(s.signals.queue_consistent());

    leave_monitor(&mut s, 0);
    let f = try_deliver(&mut s, 0, Some(5)).unwrap();
    assert_eq!(f.retval, Some(5));
    // One held instance moved into the freed slot.
    assert_eq!(s.signals.held_total(), 2);
    assert!(s.signals.pending.contains_key(&SIGUSR1));
    assert!(s.signals.queue_consistent());
}

#[test]
fn smallest_pending_signal_goes_first() {
    let mut s = app();
    handler(&mut s, SIGINT);
    handler(&mut s, SIGUSR2);
    enter_monitor(&mut s, 0);
    kernel_deliver(&mut s, 0, SIGUSR2).unwrap();
    kernel_deliver(&mut s, 0, SIGINT).unwrap();
    leave_monitor(&mut s, 0);
    assert_eq!(try_deliver(&mut s, 0, None).unwrap().signo, SIGINT);
}

#[test]
fn override_mask_is_used_once() {
    let mut s = app();
    handler(&mut s, SIGINT);
    sigprocmask(&mut s, 0, SigSet::of(&[SIGINT])).unwrap();
    enter_monitor(&mut s, 0);
    kernel_deliver(&mut s, 0, SIGINT).unwrap();
    leave_monitor(&mut s, 0);
    assert!(try_deliver(&mut s, 0, None).is_none());
    s.signals.override_mask = Some(SigSet::EMPTY);
    assert!(try_deliver(&mut s, 0, None).is_some());
    assert!(s.signals.override_mask.is_none());
}

#[test]
fn forged_entries_are_rejected_at_every_landing() {
    let s = app();
    assert_eq!(
        forged_entry(&s, 0, Landing::Start),
        Ok(ForgeOutcome::FlagWriteFaulted)
    );
    assert_eq!(
        forged_entry(&s, 0, Landing::AfterFlagSet),
        Ok(ForgeOutcome::FlagCheckFailed)
    );
    assert_eq!(
        forged_entry(&s, 0, Landing::AfterCheck),
        Ok(ForgeOutcome::NoPrivilege)
    );
    assert_eq!(s.signals.accepted, 0);
}

#[test]
fn tampered_frames_fail_the_check() {
    let mut s = app();
    handler(&mut s, SIGUSR1);
    let DeliveryOutcome::Delivered(frame) = kernel_deliver(&mut s, 0, SIGUSR1).unwrap() else {
        panic!("expected delivery");
    };
    let mut bad = (*frame).clone();
    bad.pkru = Pkru::trusted();
    assert_eq!(check_frame(&s, 0, &bad), Err(DenyReason::TamperedFrame));
    let mut bad = (*frame).clone();
    bad.token ^= 1;
    assert_eq!(check_frame(&s, 0, &bad), Err(DenyReason::TamperedFrame));
    assert!(vsigreturn(&mut s, 0, &frame).is_ok());
    assert!(current_frame(&s, 0).is_none());
    // Replaying the same frame finds nothing issued.
    assert_eq!(check_frame(&s, 0, &frame), Err(DenyReason::TamperedFrame));
}

#[test]
fn reserved_and_uncatchable_signals() {
    let mut s = app();
    assert_eq!(
        vsigaction(&mut s, SIGKILL, Handler::Ignore, SigSet::EMPTY),
        Err(DenyReason::Uncatchable)
    );
    assert_eq!(
        vsigaction(&mut s, SIGSYS, Handler::Ignore, SigSet::EMPTY),
        Err(DenyReason::ReservedSignal)
    );
    assert_eq!(
        vsigaction(&mut s, SIGUSR1, Handler::At(layout::SECRET), SigSet::EMPTY),
        Err(DenyReason::PointsIntoTrusted)
    );
    let old = sigprocmask(&mut s, 2, SigSet(u64::MAX)).unwrap();
    assert_eq!(old, SigSet::EMPTY);
    assert!(!s.signals.user_mask.contains(SIGKILL));
    assert!(!s.signals.user_mask.contains(SIGSYS));
}

#[test]
fn default_actions() {
    let mut s = app();
    assert_eq!(
        kernel_deliver(&mut s, 0, SIGCHLD).unwrap(),
        DeliveryOutcome::Disposed
    );
    assert!(!s.exited);
    assert_eq!(
        kernel_deliver(&mut s, 0, SIGUSR1).unwrap(),
        DeliveryOutcome::Terminated
    );
    assert!(s.exited);
    assert_eq!(s.signals.terminated, Some(SIGUSR1));
}

#[test]
fn altstack_is_used_once_per_nesting() {
    let mut s = app();
    handler(&mut s, SIGUSR1);
    handler(&mut s, SIGUSR2);
    s.signals.altstack.insert(0, Addr(0x2000_0000));
    let DeliveryOutcome::Delivered(f1) = kernel_deliver(&mut s, 0, SIGUSR1).unwrap() else {
        panic!()
    };
    assert!(f1.on_altstack);
    let DeliveryOutcome::Delivered(f2) = kernel_deliver(&mut s, 0, SIGUSR2).unwrap() else {
        panic!()
    };
    assert!(!f2.on_altstack);
}
