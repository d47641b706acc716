use num_rational::Ratio;

use super::*;
use crate::config::MonitorConfig;

fn state(variant: &str) -> MachineState {
    let gate: GateMechanism = variant.parse().unwrap();
    let mut s = MachineState::with_config(MonitorConfig::with_gate(gate), 7);
    assert!(s.start_app());
    s
}

#[test]
fn variant_strings_round_trip() {
    for v in [
        "secc_rand:32",
        "secc_eph",
        "disp_eph",
        "secc_cet",
        "disp_cet",
    ] {
        let g: GateMechanism = v.parse().unwrap();
        assert_eq!(g.to_string(), v);
    }
    for bad in ["secc_rand:0", "secc_rand:", "disp_rand:4", "eph", ""] {
        assert!(bad.parse::<GateMechanism>().is_err(), "{bad}");
    }
    assert_eq!(GateMechanism::default().to_string(), "secc_eph");
}

#[test]
fn probability_examples() {
    assert_eq!(guess_probability(16, 32), Ratio::new(1, 1024));
    assert_eq!(guess_probability(1, 1), Ratio::new(1, 2048));
    assert_eq!(gadget_positions(16), 65534);
    assert_eq!(gadget_positions(1), 4094);
    let w = window_hit_probability(1, 1);
    assert!((w - 1.0 / 4094.0).abs() < 1e-15);
}

#[test]
#[should_panic]
fn probability_rejects_zero_pages() {
    guess_probability(0, 1);
}

#[test]
fn random_gadget_stays_in_bounds() {
    let mut s = state("secc_rand:4");
    let pad = s.trampoline.pads[&0].clone();
    for _ in 0..2000 {
        rerandomize(&mut s);
        let g = s.trampoline.pads[&0].gadget_at.unwrap();
        assert!(g + GADGET_LEN <= pad.len());
    }
    assert_eq!(
        s.read_u64(layout::GADGET_POINTER),
        s.trampoline.pads[&0].gadget_addr().unwrap().0
    );
}

#[test]
fn rerandomizes_every_freq_entries() {
    let mut s = state("secc_rand:3");
    let start = s.trampoline.rerandomizations;
    for _ in 0..9 {
        gate_enter(&mut s, 0);
    }
    // Counter starts at 0; entries 4 and 7 find it at 3.
    assert_eq!(s.trampoline.rerandomizations - start, 2);
}

#[test]
fn ephemeral_pad_is_int3_outside_the_monitor() {
    let mut s = state("secc_eph");
    assert!(!s.trampoline.any_syscall_byte());
    gate_enter(&mut s, 0);
    assert!(s.trampoline.pads[&0].has_syscall_byte());
    gate_exit(&mut s, 0).unwrap();
    assert!(!s.trampoline.any_syscall_byte());
    let pad = s.trampoline.pads[&0].clone();
    assert!(pad.contents().is_empty());
    assert_eq!(pad.byte_at_offset(0), ByteClass::Int3);
}

#[test]
fn attack_jump_outcomes_per_variant() {
    let s = state("secc_eph");
    let base = s.trampoline.pads[&0].base;
    assert_eq!(attack_jump(&s, 0, base), ProbeOutcome::Int3Fault);
    assert_eq!(
        attack_jump(&s, 0, layout::APP_CODE),
        ProbeOutcome::KilledByFilter
    );

    let s = state("secc_cet");
    let gadget = s.trampoline.pads[&0].gadget_addr().unwrap();
    assert_eq!(attack_jump(&s, 0, gadget), ProbeOutcome::CetControlFault);

    let s = state("secc_rand:32");
    let gadget = s.trampoline.pads[&0].gadget_addr().unwrap();
    assert_eq!(
        attack_jump(&s, 0, gadget),
        ProbeOutcome::UncheckedSyscallExecuted
    );
    assert_eq!(attack_jump(&s, 0, gadget.add(1)), ProbeOutcome::Int3Fault);
    assert_eq!(attack_jump(&s, 0, gadget.add(2)), ProbeOutcome::Returned);
}

#[test]
fn cet_shadow_stack_catches_a_mismatch() {
    let mut s = state("secc_cet");
    gate_enter(&mut s, 0);
    gate_exit(&mut s, 0).unwrap();
    // An exit with no matching entry has nothing on the shadow stack.
    assert_eq!(gate_exit(&mut s, 0), Err(GateFault::CetControlFault));
}

#[test]
fn tsx_finds_the_ret_only_when_enabled() {
    let s = state("secc_rand:32");
    let ret = s.trampoline.pads[&0].gadget_addr().unwrap().add(2);
    assert_eq!(tsx_probe(&s, 0, ret), Err(DenyReason::TsxDisabled));

    let mut cfg = MonitorConfig::with_gate("secc_rand:32".parse().unwrap());
    cfg.tsx_enabled = true;
    let mut s = MachineState::with_config(cfg, 7);
    s.start_app();
    let ret = s.trampoline.pads[&0].gadget_addr().unwrap().add(2);
    assert_eq!(tsx_probe(&s, 0, ret), Ok(ProbeOutcome::TxCommit));
    assert_eq!(tsx_probe(&s, 0, ret.add(1)), Ok(ProbeOutcome::TxAbort));
}

#[test]
fn threads_get_their_own_filter_region() {
    let mut s = state("secc_eph");
    let t1 = spawn_thread(&mut s, 0).unwrap();
    assert_eq!(s.trampoline.queen_spawns, 1);
    let own = s.trampoline.pad_for(t1).unwrap().base;
    assert_ne!(own, s.trampoline.pad_for(0).unwrap().base);
    // Another thread's pad is outside this thread's filter.
    gate_enter(&mut s, 0);
    let other = s.trampoline.pads[&0].gadget_addr().unwrap();
    assert_eq!(attack_jump(&s, t1, other), ProbeOutcome::KilledByFilter);
    detach_thread(&mut s, t1);
    assert!(s.trampoline.pad_for(t1).is_none());
}

#[test]
fn direct_spawn_needs_the_queen_under_seccomp() {
    let mut s = state("secc_eph");
    assert_eq!(
        spawn_thread_direct(&mut s, 0),
        Err(DenyReason::QueenRequired)
    );
    let mut s = state("disp_eph");
    assert!(spawn_thread_direct(&mut s, 0).is_ok());
}

#[test]
fn cleanup_restarts_after_an_interrupt() {
    let mut s = state("secc_eph");
    gate_enter(&mut s, 0);
    s.thread_mut(0).unwrap().in_monitor = true;
    s.thread_mut(0).unwrap().current_domain = DomainId::Trusted;
    let r = cleanup_transaction(
        &mut s,
        0,
        &[
            (crate::signal_virt::SIGUSR1, 1),
            (crate::signal_virt::SIGUSR2, 2),
        ],
    );
    assert_eq!(r.restarts, 2);
    assert_eq!(r.passes, 3);
    assert_eq!(
        r.queued,
        vec![crate::signal_virt::SIGUSR1, crate::signal_virt::SIGUSR2]
    );
    assert!(!s.trampoline.pads[&0].has_syscall_byte());
}

#[test]
fn victim_ticks_move_the_gadget() {
    let mut s = state("secc_rand:2");
    let before = s.trampoline.rerandomizations;
    for _ in 0..6 {
        victim_syscall_tick(&mut s);
    }
    assert_eq!(s.trampoline.rerandomizations - before, 3);
    let mut s = state("secc_eph");
    victim_syscall_tick(&mut s);
    assert_eq!(s.trampoline.rerandomizations, 0);
}
