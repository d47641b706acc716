//! Property tests over the public surface.

use proptest::prelude::*;

use endosim_core::domain_mgr::{self, mode_check, CpuMode, DomainSpec, MiniCpu, ModeCheck, Ring};
use endosim_core::formal_state::{Addr, DomainId, PageAttr, PageRecord, PermSet, PAGE_SIZE};
use endosim_core::harness::fuzz::{fuzz_trace, FUZZ_VARIANTS};
use endosim_core::harness::storm::{storm_initial, STORM_SIGNALS, STORM_THREADS};
use endosim_core::nexpoline::{gadget_positions, guess_probability, window_hit_probability};
use endosim_core::signal_virt::SigSet;
use endosim_core::syscall_monitor::{RawArg, SyscallRequest};
use endosim_core::{apply_transition, safety_check, MachineState, MonitorConfig, Transition};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Short random traces never end in an unsafe state or a breach.
    #[test]
    fn random_traces_stay_safe(v in 0..FUZZ_VARIANTS.len(), seed in any::<u64>()) {
        let f = fuzz_trace(FUZZ_VARIANTS[v], 30, seed);
        prop_assert!(f.clean(), "{:?}", f);
    }

    /// The pending slot and the kernel mask move together, and no raised
    /// signal goes missing, whatever the order of signals and returns.
    #[test]
    fn signal_queue_invariant(
        v in 0..3usize,
        moves in proptest::collection::vec((0..2usize, 0..3usize, 0..4u8), 1..24),
    ) {
        let variant = ["secc_rand:32", "secc_eph", "secc_cet"][v];
        let mut s = storm_initial(variant, 0).unwrap();
        let mut sent = 0u64;
        for (t, n, kind) in moves {
            let tid = STORM_THREADS[t];
            let signo = STORM_SIGNALS[n];
            let step = match kind {
                0 => Transition::KernelSignal { tid, signo },
                1 => Transition::SigReturn { tid, tamper: false },
                2 => Transition::Syscall(SyscallRequest::tagged(tid, "getpid", vec![])),
                _ => Transition::Syscall(SyscallRequest::tagged(
                    tid,
                    "rt_sigprocmask",
                    vec![RawArg::Int(u64::from(signo % 2)), RawArg::Int(SigSet::of(&[signo]).0)],
                )),
            };
            if let Ok((next, e)) = apply_transition(&s, &step) {
                prop_assert!(!e.bypass);
                sent += u64::from(kind == 0);
                s = next;
            }
            let g = &s.signals;
            prop_assert!(g.queue_consistent());
            prop_assert_eq!(g.reentries, 0);
            prop_assert!(g.issued.values().flatten().all(|f| !f.pkru.grants_trusted()));
            prop_assert_eq!(sent, g.accepted + g.held_total());
            prop_assert_eq!(g.accepted, g.delivered + g.disposed + g.pending.len() as u64);
        }
    }

    /// The closed form is twice the per-window hit rate once guesses are rare.
    #[test]
    fn closed_form_against_window_rate(pages in 1..64u64, freq in 1..64u64) {
        let p = guess_probability(pages, freq);
        let exact = *p.numer() as f64 / *p.denom() as f64;
        prop_assert!((exact - 2.0 * freq as f64 / (4096.0 * pages as f64)).abs() < 1e-15);
        prop_assert_eq!(gadget_positions(pages), pages * 4096 - 2);
        let w = window_hit_probability(pages, freq);
        prop_assert!(w <= freq as f64 / gadget_positions(pages) as f64 + 1e-15);
        prop_assert!(exact / w > 1.9 && exact / w < 2.1 + freq as f64 / 1000.0);
    }

    /// 64-bit mode passes with rax intact whenever the shift loses nothing;
    /// compatibility mode always traps.
    #[test]
    fn mode_check_by_mode(rax in 0..(1u64 << 63)) {
        let (out, v) = mode_check(MiniCpu::new(rax, CpuMode::Long64));
        prop_assert_eq!(v, ModeCheck::Pass);
        prop_assert_eq!(out.rax, rax);
        let (_, v) = mode_check(MiniCpu::new(rax, CpuMode::Compat32));
        prop_assert_eq!(v, ModeCheck::InvalidOpcodeTrap);
    }

    /// Any call path through two sandboxes unwinds to the exact starting
    /// context, and the state stays safe throughout.
    #[test]
    fn xcall_chains_unwind(path in proptest::collection::vec(0..2usize, 1..12)) {
        let mut s = MachineState::with_config(MonitorConfig::default(), 0);
        s.start_app();
        let targets = [sandbox(&mut s, 0x2000_0000), sandbox(&mut s, 0x2010_0000)];
        let mut saved = Vec::new();
        for i in path {
            let t = s.thread(0).unwrap();
            let ctx = (t.current_domain, t.stack_ptr, t.return_chain.clone());
            if domain_mgr::xcall(&mut s, 0, targets[i], 0, &[]).is_ok() {
                saved.push(ctx);
            }
            prop_assert!(safety_check(&s).is_safe());
        }
        while let Some(want) = saved.pop() {
            domain_mgr::xreturn(&mut s, 0, Some(want.0)).unwrap();
            let t = s.thread(0).unwrap();
            prop_assert_eq!((t.current_domain, t.stack_ptr, t.return_chain.clone()), want);
        }
        prop_assert_eq!(s.thread(0).unwrap().current_domain, DomainId::APP);
    }
}

fn sandbox(s: &mut MachineState, base: u64) -> DomainId {
    let code = Addr(base);
    let data = Addr(base + PAGE_SIZE);
    s.pages.insert(
        code.page(),
        PageRecord::anon(DomainId::APP, PermSet::RX, PageAttr::Exec),
    );
    s.pages.insert(
        data.page(),
        PageRecord::anon(DomainId::APP, PermSet::RW, PageAttr::Retired),
    );
    let spec = DomainSpec {
        code: (code, PAGE_SIZE),
        data: (data, PAGE_SIZE),
        entrypoints: vec![code],
        ring: Ring::Sandbox,
    };
    domain_mgr::iv_create_domain(s, 0, &spec).unwrap()
}
