//! The formal machine: state, safety predicates SP1–SP4, and the transition
//! framework every other module goes through to change state.

pub mod fs;
pub mod machine;
pub mod safety;
pub mod transition;
pub mod types;

pub use fs::{FileData, FileSystem};
pub use machine::{layout, new_initial, Access, AccessFault, MachineState, SimRng, SECRET_BYTES};
pub use safety::{safety_check, sp4_conflict, SafetyProperty, SafetyVerdict, Violation};
pub use transition::{
    apply_transition, run_trace, DenyReason, Effect, FaultReason, Noop, Rejection, Step,
    TraceReport, TransitionError,
};
pub use types::*;

#[cfg(test)]
mod tests {
    use super::*;

    fn with_untrusted_thread() -> MachineState {
        let mut s = new_initial();
        assert!(s.start_app());
        s
    }

    #[test]
    fn initial_state_has_nothing_open_or_mapped() {
        let s = new_initial();
        assert!(s.open_files.is_empty());
        assert!(s.file_mappings.is_empty());
        assert_eq!(s.threads.len(), 1);
        let t = &s.threads[&0];
        assert!(t.in_monitor);
        assert_eq!(t.current_domain, DomainId::Trusted);
        for d in DomainId::all() {
            assert_eq!(t.pkru.access(d), KeyAccess::RW, "{d}");
        }
        assert!(s.pages.values().all(|p| p.domain == DomainId::Trusted));
        assert!(safety_check(&s).is_safe());
    }

    #[test]
    fn sp1_reported_when_untrusted_key_reads_trusted() {
        let mut s = with_untrusted_thread();
        let t = s.thread_mut(0).unwrap();
        t.pkru.keys.insert(
            DomainId::Trusted,
            KeyAccess {
                read: true,
                write: false,
            },
        );
        let v = safety_check(&s);
        assert!(!v.is_safe());
        assert!(v.properties().iter().all(|p| *p == SafetyProperty::Sp1));
        assert!(v
            .violations
            .iter()
            .any(|x| x.page == Some(layout::SECRET.page())));
    }

    #[test]
    fn sp1_needs_both_key_and_page_permission() {
        let mut s = with_untrusted_thread();
        s.thread_mut(0).unwrap().pkru = Pkru::trusted();
        // Drop R on every trusted page: key grant alone is not readability.
        for rec in s.pages.values_mut().filter(|r| r.domain.is_trusted()) {
            rec.perms = PermSet::NONE;
        }
        assert!(safety_check(&s).is_safe());
    }

    #[test]
    fn sp3_flags_wx_page() {
        let mut s = new_initial();
        s.pages.insert(
            0x500,
            PageRecord::anon(DomainId::APP, PermSet::RWX, PageAttr::Retired),
        );
        assert_eq!(safety_check(&s).properties(), vec![SafetyProperty::Sp3]);
    }

    fn aliasing_state(swap: bool) -> MachineState {
        let mut s = new_initial();
        let a = Addr::from_page(0x600);
        s.pages.insert(
            a.page(),
            PageRecord::anon(DomainId::APP, PermSet::R, PageAttr::Retired),
        );
        let mut mfs = vec![
            FileMappingRecord {
                fd: 3,
                off: 0,
                len: 8192,
                addr: a,
            },
            FileMappingRecord {
                fd: 3,
                off: 4096,
                len: 8192,
                addr: layout::MONITOR_DATA,
            },
        ];
        if swap {
            mfs.reverse();
        }
        s.file_mappings.extend(mfs);
        s
    }

    #[test]
    fn sp4_overlapping_offsets_across_domains() {
        let v = safety_check(&aliasing_state(false));
        assert_eq!(v.properties(), vec![SafetyProperty::Sp4]);
        assert_eq!(
            safety_check(&aliasing_state(true)).properties(),
            v.properties()
        );
    }

    #[test]
    fn sp4_half_open_bounds() {
        let a = FileMappingRecord {
            fd: 3,
            off: 0,
            len: 4096,
            addr: Addr(0),
        };
        let b = FileMappingRecord { off: 4096, ..a };
        assert!(!a.offset_intersects(&b));
        assert!(!b.offset_intersects(&a));
        let c = FileMappingRecord { off: 4095, ..a };
        assert!(a.offset_intersects(&c) && c.offset_intersects(&a));
    }

    #[test]
    fn noop_is_identity() {
        let s = new_initial();
        let (next, effect) = apply_transition(&s, &Noop).unwrap();
        assert_eq!(next, s);
        assert_eq!(effect, Effect::default());
    }

    struct Corrupt;
    impl Step for Corrupt {
        fn step(&self, s: &mut MachineState) -> Result<Effect, Rejection> {
            s.pages.insert(
                0x700,
                PageRecord::anon(DomainId::APP, PermSet::RWX, PageAttr::Retired),
            );
            Ok(Effect::default())
        }
    }

    struct Refuse;
    impl Step for Refuse {
        fn step(&self, s: &mut MachineState) -> Result<Effect, Rejection> {
            s.pages.clear();
            Err(DenyReason::WXViolation.into())
        }
    }

    #[test]
    fn breach_and_denial_leave_input_untouched() {
        let s = new_initial();
        let before = s.clone();
        match apply_transition(&s, &Corrupt) {
            Err(TransitionError::SafetyBreach(v)) => {
                assert_eq!(v.properties(), vec![SafetyProperty::Sp3])
            }
            other => panic!("expected breach, got {other:?}"),
        }
        assert_eq!(s, before);
        assert!(matches!(
            apply_transition(&s, &Refuse),
            Err(TransitionError::PolicyDenied(Rejection::Denied(
                DenyReason::WXViolation
            )))
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn run_trace_stops_at_breach() {
        let s = new_initial();
        let steps: Vec<Box<dyn Step>> = vec![
            Box::new(Noop),
            Box::new(Refuse),
            Box::new(Corrupt),
            Box::new(Noop),
        ];
        let r = run_trace(s.clone(), steps.iter().map(|b| b.as_ref()));
        assert_eq!(r.denials, 1);
        assert_eq!(r.breach.as_ref().map(|b| b.0), Some(2));
        assert_eq!(r.steps, 3);
        assert_eq!(r.final_state, s);

        let empty: Vec<Box<dyn Step>> = Vec::new();
        let r = run_trace(s.clone(), empty.iter().map(|b| b.as_ref()));
        assert_eq!((r.steps, r.denials, r.breached()), (0, 0, false));
        assert_eq!(r.final_state, s);
    }

    #[test]
    fn memory_round_trip_across_page_boundary() {
        let mut s = new_initial();
        let at = Addr(0x9000 - 3);
        s.write_bytes(at, &[1, 2, 3, 4, 5, 6]);
        assert_eq!(s.read_bytes(at, 6), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(s.read_bytes(Addr(0x9000), 4), vec![4, 5, 6, 0]);
        s.write_u64(Addr(0x20), 0xdead_beef);
        assert_eq!(s.read_u64(Addr(0x20)), 0xdead_beef);
    }

    #[test]
    fn pages_spanned_counts() {
        assert_eq!(pages_spanned(Addr(0), 4096).count(), 1);
        assert_eq!(pages_spanned(Addr(4095), 2).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(pages_spanned(Addr(8192), 0).count(), 0);
        assert_eq!(round_up_pages(1), 4096);
        assert_eq!(round_up_pages(8192), 8192);
    }
}
