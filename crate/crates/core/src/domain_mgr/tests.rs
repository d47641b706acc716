use super::*;
use crate::formal_state::{layout, new_initial, safety_check};

fn app() -> MachineState {
    let mut s = new_initial();
    s.start_app();
    s
}

/// Maps one code page and one data page for the application at `base`.
fn library(s: &mut MachineState, base: u64) -> DomainSpec {
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
    DomainSpec {
        code: (code, PAGE_SIZE),
        data: (data, PAGE_SIZE),
        entrypoints: vec![code, code.add(0x40)],
        ring: Ring::Sandbox,
    }
}

#[test]
fn rings_order() {
    assert!(Ring::Endokernel.outranks(Ring::Safebox));
    assert!(Ring::Safebox.outranks(Ring::Unbox));
    assert!(Ring::Unbox.outranks(Ring::Sandbox));
    assert!(!Ring::Sandbox.outranks(Ring::Sandbox));
    assert_eq!("safebox".parse::<Ring>(), Ok(Ring::Safebox));
    assert!("endokernel".parse::<Ring>().is_err());
}

#[test]
fn create_assigns_lowest_free_index() {
    let mut s = app();
    let spec = library(&mut s, 0x2000_0000);
    let d = iv_create_domain(&mut s, 0, &spec).unwrap();
    assert_eq!(d, DomainId::Untrusted(1));
    assert_eq!(s.page(spec.code.0.page()).unwrap().domain, d);
    assert_eq!(
        s.page(spec.data.0.page()).unwrap().attr,
        PageAttr::DomainPrivate(d)
    );
    let ep = s.domains.get(d).unwrap();
    assert_eq!(ep.entrypoints.len(), 2);
    assert_eq!(ep.stubs.len(), 2);
    // The same pages now belong to someone else.
    assert_eq!(
        iv_create_domain(&mut s, 0, &spec),
        Err(DenyReason::PageOwnedElsewhere)
    );
    assert!(safety_check(&s).is_safe());
}

#[test]
fn keys_run_out_after_fourteen_domains() {
    let mut s = app();
    for i in 0..14 {
        let spec = library(&mut s, 0x2000_0000 + i * 0x10_0000);
        assert_eq!(
            iv_create_domain(&mut s, 0, &spec),
            Ok(DomainId::Untrusted(i as u8 + 1))
        );
    }
    let spec = library(&mut s, 0x3000_0000);
    assert_eq!(
        iv_create_domain(&mut s, 0, &spec),
        Err(DenyReason::DomainsExhausted)
    );
}

#[test]
fn entrypoints_must_be_in_the_code() {
    let mut s = app();
    let mut spec = library(&mut s, 0x2000_0000);
    spec.entrypoints.push(spec.data.0);
    assert_eq!(
        iv_create_domain(&mut s, 0, &spec),
        Err(DenyReason::BadEntrypoint)
    );
}

#[test]
fn xcall_and_xreturn_restore_the_caller() {
    let mut s = app();
    let spec = library(&mut s, 0x2000_0000);
    let d = iv_create_domain(&mut s, 0, &spec).unwrap();
    let before = s.thread(0).unwrap().clone();
    let e = xcall(&mut s, 0, d, 1, &[1, 2]).unwrap();
    assert_eq!(e.value, spec.entrypoints[1].0);
    assert_eq!(e.pkru_transitions, 2);
    let t = s.thread(0).unwrap();
    assert_eq!(t.current_domain, d);
    assert!(t.sig_blocked);
    assert!(s.domains.exec_locked);
    // Running as the callee, the application's stack is out of reach.
    assert!(s
        .check_access(0, Addr(before.stack_ptr.0 - 8), 8, Access::Read)
        .is_err());
    assert_eq!(
        xreturn(&mut s, 0, Some(DomainId::Untrusted(5))),
        Err(DenyReason::ReturnOrder)
    );
    xreturn(&mut s, 0, Some(DomainId::APP)).unwrap();
    assert_eq!(s.thread(0).unwrap(), &before);
    assert_eq!(xreturn(&mut s, 0, None), Err(DenyReason::ReturnOrder));
}

#[test]
fn xcall_argument_checks() {
    let mut s = app();
    let spec = library(&mut s, 0x2000_0000);
    let d = iv_create_domain(&mut s, 0, &spec).unwrap();
    assert_eq!(xcall(&mut s, 0, d, 9, &[]), Err(DenyReason::BadEntrypoint));
    assert_eq!(
        xcall(&mut s, 0, d, 0, &[0; 7]),
        Err(DenyReason::TooManyArgs)
    );
    assert_eq!(
        xcall(&mut s, 0, DomainId::APP, 0, &[]),
        Err(DenyReason::SameDomain)
    );
    assert_eq!(
        xcall(&mut s, 0, DomainId::Untrusted(9), 0, &[]),
        Err(DenyReason::BadEntrypoint)
    );
    assert_eq!(
        xcall_addr(&mut s, 0, d, spec.entrypoints[0], &[])
            .unwrap()
            .value,
        spec.entrypoints[0].0
    );
}

#[test]
fn safeboxes_cannot_call_each_other() {
    let mut s = app();
    let a = library(&mut s, 0x2000_0000);
    let b = library(&mut s, 0x2100_0000);
    let da = isolate_library(&mut s, 0, a.code, a.data, &a.entrypoints).unwrap();
    let db = isolate_library(&mut s, 0, b.code, b.data, &b.entrypoints).unwrap();
    xcall(&mut s, 0, da, 0, &[]).unwrap();
    assert_eq!(xcall(&mut s, 0, db, 0, &[]), Err(DenyReason::LateralCall));
}

#[test]
fn grants_flow_downward_and_revoke_is_idempotent() {
    let mut s = app();
    let mut spec = library(&mut s, 0x2000_0000);
    spec.ring = Ring::Sandbox;
    let sandbox = iv_create_domain(&mut s, 0, &spec).unwrap();
    let page = layout::APP_CODE.page();
    grant(&mut s, 0, page, sandbox).unwrap();
    assert!(s.domains.is_granted(page, sandbox));
    revoke(&mut s, 0, page).unwrap();
    let snapshot = s.clone();
    revoke(&mut s, 0, page).unwrap();
    assert_eq!(s, snapshot);
    assert!(!s.domains.is_granted(page, sandbox));
    // A page the application does not own.
    assert_eq!(
        grant(&mut s, 0, spec.data.0.page(), sandbox),
        Err(DenyReason::NotOwner)
    );

    // From inside the sandbox, granting to the application goes up.
    let own = spec.data.0.page();
    xcall(&mut s, 0, sandbox, 0, &[]).unwrap();
    assert_eq!(
        grant(&mut s, 0, own, DomainId::APP),
        Err(DenyReason::UpwardGrant)
    );
}

#[test]
fn direct_jump_gains_nothing() {
    let mut s = app();
    let spec = library(&mut s, 0x2000_0000);
    iv_create_domain(&mut s, 0, &spec).unwrap();
    let before = s.clone();
    // Keys do not gate instruction fetch, so the jump lands; the code then
    // runs with the caller's key and cannot touch the callee's data.
    assert!(direct_jump(&s, 0, spec.entrypoints[0]).is_ok());
    assert_eq!(s, before);
    assert!(s.check_access(0, spec.data.0, 8, Access::Read).is_err());
    assert!(direct_jump(&s, 0, spec.data.0).is_err());
    assert!(direct_jump(&s, 0, Addr(0x6000_0000)).is_err());
}

#[test]
fn mode_check_examples() {
    let (cpu, r) = mode_check(MiniCpu::new(5, CpuMode::Long64));
    assert_eq!((cpu.rax, r), (5, ModeCheck::Pass));
    let (cpu, r) = mode_check(MiniCpu::new(0, CpuMode::Long64));
    assert_eq!((cpu.rax, r), (0, ModeCheck::Pass));
    let (_, r) = mode_check(MiniCpu::new(5, CpuMode::Compat32));
    assert_eq!(r, ModeCheck::InvalidOpcodeTrap);
    // The shift pair needs a clear top bit; callers only ever have 32 bits set.
    let (cpu, r) = mode_check(MiniCpu::new(u64::MAX, CpuMode::Long64));
    assert_eq!((cpu.rax, r), (u64::MAX >> 1, ModeCheck::Pass));
}
