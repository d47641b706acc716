use super::*;
use crate::config::MonitorConfig;
use crate::formal_state::{layout, new_initial, safety_check, PageAttr, PAGE_SIZE, SECRET_BYTES};

fn app() -> MachineState {
    let mut s = new_initial();
    s.start_app();
    s
}

fn req(tid: Tid, name: &str, args: &[RawArg]) -> SyscallRequest {
    SyscallRequest::tagged(tid, name, args.to_vec())
}

fn int(v: u64) -> RawArg {
    RawArg::Int(v)
}

fn path(p: &str) -> RawArg {
    RawArg::Str(p.to_string())
}

/// Runs a syscall on `s` and returns its status; commits only on success.
fn call(s: &mut MachineState, tid: Tid, name: &str, args: &[RawArg]) -> SyscallStatus {
    let (next, r) = dispatch(s, req(tid, name, args));
    assert_eq!(r.pkru_transitions, 2, "{name}");
    *s = next;
    assert!(safety_check(s).is_safe(), "{name}");
    r.status
}

fn ok(s: &mut MachineState, name: &str, args: &[RawArg]) -> u64 {
    match call(s, 0, name, args) {
        SyscallStatus::Ok(v) => v,
        other => panic!("{name}: {other:?}"),
    }
}

fn denied(s: &mut MachineState, name: &str, args: &[RawArg]) -> DenyReason {
    match call(s, 0, name, args) {
        SyscallStatus::Denied(d) => d,
        other => panic!("{name}: expected denial, got {other:?}"),
    }
}

fn anon(s: &mut MachineState, prot: u64, flags: u64) -> Addr {
    Addr(ok(
        s,
        "mmap",
        &[
            int(0),
            int(PAGE_SIZE),
            int(prot),
            int(flags | MAP_ANONYMOUS),
            int(0),
            int(0),
        ],
    ))
}

#[test]
fn file_round_trip() {
    let mut s = app();
    let buf = anon(&mut s, PROT_READ | PROT_WRITE, MAP_PRIVATE);
    s.write_bytes(buf, b"hello");
    let fd = ok(&mut s, "open", &[path("/tmp/a"), int(0)]);
    assert_eq!(fd, 3);
    assert_eq!(ok(&mut s, "write", &[int(fd), int(buf.0), int(5)]), 5);
    assert_eq!(ok(&mut s, "lseek", &[int(fd), int(0), int(0)]), 0);
    let out = buf.add(0x100);
    assert_eq!(ok(&mut s, "read", &[int(fd), int(out.0), int(16)]), 5);
    assert_eq!(s.read_bytes(out, 5), b"hello");
    assert_eq!(ok(&mut s, "dup", &[int(fd)]), 4);
    ok(&mut s, "close", &[int(fd)]);
    assert_eq!(
        denied(&mut s, "read", &[int(fd), int(out.0), int(1)]),
        DenyReason::BadFd
    );
}

#[test]
fn sensitive_inodes_under_every_name() {
    let mut s = app();
    assert_eq!(
        denied(&mut s, "open", &[path("/proc/self/mem"), int(0)]),
        DenyReason::SensitiveInode
    );
    assert_eq!(
        denied(&mut s, "open", &[path("/proc/1/mem"), int(0)]),
        DenyReason::SensitiveInode
    );
    ok(&mut s, "link", &[path("/proc/self/mem"), path("/tmp/m")]);
    assert_eq!(
        denied(&mut s, "open", &[path("/tmp/m"), int(0)]),
        DenyReason::SensitiveInode
    );
}

#[test]
fn pointers_into_the_monitor_are_refused() {
    let mut s = app();
    let fd = ok(&mut s, "open", &[path("/tmp/a"), int(0)]);
    let d = denied(&mut s, "write", &[int(fd), int(layout::SECRET.0), int(17)]);
    assert_eq!(d, DenyReason::PointsIntoTrusted);
    let d = denied(&mut s, "rename", &[int(layout::SECRET.0), path("/tmp/b")]);
    assert_eq!(d, DenyReason::PointsIntoTrusted);
    let d = denied(
        &mut s,
        "read",
        &[int(fd), int(layout::SIGNAL_FLAG.0), int(8)],
    );
    assert_eq!(d, DenyReason::PointsIntoTrusted);
}

#[test]
fn wx_and_the_page_attribute_machine() {
    let mut s = app();
    let d = denied(
        &mut s,
        "mmap",
        &[
            int(0),
            int(PAGE_SIZE),
            int(PROT_WRITE | PROT_EXEC),
            int(MAP_PRIVATE | MAP_ANONYMOUS),
        ],
    );
    assert_eq!(d, DenyReason::WXViolation);

    let retired = anon(&mut s, PROT_READ | PROT_WRITE, MAP_PRIVATE);
    assert_eq!(s.page(retired.page()).unwrap().attr, PageAttr::Retired);
    ok(
        &mut s,
        "mprotect",
        &[int(retired.0), int(PAGE_SIZE), int(PROT_READ | PROT_EXEC)],
    );
    assert_eq!(s.page(retired.page()).unwrap().attr, PageAttr::Exec);
    let d = denied(
        &mut s,
        "mprotect",
        &[int(retired.0), int(PAGE_SIZE), int(PROT_WRITE | PROT_EXEC)],
    );
    assert_eq!(d, DenyReason::WXViolation);

    let shared = anon(&mut s, PROT_READ | PROT_WRITE, MAP_SHARED);
    let d = denied(
        &mut s,
        "mprotect",
        &[int(shared.0), int(PAGE_SIZE), int(PROT_READ | PROT_EXEC)],
    );
    assert_eq!(d, DenyReason::SharedToExec);

    let d = denied(
        &mut s,
        "mprotect",
        &[int(layout::MONITOR_CODE.0), int(PAGE_SIZE), int(PROT_READ)],
    );
    assert_eq!(d, DenyReason::ForeignDomain);
}

#[test]
fn executable_pages_must_scan_clean() {
    let mut s = app();
    let page = anon(&mut s, PROT_READ | PROT_WRITE, MAP_PRIVATE);
    s.write_bytes(page.add(100), &WRPKRU);
    let d = denied(
        &mut s,
        "mprotect",
        &[int(page.0), int(PAGE_SIZE), int(PROT_READ | PROT_EXEC)],
    );
    assert_eq!(d, DenyReason::ScanFailed { offset: 100 });
}

#[test]
fn instruction_split_across_pages_is_caught() {
    let mut s = app();
    let lo = Addr(ok(
        &mut s,
        "mmap",
        &[
            int(0),
            int(2 * PAGE_SIZE),
            int(PROT_READ | PROT_WRITE),
            int(MAP_PRIVATE | MAP_ANONYMOUS),
            int(0),
            int(0),
        ],
    ));
    let hi = lo.add(PAGE_SIZE);
    // One byte on the first page, two on the second.
    s.write_bytes(lo.add(PAGE_SIZE - 1), &WRPKRU);
    ok(
        &mut s,
        "mprotect",
        &[int(lo.0), int(PAGE_SIZE), int(PROT_READ | PROT_EXEC)],
    );
    let d = denied(
        &mut s,
        "mprotect",
        &[int(hi.0), int(PAGE_SIZE), int(PROT_READ | PROT_EXEC)],
    );
    assert!(matches!(d, DenyReason::ScanFailed { .. }), "{d:?}");
}

#[test]
fn mapping_a_file_twice_across_domains_is_an_alias() {
    let mut s = app();
    let fd = ok(&mut s, "open", &[path("/tmp/f"), int(0)]);
    let a = ok(
        &mut s,
        "mmap",
        &[
            int(0),
            int(PAGE_SIZE),
            int(PROT_READ),
            int(MAP_SHARED),
            int(fd),
            int(0),
        ],
    );
    assert_eq!(s.file_mappings.len(), 1);
    // The same domain may map it again.
    ok(
        &mut s,
        "mmap",
        &[
            int(0),
            int(PAGE_SIZE),
            int(PROT_READ),
            int(MAP_SHARED),
            int(fd),
            int(0),
        ],
    );
    ok(&mut s, "munmap", &[int(a), int(PAGE_SIZE)]);
    assert_eq!(s.file_mappings.len(), 1);
}

#[test]
fn phases_release_locks_and_report_contention() {
    let mut s = app();
    let t1 = crate::nexpoline::spawn_thread(&mut s, 0).unwrap();
    let fd = ok(&mut s, "open", &[path("/tmp/a"), int(0)]);
    let mut a = begin(&mut s, req(0, "lseek", &[int(fd), int(0), int(0)])).unwrap();
    screen(&mut s, &mut a).unwrap();
    assert_eq!(s.locks.holder(LockKey::PerFd(fd as Fd)), Some(0));
    let mut b = begin(&mut s, req(t1, "close", &[int(fd)])).unwrap();
    assert_eq!(screen(&mut s, &mut b), Err(0));
    handle(&mut s, &mut a);
    assert!(s.locks.is_empty());
    screen(&mut s, &mut b).unwrap();
    handle(&mut s, &mut b);
    assert!(finish(&mut s, a).status.is_ok());
    assert!(finish(&mut s, b).status.is_ok());
    assert!(s.open_files.is_empty());
}

fn iovec_race(copy_args: bool) -> bool {
    let cfg = MonitorConfig {
        copy_args,
        ..MonitorConfig::default()
    };
    let mut s = MachineState::with_config(cfg, 1);
    s.start_app();
    let buf = anon(&mut s, PROT_READ | PROT_WRITE, MAP_SHARED);
    s.write_bytes(buf.add(0x100), b"harmless");
    s.write_u64(buf, buf.0 + 0x100);
    s.write_u64(buf.add(8), 8);
    let fd = ok(&mut s, "open", &[path("/tmp/out"), int(0)]);
    let mut fl = begin(
        &mut s,
        req(0, "pwritev", &[int(fd), int(buf.0), int(1), int(0)]),
    )
    .unwrap();
    screen(&mut s, &mut fl).unwrap();
    // Another thread swaps the iovec after the screen.
    s.write_u64(buf, layout::SECRET.0);
    s.write_u64(buf.add(8), SECRET_BYTES.len() as u64);
    handle(&mut s, &mut fl);
    finish(&mut s, fl);
    let ino = s.fs.resolve("/tmp/out").unwrap();
    let f = s.fs.file(ino).unwrap();
    f.tainted
        || f.bytes
            .windows(SECRET_BYTES.len())
            .any(|w| w == SECRET_BYTES)
}

#[test]
fn copied_arguments_defeat_the_iovec_swap() {
    assert!(!iovec_race(true));
    assert!(
        iovec_race(false),
        "the uncopied monitor is the negative control"
    );
}

#[test]
fn every_table_entry_costs_two_transitions() {
    let s = app();
    for name in s
        .config
        .syscall_table
        .names()
        .map(str::to_string)
        .collect::<Vec<_>>()
    {
        let (_, r) = dispatch(&s, req(0, &name, &[]));
        assert_eq!(r.pkru_transitions, 2, "{name}");
    }
    let (_, r) = dispatch(&s, req(0, "no_such_call", &[]));
    assert_eq!(
        r.status,
        SyscallStatus::Denied(DenyReason::UnknownSyscall("no_such_call".into()))
    );
    assert_eq!(r.pkru_transitions, 2);
}

#[test]
fn denied_syscalls_leave_state_alone() {
    let s = app();
    for name in ["ptrace", "pkey_mprotect", "seccomp", "modify_ldt"] {
        let (next, r) = dispatch(&s, req(0, name, &[]));
        assert!(
            matches!(
                r.status,
                SyscallStatus::Denied(DenyReason::ForbiddenSyscall(_))
            ),
            "{name}"
        );
        assert_eq!(next, s);
    }
    let mut s = app();
    let d = denied(&mut s, "prctl", &[int(PR_SET_SECCOMP)]);
    assert_eq!(d, DenyReason::ForbiddenSyscall("prctl".into()));
    ok(&mut s, "prctl", &[int(15)]);
}

#[test]
fn only_untrusted_threads_may_call() {
    let s = new_initial();
    let (_, r) = dispatch(&s, req(0, "getpid", &[]));
    assert_eq!(r.status, SyscallStatus::Denied(DenyReason::NotUntrusted));
    assert_eq!(r.pkru_transitions, 0);
}

#[test]
fn fork_and_clone() {
    let mut s = app();
    let child = ok(&mut s, "fork", &[]);
    assert_eq!(child, 1001);
    let c = s.process(child).unwrap();
    assert_eq!(c.threads.len(), 1);
    assert!(c.thread(0).unwrap().is_untrusted());
    assert!(c.fs.is_sensitive(c.fs.resolve("/proc/1001/mem").unwrap()));
    assert!(safety_check(c).is_safe());

    assert_eq!(
        denied(&mut s, "clone", &[int(CLONE_VM)]),
        DenyReason::ForbiddenCloneFlags
    );
    let t = ok(&mut s, "clone", &[int(CLONE_VM | CLONE_THREAD)]);
    assert!(s.thread(t as Tid).unwrap().is_untrusted());
}

#[test]
fn signals_through_syscalls() {
    let mut s = app();
    let d = denied(
        &mut s,
        "kill",
        &[int(0), int(crate::signal_virt::SIGSYS as u64)],
    );
    assert_eq!(d, DenyReason::ReservedSignal);
    ok(
        &mut s,
        "rt_sigaction",
        &[int(10), int(layout::APP_CODE.0), int(0)],
    );
    ok(&mut s, "kill", &[int(0), int(10)]);
    assert_eq!(s.signals.delivered, 1);
    let d = denied(&mut s, "kill", &[int(77), int(10)]);
    assert_eq!(d, DenyReason::NoSuchProcess);
}

#[test]
fn exec_keeps_descriptors_and_the_monitor() {
    let mut s = app();
    ok(&mut s, "open", &[path("/bin/true"), int(0)]);
    ok(&mut s, "execve", &[path("/bin/true")]);
    assert_eq!(s.open_files.len(), 1);
    assert!(s.thread(0).unwrap().is_untrusted());
    assert_eq!(
        s.read_bytes(layout::SECRET, SECRET_BYTES.len() as u64),
        SECRET_BYTES
    );
}

#[test]
fn process_vm_stays_in_process() {
    let mut s = app();
    let buf = anon(&mut s, PROT_READ | PROT_WRITE, MAP_PRIVATE);
    let d = denied(
        &mut s,
        "process_vm_readv",
        &[int(99), int(buf.0), int(layout::SECRET.0), int(8)],
    );
    assert_eq!(d, DenyReason::CrossProcessMemory);
    let d = denied(
        &mut s,
        "process_vm_readv",
        &[int(0), int(buf.0), int(layout::SECRET.0), int(8)],
    );
    assert_eq!(d, DenyReason::PointsIntoTrusted);
}
