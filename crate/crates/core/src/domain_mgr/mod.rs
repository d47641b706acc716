//! Multi-domain endoprocesses: creation, mediated calls and returns, page
//! grants, whole-library isolation, and the 64-bit mode check at call gates.

mod mode;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use mode::{mode_check, CpuMode, MiniCpu, ModeCheck, MODE_CHECK_CODE};

use crate::formal_state::{
    pages_spanned, Access, Addr, DenyReason, DomainId, Effect, MachineState, PageAttr, PageId,
    PageRecord, PermSet, Pkru, Rejection, ReturnFrame, Tid, MAX_UNTRUSTED_INDEX, PAGE_SIZE,
};

/// Virtual privilege rings, most privileged first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ring {
    Endokernel,
    Safebox,
    Unbox,
    Sandbox,
}

impl Ring {
    fn rank(self) -> u8 {
        match self {
            Ring::Endokernel => 3,
            Ring::Safebox => 2,
            Ring::Unbox => 1,
            Ring::Sandbox => 0,
        }
    }

    pub fn outranks(self, other: Ring) -> bool {
        self.rank() > other.rank()
    }
}

impl std::str::FromStr for Ring {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "safebox" => Ok(Ring::Safebox),
            "unbox" => Ok(Ring::Unbox),
            "sandbox" => Ok(Ring::Sandbox),
            _ => Err(format!("unknown ring {s:?}")),
        }
    }
}

/// Stub code spacing inside a domain's stub page.
pub const STUB_STRIDE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endoprocess {
    pub id: DomainId,
    pub ring: Ring,
    pub code_pages: BTreeSet<PageId>,
    pub data_pages: BTreeSet<PageId>,
    pub entrypoints: BTreeMap<u32, Addr>,
    /// Caller-side stubs, one per entrypoint, in application code.
    pub stubs: BTreeMap<u32, Addr>,
    pub stack_top: Addr,
    pub stack_pages: BTreeSet<PageId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrantRecord {
    pub page: PageId,
    pub owner: DomainId,
    pub grantee: DomainId,
    pub active: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainTable {
    pub domains: BTreeMap<u8, Endoprocess>,
    pub grants: BTreeMap<(PageId, DomainId), GrantRecord>,
    /// Set once any created domain has been called into.
    pub exec_locked: bool,
}

impl DomainTable {
    pub fn is_granted(&self, page: PageId, domain: DomainId) -> bool {
        self.grants.get(&(page, domain)).is_some_and(|g| g.active)
    }

    pub fn drop_page(&mut self, page: PageId) {
        self.grants.retain(|(p, _), _| *p != page);
    }

    pub fn get(&self, d: DomainId) -> Option<&Endoprocess> {
        match d {
            DomainId::Untrusted(i) => self.domains.get(&i),
            DomainId::Trusted => None,
        }
    }

    pub fn ring_of(&self, d: DomainId) -> Option<Ring> {
        match d {
            DomainId::Trusted => Some(Ring::Endokernel),
            DomainId::APP => Some(Ring::Unbox),
            other => self.get(other).map(|e| e.ring),
        }
    }

    fn free_index(&self) -> Option<u8> {
        (1..=MAX_UNTRUSTED_INDEX).find(|i| !self.domains.contains_key(i))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainSpec {
    pub code: (Addr, u64),
    pub data: (Addr, u64),
    pub entrypoints: Vec<Addr>,
    pub ring: Ring,
}

fn range_pages(s: &MachineState, (addr, len): (Addr, u64)) -> Result<Vec<PageId>, DenyReason> {
    if !addr.is_page_aligned() {
        return Err(DenyReason::Misaligned);
    }
    let pages: Vec<PageId> = pages_spanned(addr, len).collect();
    if pages.iter().any(|p| s.page(*p).is_none()) {
        return Err(DenyReason::NotMapped);
    }
    Ok(pages)
}

fn caller_domain(s: &MachineState, tid: Tid) -> Result<DomainId, DenyReason> {
    let t = s.thread(tid).ok_or(DenyReason::NoSuchThread)?;
    if !t.is_untrusted() {
        return Err(DenyReason::NotUntrusted);
    }
    Ok(t.current_domain)
}

/// Creates a domain from pages the caller owns: assigns the lowest unused
/// key, re-keys the pages, gives the domain a stack and a stub per entry.
pub fn iv_create_domain(
    s: &mut MachineState,
    tid: Tid,
    spec: &DomainSpec,
) -> Result<DomainId, DenyReason> {
    let caller = caller_domain(s, tid)?;
    let code = range_pages(s, spec.code)?;
    let data = range_pages(s, spec.data)?;
    for p in code.iter().chain(&data) {
        let rec = s.page(*p).expect("checked mapped");
        if rec.domain != caller {
            return Err(DenyReason::PageOwnedElsewhere);
        }
    }
    if code.iter().any(|p| s.page(*p).is_some_and(|r| !r.perms.x)) {
        return Err(DenyReason::BadArgs("code range is not executable".into()));
    }
    let code_set: BTreeSet<PageId> = code.iter().copied().collect();
    if spec
        .entrypoints
        .iter()
        .any(|e| !code_set.contains(&e.page()))
    {
        return Err(DenyReason::BadEntrypoint);
    }
    let idx = s.domains.free_index().ok_or(DenyReason::DomainsExhausted)?;
    let id = DomainId::Untrusted(idx);

    for p in &code {
        let rec = s.pages.get_mut(p).expect("checked mapped");
        rec.domain = id;
    }
    for p in &data {
        let rec = s.pages.get_mut(p).expect("checked mapped");
        rec.domain = id;
        if !rec.perms.x {
            rec.attr = PageAttr::DomainPrivate(id);
        }
    }
    let stack = s.alloc_range(PAGE_SIZE);
    s.pages.insert(
        stack.page(),
        PageRecord::anon(id, PermSet::RW, PageAttr::DomainPrivate(id)),
    );
    // Stubs live in the caller's code so the caller can reach them directly.
    let stub_page = s.alloc_range(PAGE_SIZE);
    s.pages.insert(
        stub_page.page(),
        PageRecord::anon(caller, PermSet::RX, PageAttr::Exec),
    );
    let entrypoints: BTreeMap<u32, Addr> = spec
        .entrypoints
        .iter()
        .enumerate()
        .map(|(i, a)| (i as u32, *a))
        .collect();
    let stubs = entrypoints
        .keys()
        .map(|&i| (i, stub_page.add(i as u64 * STUB_STRIDE)))
        .collect();
    s.domains.domains.insert(
        idx,
        Endoprocess {
            id,
            ring: spec.ring,
            code_pages: code_set,
            data_pages: data.into_iter().collect(),
            entrypoints,
            stubs,
            stack_top: stack.add(PAGE_SIZE),
            stack_pages: BTreeSet::from([stack.page()]),
        },
    );
    Ok(id)
}

/// Puts a library in its own safebox: every export becomes an entrypoint
/// with a generated stub.
pub fn isolate_library(
    s: &mut MachineState,
    tid: Tid,
    code: (Addr, u64),
    data: (Addr, u64),
    exports: &[Addr],
) -> Result<DomainId, DenyReason> {
    iv_create_domain(
        s,
        tid,
        &DomainSpec {
            code,
            data,
            entrypoints: exports.to_vec(),
            ring: Ring::Safebox,
        },
    )
}

/// Mediated call into `target` at entrypoint `entry`. Signals are held for
/// the duration and the thread moves onto the target's stack.
pub fn xcall(
    s: &mut MachineState,
    tid: Tid,
    target: DomainId,
    entry: u32,
    args: &[u64],
) -> Result<Effect, DenyReason> {
    if args.len() > s.config.xcall_arg_slots {
        return Err(DenyReason::TooManyArgs);
    }
    let caller = caller_domain(s, tid)?;
    if caller == target {
        return Err(DenyReason::SameDomain);
    }
    let (entry_addr, stack_top) = match s.domains.get(target) {
        Some(ep) => (
            *ep.entrypoints
                .get(&entry)
                .ok_or(DenyReason::BadEntrypoint)?,
            ep.stack_top,
        ),
        None => return Err(DenyReason::BadEntrypoint),
    };
    let caller_ring = s.domains.ring_of(caller).ok_or(DenyReason::NoSuchThread)?;
    if caller_ring == Ring::Safebox && s.domains.ring_of(target) == Some(Ring::Safebox) {
        return Err(DenyReason::LateralCall);
    }
    let t = s.thread_mut(tid).expect("caller exists");
    let depth_in_target = t.return_chain.iter().filter(|f| f.callee == target).count() as u64;
    t.return_chain.push(ReturnFrame {
        caller,
        callee: target,
        return_addr: entry_addr,
        caller_stack_ptr: t.stack_ptr,
        caller_stack_domain: t.stack_domain,
        caller_sig_blocked: t.sig_blocked,
    });
    t.current_domain = target;
    t.pkru = Pkru::for_domain(target);
    t.stack_ptr = Addr(stack_top.0 - depth_in_target * 0x100);
    t.stack_domain = target;
    t.sig_blocked = true;
    s.domains.exec_locked = true;
    Ok(Effect {
        value: entry_addr.0,
        pkru_transitions: 2,
        bypass: false,
    })
}

/// Mediated call by entrypoint address instead of index.
pub fn xcall_addr(
    s: &mut MachineState,
    tid: Tid,
    target: DomainId,
    addr: Addr,
    args: &[u64],
) -> Result<Effect, DenyReason> {
    let entry = s
        .domains
        .get(target)
        .and_then(|ep| {
            ep.entrypoints
                .iter()
                .find(|(_, a)| **a == addr)
                .map(|(i, _)| *i)
        })
        .ok_or(DenyReason::BadEntrypoint)?;
    xcall(s, tid, target, entry, args)
}

/// Returns from the innermost mediated call. `claim` is the domain the
/// caller says it is returning to; a mismatch is a forged return.
pub fn xreturn(
    s: &mut MachineState,
    tid: Tid,
    claim: Option<DomainId>,
) -> Result<Effect, DenyReason> {
    let t = s.thread_mut(tid).ok_or(DenyReason::NoSuchThread)?;
    let top = t.return_chain.last().ok_or(DenyReason::ReturnOrder)?;
    if top.callee != t.current_domain || claim.is_some_and(|c| c != top.caller) {
        return Err(DenyReason::ReturnOrder);
    }
    let frame = t.return_chain.pop().expect("checked non-empty");
    t.current_domain = frame.caller;
    t.pkru = Pkru::for_domain(frame.caller);
    t.stack_ptr = frame.caller_stack_ptr;
    t.stack_domain = frame.caller_stack_domain;
    t.sig_blocked = frame.caller_sig_blocked;
    // Signals held during the call go out now.
    crate::signal_virt::try_deliver(s, tid, None);
    Ok(Effect {
        value: 0,
        pkru_transitions: 2,
        bypass: false,
    })
}

/// Shares `page` (owned by the caller's domain) with a less privileged
/// domain.
pub fn grant(
    s: &mut MachineState,
    tid: Tid,
    page: PageId,
    grantee: DomainId,
) -> Result<(), DenyReason> {
    let caller = caller_domain(s, tid)?;
    let rec = s.page(page).ok_or(DenyReason::NotMapped)?;
    if rec.domain != caller {
        return Err(DenyReason::NotOwner);
    }
    let (Some(owner_ring), Some(grantee_ring)) =
        (s.domains.ring_of(caller), s.domains.ring_of(grantee))
    else {
        return Err(DenyReason::BadArgs(format!("unknown domain {grantee}")));
    };
    if !owner_ring.outranks(grantee_ring) {
        return Err(DenyReason::UpwardGrant);
    }
    s.domains.grants.insert(
        (page, grantee),
        GrantRecord {
            page,
            owner: caller,
            grantee,
            active: true,
        },
    );
    Ok(())
}

/// Withdraws every grant on `page`. Revoking an unshared page succeeds and
/// changes nothing.
pub fn revoke(s: &mut MachineState, tid: Tid, page: PageId) -> Result<(), DenyReason> {
    let caller = caller_domain(s, tid)?;
    let rec = s.page(page).ok_or(DenyReason::NotMapped)?;
    if rec.domain != caller {
        return Err(DenyReason::NotOwner);
    }
    for g in s.domains.grants.values_mut().filter(|g| g.page == page) {
        g.active = false;
    }
    Ok(())
}

/// Control transfer to `target` without the monitor: the code runs, but in
/// the caller's domain and with the caller's key, so it gains nothing.
pub fn direct_jump(s: &MachineState, tid: Tid, target: Addr) -> Result<(), Rejection> {
    s.check_access(tid, target, 1, Access::Exec)?;
    Ok(())
}

#[cfg(test)]
mod tests;
