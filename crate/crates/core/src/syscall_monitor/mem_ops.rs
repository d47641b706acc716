//! Mapping virtualization: W^X, the page attribute machine (only retired
//! pages are promoted to executable), scanned private copies for executable
//! file mappings, and the alias check behind SP4.

use crate::formal_state::{
    pages_spanned, round_up_pages, Addr, Backing, DenyReason, DomainId, FileMappingRecord,
    MachineState, PageAttr, PageId, PageRecord, PermSet, Rejection, PAGE_SIZE,
};

use super::scan::{code_scan, ScanResult, WRPKRU};
use super::Ctx;

pub const PROT_READ: u64 = 1;
pub const PROT_WRITE: u64 = 2;
pub const PROT_EXEC: u64 = 4;
pub const MAP_SHARED: u64 = 0x1;
pub const MAP_PRIVATE: u64 = 0x2;
pub const MAP_FIXED: u64 = 0x10;
pub const MAP_ANONYMOUS: u64 = 0x20;
pub const MREMAP_MAYMOVE: u64 = 0x1;
pub const MREMAP_FIXED: u64 = 0x2;

/// Largest single mapping the simulator accepts.
pub const MAX_MAP_LEN: u64 = 256 * PAGE_SIZE;

pub fn handle(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    match ctx.req.name.as_str() {
        "mmap" => mmap(s, ctx),
        "mprotect" => mprotect(s, ctx.caller, Addr(ctx.int(0)), ctx.int(1), ctx.int(2)),
        "munmap" => {
            let (addr, len) = range(Addr(ctx.int(0)), ctx.int(1))?;
            owned_or_absent(s, ctx.caller, addr, len)?;
            unmap_range(s, addr, len);
            Ok(0)
        }
        "mremap" => mremap(s, ctx),
        "brk" => Ok(s.heap_next.0),
        other => Err(DenyReason::UnknownSyscall(other.to_string()).into()),
    }
}

pub fn prot_perms(prot: u64) -> PermSet {
    PermSet::new(
        prot & PROT_READ != 0,
        prot & PROT_WRITE != 0,
        prot & PROT_EXEC != 0,
    )
}

fn range(addr: Addr, len: u64) -> Result<(Addr, u64), DenyReason> {
    if !addr.is_page_aligned() {
        return Err(DenyReason::Misaligned);
    }
    if len == 0 || len > MAX_MAP_LEN || addr.0.checked_add(len).is_none() {
        return Err(DenyReason::BadArgs(format!("length {len:#x}")));
    }
    Ok((addr, round_up_pages(len)))
}

/// Every mapped page in the range must belong to `caller`.
fn owned_or_absent(
    s: &MachineState,
    caller: DomainId,
    addr: Addr,
    len: u64,
) -> Result<(), DenyReason> {
    match pages_spanned(addr, len).find_map(|p| s.page(p).filter(|r| r.domain != caller)) {
        Some(_) => Err(DenyReason::ForeignDomain),
        None => Ok(()),
    }
}

/// Every page in the range must be mapped and belong to `caller`.
fn owned(
    s: &MachineState,
    caller: DomainId,
    addr: Addr,
    len: u64,
) -> Result<Vec<PageId>, DenyReason> {
    let pages: Vec<PageId> = pages_spanned(addr, len).collect();
    if pages.iter().any(|p| s.page(*p).is_none()) {
        return Err(DenyReason::NotMapped);
    }
    owned_or_absent(s, caller, addr, len)?;
    Ok(pages)
}

/// Scans `bytes`, the future contents of `[addr, addr + len)`, together with
/// the edges of any executable pages right next to it: an instruction split
/// across the boundary would run just as well as one inside the range.
fn scan(s: &MachineState, addr: Addr, bytes: &[u8]) -> Result<(), DenyReason> {
    let reach = WRPKRU.len() as u64 - 1;
    let len = bytes.len() as u64;
    let exec = |p: PageId| s.page(p).is_some_and(|r| r.perms.x);
    let before = if addr.page() > 0 && exec(addr.page() - 1) {
        s.read_bytes(Addr(addr.0 - reach), reach)
    } else {
        Vec::new()
    };
    let end = Addr(addr.0 + round_up_pages(len));
    let after = if exec(end.page()) {
        s.read_bytes(end, reach)
    } else {
        Vec::new()
    };
    let mut all = before.clone();
    all.extend_from_slice(bytes);
    all.resize(before.len() + round_up_pages(len) as usize, 0);
    all.extend_from_slice(&after);
    match code_scan(&all, s.config.scan_syscall_opcode) {
        ScanResult::Ok => Ok(()),
        ScanResult::FoundForbiddenOpcode(offset) => Err(DenyReason::ScanFailed {
            offset: (offset as u64).saturating_sub(before.len() as u64),
        }),
    }
}

fn remove_mappings_in(s: &mut MachineState, pages: &[PageId]) {
    s.file_mappings
        .retain(|mf| !pages.contains(&mf.addr.page()));
    prune_closed(s);
}

/// Forgets closed descriptors once no mapping refers to them.
fn prune_closed(s: &mut MachineState) {
    let live: Vec<_> = s.file_mappings.iter().map(|mf| mf.fd).collect();
    s.closed_mapped.retain(|fd, _| live.contains(fd));
}

pub(crate) fn unmap_range(s: &mut MachineState, addr: Addr, len: u64) {
    let pages: Vec<PageId> = pages_spanned(addr, len).collect();
    for p in &pages {
        s.drop_page(*p);
    }
    remove_mappings_in(s, &pages);
}

fn mmap(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    let (len, prot, flags) = (ctx.int(1), ctx.int(2), ctx.int(3));
    let perms = prot_perms(prot);
    if perms.is_wx() {
        return Err(DenyReason::WXViolation.into());
    }
    let shared = flags & MAP_SHARED != 0;
    if perms.x {
        if s.domains.exec_locked {
            return Err(DenyReason::ExecLocked.into());
        }
        if shared {
            return Err(DenyReason::SharedToExec.into());
        }
    }
    let (_, len) = range(Addr(0), len)?;
    let addr = if flags & MAP_FIXED != 0 {
        let (addr, _) = range(Addr(ctx.int(0)), len)?;
        owned_or_absent(s, ctx.caller, addr, len)?;
        addr
    } else {
        s.alloc_range(len)
    };

    let file = if flags & MAP_ANONYMOUS == 0 {
        let fd = ctx.fd(4);
        let f = s.open_files.get(&fd).ok_or(DenyReason::BadFd)?;
        if f.sensitive || s.fs.is_sensitive(f.inode) {
            return Err(DenyReason::SensitiveInode.into());
        }
        let off = ctx.int(5);
        if off % PAGE_SIZE != 0 {
            return Err(DenyReason::Misaligned.into());
        }
        Some((fd, f.inode, off))
    } else {
        None
    };
    let content = file.and_then(|(_, ino, off)| s.fs.file(ino).map(|d| d.read_at(off, len)));

    // Replacing our own pages drops them (and their records) first.
    unmap_range(s, addr, len);
    if perms.x {
        scan(s, addr, content.as_deref().unwrap_or(&[]))?;
    }

    // Executable file mappings become scanned private copies; everything
    // else file-backed keeps its backing and gets one record per page.
    let backed = file.filter(|_| !perms.x);
    if let Some((_, ino, off)) = backed {
        let conflict = s.file_mappings.iter().any(|mf| {
            s.inode_of_fd(mf.fd) == Some(ino)
                && mf.off < off + len
                && off < mf.off + mf.len
                && s.page(mf.addr.page()).map(|r| r.domain) != Some(ctx.caller)
        });
        if conflict {
            return Err(DenyReason::AliasViolation.into());
        }
    }
    let attr = if perms.x {
        PageAttr::Exec
    } else if shared {
        PageAttr::Shared
    } else {
        PageAttr::Retired
    };
    for (i, page) in pages_spanned(addr, len).enumerate() {
        let delta = i as u64 * PAGE_SIZE;
        let backing = match backed {
            Some((_, inode, off)) => Backing::FileBacked {
                inode,
                offset: off + delta,
            },
            None => Backing::None,
        };
        s.pages.insert(
            page,
            PageRecord {
                domain: ctx.caller,
                perms,
                attr,
                backing,
            },
        );
        if let Some((fd, _, off)) = backed {
            s.file_mappings.insert(FileMappingRecord {
                fd,
                off: off + delta,
                len: PAGE_SIZE,
                addr: Addr::from_page(page),
            });
        }
    }
    if let Some(bytes) = content {
        s.write_bytes(addr, &bytes);
    }
    Ok(addr.0)
}

/// Changes permissions on pages the caller owns. Promotion to executable is
/// allowed only from retired pages and only once the contents scan clean;
/// file-backed pages are turned into private copies on the way.
pub(crate) fn mprotect(
    s: &mut MachineState,
    caller: DomainId,
    addr: Addr,
    len: u64,
    prot: u64,
) -> Result<u64, Rejection> {
    let (addr, len) = range(addr, len)?;
    let pages = owned(s, caller, addr, len)?;
    let perms = prot_perms(prot);
    if perms.is_wx() {
        return Err(DenyReason::WXViolation.into());
    }
    if perms.x {
        for p in &pages {
            match s.page(*p).expect("owned").attr {
                PageAttr::Exec => {}
                _ if s.domains.exec_locked => return Err(DenyReason::ExecLocked.into()),
                PageAttr::Retired => {}
                PageAttr::Shared => return Err(DenyReason::SharedToExec.into()),
                PageAttr::DomainPrivate(_) => return Err(DenyReason::NotRetired.into()),
            }
        }
        scan(s, addr, &s.read_bytes(addr, len))?;
        for p in &pages {
            let rec = s.pages.get_mut(p).expect("owned");
            rec.attr = PageAttr::Exec;
            rec.backing = Backing::None;
            rec.perms = perms;
        }
        remove_mappings_in(s, &pages);
    } else {
        for p in &pages {
            let rec = s.pages.get_mut(p).expect("owned");
            if rec.attr == PageAttr::Exec {
                rec.attr = PageAttr::Retired;
            }
            rec.perms = perms;
        }
    }
    Ok(0)
}

fn mremap(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    let (old, old_len) = range(Addr(ctx.int(0)), ctx.int(1))?;
    let (_, new_len) = range(Addr(0), ctx.int(2))?;
    let src = owned(s, ctx.caller, old, old_len)?;
    let dest = if ctx.int(3) & MREMAP_FIXED != 0 {
        let (dest, _) = range(Addr(ctx.int(4)), new_len)?;
        if dest.0 < old.0 + old_len && old.0 < dest.0 + new_len {
            return Err(DenyReason::BadArgs("overlapping remap".into()).into());
        }
        owned_or_absent(s, ctx.caller, dest, new_len)?;
        dest
    } else {
        s.alloc_range(new_len)
    };
    let last = *s.page(*src.last().expect("non-empty")).expect("owned");
    let grows_exec = new_len > old_len && last.perms.x;
    if grows_exec && s.domains.exec_locked {
        return Err(DenyReason::ExecLocked.into());
    }
    unmap_range(s, dest, new_len);

    let moved: Vec<FileMappingRecord> = s
        .file_mappings
        .iter()
        .filter(|mf| src.contains(&mf.addr.page()))
        .copied()
        .collect();
    for (i, page) in pages_spanned(dest, new_len).enumerate() {
        let (rec, bytes) = match src.get(i) {
            Some(p) => (*s.page(*p).expect("owned"), s.contents.get(p).cloned()),
            None => (
                PageRecord {
                    backing: Backing::None,
                    ..last
                },
                None,
            ),
        };
        s.pages.insert(page, rec);
        if let Some(b) = bytes {
            s.contents.insert(page, b);
        }
    }
    for p in &src {
        s.drop_page(*p);
    }
    s.file_mappings.retain(|mf| !src.contains(&mf.addr.page()));
    let new_pages = new_len / PAGE_SIZE;
    for mf in moved {
        let idx = mf.addr.page() - old.page();
        if idx < new_pages {
            s.file_mappings.insert(FileMappingRecord {
                addr: Addr::from_page(dest.page() + idx),
                ..mf
            });
        }
    }
    prune_closed(s);
    if s.page(dest.page()).is_some_and(|r| r.perms.x) {
        scan(s, dest, &s.read_bytes(dest, new_len))?;
    }
    Ok(dest.0)
}
