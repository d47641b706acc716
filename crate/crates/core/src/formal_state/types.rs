//! Value types shared by every part of the machine model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const PAGE_SIZE: u64 = 4096;

pub type Fd = i32;
pub type Tid = u32;
pub type Pid = u64;
pub type Inode = u64;
pub type Signo = u8;
pub type PageId = u64;

/// Highest untrusted domain index. Index 0 is the application itself (the
/// default protection key); 1..=14 are created on demand.
pub const MAX_UNTRUSTED_INDEX: u8 = 14;

/// Byte address in the simulated address space.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Addr(pub u64);

impl Addr {
    pub const fn page(self) -> PageId {
        self.0 / PAGE_SIZE
    }

    pub const fn from_page(page: PageId) -> Addr {
        Addr(page * PAGE_SIZE)
    }

    pub const fn is_page_aligned(self) -> bool {
        self.0 % PAGE_SIZE == 0
    }

    pub const fn page_offset(self) -> u64 {
        self.0 % PAGE_SIZE
    }

    pub const fn add(self, bytes: u64) -> Addr {
        Addr(self.0 + bytes)
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Rounds a byte length up to a whole number of pages (in bytes).
pub const fn round_up_pages(len: u64) -> u64 {
    len.div_ceil(PAGE_SIZE) * PAGE_SIZE
}

/// Pages touched by the half-open byte range `[addr, addr + len)`.
pub fn pages_spanned(addr: Addr, len: u64) -> impl Iterator<Item = PageId> {
    let first = addr.page();
    let last = if len == 0 {
        first
    } else {
        Addr(addr.0.saturating_add(len - 1)).page() + 1
    };
    first..last.max(first)
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct PermSet {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl PermSet {
    pub const NONE: PermSet = PermSet::new(false, false, false);
    pub const R: PermSet = PermSet::new(true, false, false);
    pub const RW: PermSet = PermSet::new(true, true, false);
    pub const RX: PermSet = PermSet::new(true, false, true);
    pub const RWX: PermSet = PermSet::new(true, true, true);

    pub const fn new(r: bool, w: bool, x: bool) -> Self {
        PermSet { r, w, x }
    }

    pub const fn is_wx(self) -> bool {
        self.w && self.x
    }
}

impl fmt::Display for PermSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |b: bool, ch: char| if b { ch } else { '-' };
        write!(f, "{}{}{}", c(self.r, 'r'), c(self.w, 'w'), c(self.x, 'x'))
    }
}

impl FromStr for PermSet {
    type Err = String;

    /// Accepts `none`, or any combination of `r`, `w`, `x` with optional `-`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(PermSet::NONE);
        }
        let mut p = PermSet::NONE;
        for ch in s.chars() {
            match ch {
                'r' => p.r = true,
                'w' => p.w = true,
                'x' => p.x = true,
                '-' => {}
                other => return Err(format!("bad permission character {other:?} in {s:?}")),
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainId {
    Trusted,
    Untrusted(u8),
}

impl DomainId {
    /// The application's own domain, on the default protection key.
    pub const APP: DomainId = DomainId::Untrusted(0);

    pub const fn is_trusted(self) -> bool {
        matches!(self, DomainId::Trusted)
    }

    /// Every domain that can exist: the monitor plus all untrusted indices.
    pub fn all() -> impl Iterator<Item = DomainId> {
        std::iter::once(DomainId::Trusted).chain((0..=MAX_UNTRUSTED_INDEX).map(DomainId::Untrusted))
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::Trusted => f.write_str("T"),
            DomainId::Untrusted(i) => write!(f, "U{i}"),
        }
    }
}

impl FromStr for DomainId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T" | "trusted" => Ok(DomainId::Trusted),
            "app" | "unbox" => Ok(DomainId::APP),
            _ => {
                let idx = s
                    .strip_prefix('U')
                    .or_else(|| s.strip_prefix('u'))
                    .ok_or_else(|| format!("bad domain {s:?}"))?;
                let idx: u8 = idx.parse().map_err(|_| format!("bad domain {s:?}"))?;
                if idx > MAX_UNTRUSTED_INDEX {
                    return Err(format!("domain index {idx} out of range"));
                }
                Ok(DomainId::Untrusted(idx))
            }
        }
    }
}

/// Mapping attribute tracked by the monitor on top of the page permissions.
///
/// Only `Retired` pages may become `Exec`; `Shared` pages never do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PageAttr {
    Exec,
    Retired,
    Shared,
    DomainPrivate(DomainId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Backing {
    None,
    FileBacked { inode: Inode, offset: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageRecord {
    pub domain: DomainId,
    pub perms: PermSet,
    pub attr: PageAttr,
    pub backing: Backing,
}

impl PageRecord {
    pub const fn anon(domain: DomainId, perms: PermSet, attr: PageAttr) -> Self {
        PageRecord {
            domain,
            perms,
            attr,
            backing: Backing::None,
        }
    }
}

/// One element of the file-mapping set: `[off, off + len)` of `fd` at `addr`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FileMappingRecord {
    pub fd: Fd,
    pub off: u64,
    pub len: u64,
    pub addr: Addr,
}

impl FileMappingRecord {
    /// Half-open interval overlap on file offsets.
    pub fn offset_intersects(&self, other: &FileMappingRecord) -> bool {
        self.off < other.off + other.len && other.off < self.off + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpenFile {
    pub fd: Fd,
    pub inode: Inode,
    pub path: String,
    pub offset: u64,
    pub sensitive: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyAccess {
    pub read: bool,
    pub write: bool,
}

impl KeyAccess {
    pub const RW: KeyAccess = KeyAccess {
        read: true,
        write: true,
    };
}

/// Per-thread protection-key rights register.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pkru {
    pub keys: BTreeMap<DomainId, KeyAccess>,
}

impl Pkru {
    /// The monitor's image: full access to every key.
    pub fn trusted() -> Self {
        Pkru {
            keys: DomainId::all().map(|d| (d, KeyAccess::RW)).collect(),
        }
    }

    /// Image loaded when running as `domain`.
    pub fn for_domain(domain: DomainId) -> Self {
        match domain {
            DomainId::Trusted => Pkru::trusted(),
            d => Pkru {
                keys: BTreeMap::from([(d, KeyAccess::RW)]),
            },
        }
    }

    pub fn access(&self, domain: DomainId) -> KeyAccess {
        self.keys.get(&domain).copied().unwrap_or_default()
    }

    pub fn grants_trusted(&self) -> bool {
        let a = self.access(DomainId::Trusted);
        a.read || a.write
    }
}

/// Saved caller context for a mediated cross-domain call.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReturnFrame {
    pub caller: DomainId,
    pub callee: DomainId,
    pub return_addr: Addr,
    pub caller_stack_ptr: Addr,
    pub caller_stack_domain: DomainId,
    pub caller_sig_blocked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreadCtx {
    pub tid: Tid,
    pub current_domain: DomainId,
    pub pkru: Pkru,
    pub in_monitor: bool,
    pub sig_blocked: bool,
    pub stack_domain: DomainId,
    pub stack_ptr: Addr,
    pub return_chain: Vec<ReturnFrame>,
}

impl ThreadCtx {
    pub fn monitor_thread(tid: Tid, stack_ptr: Addr) -> Self {
        ThreadCtx {
            tid,
            current_domain: DomainId::Trusted,
            pkru: Pkru::trusted(),
            in_monitor: true,
            sig_blocked: false,
            stack_domain: DomainId::Trusted,
            stack_ptr,
            return_chain: Vec::new(),
        }
    }

    pub fn untrusted_thread(tid: Tid, domain: DomainId, stack_ptr: Addr) -> Self {
        ThreadCtx {
            tid,
            current_domain: domain,
            pkru: Pkru::for_domain(domain),
            in_monitor: false,
            sig_blocked: false,
            stack_domain: domain,
            stack_ptr,
            return_chain: Vec::new(),
        }
    }

    pub fn is_untrusted(&self) -> bool {
        !self.current_domain.is_trusted()
    }
}
