//! The machine state and its memory model.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fs::FileSystem;
use super::types::*;
use crate::config::MonitorConfig;
use crate::domain_mgr::DomainTable;
use crate::nexpoline::TrampolineState;
use crate::signal_virt::SignalState;
use crate::syscall_monitor::LockTable;

/// Fixed layout of the simulated address space.
pub mod layout {
    use super::{Addr, PAGE_SIZE};

    pub const MONITOR_CODE: Addr = Addr(0x7f00_0000);
    pub const MONITOR_CODE_PAGES: u64 = 4;
    pub const MONITOR_DATA: Addr = Addr(0x7f10_0000);
    pub const MONITOR_DATA_PAGES: u64 = 4;
    /// Trusted page holding the secret every attack tries to reach.
    pub const SECRET: Addr = MONITOR_DATA;
    /// Trusted page holding the from-kernel signal flag and the gadget pointer.
    pub const SIGNAL_FLAG: Addr = Addr(MONITOR_DATA.0 + PAGE_SIZE);
    pub const GADGET_POINTER: Addr = Addr(SIGNAL_FLAG.0 + 8);
    pub const MONITOR_STACK_TOP: Addr = Addr(MONITOR_DATA.0 + MONITOR_DATA_PAGES * PAGE_SIZE);
    /// Legal indirect-branch targets inside the monitor (the gate entries).
    pub const GATE_ENTRY: Addr = MONITOR_CODE;
    pub const SIGNAL_ENTRY: Addr = Addr(MONITOR_CODE.0 + 0x100);
    pub const XCALL_ENTRY: Addr = Addr(MONITOR_CODE.0 + 0x200);

    pub const TRAMPOLINE: Addr = Addr(0x7e00_0000);
    pub const PER_THREAD_TRAMPOLINE: Addr = Addr(0x7e10_0000);

    pub const APP_CODE: Addr = Addr(0x0040_0000);
    pub const APP_CODE_PAGES: u64 = 2;
    pub const HEAP: Addr = Addr(0x1000_0000);
    pub const STACKS_TOP: Addr = Addr(0x7ff0_0000);
    pub const STACK_STRIDE: u64 = 16 * PAGE_SIZE;
}

pub const SECRET_BYTES: &[u8] = b"endokernel-secret";

/// Seeded generator carried inside the state so traces replay exactly.
#[derive(Clone, Debug)]
pub struct SimRng(ChaCha8Rng);

impl SimRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        SimRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        use rand::Rng;
        self.0.gen_range(0..n)
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

impl PartialEq for SimRng {
    fn eq(&self, other: &Self) -> bool {
        self.0.get_seed() == other.0.get_seed()
            && self.0.get_stream() == other.0.get_stream()
            && self.0.get_word_pos() == other.0.get_word_pos()
    }
}

impl Eq for SimRng {}

impl Hash for SimRng {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.get_seed().hash(state);
        self.0.get_stream().hash(state);
        self.0.get_word_pos().hash(state);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Exec,
}

/// Why an access by simulated code did not go through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AccessFault {
    Unmapped(Addr),
    PagePermission(Addr),
    KeyDenied(Addr),
}

/// The full process state: memory and permissions, file mappings, open
/// files, filesystem, and per-thread domains, plus monitor bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub pid: Pid,
    pub config: Arc<MonitorConfig>,
    pub pages: BTreeMap<PageId, PageRecord>,
    /// Sparse page contents; absent pages read as zero.
    pub contents: BTreeMap<PageId, Arc<Vec<u8>>>,
    pub file_mappings: BTreeSet<FileMappingRecord>,
    pub open_files: BTreeMap<Fd, OpenFile>,
    /// Descriptors closed while still mapped, with the inode they referred to.
    pub closed_mapped: BTreeMap<Fd, Inode>,
    pub fs: FileSystem,
    pub threads: BTreeMap<Tid, ThreadCtx>,
    pub trampoline: TrampolineState,
    pub signals: SignalState,
    pub locks: LockTable,
    pub domains: DomainTable,
    pub children: Vec<MachineState>,
    pub heap_next: Addr,
    pub next_tid: Tid,
    pub exited: bool,
    pub rng: SimRng,
}

impl MachineState {
    /// Initial state: monitor code and data mapped trusted, a single thread
    /// running inside the monitor, nothing opened or mapped from files.
    pub fn with_config(config: MonitorConfig, seed: u64) -> Self {
        let config = Arc::new(config);
        let pid = 1;
        let mut s = MachineState {
            pid,
            fs: FileSystem::new(pid, &config.sensitive_paths),
            config,
            pages: BTreeMap::new(),
            contents: BTreeMap::new(),
            file_mappings: BTreeSet::new(),
            open_files: BTreeMap::new(),
            closed_mapped: BTreeMap::new(),
            threads: BTreeMap::new(),
            trampoline: TrampolineState::default(),
            signals: SignalState::default(),
            locks: LockTable::default(),
            domains: DomainTable::default(),
            children: Vec::new(),
            heap_next: layout::HEAP,
            next_tid: 1,
            exited: false,
            rng: SimRng::seed_from_u64(seed),
        };
        s.install_monitor();
        s.threads
            .insert(0, ThreadCtx::monitor_thread(0, layout::MONITOR_STACK_TOP));
        crate::nexpoline::install(&mut s, 0);
        s
    }

    fn install_monitor(&mut self) {
        for i in 0..layout::MONITOR_CODE_PAGES {
            self.pages.insert(
                layout::MONITOR_CODE.page() + i,
                PageRecord::anon(DomainId::Trusted, PermSet::RX, PageAttr::Exec),
            );
        }
        for i in 0..layout::MONITOR_DATA_PAGES {
            self.pages.insert(
                layout::MONITOR_DATA.page() + i,
                PageRecord::anon(
                    DomainId::Trusted,
                    PermSet::RW,
                    PageAttr::DomainPrivate(DomainId::Trusted),
                ),
            );
        }
        self.write_bytes(layout::SECRET, SECRET_BYTES);
    }

    /// Maps the application's code and stack and drops thread 0 into the
    /// application domain. Returns `false` if the app is already running.
    pub fn start_app(&mut self) -> bool {
        if self.pages.contains_key(&layout::APP_CODE.page()) {
            return false;
        }
        for i in 0..layout::APP_CODE_PAGES {
            self.pages.insert(
                layout::APP_CODE.page() + i,
                PageRecord::anon(DomainId::APP, PermSet::RX, PageAttr::Exec),
            );
        }
        let sp = self.map_thread_stack(0, DomainId::APP);
        let t = self.threads.get_mut(&0).expect("thread 0 exists");
        *t = ThreadCtx::untrusted_thread(0, DomainId::APP, sp);
        true
    }

    /// Maps a one-page stack for `tid` and returns its top.
    pub fn map_thread_stack(&mut self, tid: Tid, domain: DomainId) -> Addr {
        let top = Addr(layout::STACKS_TOP.0 - tid as u64 * layout::STACK_STRIDE);
        let page = Addr(top.0 - PAGE_SIZE).page();
        self.pages.insert(
            page,
            PageRecord::anon(domain, PermSet::RW, PageAttr::DomainPrivate(domain)),
        );
        top
    }

    /// Reserves `len` bytes (page-rounded) of fresh address space.
    pub fn alloc_range(&mut self, len: u64) -> Addr {
        let len = round_up_pages(len.max(1));
        loop {
            let start = self.heap_next;
            self.heap_next = start.add(len + PAGE_SIZE);
            if pages_spanned(start, len).all(|p| !self.pages.contains_key(&p)) {
                return start;
            }
        }
    }

    pub fn thread(&self, tid: Tid) -> Option<&ThreadCtx> {
        self.threads.get(&tid)
    }

    pub fn thread_mut(&mut self, tid: Tid) -> Option<&mut ThreadCtx> {
        self.threads.get_mut(&tid)
    }

    pub fn page(&self, page: PageId) -> Option<&PageRecord> {
        self.pages.get(&page)
    }

    /// Whether `thread` may read `page`: the key must grant read (or the page
    /// must be granted to the thread's domain) and the page must be readable.
    pub fn readable(&self, thread: &ThreadCtx, page: PageId) -> bool {
        let Some(rec) = self.pages.get(&page) else {
            return false;
        };
        rec.perms.r && self.key_allows(thread, page, rec.domain, Access::Read)
    }

    pub fn writeable(&self, thread: &ThreadCtx, page: PageId) -> bool {
        let Some(rec) = self.pages.get(&page) else {
            return false;
        };
        rec.perms.w && self.key_allows(thread, page, rec.domain, Access::Write)
    }

    fn key_allows(
        &self,
        thread: &ThreadCtx,
        page: PageId,
        owner: DomainId,
        access: Access,
    ) -> bool {
        let key = thread.pkru.access(owner);
        let by_key = match access {
            Access::Read => key.read,
            Access::Write => key.write,
            Access::Exec => true,
        };
        by_key || self.domains.is_granted(page, thread.current_domain)
    }

    /// Checks an access by simulated code running on `tid`. Execution is not
    /// subject to protection keys.
    pub fn check_access(
        &self,
        tid: Tid,
        addr: Addr,
        len: u64,
        access: Access,
    ) -> Result<(), AccessFault> {
        let thread = self.threads.get(&tid).ok_or(AccessFault::Unmapped(addr))?;
        for page in pages_spanned(addr, len.max(1)) {
            let at = Addr::from_page(page).max(addr);
            let rec = self.pages.get(&page).ok_or(AccessFault::Unmapped(at))?;
            let perm_ok = match access {
                Access::Read => rec.perms.r,
                Access::Write => rec.perms.w,
                Access::Exec => rec.perms.x,
            };
            if !perm_ok {
                return Err(AccessFault::PagePermission(at));
            }
            if !self.key_allows(thread, page, rec.domain, access) {
                return Err(AccessFault::KeyDenied(at));
            }
        }
        Ok(())
    }

    /// Raw read with no permission checks.
    pub fn read_bytes(&self, addr: Addr, len: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        let mut cur = addr.0;
        let end = addr.0 + len;
        while cur < end {
            let page = cur / PAGE_SIZE;
            let off = (cur % PAGE_SIZE) as usize;
            let n = ((PAGE_SIZE as usize - off) as u64).min(end - cur) as usize;
            match self.contents.get(&page) {
                Some(bytes) => out.extend_from_slice(&bytes[off..off + n]),
                None => out.extend(std::iter::repeat_n(0u8, n)),
            }
            cur += n as u64;
        }
        out
    }

    /// Raw write with no permission checks.
    pub fn write_bytes(&mut self, addr: Addr, data: &[u8]) {
        let mut cur = addr.0;
        let mut rest = data;
        while !rest.is_empty() {
            let page = cur / PAGE_SIZE;
            let off = (cur % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(rest.len());
            let bytes = self
                .contents
                .entry(page)
                .or_insert_with(|| Arc::new(vec![0u8; PAGE_SIZE as usize]));
            Arc::make_mut(bytes)[off..off + n].copy_from_slice(&rest[..n]);
            rest = &rest[n..];
            cur += n as u64;
        }
    }

    pub fn read_u64(&self, addr: Addr) -> u64 {
        let b = self.read_bytes(addr, 8);
        u64::from_le_bytes(b.try_into().expect("8 bytes"))
    }

    pub fn write_u64(&mut self, addr: Addr, value: u64) {
        self.write_bytes(addr, &value.to_le_bytes());
    }

    pub fn page_bytes(&self, page: PageId) -> Vec<u8> {
        self.read_bytes(Addr::from_page(page), PAGE_SIZE)
    }

    pub fn drop_page(&mut self, page: PageId) {
        self.pages.remove(&page);
        self.contents.remove(&page);
        self.domains.drop_page(page);
    }

    /// Lowest descriptor not in use and not still referenced by a mapping.
    pub fn lowest_free_fd(&self) -> Fd {
        (3..)
            .find(|fd| !self.open_files.contains_key(fd) && !self.closed_mapped.contains_key(fd))
            .expect("descriptor space exhausted")
    }

    pub fn inode_of_fd(&self, fd: Fd) -> Option<Inode> {
        self.open_files
            .get(&fd)
            .map(|f| f.inode)
            .or_else(|| self.closed_mapped.get(&fd).copied())
    }

    /// Finds this process or a descendant by pid.
    pub fn process(&self, pid: Pid) -> Option<&MachineState> {
        if self.pid == pid {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.process(pid))
    }

    pub fn process_mut(&mut self, pid: Pid) -> Option<&mut MachineState> {
        if self.pid == pid {
            return Some(self);
        }
        self.children.iter_mut().find_map(|c| c.process_mut(pid))
    }

    /// Every process in the protection sphere rooted here, parent first.
    pub fn sphere(&self) -> Vec<&MachineState> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.sphere());
        }
        out
    }

    pub fn untrusted_threads(&self) -> impl Iterator<Item = &ThreadCtx> {
        self.threads.values().filter(|t| t.is_untrusted())
    }
}

/// Initial state under the default configuration.
pub fn new_initial() -> MachineState {
    MachineState::with_config(MonitorConfig::default(), 0)
}
