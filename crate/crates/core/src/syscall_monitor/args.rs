//! Typed syscall arguments, pointer screening and the monitor-side copies
//! handlers work from.

use serde::{Deserialize, Serialize};

use crate::formal_state::{
    pages_spanned, Addr, DenyReason, DomainId, MachineState, Tid, PAGE_SIZE,
};
use crate::signal_virt::SigFrame;

/// Longest path the monitor copies.
pub const PATH_MAX: u64 = 4096;
/// Size of one `struct iovec`.
pub const IOVEC_SIZE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arg {
    Int(u64),
    /// A path handed over by value (already in the caller's own memory).
    Str(String),
    /// NUL-terminated string at an address.
    CStr(Addr),
    Ptr {
        addr: Addr,
        len: u64,
    },
    IoVec {
        addr: Addr,
        count: u64,
    },
    Frame(Box<SigFrame>),
}

impl Arg {
    pub fn as_int(&self) -> u64 {
        match self {
            Arg::Int(v) => *v,
            Arg::CStr(a) => a.0,
            Arg::Ptr { addr, .. } | Arg::IoVec { addr, .. } => addr.0,
            Arg::Str(_) | Arg::Frame(_) => 0,
        }
    }
}

/// Untyped argument as written in a scenario or produced by a generator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RawArg {
    Int(u64),
    Str(String),
    Frame(Box<SigFrame>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Path,
    /// Buffer whose length is another argument.
    Buf(usize),
    /// Buffer of fixed size.
    Fixed(u64),
    /// iovec array whose count is another argument.
    IoVec(usize),
    Frame,
}

fn signature(name: &str) -> &'static [Kind] {
    use Kind::*;
    match name {
        "open" => &[Path, Int],
        "openat" => &[Int, Path, Int],
        "read" | "write" => &[Int, Buf(2), Int],
        "pread64" | "pwrite64" => &[Int, Buf(2), Int, Int],
        "readv" | "writev" => &[Int, IoVec(2), Int],
        "preadv" | "pwritev" => &[Int, IoVec(2), Int, Int],
        "fstat" => &[Int, Fixed(144)],
        "stat" => &[Path, Fixed(144)],
        "link" | "symlink" | "rename" => &[Path, Path],
        "unlink" | "execve" => &[Path],
        "process_vm_readv" | "process_vm_writev" => &[Int, Buf(3), Int, Int],
        "rt_sigreturn" => &[Frame],
        "sigaltstack" => &[Buf(1), Int],
        "clock_gettime" => &[Int, Fixed(16)],
        "nanosleep" => &[Fixed(16), Int],
        "uname" => &[Fixed(390)],
        "getrandom" => &[Buf(1), Int, Int],
        _ => &[],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyscallRequest {
    pub tid: Tid,
    pub name: String,
    pub args: Vec<Arg>,
}

impl SyscallRequest {
    /// Tags raw arguments by the syscall's signature: pointer arguments
    /// become `Ptr`/`CStr`/`IoVec`, a zero pointer stays `Int(0)`.
    pub fn tagged(tid: Tid, name: &str, raw: Vec<RawArg>) -> Self {
        let sig = signature(name);
        let ints: Vec<u64> = raw
            .iter()
            .map(|r| match r {
                RawArg::Int(v) => *v,
                _ => 0,
            })
            .collect();
        let int_at = |i: usize| ints.get(i).copied().unwrap_or(0);
        let n = raw.len().max(sig.len());
        let mut raw = raw.into_iter();
        let mut args = Vec::with_capacity(n);
        for i in 0..n {
            let r = raw.next().unwrap_or(RawArg::Int(0));
            let kind = sig.get(i).copied().unwrap_or(Kind::Int);
            let arg = match (kind, r) {
                (_, RawArg::Frame(f)) => Arg::Frame(f),
                (Kind::Path, RawArg::Str(p)) => Arg::Str(p),
                (_, RawArg::Str(p)) => Arg::Str(p),
                (_, RawArg::Int(0)) if kind != Kind::Int => Arg::Int(0),
                (Kind::Int | Kind::Frame, RawArg::Int(v)) => Arg::Int(v),
                (Kind::Path, RawArg::Int(v)) => Arg::CStr(Addr(v)),
                (Kind::Buf(len_at), RawArg::Int(v)) => Arg::Ptr {
                    addr: Addr(v),
                    len: int_at(len_at),
                },
                (Kind::Fixed(len), RawArg::Int(v)) => Arg::Ptr { addr: Addr(v), len },
                (Kind::IoVec(count_at), RawArg::Int(v)) => Arg::IoVec {
                    addr: Addr(v),
                    count: int_at(count_at),
                },
            };
            args.push(arg);
        }
        SyscallRequest {
            tid,
            name: name.to_string(),
            args,
        }
    }

    pub fn int(&self, i: usize) -> u64 {
        self.args.get(i).map(Arg::as_int).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScreenVerdict {
    Ok,
    PointsIntoTrusted,
    PointsIntoForeignDomain,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArgCopy {
    Bytes(Vec<u8>),
    Path(String),
    /// The iovec entries and a copy of every buffer they describe.
    IoVec(Vec<(Addr, u64)>, Vec<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgSnapshot {
    pub copies: Vec<(usize, ArgCopy)>,
    pub verdict: ScreenVerdict,
}

impl ArgSnapshot {
    pub fn get(&self, idx: usize) -> Option<&ArgCopy> {
        self.copies.iter().find(|(i, _)| *i == idx).map(|(_, c)| c)
    }

    /// Bytes copied per argument.
    pub fn copied_lengths(&self) -> Vec<(usize, u64)> {
        self.copies
            .iter()
            .map(|(i, c)| {
                let n = match c {
                    ArgCopy::Bytes(b) => b.len() as u64,
                    ArgCopy::Path(p) => p.len() as u64 + 1,
                    ArgCopy::IoVec(v, bufs) => {
                        v.len() as u64 * IOVEC_SIZE
                            + bufs.iter().map(|b| b.len() as u64).sum::<u64>()
                    }
                };
                (*i, n)
            })
            .collect()
    }
}

fn range_verdict(s: &MachineState, caller: DomainId, addr: Addr, len: u64) -> ScreenVerdict {
    let mut verdict = ScreenVerdict::Ok;
    for page in pages_spanned(addr, len) {
        match s.page(page) {
            Some(r) if r.domain.is_trusted() => return ScreenVerdict::PointsIntoTrusted,
            Some(r) if r.domain != caller && !s.domains.is_granted(page, caller) => {
                verdict = ScreenVerdict::PointsIntoForeignDomain
            }
            _ => {}
        }
    }
    verdict
}

fn worse(a: ScreenVerdict, b: ScreenVerdict) -> ScreenVerdict {
    use ScreenVerdict::*;
    match (a, b) {
        (PointsIntoTrusted, _) | (_, PointsIntoTrusted) => PointsIntoTrusted,
        (PointsIntoForeignDomain, _) | (_, PointsIntoForeignDomain) => PointsIntoForeignDomain,
        _ => Ok,
    }
}

/// Reads a NUL-terminated string, screening each page before reading it.
fn read_cstr(s: &MachineState, caller: DomainId, addr: Addr) -> (String, ScreenVerdict) {
    let mut out = Vec::new();
    let mut cur = addr;
    let end = addr.0.saturating_add(PATH_MAX);
    while cur.0 < end {
        let chunk = (PAGE_SIZE - cur.page_offset()).min(end - cur.0);
        let v = range_verdict(s, caller, cur, chunk);
        if v != ScreenVerdict::Ok {
            return (String::new(), v);
        }
        let bytes = s.read_bytes(cur, chunk);
        if let Some(nul) = bytes.iter().position(|b| *b == 0) {
            out.extend_from_slice(&bytes[..nul]);
            return (
                String::from_utf8_lossy(&out).into_owned(),
                ScreenVerdict::Ok,
            );
        }
        out.extend_from_slice(&bytes);
        cur = cur.add(chunk);
    }
    (
        String::from_utf8_lossy(&out).into_owned(),
        ScreenVerdict::Ok,
    )
}

pub fn parse_iovec(bytes: &[u8]) -> Vec<(Addr, u64)> {
    bytes
        .chunks_exact(IOVEC_SIZE as usize)
        .map(|c| {
            let base = u64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let len = u64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            (Addr(base), len)
        })
        .collect()
}

/// Upper bound on iovec entries and buffer sizes the monitor copies.
pub const MAX_IOV: u64 = 64;
pub const MAX_COPY: u64 = 1 << 20;

/// Screens every pointer argument against the caller's domain and copies
/// what it points at into monitor-owned storage.
pub fn screen_args(s: &MachineState, caller: DomainId, req: &SyscallRequest) -> ArgSnapshot {
    let mut verdict = ScreenVerdict::Ok;
    let mut copies = Vec::new();
    for (i, arg) in req.args.iter().enumerate() {
        match arg {
            Arg::Ptr { addr, len } => {
                let len = (*len).min(MAX_COPY);
                let v = range_verdict(s, caller, *addr, len);
                verdict = worse(verdict, v);
                if v == ScreenVerdict::Ok {
                    copies.push((i, ArgCopy::Bytes(s.read_bytes(*addr, len))));
                }
            }
            Arg::CStr(addr) => {
                let (path, v) = read_cstr(s, caller, *addr);
                verdict = worse(verdict, v);
                if v == ScreenVerdict::Ok {
                    copies.push((i, ArgCopy::Path(path)));
                }
            }
            Arg::IoVec { addr, count } => {
                let count = (*count).min(MAX_IOV);
                let v = range_verdict(s, caller, *addr, count * IOVEC_SIZE);
                verdict = worse(verdict, v);
                if v != ScreenVerdict::Ok {
                    continue;
                }
                let entries = parse_iovec(&s.read_bytes(*addr, count * IOVEC_SIZE));
                let mut bufs = Vec::with_capacity(entries.len());
                for (base, len) in &entries {
                    let len = (*len).min(MAX_COPY);
                    let v = range_verdict(s, caller, *base, len);
                    verdict = worse(verdict, v);
                    bufs.push(if v == ScreenVerdict::Ok {
                        s.read_bytes(*base, len)
                    } else {
                        Vec::new()
                    });
                }
                copies.push((i, ArgCopy::IoVec(entries, bufs)));
            }
            Arg::Int(_) | Arg::Str(_) | Arg::Frame(_) => {}
        }
    }
    ArgSnapshot { copies, verdict }
}

impl ScreenVerdict {
    pub fn into_result(self) -> Result<(), DenyReason> {
        match self {
            ScreenVerdict::Ok => Ok(()),
            ScreenVerdict::PointsIntoTrusted => Err(DenyReason::PointsIntoTrusted),
            ScreenVerdict::PointsIntoForeignDomain => Err(DenyReason::PointsIntoForeignDomain),
        }
    }
}

/// Whether any byte of the range lies in a trusted page.
pub fn touches_trusted(s: &MachineState, addr: Addr, len: u64) -> bool {
    pages_spanned(addr, len).any(|p| s.page(p).is_some_and(|r| r.domain.is_trusted()))
}
