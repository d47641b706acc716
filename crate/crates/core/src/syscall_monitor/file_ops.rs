//! File virtualization: inode tracking, the sensitive-inode check, offsets
//! and descriptor bookkeeping.

use crate::formal_state::{DenyReason, Fd, Inode, MachineState, OpenFile, Rejection};

use super::Ctx;

/// Largest file the simulator will grow.
pub const MAX_FILE_SIZE: u64 = 1 << 24;

const STAT_SIZE: usize = 144;

pub fn handle(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    match ctx.req.name.as_str() {
        "open" => open(s, ctx, 0),
        "openat" => open(s, ctx, 1),
        "read" => read(s, ctx, None),
        "pread64" => read(s, ctx, Some(ctx.int(3))),
        "write" => write(s, ctx, None),
        "pwrite64" => write(s, ctx, Some(ctx.int(3))),
        "readv" => readv(s, ctx, None),
        "preadv" => readv(s, ctx, Some(ctx.int(3))),
        "writev" => writev(s, ctx, None),
        "pwritev" => writev(s, ctx, Some(ctx.int(3))),
        "lseek" => lseek(s, ctx),
        "close" => close(s, ctx.fd(0)).map(|_| 0).map_err(Into::into),
        "dup" => dup(s, ctx.fd(0), None),
        "dup2" => dup(s, ctx.fd(0), Some(ctx.fd(1))),
        "fstat" => {
            let f = file(s, ctx.fd(0))?;
            let ino = f.inode;
            stat_out(s, ctx, ino)
        }
        "stat" => {
            let path = ctx.path(s, 0)?;
            let ino =
                s.fs.resolve(&path)
                    .ok_or_else(|| DenyReason::BadArgs(format!("no such file {path}")))?;
            stat_out(s, ctx, ino)
        }
        "link" | "symlink" => {
            let (from, to) = (ctx.path(s, 0)?, ctx.path(s, 1)?);
            s.fs.link(&from, &to)
                .ok_or_else(|| DenyReason::BadArgs(format!("no such file {from}")))?;
            Ok(0)
        }
        "rename" => {
            let (from, to) = (ctx.path(s, 0)?, ctx.path(s, 1)?);
            s.fs.rename(&from, &to)
                .ok_or_else(|| DenyReason::BadArgs(format!("no such file {from}")))?;
            Ok(0)
        }
        "unlink" => {
            let path = ctx.path(s, 0)?;
            s.fs.unlink(&path)
                .ok_or_else(|| DenyReason::BadArgs(format!("no such file {path}")))?;
            Ok(0)
        }
        other => Err(DenyReason::UnknownSyscall(other.to_string()).into()),
    }
}

fn file(s: &MachineState, fd: Fd) -> Result<&OpenFile, DenyReason> {
    let f = s.open_files.get(&fd).ok_or(DenyReason::BadFd)?;
    if f.sensitive || s.fs.is_sensitive(f.inode) {
        return Err(DenyReason::SensitiveInode);
    }
    Ok(f)
}

fn open(s: &mut MachineState, ctx: &Ctx<'_>, path_at: usize) -> Result<u64, Rejection> {
    let path = ctx.path(s, path_at)?;
    // The check is on the inode, so every name for a sensitive file is caught.
    if s.fs
        .resolve(&path)
        .is_some_and(|ino| s.fs.is_sensitive(ino))
    {
        return Err(DenyReason::SensitiveInode.into());
    }
    let inode = s.fs.resolve_or_create(&path);
    if s.fs.is_sensitive(inode) {
        return Err(DenyReason::SensitiveInode.into());
    }
    let fd = s.lowest_free_fd();
    s.open_files.insert(
        fd,
        OpenFile {
            fd,
            inode,
            path,
            offset: 0,
            sensitive: false,
        },
    );
    Ok(fd as u64)
}

fn check_extent(offset: u64, len: u64) -> Result<(), DenyReason> {
    match offset.checked_add(len) {
        Some(end) if end <= MAX_FILE_SIZE => Ok(()),
        _ => Err(DenyReason::BadArgs("file extent too large".into())),
    }
}

/// Reads up to `len` bytes at the descriptor's offset (or `at`).
fn read_file(
    s: &MachineState,
    fd: Fd,
    at: Option<u64>,
    len: u64,
) -> Result<(Inode, u64, Vec<u8>), DenyReason> {
    let f = file(s, fd)?;
    let off = at.unwrap_or(f.offset);
    let size = s.fs.file(f.inode).map_or(0, |d| d.bytes.len() as u64);
    let n = len.min(size.saturating_sub(off)).min(super::args::MAX_COPY);
    let bytes =
        s.fs.file(f.inode)
            .map(|d| d.read_at(off, n))
            .unwrap_or_default();
    Ok((f.inode, off, bytes))
}

fn advance(s: &mut MachineState, fd: Fd, at: Option<u64>, n: u64) {
    if at.is_none() {
        if let Some(f) = s.open_files.get_mut(&fd) {
            f.offset += n;
        }
    }
}

fn read(s: &mut MachineState, ctx: &Ctx<'_>, at: Option<u64>) -> Result<u64, Rejection> {
    let fd = ctx.fd(0);
    let (_, _, bytes) = read_file(s, fd, at, ctx.int(2))?;
    ctx.output(s, crate::formal_state::Addr(ctx.int(1)), &bytes)?;
    let n = bytes.len() as u64;
    advance(s, fd, at, n);
    Ok(n)
}

fn readv(s: &mut MachineState, ctx: &Ctx<'_>, at: Option<u64>) -> Result<u64, Rejection> {
    let fd = ctx.fd(0);
    let start = match at {
        Some(o) => o,
        None => file(s, fd)?.offset,
    };
    let mut total = 0u64;
    for (base, len) in ctx.iov_entries(s, 1) {
        let (_, _, bytes) = read_file(s, fd, Some(start + total), len)?;
        ctx.output(s, base, &bytes)?;
        total += bytes.len() as u64;
    }
    advance(s, fd, at, total);
    Ok(total)
}

fn write_file(
    s: &mut MachineState,
    fd: Fd,
    at: Option<u64>,
    data: &[u8],
    tainted: bool,
) -> Result<u64, Rejection> {
    let f = file(s, fd)?;
    let off = at.unwrap_or(f.offset);
    check_extent(off, data.len() as u64)?;
    let ino = f.inode;
    s.fs.file_mut(ino).write_at(off, data, tainted);
    let n = data.len() as u64;
    advance(s, fd, at, n);
    Ok(n)
}

fn write(s: &mut MachineState, ctx: &Ctx<'_>, at: Option<u64>) -> Result<u64, Rejection> {
    let (data, tainted) = ctx.input(s, 1);
    write_file(s, ctx.fd(0), at, &data, tainted)
}

fn writev(s: &mut MachineState, ctx: &Ctx<'_>, at: Option<u64>) -> Result<u64, Rejection> {
    let (data, tainted) = ctx.iov_input(s, 1);
    write_file(s, ctx.fd(0), at, &data, tainted)
}

fn lseek(s: &mut MachineState, ctx: &Ctx<'_>) -> Result<u64, Rejection> {
    let fd = ctx.fd(0);
    let f = file(s, fd)?;
    let size = s.fs.file(f.inode).map_or(0, |d| d.bytes.len() as u64);
    let delta = ctx.int(1);
    let new = match ctx.int(2) {
        0 => Some(delta),
        1 => f.offset.checked_add_signed(delta as i64),
        2 => size.checked_add_signed(delta as i64),
        w => return Err(DenyReason::BadArgs(format!("whence {w}")).into()),
    }
    .ok_or_else(|| DenyReason::BadArgs("offset out of range".into()))?;
    check_extent(new, 0)?;
    s.open_files.get_mut(&fd).expect("checked").offset = new;
    Ok(new)
}

/// Drops `fd`; a descriptor still backing mappings is remembered so its
/// number is not reused while the mapping lives.
pub(crate) fn close(s: &mut MachineState, fd: Fd) -> Result<(), DenyReason> {
    let f = s.open_files.remove(&fd).ok_or(DenyReason::BadFd)?;
    if s.file_mappings.iter().any(|mf| mf.fd == fd) {
        s.closed_mapped.insert(fd, f.inode);
    }
    Ok(())
}

fn dup(s: &mut MachineState, old: Fd, new: Option<Fd>) -> Result<u64, Rejection> {
    let f = s.open_files.get(&old).ok_or(DenyReason::BadFd)?.clone();
    let fd = match new {
        Some(n) if n == old => return Ok(n as u64),
        Some(n) if n < 0 => return Err(DenyReason::BadFd.into()),
        Some(n) => {
            // A number still backing mappings would make the records ambiguous.
            if s.closed_mapped.contains_key(&n) || s.file_mappings.iter().any(|mf| mf.fd == n) {
                return Err(DenyReason::BadFd.into());
            }
            if s.open_files.contains_key(&n) {
                close(s, n)?;
            }
            n
        }
        None => s.lowest_free_fd(),
    };
    // The copy carries the original's sensitivity.
    s.open_files.insert(fd, OpenFile { fd, ..f });
    Ok(fd as u64)
}

fn stat_out(s: &mut MachineState, ctx: &Ctx<'_>, ino: Inode) -> Result<u64, Rejection> {
    let mut buf = vec![0u8; STAT_SIZE];
    buf[8..16].copy_from_slice(&ino.to_le_bytes());
    let size = s.fs.file(ino).map_or(0, |d| d.bytes.len() as u64);
    buf[48..56].copy_from_slice(&size.to_le_bytes());
    ctx.output(s, crate::formal_state::Addr(ctx.int(1)), &buf)?;
    Ok(0)
}
