//! Path → inode resolution and the sensitive-inode set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::types::{Inode, Pid};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileData {
    pub bytes: Vec<u8>,
    /// Set once any byte copied out of a trusted page reached this file.
    pub tainted: bool,
}

impl FileData {
    pub fn write_at(&mut self, offset: u64, data: &[u8], tainted: bool) {
        let end = offset as usize + data.len();
        if self.bytes.len() < end {
            self.bytes.resize(end, 0);
        }
        self.bytes[offset as usize..end].copy_from_slice(data);
        self.tainted |= tainted;
    }

    pub fn read_at(&self, offset: u64, len: u64) -> Vec<u8> {
        let mut out = vec![0u8; len as usize];
        let start = (offset as usize).min(self.bytes.len());
        let end = (offset as usize + len as usize).min(self.bytes.len());
        out[..end - start].copy_from_slice(&self.bytes[start..end]);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileSystem {
    pub paths: BTreeMap<String, Inode>,
    pub sensitive: BTreeSet<Inode>,
    pub data: BTreeMap<Inode, FileData>,
    next_inode: Inode,
}

impl FileSystem {
    /// Fresh filesystem for process `pid`: both spellings of the process's own
    /// memory file resolve to a single sensitive inode.
    pub fn new(pid: Pid, extra_sensitive: &[String]) -> Self {
        let mut fs = FileSystem {
            paths: BTreeMap::new(),
            sensitive: BTreeSet::new(),
            data: BTreeMap::new(),
            next_inode: 1,
        };
        let mem = fs.create("/proc/self/mem");
        fs.paths.insert(format!("/proc/{pid}/mem"), mem);
        fs.sensitive.insert(mem);
        for path in extra_sensitive {
            let ino = fs.resolve_or_create(path);
            fs.sensitive.insert(ino);
        }
        fs
    }

    fn create(&mut self, path: &str) -> Inode {
        let ino = self.next_inode;
        self.next_inode += 1;
        self.paths.insert(path.to_string(), ino);
        ino
    }

    pub fn resolve(&self, path: &str) -> Option<Inode> {
        self.paths.get(path).copied()
    }

    /// Resolves `path`, creating the file if it does not exist yet. Memory
    /// files of other processes are sensitive from the moment they appear.
    pub fn resolve_or_create(&mut self, path: &str) -> Inode {
        if let Some(ino) = self.resolve(path) {
            return ino;
        }
        let ino = self.create(path);
        if is_proc_mem_path(path) {
            self.sensitive.insert(ino);
        }
        ino
    }

    pub fn is_sensitive(&self, ino: Inode) -> bool {
        self.sensitive.contains(&ino)
    }

    pub fn mark_sensitive(&mut self, path: &str) -> Inode {
        let ino = self.resolve_or_create(path);
        self.sensitive.insert(ino);
        ino
    }

    /// Hard and soft links alias the same inode.
    pub fn link(&mut self, existing: &str, new_path: &str) -> Option<Inode> {
        let ino = self.resolve(existing)?;
        self.paths.insert(new_path.to_string(), ino);
        Some(ino)
    }

    pub fn rename(&mut self, from: &str, to: &str) -> Option<Inode> {
        let ino = self.paths.remove(from)?;
        self.paths.insert(to.to_string(), ino);
        Some(ino)
    }

    pub fn unlink(&mut self, path: &str) -> Option<Inode> {
        self.paths.remove(path)
    }

    pub fn file_mut(&mut self, ino: Inode) -> &mut FileData {
        self.data.entry(ino).or_default()
    }

    pub fn file(&self, ino: Inode) -> Option<&FileData> {
        self.data.get(&ino)
    }
}

/// `/proc/self/mem` or `/proc/<digits>/mem`.
pub fn is_proc_mem_path(path: &str) -> bool {
    match path
        .strip_prefix("/proc/")
        .and_then(|p| p.strip_suffix("/mem"))
    {
        Some("self") => true,
        Some(pid) => !pid.is_empty() && pid.bytes().all(|b| b.is_ascii_digit()),
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proc_mem_spellings_share_one_sensitive_inode() {
        let fs = FileSystem::new(7, &[]);
        let a = fs.resolve("/proc/self/mem").unwrap();
        let b = fs.resolve("/proc/7/mem").unwrap();
        assert_eq!(a, b);
        assert!(fs.is_sensitive(a));
    }

    #[test]
    fn other_process_memory_is_sensitive_on_creation() {
        let mut fs = FileSystem::new(1, &[]);
        let ino = fs.resolve_or_create("/proc/4242/mem");
        assert!(fs.is_sensitive(ino));
        let plain = fs.resolve_or_create("/proc/4242/maps");
        assert!(!fs.is_sensitive(plain));
    }

    #[test]
    fn links_alias_inode() {
        let mut fs = FileSystem::new(1, &[]);
        let a = fs.resolve_or_create("/tmp/a");
        assert_eq!(fs.link("/tmp/a", "/tmp/b"), Some(a));
        assert_eq!(fs.resolve("/tmp/b"), Some(a));
        assert_eq!(fs.link("/tmp/missing", "/tmp/c"), None);
    }

    #[test]
    fn file_data_grows_and_reads_zero_past_end() {
        let mut f = FileData::default();
        f.write_at(4, &[1, 2], false);
        assert_eq!(f.read_at(3, 5), vec![0, 1, 2, 0, 0]);
        assert!(!f.tainted);
        f.write_at(0, &[9], true);
        assert!(f.tainted);
    }
}
