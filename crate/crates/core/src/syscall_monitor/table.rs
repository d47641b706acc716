//! The syscall classification table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formal_state::DenyReason;

const BUILTIN: &str = include_str!("../../config/syscalls.tbl");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HandlerId {
    File,
    Mem,
    Proc,
    Sig,
    Prctl,
}

impl FromStr for HandlerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "file" => HandlerId::File,
            "mem" => HandlerId::Mem,
            "proc" => HandlerId::Proc,
            "sig" => HandlerId::Sig,
            "prctl" => HandlerId::Prctl,
            other => return Err(format!("unknown handler {other:?}")),
        })
    }
}

impl fmt::Display for HandlerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HandlerId::File => "file",
            HandlerId::Mem => "mem",
            HandlerId::Proc => "proc",
            HandlerId::Sig => "sig",
            HandlerId::Prctl => "prctl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SyscallClass {
    Passthrough,
    Virtualized(HandlerId),
    Denied,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate entry for {name}")]
    Duplicate { line: usize, name: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SyscallTable {
    entries: BTreeMap<String, SyscallClass>,
}

impl SyscallTable {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut words = body.split_whitespace();
            let (Some(name), Some(class), None) = (words.next(), words.next(), words.next()) else {
                return Err(TableError::Syntax {
                    line,
                    msg: format!("expected `<name> <class>`, got {body:?}"),
                });
            };
            let class = match class {
                "passthrough" => SyscallClass::Passthrough,
                "deny" => SyscallClass::Denied,
                other => match other.strip_prefix("virt:") {
                    Some(h) => SyscallClass::Virtualized(
                        h.parse().map_err(|msg| TableError::Syntax { line, msg })?,
                    ),
                    None => {
                        return Err(TableError::Syntax {
                            line,
                            msg: format!("unknown class {other:?}"),
                        })
                    }
                },
            };
            if entries.insert(name.to_string(), class).is_some() {
                return Err(TableError::Duplicate {
                    line,
                    name: name.to_string(),
                });
            }
        }
        Ok(SyscallTable { entries })
    }

    /// The table shipped with the simulator.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("bundled syscall table parses")
    }

    pub fn classify(&self, name: &str) -> Result<SyscallClass, DenyReason> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| DenyReason::UnknownSyscall(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Classification under the bundled table.
pub fn classify(name: &str) -> Result<SyscallClass, DenyReason> {
    thread_local! {
        static TABLE: SyscallTable = SyscallTable::builtin();
    }
    TABLE.with(|t| t.classify(name))
}
