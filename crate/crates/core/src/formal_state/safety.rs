//! The four safety predicates over a machine state.

use serde::{Deserialize, Serialize};

use super::machine::MachineState;
use super::types::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SafetyProperty {
    /// Untrusted execution cannot read trusted memory.
    Sp1,
    /// Untrusted execution cannot write trusted memory.
    Sp2,
    /// No page is both writable and executable.
    Sp3,
    /// No file region is mapped into pages of two different domains.
    Sp4,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub property: SafetyProperty,
    pub pid: Pid,
    pub page: Option<PageId>,
    pub tid: Option<Tid>,
    pub mappings: Option<(FileMappingRecord, FileMappingRecord)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub violations: Vec<Violation>,
}

impl SafetyVerdict {
    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn properties(&self) -> Vec<SafetyProperty> {
        self.violations.iter().map(|v| v.property).collect()
    }
}

/// Evaluates SP1–SP4 over `s` and every process in its protection sphere.
pub fn safety_check(s: &MachineState) -> SafetyVerdict {
    let mut verdict = SafetyVerdict::default();
    for proc in s.sphere() {
        check_process(proc, &mut verdict.violations);
    }
    verdict
}

fn check_process(s: &MachineState, out: &mut Vec<Violation>) {
    let trusted_pages: Vec<PageId> = s
        .pages
        .iter()
        .filter(|(_, r)| r.domain.is_trusted())
        .map(|(p, _)| *p)
        .collect();

    // SP1 and SP2 quantify over every thread currently running untrusted.
    for t in s.untrusted_threads() {
        for &page in &trusted_pages {
            if s.readable(t, page) {
                out.push(Violation {
                    property: SafetyProperty::Sp1,
                    pid: s.pid,
                    page: Some(page),
                    tid: Some(t.tid),
                    mappings: None,
                });
            }
            if s.writeable(t, page) {
                out.push(Violation {
                    property: SafetyProperty::Sp2,
                    pid: s.pid,
                    page: Some(page),
                    tid: Some(t.tid),
                    mappings: None,
                });
            }
        }
    }

    for (page, rec) in &s.pages {
        if rec.perms.is_wx() {
            out.push(Violation {
                property: SafetyProperty::Sp3,
                pid: s.pid,
                page: Some(*page),
                tid: None,
                mappings: None,
            });
        }
    }

    let mfs: Vec<&FileMappingRecord> = s.file_mappings.iter().collect();
    for (i, a) in mfs.iter().enumerate() {
        for b in &mfs[i + 1..] {
            if sp4_conflict(s, a, b) {
                out.push(Violation {
                    property: SafetyProperty::Sp4,
                    pid: s.pid,
                    page: None,
                    tid: None,
                    mappings: Some((**a, **b)),
                });
            }
        }
    }
}

/// Two file mappings alias when they share a descriptor, their offset ranges
/// intersect, and the pages they sit in belong to different domains.
pub fn sp4_conflict(s: &MachineState, a: &FileMappingRecord, b: &FileMappingRecord) -> bool {
    if a.fd != b.fd || !a.offset_intersects(b) {
        return false;
    }
    let dom = |mf: &FileMappingRecord| s.page(mf.addr.page()).map(|r| r.domain);
    dom(a) != dom(b)
}
