//! Per-thread shadow stack for the CET gate.

use serde::{Deserialize, Serialize};

use crate::formal_state::Addr;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShadowStack {
    frames: Vec<Addr>,
}

impl ShadowStack {
    pub fn push(&mut self, ret: Addr) {
        self.frames.push(ret);
    }

    pub fn pop(&mut self) -> Option<Addr> {
        self.frames.pop()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Overwrites the top entry; used by tests and attack scenarios to
    /// model a corrupted return address.
    pub fn tamper_top(&mut self, with: Addr) -> bool {
        match self.frames.last_mut() {
            Some(top) => {
                *top = with;
                true
            }
            None => false,
        }
    }
}
