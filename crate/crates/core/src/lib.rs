//! Simulator and analysis toolkit for multiplexed heralded entanglement
//! between two trapped-ion network nodes joined by long fibers.

pub mod analysis;
pub mod calibration;
pub mod config;
pub mod emission;
pub mod numeric;
pub mod optics;
pub mod phase;
pub mod protocol;
pub mod qstate;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Alice,
    Bob,
}

impl Node {
    pub const BOTH: [Node; 2] = [Node::Alice, Node::Bob];

    pub fn index(self) -> usize {
        match self {
            Node::Alice => 0,
            Node::Bob => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Node::Alice => "alice",
            Node::Bob => "bob",
        }
    }
}
