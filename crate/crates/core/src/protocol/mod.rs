//! Multiplexed entangling protocol: timing, event log, the station-side
//! pattern matcher, the wire format, the block engine and campaigns.

pub mod campaign;
pub mod engine;
pub mod fastforward;
pub mod qnetworker;
pub mod station;
pub mod wire;

#[cfg(test)]
mod tests;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{Detector, HeraldPattern, Origin};
use crate::Node;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub cooling_us: u64,
    pub rounds_per_block: u32,
    pub modes_per_round: u32,
    pub excitation_spacing_ns: u64,
    pub pump_ns: u64,
    pub window_ns: u64,
    /// Fiber length of each leg, node to station.
    pub fiber_m: f64,
    pub fiber_speed_m_per_ns: f64,
    /// State preparation at the start of each round (assumed).
    pub prep_ns: u64,
    /// Analysis rotations plus state detection (assumed).
    pub measure_ns: u64,
    /// Three-pulse encoding transfer after a herald.
    pub raman_ns: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            cooling_us: 200,
            rounds_per_block: 30,
            modes_per_round: 10,
            excitation_spacing_ns: 500,
            pump_ns: 350,
            window_ns: 45,
            fiber_m: 600.0,
            fiber_speed_m_per_ns: 0.2,
            prep_ns: 1000,
            measure_ns: 1000,
            raman_ns: 20_000,
        }
    }
}

impl TimingConfig {
    pub fn one_way_ns(&self) -> u64 {
        (self.fiber_m / self.fiber_speed_m_per_ns).round() as u64
    }

    pub fn herald_roundtrip_ns(&self) -> u64 {
        2 * self.one_way_ns()
    }

    pub fn cooling_ns(&self) -> u64 {
        self.cooling_us * 1000
    }

    pub fn attempts_per_block(&self) -> u64 {
        self.rounds_per_block as u64 * self.modes_per_round as u64
    }

    /// Offset of excitation `mode` (1-based) from the round start.
    pub fn excite_offset_ns(&self, mode: u32) -> u64 {
        self.prep_ns + (mode as u64 - 1) * self.excitation_spacing_ns
    }

    /// Offset of the pump after an excitation; the pump ends at the next excitation.
    pub fn pump_offset_ns(&self) -> u64 {
        self.excitation_spacing_ns - self.pump_ns
    }

    /// A round lasts until all its excitations are done and every herald is back.
    pub fn round_ns(&self) -> u64 {
        let n = self.modes_per_round as u64;
        let sp = self.excitation_spacing_ns;
        self.prep_ns + (n * sp).max((n - 1) * sp + self.herald_roundtrip_ns() + self.window_ns)
    }

    pub fn round_start_ns(&self, block_start: u64, round: u32) -> u64 {
        block_start + self.cooling_ns() + (round as u64 - 1) * self.round_ns()
    }

    pub fn block_ns(&self) -> u64 {
        self.cooling_ns() + self.rounds_per_block as u64 * self.round_ns()
    }

    pub fn validate(&self) -> Result<(), ConfigFault> {
        let bad = |field: &'static str, msg: String| Err(ConfigFault { field, message: msg });
        if self.modes_per_round == 0 || self.modes_per_round > u8::MAX as u32 {
            return bad("modes_per_round", format!("{} is outside 1..=255", self.modes_per_round));
        }
        if self.rounds_per_block == 0 || self.rounds_per_block > u16::MAX as u32 {
            return bad("rounds_per_block", format!("{} is outside 1..=65535", self.rounds_per_block));
        }
        if self.window_ns == 0 || self.window_ns > self.excitation_spacing_ns {
            return bad("window_ns", format!("window {} ns must be positive and fit in the {} ns spacing", self.window_ns, self.excitation_spacing_ns));
        }
        if self.pump_ns >= self.excitation_spacing_ns {
            return bad("pump_ns", format!("pump {} ns must be shorter than the spacing", self.pump_ns));
        }
        if !(self.fiber_m >= 0.0) || !self.fiber_m.is_finite() {
            return bad("fiber_m", format!("{} must be finite and non-negative", self.fiber_m));
        }
        if !(self.fiber_speed_m_per_ns > 0.0) {
            return bad("fiber_speed_m_per_ns", "must be positive".into());
        }
        Ok(())
    }
}

/// Physical link settings outside the timing and the optics model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Dark count rate of each detector, s⁻¹.
    pub dark_rate_hz: f64,
    pub accept_psi_minus: bool,
    /// Tolerated backwards step of a detector's timestamps before a fault.
    pub reorder_budget_ns: u64,
    pub engine: EngineMode,
    pub channel_mode: ChannelChoice,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            dark_rate_hz: 0.0,
            accept_psi_minus: false,
            reorder_budget_ns: 0,
            engine: EngineMode::FastForward,
            channel_mode: ChannelChoice::Sampled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Every round is sampled and executed.
    Direct,
    /// Failed rounds are skipped with their exact probability; only the
    /// successful round is executed.
    FastForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelChoice {
    Analytic,
    Sampled,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigFault {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolFault {
    #[error("detector {detector} timestamp {ts} ns is {behind} ns behind its predecessor")]
    OutOfOrder { detector: Detector, ts: u64, behind: u64 },
    #[error("session: {0}")]
    Session(String),
    #[error("wire: {0}")]
    Wire(String),
    #[error("block {0} aborted")]
    BlockAborted(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotId {
    pub block: u32,
    pub round: u16,
    pub mode: u8,
}

/// Herald sent from the station to both nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeraldMessage {
    pub block_id: u32,
    pub round: u16,
    pub mode_index: u8,
    pub pattern: u8,
    pub station_timestamp_ns: u64,
}

impl HeraldMessage {
    pub fn slot(&self) -> SlotId {
        SlotId { block: self.block_id, round: self.round, mode: self.mode_index }
    }

    pub fn herald_pattern(&self) -> HeraldPattern {
        HeraldPattern::from_code(self.pattern).unwrap_or(HeraldPattern::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    CoolStart,
    Prep,
    Excite,
    Pump,
    PhotonAtBS,
    Click,
    HeraldDecision,
    HeraldArrival,
    RamanTransfer,
    Measure,
    FastForward,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Alice,
    Bob,
    Station,
}

impl From<Node> for Actor {
    fn from(n: Node) -> Self {
        match n {
            Node::Alice => Actor::Alice,
            Node::Bob => Actor::Bob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    None,
    Excite { in_s: bool, photon: bool },
    Photon { from: Node, arrival_ns: u64 },
    Click { detector: Detector, origin: Origin },
    Herald { pattern: HeraldPattern, delta_tau_ns: Option<i64>, acted: bool },
    Skip { blocks: u64, rounds: u64, skipped_ns: u64 },
    Measure { basis: String, outcome_a: i8, outcome_b: i8 },
    Fault { reason: String },
}

impl Payload {
    fn is_none(&self) -> bool {
        matches!(self, Payload::None)
    }
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub time_ns: u64,
    pub kind: EventKind,
    pub actor: Actor,
    pub block: u32,
    pub round: u16,
    pub mode: u8,
    #[serde(default = "none_payload", skip_serializing_if = "Payload::is_none")]
    pub payload: Payload,
}

fn none_payload() -> Payload {
    Payload::None
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn extend(&mut self, other: EventLog) {
        self.events.extend(other.events);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}
