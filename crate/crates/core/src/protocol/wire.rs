//! Length-prefixed little-endian frames between sequencers and the station.
//!
//! Frame: `u32 len` (bytes after the length), `u8 tag`, payload.

use std::io::{Read, Write};

use serde::Serialize;

use crate::optics::{ClickEvent, Detector, Origin};

use super::{HeraldMessage, ProtocolFault, SlotId};

pub const TAG_HELLO: u8 = 1;
pub const TAG_WELCOME: u8 = 2;
pub const TAG_REJECT: u8 = 3;
pub const TAG_CLICK: u8 = 4;
pub const TAG_SLOT_CLOSE: u8 = 5;
pub const TAG_HERALD: u8 = 6;
pub const TAG_BLOCK_ABORT: u8 = 7;
pub const TAG_BYE: u8 = 8;

/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Server,
    Client,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Server => 0,
            Role::Client => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Role> {
        match c {
            0 => Some(Role::Server),
            1 => Some(Role::Client),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    DigestMismatch,
    DuplicateRole,
    Full,
    Malformed,
}

impl RejectReason {
    fn code(self) -> u8 {
        match self {
            RejectReason::DigestMismatch => 1,
            RejectReason::DuplicateRole => 2,
            RejectReason::Full => 3,
            RejectReason::Malformed => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(RejectReason::DigestMismatch),
            2 => Some(RejectReason::DuplicateRole),
            3 => Some(RejectReason::Full),
            4 => Some(RejectReason::Malformed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "frame", rename_all = "snake_case")]
pub enum Frame {
    Hello { role: Role, #[serde(with = "hex_digest")] digest: [u8; 32] },
    Welcome,
    Reject { reason: RejectReason },
    Click { detector: Detector, origin: Origin, timestamp_ns: u64 },
    SlotClose { slot: SlotId, open_ns: u64 },
    Herald(HeraldMessage),
    BlockAbort { block: u32 },
    Bye,
}

mod hex_digest {
    pub fn serialize<S: serde::Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }
}

fn origin_code(o: Origin) -> u8 {
    match o {
        Origin::Signal => 0,
        Origin::Dark => 1,
    }
}

impl Frame {
    pub fn from_click(c: &ClickEvent) -> Frame {
        Frame::Click { detector: c.detector, origin: c.origin, timestamp_ns: c.timestamp_ns }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(40);
        match self {
            Frame::Hello { role, digest } => {
                body.push(TAG_HELLO);
                body.push(role.code());
                body.extend_from_slice(digest);
            }
            Frame::Welcome => body.push(TAG_WELCOME),
            Frame::Reject { reason } => {
                body.push(TAG_REJECT);
                body.push(reason.code());
            }
            Frame::Click { detector, origin, timestamp_ns } => {
                body.push(TAG_CLICK);
                body.push(detector.index() as u8);
                body.push(origin_code(*origin));
                body.extend_from_slice(&timestamp_ns.to_le_bytes());
            }
            Frame::SlotClose { slot, open_ns } => {
                body.push(TAG_SLOT_CLOSE);
                body.extend_from_slice(&slot.block.to_le_bytes());
                body.extend_from_slice(&slot.round.to_le_bytes());
                body.push(slot.mode);
                body.extend_from_slice(&open_ns.to_le_bytes());
            }
            Frame::Herald(h) => {
                body.push(TAG_HERALD);
                body.extend_from_slice(&encode_herald(h));
            }
            Frame::BlockAbort { block } => {
                body.push(TAG_BLOCK_ABORT);
                body.extend_from_slice(&block.to_le_bytes());
            }
            Frame::Bye => body.push(TAG_BYE),
        }
        let mut out = (body.len() as u32).to_le_bytes().to_vec();
        out.extend(body);
        out
    }

    /// Decodes a frame body (without the length prefix).
    pub fn decode(body: &[u8]) -> Result<Frame, ProtocolFault> {
        let err = |m: &str| ProtocolFault::Wire(m.to_string());
        let (&tag, rest) = body.split_first().ok_or_else(|| err("empty frame"))?;
        let need = |n: usize| if rest.len() == n { Ok(()) } else { Err(err(&format!("tag {tag}: expected {n} payload bytes, got {}", rest.len()))) };
        let u16_at = |i: usize| u16::from_le_bytes([rest[i], rest[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(rest[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(rest[i..i + 8].try_into().unwrap());
        match tag {
            TAG_HELLO => {
                need(33)?;
                let role = Role::from_code(rest[0]).ok_or_else(|| err("bad role"))?;
                let mut digest = [0u8; 32];
                digest.copy_from_slice(&rest[1..]);
                Ok(Frame::Hello { role, digest })
            }
            TAG_WELCOME => need(0).map(|_| Frame::Welcome),
            TAG_REJECT => {
                need(1)?;
                Ok(Frame::Reject { reason: RejectReason::from_code(rest[0]).ok_or_else(|| err("bad reject reason"))? })
            }
            TAG_CLICK => {
                need(10)?;
                if rest[0] > 3 {
                    return Err(err("bad detector"));
                }
                let origin = match rest[1] {
                    0 => Origin::Signal,
                    1 => Origin::Dark,
                    _ => return Err(err("bad origin")),
                };
                Ok(Frame::Click { detector: Detector::from_index(rest[0] as usize), origin, timestamp_ns: u64_at(2) })
            }
            TAG_SLOT_CLOSE => {
                need(15)?;
                Ok(Frame::SlotClose { slot: SlotId { block: u32_at(0), round: u16_at(4), mode: rest[6] }, open_ns: u64_at(7) })
            }
            TAG_HERALD => {
                need(16)?;
                Ok(Frame::Herald(decode_herald(rest.try_into().unwrap())))
            }
            TAG_BLOCK_ABORT => {
                need(4)?;
                Ok(Frame::BlockAbort { block: u32_at(0) })
            }
            TAG_BYE => need(0).map(|_| Frame::Bye),
            t => Err(err(&format!("unknown tag {t}"))),
        }
    }
}

/// The 16-byte herald payload.
pub fn encode_herald(h: &HeraldMessage) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0..4].copy_from_slice(&h.block_id.to_le_bytes());
    b[4..6].copy_from_slice(&h.round.to_le_bytes());
    b[6] = h.mode_index;
    b[7] = h.pattern;
    b[8..16].copy_from_slice(&h.station_timestamp_ns.to_le_bytes());
    b
}

pub fn decode_herald(b: &[u8; 16]) -> HeraldMessage {
    HeraldMessage {
        block_id: u32::from_le_bytes(b[0..4].try_into().unwrap()),
        round: u16::from_le_bytes([b[4], b[5]]),
        mode_index: b[6],
        pattern: b[7],
        station_timestamp_ns: u64::from_le_bytes(b[8..16].try_into().unwrap()),
    }
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> Result<(), ProtocolFault> {
    w.write_all(&f.encode()).and_then(|_| w.flush()).map_err(|e| ProtocolFault::Session(e.to_string()))
}

/// Reads one frame. `Ok(None)` on a clean end of stream before the length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolFault> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(ProtocolFault::Session(e.to_string())),
    }
    let n = u32::from_le_bytes(len);
    if n == 0 || n > MAX_FRAME {
        return Err(ProtocolFault::Wire(format!("frame length {n}")));
    }
    let mut body = vec![0u8; n as usize];
    r.read_exact(&mut body).map_err(|e| ProtocolFault::Session(e.to_string()))?;
    Frame::decode(&body).map(Some)
}

/// JSONL mirror of the frames crossing a session.
#[derive(Debug, Default, Clone)]
pub struct FrameMirror {
    pub lines: Vec<String>,
}

impl FrameMirror {
    pub fn record(&mut self, session: &str, direction: &str, f: &Frame) {
        #[derive(Serialize)]
        struct Line<'a> {
            session: &'a str,
            dir: &'a str,
            #[serde(flatten)]
            frame: &'a Frame,
        }
        self.lines.push(serde_json::to_string(&Line { session, dir: direction, frame: f }).expect("frame serializes"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(f: Frame) {
        let bytes = f.encode();
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        assert_eq!(n, bytes.len() - 4);
        assert_eq!(Frame::decode(&bytes[4..]).unwrap(), f);
        let mut cur = std::io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(f));
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }

    #[test]
    fn herald_payload_layout() {
        let h = HeraldMessage { block_id: 0x0403_0201, round: 0x0605, mode_index: 7, pattern: 1, station_timestamp_ns: 0x0f0e_0d0c_0b0a_0908 };
        assert_eq!(encode_herald(&h), [1, 2, 3, 4, 5, 6, 7, 1, 8, 9, 10, 11, 12, 13, 14, 15]);
        let f = Frame::Herald(h).encode();
        assert_eq!(&f[..5], &[17, 0, 0, 0, TAG_HERALD]);
    }

    #[test]
    fn all_frames_round_trip() {
        round_trip(Frame::Hello { role: Role::Client, digest: [7; 32] });
        round_trip(Frame::Welcome);
        round_trip(Frame::Reject { reason: RejectReason::Full });
        round_trip(Frame::Click { detector: Detector::BV, origin: Origin::Dark, timestamp_ns: 123_456_789 });
        round_trip(Frame::SlotClose { slot: SlotId { block: 9, round: 30, mode: 10 }, open_ns: 42 });
        round_trip(Frame::BlockAbort { block: 3 });
        round_trip(Frame::Bye);
    }

    #[test]
    fn corrupt_frames_are_errors() {
        assert!(Frame::decode(&[]).is_err());
        assert!(Frame::decode(&[99]).is_err());
        assert!(Frame::decode(&[TAG_CLICK, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(Frame::decode(&[TAG_WELCOME, 0]).is_err());
        let mut cur = std::io::Cursor::new(vec![0u8, 0, 0, 0]);
        assert!(read_frame(&mut cur).is_err());
    }

    #[test]
    fn mirror_is_json() {
        let mut m = FrameMirror::default();
        m.record("alice", "tx", &Frame::BlockAbort { block: 2 });
        assert_eq!(m.lines[0], r#"{"session":"alice","dir":"tx","frame":"block_abort","block":2}"#);
    }

    proptest! {
        #[test]
        fn herald_bytes_round_trip(block in any::<u32>(), round in any::<u16>(), mode in any::<u8>(), pattern in 0u8..3, ts in any::<u64>()) {
            let h = HeraldMessage { block_id: block, round, mode_index: mode, pattern, station_timestamp_ns: ts };
            prop_assert_eq!(decode_herald(&encode_herald(&h)), h);
        }
    }
}
