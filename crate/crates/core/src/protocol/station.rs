//! Central station service: session handshake, click intake and herald
//! delivery to the two sequencers, over an in-process loopback or TCP.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::optics::ClickEvent;
use crate::Node;

use super::qnetworker::{QNetWorker, SlotWindow};
use super::wire::{read_frame, write_frame, Frame, FrameMirror, RejectReason, Role};
use super::{HeraldMessage, ProtocolFault, SlotId};

pub type SessionId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct StationConfig {
    pub window_ns: u64,
    pub accept_psi_minus: bool,
    pub reorder_budget_ns: u64,
    pub digest: [u8; 32],
}

#[derive(Debug, Clone)]
struct Session {
    role: Option<Role>,
    said_bye: bool,
}

/// Session-level state machine. Inputs are frames tagged with their session;
/// outputs are frames addressed to sessions.
#[derive(Debug)]
pub struct Station {
    cfg: StationConfig,
    worker: QNetWorker,
    sessions: BTreeMap<SessionId, Session>,
    next_id: SessionId,
    closes: BTreeMap<SlotId, (u64, BTreeSet<u8>)>,
    current_block: Option<u32>,
    pub faults: Vec<String>,
}

pub type Outbox = Vec<(SessionId, Frame)>;

pub fn role_of(node: Node) -> Role {
    match node {
        Node::Alice => Role::Server,
        Node::Bob => Role::Client,
    }
}

impl Station {
    pub fn new(cfg: StationConfig) -> Self {
        let worker = QNetWorker::new(cfg.window_ns, cfg.accept_psi_minus, cfg.reorder_budget_ns);
        Self { cfg, worker, sessions: BTreeMap::new(), next_id: 1, closes: BTreeMap::new(), current_block: None, faults: Vec::new() }
    }

    pub fn connect(&mut self) -> SessionId {
        let id = self.next_id;
        self.next_id += 1;
        self.sessions.insert(id, Session { role: None, said_bye: false });
        id
    }

    pub fn established(&self) -> usize {
        self.sessions.values().filter(|s| s.role.is_some()).count()
    }

    fn session_for(&self, role: Role) -> Option<SessionId> {
        self.sessions.iter().find(|(_, s)| s.role == Some(role)).map(|(id, _)| *id)
    }

    fn broadcast(&self, f: Frame) -> Outbox {
        self.sessions.iter().filter(|(_, s)| s.role.is_some()).map(|(id, _)| (*id, f)).collect()
    }

    fn touch_block(&mut self, block: u32) {
        if self.current_block != Some(block) {
            if let Some(old) = self.current_block {
                self.worker.finish_block(old);
            }
            self.current_block = Some(block);
        }
    }

    /// Handles one inbound frame. `Err` means the session must be dropped.
    pub fn on_frame(&mut self, sid: SessionId, frame: Frame) -> Result<Outbox, ProtocolFault> {
        let role = self.sessions.get(&sid).ok_or_else(|| ProtocolFault::Session(format!("unknown session {sid}")))?.role;
        match (role, frame) {
            (None, Frame::Hello { role, digest }) => {
                let reject = if self.established() >= 2 {
                    Some(RejectReason::Full)
                } else if digest != self.cfg.digest {
                    Some(RejectReason::DigestMismatch)
                } else if self.session_for(role).is_some() {
                    Some(RejectReason::DuplicateRole)
                } else {
                    None
                };
                match reject {
                    Some(reason) => {
                        self.faults.push(format!("session {sid}: rejected ({reason:?})"));
                        Ok(vec![(sid, Frame::Reject { reason })])
                    }
                    None => {
                        self.sessions.get_mut(&sid).expect("checked").role = Some(role);
                        Ok(vec![(sid, Frame::Welcome)])
                    }
                }
            }
            (None, _) => Ok(vec![(sid, Frame::Reject { reason: RejectReason::Malformed })]),
            (Some(_), Frame::Click { detector, origin, timestamp_ns }) => {
                self.worker.submit(ClickEvent { detector, origin, timestamp_ns })?;
                Ok(Vec::new())
            }
            (Some(r), Frame::SlotClose { slot, open_ns }) => {
                self.touch_block(slot.block);
                let entry = self.closes.entry(slot).or_insert((open_ns, BTreeSet::new()));
                if entry.0 != open_ns {
                    return Err(ProtocolFault::Session(format!("slot {slot:?} closed with two different window openings")));
                }
                entry.1.insert(r.code());
                if entry.1.len() < 2 {
                    return Ok(Vec::new());
                }
                self.closes.remove(&slot);
                let d = self.worker.close(SlotWindow { slot, open_ns });
                Ok(self.broadcast(Frame::Herald(d.message)))
            }
            (Some(_), Frame::Bye) => {
                self.sessions.get_mut(&sid).expect("checked").said_bye = true;
                Ok(Vec::new())
            }
            (Some(_), other) => Err(ProtocolFault::Wire(format!("unexpected frame from sequencer: {other:?}"))),
        }
    }

    /// Removes a session. A drop without `Bye` during a block aborts the block.
    pub fn disconnect(&mut self, sid: SessionId) -> Outbox {
        let Some(s) = self.sessions.remove(&sid) else { return Vec::new() };
        if s.role.is_none() || s.said_bye {
            return Vec::new();
        }
        match self.current_block.take() {
            Some(block) => {
                self.faults.push(format!("session {sid} ({:?}) dropped during block {block}; block aborted", s.role.unwrap()));
                self.worker.end_block(block);
                self.closes.clear();
                self.broadcast(Frame::BlockAbort { block })
            }
            None => {
                self.faults.push(format!("session {sid} ({:?}) dropped between blocks", s.role.unwrap()));
                Vec::new()
            }
        }
    }
}

/// What the block engine needs from the station.
pub trait StationLink {
    fn click(&mut self, via: Node, click: &ClickEvent) -> Result<(), ProtocolFault>;
    /// Both sequencers close the window; returns the herald both received.
    fn close_slot(&mut self, w: SlotWindow) -> Result<HeraldMessage, ProtocolFault>;
    fn mirror(&self) -> Option<&FrameMirror> {
        None
    }
}

/// In-process transport: frames are handed straight to a [`Station`].
pub struct Loopback {
    pub station: Station,
    sessions: [SessionId; 2],
    pub mirror: Option<FrameMirror>,
}

impl Loopback {
    pub fn new(cfg: StationConfig) -> Result<Self, ProtocolFault> {
        let digest = cfg.digest;
        let mut station = Station::new(cfg);
        let mut sessions = [0; 2];
        for node in Node::BOTH {
            let sid = station.connect();
            let out = station.on_frame(sid, Frame::Hello { role: role_of(node), digest })?;
            if out != vec![(sid, Frame::Welcome)] {
                return Err(ProtocolFault::Session(format!("handshake failed: {out:?}")));
            }
            sessions[node.index()] = sid;
        }
        Ok(Self { station, sessions, mirror: None })
    }

    pub fn with_mirror(mut self) -> Self {
        self.mirror = Some(FrameMirror::default());
        self
    }

    fn send(&mut self, node: Node, f: Frame) -> Result<Outbox, ProtocolFault> {
        if let Some(m) = &mut self.mirror {
            m.record(node.name(), "tx", &f);
        }
        let out = self.station.on_frame(self.sessions[node.index()], f)?;
        if let Some(m) = &mut self.mirror {
            for (sid, f) in &out {
                let who = if *sid == self.sessions[0] { "alice" } else { "bob" };
                m.record(who, "rx", f);
            }
        }
        Ok(out)
    }
}

/// Sequencer that reports a detector's clicks: port-A detectors via Alice.
pub fn reporting_node(click: &ClickEvent) -> Node {
    if click.detector.port() == 0 {
        Node::Alice
    } else {
        Node::Bob
    }
}

impl StationLink for Loopback {
    fn click(&mut self, via: Node, click: &ClickEvent) -> Result<(), ProtocolFault> {
        self.send(via, Frame::from_click(click)).map(|_| ())
    }

    fn close_slot(&mut self, w: SlotWindow) -> Result<HeraldMessage, ProtocolFault> {
        let f = Frame::SlotClose { slot: w.slot, open_ns: w.open_ns };
        self.send(Node::Alice, f)?;
        let out = self.send(Node::Bob, f)?;
        let heralds: Vec<HeraldMessage> = out
            .iter()
            .filter_map(|(_, f)| match f {
                Frame::Herald(h) => Some(*h),
                _ => None,
            })
            .collect();
        match heralds.as_slice() {
            [a, b] if a == b => Ok(*a),
            _ => Err(ProtocolFault::Session(format!("expected one herald per session, got {out:?}"))),
        }
    }

    fn mirror(&self) -> Option<&FrameMirror> {
        self.mirror.as_ref()
    }
}

/// TCP station service on a background thread; one thread per session.
pub struct StationServer {
    pub addr: SocketAddr,
    station: Arc<Mutex<Station>>,
    writers: Arc<Mutex<BTreeMap<SessionId, TcpStream>>>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl StationServer {
    pub fn spawn(cfg: StationConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let station = Arc::new(Mutex::new(Station::new(cfg)));
        let writers: Arc<Mutex<BTreeMap<SessionId, TcpStream>>> = Arc::new(Mutex::new(BTreeMap::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let (st, wr, sp) = (station.clone(), writers.clone(), stop.clone());
        let accept_thread = std::thread::spawn(move || {
            let mut sessions = Vec::new();
            while !sp.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        let sid = st.lock().unwrap().connect();
                        if let Ok(w) = stream.try_clone() {
                            wr.lock().unwrap().insert(sid, w);
                        }
                        let (st2, wr2) = (st.clone(), wr.clone());
                        sessions.push(std::thread::spawn(move || serve_session(sid, stream, st2, wr2)));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                    Err(_) => break,
                }
            }
            for w in wr.lock().unwrap().values() {
                let _ = w.shutdown(std::net::Shutdown::Both);
            }
            for h in sessions {
                let _ = h.join();
            }
        });
        Ok(Self { addr, station, writers, stop, accept_thread: Some(accept_thread) })
    }

    pub fn faults(&self) -> Vec<String> {
        self.station.lock().unwrap().faults.clone()
    }

    pub fn established(&self) -> usize {
        self.station.lock().unwrap().established()
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_thread.take() {
            let _ = h.join();
        }
        self.writers.lock().unwrap().clear();
    }
}

impl Drop for StationServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn deliver(writers: &Mutex<BTreeMap<SessionId, TcpStream>>, out: Outbox) {
    let mut w = writers.lock().unwrap();
    for (sid, f) in out {
        if let Some(s) = w.get_mut(&sid) {
            let _ = write_frame(s, &f);
        }
    }
}

fn serve_session(sid: SessionId, stream: TcpStream, station: Arc<Mutex<Station>>, writers: Arc<Mutex<BTreeMap<SessionId, TcpStream>>>) {
    let mut reader = BufReader::new(stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                station.lock().unwrap().faults.push(format!("session {sid}: {e}"));
                break;
            }
        };
        let result = station.lock().unwrap().on_frame(sid, frame);
        match result {
            Ok(out) => {
                let rejected = out.iter().any(|(s, f)| *s == sid && matches!(f, Frame::Reject { .. }));
                deliver(&writers, out);
                if rejected {
                    break;
                }
            }
            Err(e) => {
                station.lock().unwrap().faults.push(format!("session {sid}: {e}"));
                break;
            }
        }
    }
    let out = station.lock().unwrap().disconnect(sid);
    if let Some(s) = writers.lock().unwrap().remove(&sid) {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    deliver(&writers, out);
}

/// Sequencer side of a TCP session.
pub struct SequencerClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pub role: Role,
}

impl SequencerClient {
    pub fn connect(addr: SocketAddr, role: Role, digest: [u8; 32], timeout: Duration) -> Result<Self, ProtocolFault> {
        let s = |e: std::io::Error| ProtocolFault::Session(e.to_string());
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(s)?;
        stream.set_read_timeout(Some(timeout)).map_err(s)?;
        stream.set_nodelay(true).map_err(s)?;
        let writer = stream.try_clone().map_err(s)?;
        let mut c = Self { reader: BufReader::new(stream), writer, role };
        c.send(&Frame::Hello { role, digest })?;
        match c.recv()? {
            Frame::Welcome => Ok(c),
            Frame::Reject { reason } => Err(ProtocolFault::Session(format!("rejected: {reason:?}"))),
            f => Err(ProtocolFault::Wire(format!("unexpected handshake reply {f:?}"))),
        }
    }

    pub fn send(&mut self, f: &Frame) -> Result<(), ProtocolFault> {
        write_frame(&mut self.writer, f)
    }

    pub fn recv(&mut self) -> Result<Frame, ProtocolFault> {
        read_frame(&mut self.reader)?.ok_or_else(|| ProtocolFault::Session("station closed the session".into()))
    }

    pub fn bye(mut self) {
        let _ = self.send(&Frame::Bye);
    }

    /// Drops the connection without a goodbye.
    pub fn abandon(self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

/// Engine-side TCP transport: one session per node.
pub struct SocketLink {
    clients: Option<[SequencerClient; 2]>,
    pub mirror: Option<FrameMirror>,
}

impl SocketLink {
    pub fn connect(addr: SocketAddr, digest: [u8; 32], timeout: Duration) -> Result<Self, ProtocolFault> {
        let a = SequencerClient::connect(addr, Role::Server, digest, timeout)?;
        let b = SequencerClient::connect(addr, Role::Client, digest, timeout)?;
        Ok(Self { clients: Some([a, b]), mirror: None })
    }

    fn client(&mut self, node: Node) -> &mut SequencerClient {
        &mut self.clients.as_mut().expect("open")[node.index()]
    }

    fn send(&mut self, node: Node, f: Frame) -> Result<(), ProtocolFault> {
        if let Some(m) = &mut self.mirror {
            m.record(node.name(), "tx", &f);
        }
        self.client(node).send(&f)
    }

    pub fn close(mut self) {
        if let Some([a, b]) = self.clients.take() {
            a.bye();
            b.bye();
        }
    }
}

impl Drop for SocketLink {
    fn drop(&mut self) {
        if let Some([a, b]) = self.clients.take() {
            a.bye();
            b.bye();
        }
    }
}

impl StationLink for SocketLink {
    fn click(&mut self, via: Node, click: &ClickEvent) -> Result<(), ProtocolFault> {
        self.send(via, Frame::from_click(click))
    }

    fn close_slot(&mut self, w: SlotWindow) -> Result<HeraldMessage, ProtocolFault> {
        let f = Frame::SlotClose { slot: w.slot, open_ns: w.open_ns };
        self.send(Node::Alice, f)?;
        self.send(Node::Bob, f)?;
        let mut got = Vec::new();
        for node in Node::BOTH {
            let frame = self.client(node).recv()?;
            if let Some(m) = &mut self.mirror {
                m.record(node.name(), "rx", &frame);
            }
            match frame {
                Frame::Herald(h) => got.push(h),
                Frame::BlockAbort { block } => return Err(ProtocolFault::BlockAborted(block)),
                other => return Err(ProtocolFault::Wire(format!("expected herald, got {other:?}"))),
            }
        }
        if got[0] != got[1] {
            return Err(ProtocolFault::Session("sessions received different heralds".into()));
        }
        Ok(got[0])
    }

    fn mirror(&self) -> Option<&FrameMirror> {
        self.mirror.as_ref()
    }
}
