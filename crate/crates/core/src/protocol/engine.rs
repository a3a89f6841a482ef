//! Discrete-event execution of one block. Each round's physics is drawn by a
//! [`RoundPlanner`] at the round's preparation; the engine then plays the
//! resulting pulses, photons and clicks through a time-ordered queue.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::emission::{self, ion_photon_pure, ExciteContext, Level, LevelState};
use crate::optics::{classify, single_photon_click, two_photon_coincidence, inject_dark_counts, ArrivingPhoton, ClickEvent, HeraldPattern, Origin};
use crate::qstate::{DensityMatrix, PauliLabel};
use crate::Node;

use crate::analysis::MeasurementRecord;

use super::campaign::{finalize_heralded_state, measure_pair, LinkModel};
use super::qnetworker::SlotWindow;
use super::station::{reporting_node, StationLink};
use super::{Actor, Event, EventKind, EventLog, Payload, ProtocolFault, SlotId};

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStep {
    pub in_s: bool,
    pub photon: bool,
    /// Mean phonon number after this excitation.
    pub nbar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRoundPlan {
    pub steps: Vec<NodeStep>,
    pub end: LevelState,
}

impl NodeRoundPlan {
    pub fn photon_mode(&self) -> Option<u32> {
        self.steps.iter().position(|s| s.photon).map(|i| i as u32 + 1)
    }

    pub fn scatters(&self, start: &LevelState) -> u32 {
        self.end.scatters - start.scatters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotPlan {
    /// Collected photons reaching the splitter.
    pub photons: Vec<(Node, u64)>,
    /// Every click caused by this slot (signal and dark), time-ordered.
    pub clicks: Vec<ClickEvent>,
    /// Emitter state (qutrit ⊗ qutrit) conditioned on the two signal clicks,
    /// present when both photons arrived and their clicks form an accepted pair.
    pub signal_state: Option<DensityMatrix>,
    /// |2_C⟩–|1_C⟩ phase of each emitter, compensated by the merge.
    pub phi_m: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub nodes: [NodeRoundPlan; 2],
    pub slots: Vec<SlotPlan>,
}

pub trait RoundPlanner {
    fn plan(&mut self, link: &LinkModel, block: u32, round: u32, round_start: u64, start: [LevelState; 2], rng: &mut SimRng) -> RoundPlan;
}

/// Samples each round forward with the emission and optics samplers.
#[derive(Debug, Default, Clone)]
pub struct DirectPlanner;

pub fn sample_node_round(link: &LinkModel, node: Node, round_start: u64, start: LevelState, rng: &mut SimRng) -> (NodeRoundPlan, Vec<Option<emission::PhotonRecord>>) {
    let t = &link.timing;
    let mut state = emission::prepare(start, &link.emission);
    let mut steps = Vec::with_capacity(t.modes_per_round as usize);
    let mut photons = Vec::with_capacity(t.modes_per_round as usize);
    for k in 1..=t.modes_per_round {
        let in_s = state.level == Level::SPlus;
        let mut photon = None;
        if in_s {
            let ctx = ExciteContext { node, mode_index: k, time_ns: (round_start + t.excite_offset_ns(k)) as f64 };
            let (s, ph) = emission::excite(state, &link.emission, ctx, rng).expect("ion is in S+1/2");
            state = s;
            photon = ph;
        }
        let nbar = state.phonon_nbar;
        state = emission::intermediate_pump(state, &link.emission, rng);
        steps.push(NodeStep { in_s, photon: photon.is_some(), nbar });
        photons.push(photon);
    }
    (NodeRoundPlan { steps, end: state }, photons)
}

impl RoundPlanner for DirectPlanner {
    fn plan(&mut self, link: &LinkModel, _block: u32, _round: u32, round_start: u64, start: [LevelState; 2], rng: &mut SimRng) -> RoundPlan {
        let t = &link.timing;
        let (plan_a, ph_a) = sample_node_round(link, Node::Alice, round_start, start[0], rng);
        let (plan_b, ph_b) = sample_node_round(link, Node::Bob, round_start, start[1], rng);
        let ow = t.one_way_ns();
        let exp = Exp::new(1.0 / link.emission.envelope_tau_ns).expect("positive lifetime");
        let mut slots = Vec::with_capacity(t.modes_per_round as usize);
        for k in 1..=t.modes_per_round {
            let excite_t = round_start + t.excite_offset_ns(k);
            let open = excite_t + ow;
            let mut arriving: Vec<ArrivingPhoton> = Vec::new();
            let mut phi_m = [0.0; 2];
            for (node, ph) in [(Node::Alice, &ph_a), (Node::Bob, &ph_b)] {
                if let Some(rec) = &ph[k as usize - 1] {
                    let arrival = open as f64 + exp.sample(rng);
                    let phi = crate::phase::phi_M(arrival - ow as f64, excite_t as f64, node, &link.phase);
                    phi_m[node.index()] = phi;
                    let mut rec = rec.clone();
                    rec.arrival_ns = Some(arrival);
                    arriving.push(ArrivingPhoton { record: rec, joint: ion_photon_pure(phi), emitter_dim: 3 });
                }
            }
            let mut clicks = Vec::new();
            let mut signal_state = None;
            match arriving.as_slice() {
                [a, b] => {
                    let c = two_photon_coincidence(a, b, &link.setup, rng);
                    let v = classify(&c.clicks, open, t.window_ns);
                    if v.pattern.accepted(link.accept_psi_minus) {
                        signal_state = c.outcome.emitters.clone();
                    }
                    clicks.extend(c.clicks);
                }
                [a] => {
                    let port = a.record.node.index();
                    clicks.extend(single_photon_click(a, port, &link.setup, rng));
                }
                _ => {}
            }
            clicks.extend(inject_dark_counts(open, t.window_ns, link.dark_rate_hz, rng));
            clicks.sort_by_key(|c| (c.timestamp_ns, c.detector));
            let photons = arriving.iter().map(|p| (p.record.node, p.record.arrival_ns.unwrap().floor() as u64)).collect();
            slots.push(SlotPlan { photons, clicks, signal_state, phi_m });
        }
        RoundPlan { nodes: [plan_a, plan_b], slots }
    }
}

#[derive(Debug, Clone)]
pub struct SuccessRecord {
    pub block: u32,
    pub round: u16,
    pub mode: u8,
    pub pattern: HeraldPattern,
    pub decision_ns: u64,
    pub delta_tau_ns: Option<i64>,
    pub dark_involved: bool,
    /// Memory-qubit state of (Alice, Bob) after transfer and feed-forward.
    pub state: DensityMatrix,
    pub nbar: [f64; 2],
    pub measurement: Option<MeasurementRecord>,
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub success: Option<SuccessRecord>,
    pub start_ns: u64,
    pub end_ns: u64,
    pub excitations: u64,
    pub aborted: Option<ProtocolFault>,
}

#[derive(Debug, Clone)]
enum Ev {
    CoolStart,
    Prep { node: Node, round: u32 },
    Excite { node: Node, round: u32, mode: u32 },
    Pump { node: Node, round: u32, mode: u32 },
    PhotonAtBs { from: Node, round: u32, mode: u32 },
    Click { round: u32, mode: u32, click: ClickEvent },
    Decision { round: u32, mode: u32 },
    HeraldArrival { node: Node, round: u32, mode: u32, pattern: HeraldPattern, acted: bool },
    RamanTransfer { node: Node },
    Measure,
}

struct Queue {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    items: Vec<Option<Ev>>,
    seq: u64,
}

impl Queue {
    fn new() -> Self {
        Self { heap: BinaryHeap::new(), items: Vec::new(), seq: 0 }
    }

    fn push(&mut self, t: u64, ev: Ev) {
        self.heap.push(Reverse((t, self.seq)));
        self.items.push(Some(ev));
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<(u64, u64, Ev)> {
        let Reverse((t, seq)) = self.heap.pop()?;
        let ev = self.items[seq as usize].take().expect("each event pops once");
        Some((t, seq, ev))
    }
}

/// How a block is entered.
#[derive(Debug, Clone, Copy)]
pub struct BlockStart {
    pub block: u32,
    pub start_ns: u64,
    /// First executed round; earlier rounds were skipped by the caller.
    pub first_round: u32,
    /// Ion states at the start of `first_round`.
    pub ions: [LevelState; 2],
}

impl BlockStart {
    pub fn fresh(block: u32, start_ns: u64, link: &LinkModel) -> Self {
        let cooled = LevelState::cooled(link.emission.nbar_floor);
        Self { block, start_ns, first_round: 1, ions: [cooled, cooled] }
    }
}

struct BlockRun<'a> {
    start: BlockStart,
    log: &'a mut EventLog,
    queue: Queue,
    ions: [LevelState; 2],
    plan: Option<(u32, RoundPlan)>,
    halted: [bool; 2],
    halted_at: [u64; 2],
    transferred: [bool; 2],
    success: Option<SuccessRecord>,
    excitations: u64,
    end_ns: u64,
}

impl<'a> BlockRun<'a> {
    fn emit(&mut self, seq: u64, t: u64, kind: EventKind, actor: Actor, round: u32, mode: u32, payload: Payload) {
        self.log.push(Event { seq, time_ns: t, kind, actor, block: self.start.block, round: round as u16, mode: mode as u8, payload });
    }

    fn slot(&self, round: u32, mode: u32) -> Option<&SlotPlan> {
        match &self.plan {
            Some((r, p)) if *r == round => p.slots.get(mode as usize - 1),
            _ => None,
        }
    }

    /// Signal light from a node whose sequence has stopped never happens.
    fn suppressed(&self, node: Node, excite_t: u64) -> bool {
        self.halted[node.index()] && excite_t > self.halted_at[node.index()]
    }
}

/// Runs one block and appends its events to `log`.
pub fn run_block(
    link: &LinkModel,
    start: BlockStart,
    planner: &mut dyn RoundPlanner,
    station: &mut dyn StationLink,
    basis: &PauliLabel,
    rng: &mut SimRng,
    log: &mut EventLog,
) -> BlockResult {
    let t = link.timing.clone();
    let ow = t.one_way_ns();
    let mut run = BlockRun {
        start,
        log,
        queue: Queue::new(),
        ions: start.ions,
        plan: None,
        halted: [false; 2],
        halted_at: [0; 2],
        transferred: [false; 2],
        success: None,
        excitations: 0,
        end_ns: start.start_ns + t.block_ns(),
    };
    run.queue.push(start.start_ns, Ev::CoolStart);
    let mut aborted = None;
    let mut decision_state: Option<(DensityMatrix, [f64; 2])> = None;

    while let Some((now, seq, ev)) = run.queue.pop() {
        match ev {
            Ev::CoolStart => {
                for node in Node::BOTH {
                    run.emit(seq, now, EventKind::CoolStart, node.into(), 0, 0, Payload::None);
                }
                let first = start.first_round;
                let at = t.round_start_ns(start.start_ns, first);
                if first > 1 {
                    let rounds = first as u64 - 1;
                    run.emit(seq, at, EventKind::FastForward, Actor::Station, first, 0, Payload::Skip { blocks: 0, rounds, skipped_ns: rounds * t.round_ns() });
                }
                for node in Node::BOTH {
                    run.queue.push(at, Ev::Prep { node, round: first });
                }
            }
            Ev::Prep { node, round } => {
                if run.halted[node.index()] {
                    continue;
                }
                run.emit(seq, now, EventKind::Prep, node.into(), round, 0, Payload::None);
                if run.plan.as_ref().map(|(r, _)| *r) != Some(round) {
                    let plan = planner.plan(link, start.block, round, now, run.ions, rng);
                    schedule_round_station(&mut run.queue, link, now, round, &plan);
                    run.plan = Some((round, plan));
                }
                for k in 1..=t.modes_per_round {
                    let te = now + t.excite_offset_ns(k);
                    run.queue.push(te, Ev::Excite { node, round, mode: k });
                    run.queue.push(te + t.pump_offset_ns(), Ev::Pump { node, round, mode: k });
                }
            }
            Ev::Excite { node, round, mode } => {
                if run.halted[node.index()] {
                    continue;
                }
                run.excitations += 1;
                let step = run.plan.as_ref().map(|(_, p)| p.nodes[node.index()].steps[mode as usize - 1]).expect("planned");
                run.emit(seq, now, EventKind::Excite, node.into(), round, mode, Payload::Excite { in_s: step.in_s, photon: step.photon });
                if mode == t.modes_per_round {
                    run.ions[node.index()] = run.plan.as_ref().unwrap().1.nodes[node.index()].end;
                }
            }
            Ev::Pump { node, round, mode } => {
                if run.halted[node.index()] {
                    continue;
                }
                run.emit(seq, now, EventKind::Pump, node.into(), round, mode, Payload::None);
            }
            Ev::PhotonAtBs { from, round, mode } => {
                let excite_t = t.round_start_ns(start.start_ns, round) + t.excite_offset_ns(mode);
                if run.suppressed(from, excite_t) {
                    continue;
                }
                run.emit(seq, now, EventKind::PhotonAtBS, Actor::Station, round, mode, Payload::Photon { from, arrival_ns: now });
            }
            Ev::Click { round, mode, click } => {
                let excite_t = t.round_start_ns(start.start_ns, round) + t.excite_offset_ns(mode);
                if click.origin == Origin::Signal && Node::BOTH.iter().any(|n| run.suppressed(*n, excite_t)) {
                    continue;
                }
                run.emit(seq, now, EventKind::Click, Actor::Station, round, mode, Payload::Click { detector: click.detector, origin: click.origin });
                if let Err(e) = station.click(reporting_node(&click), &click) {
                    aborted = Some(e);
                    break;
                }
            }
            Ev::Decision { round, mode } => {
                let excite_t = t.round_start_ns(start.start_ns, round) + t.excite_offset_ns(mode);
                let open = excite_t + ow;
                let slot = SlotId { block: start.block, round: round as u16, mode: mode as u8 };
                let msg = match station.close_slot(SlotWindow { slot, open_ns: open }) {
                    Ok(m) => m,
                    Err(e) => {
                        aborted = Some(e);
                        break;
                    }
                };
                let suppress = Node::BOTH.iter().any(|n| run.suppressed(*n, excite_t));
                let clicks: Vec<ClickEvent> = run
                    .slot(round, mode)
                    .map(|s| s.clicks.iter().filter(|c| !(suppress && c.origin == Origin::Signal)).copied().collect())
                    .unwrap_or_default();
                let verdict = classify(&clicks, open, t.window_ns);
                let pattern = msg.herald_pattern();
                if pattern != verdict.pattern {
                    aborted = Some(ProtocolFault::Session(format!("station herald {pattern:?} disagrees with local pattern {:?}", verdict.pattern)));
                    break;
                }
                let acted = pattern.accepted(link.accept_psi_minus) && run.success.is_none();
                run.emit(seq, now, EventKind::HeraldDecision, Actor::Station, round, mode, Payload::Herald { pattern, delta_tau_ns: verdict.delta_tau_ns, acted });
                if acted {
                    let plan = &run.plan.as_ref().expect("planned").1;
                    let slot_plan = &plan.slots[mode as usize - 1];
                    let dark = verdict.involves_dark();
                    let emitters = if dark { None } else { slot_plan.signal_state.clone() };
                    let nbar = [0, 1].map(|i| plan.nodes[i].steps[mode as usize - 1].nbar);
                    let dtau = verdict.delta_tau_ns.unwrap_or(0) as f64;
                    let mask = verdict.click_pair.map(|p| p[0].detector.bit() | p[1].detector.bit()).unwrap_or(0);
                    let state = finalize_heralded_state(link, emitters.as_ref(), mask, slot_plan.phi_m, now as f64, excite_t as f64, dtau, rng);
                    decision_state = Some((state.clone(), nbar));
                    run.success = Some(SuccessRecord {
                        block: start.block,
                        round: round as u16,
                        mode: mode as u8,
                        pattern,
                        decision_ns: now,
                        delta_tau_ns: verdict.delta_tau_ns,
                        dark_involved: dark || slot_plan.signal_state.is_none(),
                        state,
                        nbar,
                        measurement: None,
                    });
                }
                for node in Node::BOTH {
                    run.queue.push(now + ow, Ev::HeraldArrival { node, round, mode, pattern, acted });
                }
            }
            Ev::HeraldArrival { node, round, mode, pattern, acted } => {
                if run.halted[node.index()] {
                    continue;
                }
                run.emit(seq, now, EventKind::HeraldArrival, node.into(), round, mode, Payload::Herald { pattern, delta_tau_ns: None, acted });
                if acted {
                    run.halted[node.index()] = true;
                    run.halted_at[node.index()] = now;
                    run.queue.push(now, Ev::RamanTransfer { node });
                } else if mode == t.modes_per_round && round < t.rounds_per_block {
                    run.queue.push(t.round_start_ns(start.start_ns, round + 1), Ev::Prep { node, round: round + 1 });
                }
            }
            Ev::RamanTransfer { node } => {
                let s = run.success.as_ref().expect("transfer follows a success");
                let (round, mode) = (s.round as u32, s.mode as u32);
                run.emit(seq, now, EventKind::RamanTransfer, node.into(), round, mode, Payload::None);
                run.transferred[node.index()] = true;
                if run.transferred == [true, true] {
                    run.queue.push(now + t.raman_ns, Ev::Measure);
                }
            }
            Ev::Measure => {
                let (state, nbar) = decision_state.clone().expect("measure follows a success");
                let (a, b) = measure_pair(&state, basis, nbar, link, rng);
                let s = run.success.as_mut().expect("measure follows a success");
                let (round, mode) = (s.round as u32, s.mode as u32);
                s.measurement = Some(MeasurementRecord { basis: basis.clone(), outcome_a: a, outcome_b: b, block: start.block, round: s.round, mode: s.mode });
                for node in Node::BOTH {
                    run.emit(seq, now, EventKind::Measure, node.into(), round, mode, Payload::Measure { basis: basis.to_string(), outcome_a: a, outcome_b: b });
                }
                run.end_ns = now + t.measure_ns;
            }
        }
    }
    if let Some(e) = &aborted {
        let at = run.log.events.last().map(|e| e.time_ns).unwrap_or(start.start_ns);
        run.emit(u64::MAX, at, EventKind::Fault, Actor::Station, 0, 0, Payload::Fault { reason: e.to_string() });
        run.end_ns = at;
        run.success = None;
    }
    BlockResult { success: run.success, start_ns: start.start_ns, end_ns: run.end_ns, excitations: run.excitations, aborted }
}

fn schedule_round_station(q: &mut Queue, link: &LinkModel, round_start: u64, round: u32, plan: &RoundPlan) {
    let t = &link.timing;
    let ow = t.one_way_ns();
    for (i, slot) in plan.slots.iter().enumerate() {
        let mode = i as u32 + 1;
        let open = round_start + t.excite_offset_ns(mode) + ow;
        for &(from, at) in &slot.photons {
            q.push(at, Ev::PhotonAtBs { from, round, mode });
        }
        for c in &slot.clicks {
            q.push(c.timestamp_ns, Ev::Click { round, mode, click: *c });
        }
        q.push(open + t.window_ns, Ev::Decision { round, mode });
    }
}

/// Exponential arrival delay of a photon with the given lifetime.
pub fn sample_delay<R: Rng + ?Sized>(tau_ns: f64, rng: &mut R) -> f64 {
    Exp::new(1.0 / tau_ns).expect("positive lifetime").sample(rng)
}
