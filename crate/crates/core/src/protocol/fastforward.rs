//! Exact skipping of failed rounds. Every slot's detection outcome is
//! enumerated once per photon configuration (none, Alice only, Bob only,
//! both); the per-round success probability follows from the per-node photon
//! mode distribution. A campaign then draws the number of failed blocks and
//! the successful round directly and executes only that round, with a plan
//! conditioned on the drawn outcome, through the ordinary block engine.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::emission::{ion_photon_pure, window_fraction, EmissionParams, Level, LevelState};
use crate::optics::{bsm_outcomes, dark_click_probability, mode_detector, pattern_of_set, single_photon_distribution, BsmOutcome, ClickEvent, Detector, Origin};
use crate::phase::phi_M;
use crate::Node;

use super::campaign::LinkModel;
use super::engine::{DirectPlanner, NodeRoundPlan, NodeStep, RoundPlan, RoundPlanner, SimRng, SlotPlan};

/// What a single excitation does to an ion in S₊½.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Decay to D3/2 with a collected photon.
    Emit,
    /// Decay to D3/2, photon not collected.
    Lost,
    /// Back to S₊½ directly.
    Back,
    /// To S₋½, pumped back to S₊½.
    PumpStay,
    /// To S₋½, the pump scatters it into D3/2.
    PumpLeave,
}

impl StepKind {
    fn stays(self) -> bool {
        matches!(self, StepKind::Back | StepKind::PumpStay)
    }

    fn scatters(self) -> u32 {
        match self {
            StepKind::PumpStay | StepKind::PumpLeave => 2,
            _ => 1,
        }
    }
}

fn step_weights(p: &EmissionParams) -> [(StepKind, f64); 5] {
    let b = p.branch_d;
    let beta = p.branch_s_back_initial;
    let eta = p.collection_efficiency;
    let ps = p.pump_survival;
    [
        (StepKind::Emit, b * eta),
        (StepKind::Lost, b * (1.0 - eta)),
        (StepKind::Back, (1.0 - b) * beta),
        (StepKind::PumpStay, (1.0 - b) * (1.0 - beta) * ps),
        (StepKind::PumpLeave, (1.0 - b) * (1.0 - beta) * (1.0 - ps)),
    ]
}

fn pick<R: Rng + ?Sized, T: Copy>(items: &[(T, f64)], rng: &mut R) -> T {
    let total: f64 = items.iter().map(|x| x.1).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = items[0].0;
    for &(x, w) in items {
        if w > 0.0 {
            last = x;
            if u < w {
                return x;
            }
            u -= w;
        }
    }
    last
}

/// Builds a node's round from its step kinds, tracking heating as the
/// sampled engine does (mean phonon number recorded after each excitation).
pub fn node_round_from_steps(start: LevelState, params: &EmissionParams, kinds: &[StepKind], modes: u32) -> NodeRoundPlan {
    let recoil = params.recoil_per_scatter;
    let mut st = crate::emission::prepare(start, params);
    let mut steps = Vec::with_capacity(modes as usize);
    let mut kinds = kinds.iter();
    for _ in 0..modes {
        if st.level == Level::SPlus {
            let kind = *kinds.next().expect("a step kind per excitation in S");
            st.phonon_nbar += recoil;
            st.scatters += 1;
            let nbar = st.phonon_nbar;
            if kind.scatters() == 2 {
                st.phonon_nbar += recoil;
                st.scatters += 1;
            }
            if !kind.stays() {
                st.level = Level::D1;
            }
            steps.push(NodeStep { in_s: true, photon: kind == StepKind::Emit, nbar });
        } else {
            steps.push(NodeStep { in_s: false, photon: false, nbar: st.phonon_nbar });
        }
    }
    NodeRoundPlan { steps, end: st }
}

/// Unconditioned step kinds for one round.
pub fn sample_free_steps<R: Rng + ?Sized>(params: &EmissionParams, modes: u32, rng: &mut R) -> Vec<StepKind> {
    let w = step_weights(params);
    let mut out = Vec::new();
    for _ in 0..modes {
        let k = pick(&w, rng);
        out.push(k);
        if !k.stays() {
            break;
        }
    }
    out
}

/// Step kinds given that the node emits a collected photon at `mode` (1-based).
pub fn sample_steps_emitting_at<R: Rng + ?Sized>(params: &EmissionParams, mode: u32, rng: &mut R) -> Vec<StepKind> {
    let w = step_weights(params);
    let stay = [w[2], w[3]];
    let mut out: Vec<StepKind> = (1..mode).map(|_| pick(&stay, rng)).collect();
    out.push(StepKind::Emit);
    out
}

/// Step kinds given that the node emits no collected photon in the round.
pub fn sample_steps_without_photon<R: Rng + ?Sized>(params: &EmissionParams, modes: u32, rng: &mut R) -> Vec<StepKind> {
    let w = step_weights(params);
    let leave = w[1].1 + w[4].1;
    let stay: f64 = w[2].1 + w[3].1;
    // h[k]: probability of no collected photon from excitation k on, given S₊½
    let n = modes as usize;
    let mut h = vec![1.0; n + 2];
    for k in (1..=n).rev() {
        h[k] = leave + stay * h[k + 1];
    }
    let mut out = Vec::new();
    for k in 1..=n {
        let choices = [(StepKind::Lost, w[1].1), (StepKind::PumpLeave, w[4].1), (StepKind::Back, w[2].1 * h[k + 1]), (StepKind::PumpStay, w[3].1 * h[k + 1])];
        let kind = pick(&choices, rng);
        out.push(kind);
        if !kind.stays() {
            break;
        }
    }
    out
}

/// Photon-mode distribution of one node: entry k−1 is P(collected photon at
/// excitation k); the remainder is P(no photon this round).
pub fn photon_mode_distribution(params: &EmissionParams, modes: u32) -> (Vec<f64>, f64) {
    let s = params.survival_per_cycle();
    let e: Vec<f64> = (1..=modes).map(|k| s.powi(k as i32 - 1) * params.branch_d * params.collection_efficiency).collect();
    let none = (1.0 - e.iter().sum::<f64>()).max(0.0);
    (e, none)
}

/// Signal part of one slot outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Signal {
    Nothing,
    /// Lone photon from `node` routed to output `mode`.
    Single { node: Node, mode: usize, inside: bool },
    /// Two-photon outcome `idx`; `inside` per click in detector order.
    Pair { idx: usize, inside: [bool; 2] },
}

#[derive(Debug, Clone, Copy)]
struct Row {
    prob: f64,
    signal: Signal,
    /// Detectors clicking from dark counts only.
    darks: u8,
    /// Detectors with an in-window signal click.
    signal_mask: u8,
    accepted: bool,
    clean: bool,
}

#[derive(Debug, Clone, Default)]
struct SlotTable {
    rows: Vec<Row>,
    accepted: f64,
    clean: f64,
}

/// Photon configuration index: bit 0 Alice, bit 1 Bob.
fn config(a: bool, b: bool) -> usize {
    a as usize | (b as usize) << 1
}

/// Per-slot click tables and per-round success weights for one link.
#[derive(Debug, Clone)]
pub struct FastForward {
    tables: [SlotTable; 4],
    pair_outcomes: Vec<BsmOutcome>,
    emit: Vec<f64>,
    no_photon: f64,
    /// Success weight per (photon mode of Alice, photon mode of Bob); index 0 = no photon.
    combo_weights: Vec<f64>,
    p_round: f64,
    p_round_clean: f64,
    modes: u32,
    wf: f64,
    pd: f64,
}

/// Outcome of skipping ahead to the next success.
#[derive(Debug, Clone)]
pub struct SuccessDraw {
    pub failed_blocks: u64,
    /// Successful round (1-based).
    pub round: u32,
    pub ions: [LevelState; 2],
    photon_modes: [u32; 2],
    herald_mode: u32,
}

impl FastForward {
    pub fn new(link: &LinkModel) -> Self {
        let t = &link.timing;
        let em = &link.emission;
        let wf = window_fraction(t.window_ns as f64, em.envelope_tau_ns);
        let pd = dark_click_probability(t.window_ns as f64, link.dark_rate_hz);
        let ip = ion_photon_pure(0.0);
        let single = [single_photon_distribution(&ip, 3, 0, &link.setup), single_photon_distribution(&ip, 3, 1, &link.setup)];
        let pair_outcomes = bsm_outcomes(&ip, 3, &ip, 3, &link.setup);
        let minus = link.accept_psi_minus;

        let mut tables: [SlotTable; 4] = Default::default();
        for c in 0..4 {
            let mut signals: Vec<(Signal, f64, u8)> = Vec::new();
            match c {
                0 => signals.push((Signal::Nothing, 1.0, 0)),
                1 | 2 => {
                    let node = if c == 1 { Node::Alice } else { Node::Bob };
                    for (m, &p) in single[node.index()].iter().enumerate() {
                        match mode_detector(m) {
                            Some(d) => {
                                signals.push((Signal::Single { node, mode: m, inside: true }, p * wf, d.bit()));
                                signals.push((Signal::Single { node, mode: m, inside: false }, p * (1.0 - wf), 0));
                            }
                            None => signals.push((Signal::Single { node, mode: m, inside: false }, p, 0)),
                        }
                    }
                }
                _ => {
                    for (idx, o) in pair_outcomes.iter().enumerate() {
                        if o.prob <= 0.0 {
                            continue;
                        }
                        let dets: Vec<Detector> = [o.modes.0, o.modes.1].iter().filter_map(|&m| mode_detector(m)).collect();
                        let bunched = o.modes.0 == o.modes.1 && !dets.is_empty();
                        let n_clicks = if bunched { 1 } else { dets.len() };
                        let w_in = if bunched { 1.0 - (1.0 - wf).powi(2) } else { wf };
                        for bits in 0..(1u8 << n_clicks) {
                            let inside = [bits & 1 != 0, bits & 2 != 0];
                            let mut p = o.prob;
                            let mut mask = 0;
                            for i in 0..n_clicks {
                                if inside[i] {
                                    p *= w_in;
                                    mask |= dets[i].bit();
                                } else {
                                    p *= 1.0 - w_in;
                                }
                            }
                            signals.push((Signal::Pair { idx, inside }, p, mask));
                        }
                    }
                }
            }
            let mut table = SlotTable::default();
            for (signal, ps, smask) in signals {
                if ps <= 0.0 {
                    continue;
                }
                let free: Vec<u8> = Detector::ALL.iter().map(|d| d.bit()).filter(|b| smask & b == 0).collect();
                for sub in 0..(1u32 << free.len()) {
                    let mut darks = 0u8;
                    let mut p = ps;
                    for (i, b) in free.iter().enumerate() {
                        if sub & (1 << i) != 0 {
                            darks |= b;
                            p *= pd;
                        } else {
                            p *= 1.0 - pd;
                        }
                    }
                    if p <= 0.0 {
                        continue;
                    }
                    let accepted = pattern_of_set(smask | darks).accepted(minus);
                    let clean = accepted && darks == 0 && matches!(signal, Signal::Pair { .. }) && smask.count_ones() == 2;
                    table.rows.push(Row { prob: p, signal, darks, signal_mask: smask, accepted, clean });
                }
            }
            table.accepted = table.rows.iter().filter(|r| r.accepted).map(|r| r.prob).sum();
            // a dark count on a signal detector can still precede the signal
            table.clean = table.rows.iter().filter(|r| r.clean).map(|r| r.prob).sum::<f64>() * (1.0 - pd).powi(2);
            tables[c] = table;
        }

        let (emit, no_photon) = photon_mode_distribution(em, t.modes_per_round);
        let n = t.modes_per_round as usize;
        let q: Vec<f64> = tables.iter().map(|t| t.accepted).collect();
        let q_clean: Vec<f64> = tables.iter().map(|t| t.clean).collect();
        let pk = |k: usize| if k == 0 { no_photon } else { emit[k - 1] };
        let mut combo_weights = vec![0.0; (n + 1) * (n + 1)];
        let mut p_round = 0.0;
        let mut p_round_clean = 0.0;
        for ka in 0..=n {
            for kb in 0..=n {
                let p = pk(ka) * pk(kb);
                if p <= 0.0 {
                    continue;
                }
                let mut fail = 1.0;
                let mut clean = 0.0;
                for i in 1..=n {
                    let c = config(ka == i, kb == i);
                    clean += fail * q_clean[c];
                    fail *= 1.0 - q[c];
                }
                combo_weights[ka * (n + 1) + kb] = p * (1.0 - fail);
                p_round += p * (1.0 - fail);
                p_round_clean += p * clean;
            }
        }
        Self { tables, pair_outcomes, emit, no_photon, combo_weights, p_round, p_round_clean, modes: t.modes_per_round, wf, pd }
    }

    /// Probability that a round produces an accepted herald.
    pub fn p_round(&self) -> f64 {
        self.p_round
    }

    /// Probability that a round's first accepted herald comes from two signal photons alone.
    pub fn p_round_clean(&self) -> f64 {
        self.p_round_clean
    }

    /// Probability of at least one accepted herald in a block.
    pub fn p_block(&self, rounds: u32) -> f64 {
        1.0 - (1.0 - self.p_round).powi(rounds as i32)
    }

    /// Accepted-herald probability of a slot with the given photons present.
    pub fn slot_acceptance(&self, alice: bool, bob: bool) -> f64 {
        self.tables[config(alice, bob)].accepted
    }

    pub fn window_fraction(&self) -> f64 {
        self.wf
    }

    pub fn dark_probability(&self) -> f64 {
        self.pd
    }

    pub fn emission_distribution(&self) -> (&[f64], f64) {
        (&self.emit, self.no_photon)
    }

    /// Mean number of heralds accepted per block and the long-run success rate
    /// (s⁻¹), including the shortened successful block.
    pub fn expected_rate(&self, link: &LinkModel) -> f64 {
        let t = &link.timing;
        let r = t.rounds_per_block;
        let p = self.p_round;
        if p <= 0.0 {
            return 0.0;
        }
        let pb = self.p_block(r);
        let q = 1.0 - p;
        // E[r0 − 1 | success in block]
        let mut e_prior = 0.0;
        for r0 in 1..=r {
            e_prior += (r0 - 1) as f64 * q.powi(r0 as i32 - 1) * p;
        }
        e_prior /= pb;
        // E[excitation offset of the heralded mode | success]
        let n = self.modes as usize;
        let q_acc: Vec<f64> = self.tables.iter().map(|t| t.accepted).collect();
        let pk = |k: usize| if k == 0 { self.no_photon } else { self.emit[k - 1] };
        let mut e_off = 0.0;
        for ka in 0..=n {
            for kb in 0..=n {
                let pc = pk(ka) * pk(kb);
                let mut fail = 1.0;
                for i in 1..=n {
                    let c = config(ka == i, kb == i);
                    e_off += pc * fail * q_acc[c] * t.excite_offset_ns(i as u32) as f64;
                    fail *= 1.0 - q_acc[c];
                }
            }
        }
        e_off /= p;
        let ow = t.one_way_ns() as f64;
        let tail = e_off + 2.0 * ow + t.window_ns as f64 + t.raman_ns as f64 + t.measure_ns as f64;
        let success_block = t.cooling_ns() as f64 + e_prior * t.round_ns() as f64 + tail;
        let failed = (1.0 - pb) / pb;
        let mean_ns = failed * t.block_ns() as f64 + success_block;
        1e9 / mean_ns
    }

    /// Skips to the next block with an accepted herald and draws its successful round.
    pub fn draw_success(&self, link: &LinkModel, rng: &mut SimRng) -> Option<SuccessDraw> {
        if self.p_round <= 0.0 {
            return None;
        }
        let t = &link.timing;
        let r = t.rounds_per_block;
        let p = self.p_round;
        let pb = self.p_block(r);
        let failed_blocks = if pb >= 1.0 {
            0
        } else {
            let g = rand_distr::Geometric::new(pb).expect("block success probability in (0, 1]");
            g.sample(rng)
        };
        // successful round: geometric truncated to the block
        let u: f64 = rng.random();
        let round = if p >= 1.0 {
            1
        } else {
            let x = (1.0 - u * pb).ln() / (1.0 - p).ln();
            (x.ceil() as u32).clamp(1, r)
        };
        // heating of the failed rounds before it
        let mut ions = [LevelState::cooled(link.emission.nbar_floor); 2];
        for _ in 1..round {
            for ion in ions.iter_mut() {
                let kinds = sample_free_steps(&link.emission, t.modes_per_round, rng);
                *ion = node_round_from_steps(*ion, &link.emission, &kinds, t.modes_per_round).end;
            }
        }
        let n = self.modes as usize;
        let combos: Vec<((usize, usize), f64)> = (0..=n).flat_map(|ka| (0..=n).map(move |kb| (ka, kb))).map(|c| (c, self.combo_weights[c.0 * (n + 1) + c.1])).collect();
        let (ka, kb) = pick(&combos, rng);
        let q: Vec<f64> = self.tables.iter().map(|t| t.accepted).collect();
        let mut fail = 1.0;
        let mut slots = Vec::with_capacity(n);
        for i in 1..=n {
            let c = config(ka == i, kb == i);
            slots.push((i as u32, fail * q[c]));
            fail *= 1.0 - q[c];
        }
        let herald_mode = pick(&slots, rng);
        Some(SuccessDraw { failed_blocks, round, ions, photon_modes: [ka as u32, kb as u32], herald_mode })
    }

    fn sample_row<R: Rng + ?Sized>(&self, c: usize, filter: impl Fn(&Row) -> bool, rng: &mut R) -> Row {
        let rows: Vec<(usize, f64)> = self.tables[c].rows.iter().enumerate().filter(|(_, r)| filter(r)).map(|(i, r)| (i, r.prob)).collect();
        self.tables[c].rows[pick(&rows, rng)]
    }

    /// Concrete round plan for a drawn success.
    pub fn plan_success(&self, link: &LinkModel, draw: &SuccessDraw, round_start: u64, rng: &mut SimRng) -> RoundPlan {
        let t = &link.timing;
        let em = &link.emission;
        let n = t.modes_per_round;
        let mut nodes = Vec::with_capacity(2);
        for i in 0..2 {
            let kinds = match draw.photon_modes[i] {
                0 => sample_steps_without_photon(em, n, rng),
                k => sample_steps_emitting_at(em, k, rng),
            };
            nodes.push(node_round_from_steps(draw.ions[i], em, &kinds, n));
        }
        let mut slots = Vec::with_capacity(n as usize);
        for k in 1..=n {
            let a = draw.photon_modes[0] == k;
            let b = draw.photon_modes[1] == k;
            let c = config(a, b);
            let row = if k < draw.herald_mode {
                self.sample_row(c, |r| !r.accepted, rng)
            } else if k == draw.herald_mode {
                self.sample_row(c, |r| r.accepted, rng)
            } else {
                self.sample_row(c, |_| true, rng)
            };
            slots.push(self.materialize(link, &row, round_start, k, rng));
        }
        let nodes: [NodeRoundPlan; 2] = nodes.try_into().expect("two nodes");
        RoundPlan { nodes, slots }
    }

    fn materialize(&self, link: &LinkModel, row: &Row, round_start: u64, mode: u32, rng: &mut SimRng) -> SlotPlan {
        let t = &link.timing;
        let tau = link.emission.envelope_tau_ns;
        let w = t.window_ns as f64;
        let excite_t = round_start + t.excite_offset_ns(mode);
        let ow = t.one_way_ns();
        let open = excite_t + ow;
        let free = Exp::new(1.0 / tau).expect("positive lifetime");
        let delay = |inside: bool, rate: f64, rng: &mut SimRng| -> f64 {
            if inside {
                let u: f64 = rng.random();
                -(1.0 - u * (1.0 - (-rate * w).exp())).ln() / rate
            } else {
                w + Exp::new(rate).expect("positive rate").sample(rng)
            }
        };
        let mut arrivals: Vec<(Node, f64)> = Vec::new();
        let mut clicks = Vec::new();
        let mut signal_state = None;
        let click = |d: Detector, x: f64| ClickEvent { detector: d, timestamp_ns: (open as f64 + x) as u64, origin: Origin::Signal };
        match row.signal {
            Signal::Nothing => {}
            Signal::Single { node, mode: m, inside } => {
                let x = match mode_detector(m) {
                    Some(d) => {
                        let x = delay(inside, 1.0 / tau, rng);
                        clicks.push(click(d, x));
                        x
                    }
                    None => free.sample(rng),
                };
                arrivals.push((node, x));
            }
            Signal::Pair { idx, inside } => {
                let o = &self.pair_outcomes[idx];
                let (m0, m1) = o.modes;
                let a_first = rng.random::<f64>() < o.a_first_weight;
                let (xa, xb);
                match (mode_detector(m0), mode_detector(m1)) {
                    (Some(d), Some(_)) if m0 == m1 => {
                        let first = delay(inside[0], 2.0 / tau, rng);
                        clicks.push(click(d, first));
                        let other = first + free.sample(rng);
                        (xa, xb) = if a_first { (first, other) } else { (other, first) };
                    }
                    (Some(d0), Some(d1)) => {
                        let x0 = delay(inside[0], 1.0 / tau, rng);
                        let x1 = delay(inside[1], 1.0 / tau, rng);
                        clicks.push(click(d0, x0));
                        clicks.push(click(d1, x1));
                        (xa, xb) = if a_first { (x0, x1) } else { (x1, x0) };
                    }
                    (Some(d), None) | (None, Some(d)) => {
                        let x = delay(inside[0], 1.0 / tau, rng);
                        clicks.push(click(d, x));
                        let other = free.sample(rng);
                        // photon A sits in modes.0 with weight a_first_weight
                        let a_clicks = (mode_detector(m0).is_some()) == a_first;
                        (xa, xb) = if a_clicks { (x, other) } else { (other, x) };
                    }
                    (None, None) => {
                        (xa, xb) = (free.sample(rng), free.sample(rng));
                    }
                }
                arrivals.push((Node::Alice, xa));
                arrivals.push((Node::Bob, xb));
            }
        }
        let mut phi_m = [0.0; 2];
        for &(node, x) in &arrivals {
            phi_m[node.index()] = phi_M(excite_t as f64 + x, excite_t as f64, node, &link.phase);
        }
        if let Signal::Pair { idx, .. } = row.signal {
            if pattern_of_set(row.signal_mask).accepted(link.accept_psi_minus) {
                let modes = self.pair_outcomes[idx].modes;
                let a = ion_photon_pure(phi_m[0]);
                let b = ion_photon_pure(phi_m[1]);
                signal_state = bsm_outcomes(&a, 3, &b, 3, &link.setup).into_iter().find(|o| o.modes == modes).and_then(|o| o.emitters);
            }
        }
        for d in Detector::ALL {
            let forced = row.darks & d.bit() != 0;
            let extra = row.signal_mask & d.bit() != 0 && rng.random::<f64>() < self.pd;
            if forced || extra {
                let ts = open + rng.random_range(0..t.window_ns);
                clicks.push(ClickEvent { detector: d, timestamp_ns: ts, origin: Origin::Dark });
            }
        }
        clicks.sort_by_key(|c| (c.timestamp_ns, c.detector));
        let photons = arrivals.iter().map(|&(node, x)| (node, (open as f64 + x) as u64)).collect();
        SlotPlan { photons, clicks, signal_state, phi_m }
    }
}

/// Plans the drawn successful round from the fast-forward tables; any other
/// round is sampled directly.
pub struct FastForwardPlanner<'a> {
    pub ff: &'a FastForward,
    pub draw: SuccessDraw,
}

impl RoundPlanner for FastForwardPlanner<'_> {
    fn plan(&mut self, link: &LinkModel, block: u32, round: u32, round_start: u64, start: [LevelState; 2], rng: &mut SimRng) -> RoundPlan {
        if round == self.draw.round {
            let mut draw = self.draw.clone();
            draw.ions = start;
            self.ff.plan_success(link, &draw, round_start, rng)
        } else {
            DirectPlanner.plan(link, block, round, round_start, start, rng)
        }
    }
}
