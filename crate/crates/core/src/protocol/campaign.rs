//! Link model shared by the engines, the heralded-state pipeline, and the
//! campaign drivers (ion-ion, ion-photon, enhancement sweep).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{heating_visibility, MeasurementRecord};
use crate::emission::{ion_photon_pure, transfer_site, ChannelMode, EmissionParams, LevelState, MergeErrorParams};
use crate::optics::{bsm_outcomes, pattern_of_set, InterferenceSetup};
use crate::phase::{calibration_residual, PhaseParams};
use crate::qstate::{apply_local_channel, channels, phase_gate, CMatrix, DensityMatrix, JointState, Pauli, PauliLabel};
use crate::Node;

use super::engine::{run_block, BlockStart, DirectPlanner, SimRng, SuccessRecord};
use super::fastforward::{node_round_from_steps, sample_free_steps, FastForward, FastForwardPlanner};
use super::station::StationLink;
use super::{Actor, ChannelChoice, ConfigFault, EngineMode, Event, EventKind, EventLog, LinkConfig, Payload, TimingConfig};

/// Memory-qubit noise after a herald, per node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkNoise {
    /// Raman scattering probability per transfer π-pulse.
    pub p_sc: f64,
    /// Merge-pulse phase jitter, rad.
    pub sigma_phi: f64,
    /// Z-flip probability of each memory qubit between herald and readout.
    pub phase_flip: f64,
    pub lamb_dicke: f64,
}

impl Default for LinkNoise {
    fn default() -> Self {
        Self { p_sc: 0.0, sigma_phi: 0.0, phase_flip: 0.0, lamb_dicke: 0.0 }
    }
}

/// Everything the engines need about one two-node link.
#[derive(Debug, Clone)]
pub struct LinkModel {
    pub timing: TimingConfig,
    pub emission: EmissionParams,
    pub phase: PhaseParams,
    pub setup: InterferenceSetup,
    pub dark_rate_hz: f64,
    pub accept_psi_minus: bool,
    pub reorder_budget_ns: u64,
    pub engine: EngineMode,
    pub channel: ChannelChoice,
    pub noise: LinkNoise,
    /// Phase of the |↓↑⟩ coefficient relative to |↑↓⟩ that the optics imprint
    /// for each two-detector click mask, known to the nodes from calibration.
    herald_phase: [f64; 16],
}

impl LinkModel {
    pub fn new(
        timing: TimingConfig,
        emission: EmissionParams,
        phase: PhaseParams,
        setup: InterferenceSetup,
        link: &LinkConfig,
        noise: LinkNoise,
    ) -> Result<Self, ConfigFault> {
        timing.validate()?;
        emission.validate().map_err(|m| ConfigFault { field: "emission", message: m })?;
        phase.validate().map_err(|m| ConfigFault { field: "phase", message: m })?;
        setup.bs.validate().map_err(|m| ConfigFault { field: "beamsplitter", message: m })?;
        if !(link.dark_rate_hz >= 0.0) {
            return Err(ConfigFault { field: "dark_rate_hz", message: "must be non-negative".into() });
        }
        for (field, v) in [("p_sc", noise.p_sc), ("phase_flip", noise.phase_flip)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigFault { field, message: format!("{v} is not a probability") });
            }
        }
        if !(noise.sigma_phi >= 0.0) || !(noise.lamb_dicke >= 0.0) {
            return Err(ConfigFault { field: "noise", message: "sigma_phi and lamb_dicke must be non-negative".into() });
        }
        let herald_phase = herald_phases(&setup);
        Ok(Self {
            timing,
            emission,
            phase,
            setup,
            dark_rate_hz: link.dark_rate_hz,
            accept_psi_minus: link.accept_psi_minus,
            reorder_budget_ns: link.reorder_budget_ns,
            engine: link.engine,
            channel: link.channel_mode,
            noise,
            herald_phase,
        })
    }

    /// Noise-free link with a balanced splitter, mainly for tests.
    pub fn ideal(timing: TimingConfig, emission: EmissionParams) -> Self {
        let link = LinkConfig { engine: EngineMode::Direct, ..Default::default() };
        Self::new(timing, emission, PhaseParams::default(), InterferenceSetup::ideal(), &link, LinkNoise::default()).expect("ideal link is valid")
    }

    pub fn merge_params(&self, phase_ref: f64) -> MergeErrorParams {
        MergeErrorParams { p_sc: self.noise.p_sc, sigma_phi: self.noise.sigma_phi, phase_ref }
    }

    pub fn herald_phase(&self, mask: u8) -> f64 {
        self.herald_phase[mask as usize & 15]
    }
}

fn herald_phases(setup: &InterferenceSetup) -> [f64; 16] {
    let clean = InterferenceSetup { bs: setup.bs, overlap: 1.0, pol_rotation: [0.0; 2] };
    let ip = ion_photon_pure(0.0);
    let mut out = [0.0; 16];
    let outcomes = bsm_outcomes(&ip, 3, &ip, 3, &clean);
    for mask in 0..16u8 {
        if pattern_of_set(mask) == crate::optics::HeraldPattern::None {
            continue;
        }
        let mut acc = CMatrix::zeros(9, 9);
        for o in outcomes.iter().filter(|o| o.click_mask() == mask && o.modes.0 != o.modes.1) {
            if let Some(e) = &o.emitters {
                acc += e.matrix() * crate::qstate::cr(o.prob);
            }
        }
        if acc.trace().re <= 0.0 {
            continue;
        }
        let rho = DensityMatrix::from_matrix_unchecked(acc).normalized();
        let ions = transfer_both(&rho, [MergeErrorParams::default(); 2], &mut ChannelMode::Analytic);
        out[mask as usize] = ions.entry(2, 1).arg();
    }
    out
}

fn transfer_both(emitters: &DensityMatrix, errs: [MergeErrorParams; 2], mode: &mut ChannelMode<'_>) -> DensityMatrix {
    let mut js = JointState::new(emitters.clone(), vec![3, 3]).expect("two qutrits");
    for site in 0..2 {
        js = transfer_site(&js, site, &errs[site], mode).expect("qutrit site");
    }
    js.rho
}

fn channel_mode<'a>(link: &LinkModel, rng: &'a mut SimRng) -> ChannelMode<'a> {
    match link.channel {
        ChannelChoice::Analytic => ChannelMode::Analytic,
        ChannelChoice::Sampled => ChannelMode::Sampled(rng),
    }
}

fn apply_qubit(rho: &DensityMatrix, site: usize, kraus: &[CMatrix]) -> DensityMatrix {
    apply_local_channel(rho, &[2, 2], site, kraus).expect("qubit channel").0
}

/// Z flips on each memory qubit with probability `p`.
fn dephase(rho: DensityMatrix, p: f64, mode: &mut ChannelMode<'_>) -> DensityMatrix {
    let mut out = rho;
    for site in 0..2 {
        out = match mode {
            ChannelMode::Analytic => apply_qubit(&out, site, &channels::phase_flip(p)),
            ChannelMode::Sampled(rng) => {
                if rng.random::<f64>() < p {
                    apply_qubit(&out, site, &[Pauli::Z.matrix()])
                } else {
                    out
                }
            }
        };
    }
    out
}

/// Memory-qubit state of the two nodes after a herald: encoding transfer on
/// both ions, physical phase of the link, the nodes' feed-forward and memory
/// dephasing. `mask` is the clicked detector pair; a herald without a
/// two-photon emitter state leaves the ions uncorrelated.
#[allow(clippy::too_many_arguments)]
pub fn finalize_heralded_state(
    link: &LinkModel,
    emitters: Option<&DensityMatrix>,
    mask: u8,
    phi_m: [f64; 2],
    t_ns: f64,
    tau_ns: f64,
    delta_tau_ns: f64,
    rng: &mut SimRng,
) -> DensityMatrix {
    let Some(em) = emitters else {
        return DensityMatrix::maximally_mixed(4);
    };
    let mut mode = channel_mode(link, rng);
    let rho = transfer_both(em, [link.merge_params(phi_m[0]), link.merge_params(phi_m[1])], &mut mode);
    // physical phase beyond the splitter, minus the calibrated correction
    let residual = calibration_residual(t_ns, tau_ns, delta_tau_ns, &link.phase);
    let rho = apply_qubit(&rho, 0, &[phase_gate(residual - link.herald_phase(mask))]);
    dephase(rho, link.noise.phase_flip, &mut mode)
}

/// Probabilities of (a, b) ∈ {+1,−1}² for local Pauli axes on a 2-qubit state,
/// ordered (++, +−, −+, −−).
pub fn outcome_probabilities(rho: &DensityMatrix, a: Pauli, b: Pauli) -> [f64; 4] {
    let ea = crate::qstate::expectation(rho, &PauliLabel::two(a, Pauli::I)).expect("2 qubits");
    let eb = crate::qstate::expectation(rho, &PauliLabel::two(Pauli::I, b)).expect("2 qubits");
    let eab = crate::qstate::expectation(rho, &PauliLabel::two(a, b)).expect("2 qubits");
    let mut p = [0.0; 4];
    for (i, (sa, sb)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].into_iter().enumerate() {
        p[i] = ((1.0 + sa * ea + sb * eb + sa * sb * eab) / 4.0).max(0.0);
    }
    p
}

fn sample_outcomes<R: Rng + ?Sized>(p: [f64; 4], rng: &mut R) -> (i8, i8) {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let table = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return table[i];
        }
        u -= w;
    }
    table[3]
}

/// Flip of an equatorial-basis outcome from motional dephasing of that ion.
fn heating_flip<R: Rng + ?Sized>(axis: Pauli, lamb_dicke: f64, nbar: f64, rng: &mut R) -> bool {
    if !matches!(axis, Pauli::X | Pauli::Y) {
        return false;
    }
    let v = heating_visibility(lamb_dicke, nbar);
    rng.random::<f64>() < (1.0 - v) / 2.0
}

/// Measures both memory qubits in `basis`; returns the two ±1 outcomes.
pub fn measure_pair(rho: &DensityMatrix, basis: &PauliLabel, nbar: [f64; 2], link: &LinkModel, rng: &mut SimRng) -> (i8, i8) {
    assert_eq!(basis.n_qubits(), 2, "two-qubit basis");
    let (a, b) = (basis.0[0], basis.0[1]);
    let (mut oa, mut ob) = sample_outcomes(outcome_probabilities(rho, a, b), rng);
    if heating_flip(a, link.noise.lamb_dicke, nbar[0], rng) {
        oa = -oa;
    }
    if heating_flip(b, link.noise.lamb_dicke, nbar[1], rng) {
        ob = -ob;
    }
    (oa, ob)
}

/// XX, YY, ZZ in rotation.
pub fn basis_schedule(i: usize) -> PauliLabel {
    let axis = [Pauli::X, Pauli::Y, Pauli::Z][i % 3];
    PauliLabel::two(axis, axis)
}

#[derive(Debug, Clone, Copy)]
pub struct CampaignOptions {
    pub target_events: u64,
    /// Upper bound on blocks (including skipped ones) before giving up.
    pub max_blocks: u64,
    pub keep_events: bool,
}

impl CampaignOptions {
    pub fn events(n: u64) -> Self {
        Self { target_events: n, max_blocks: u64::MAX, keep_events: true }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CampaignResult {
    pub successes: Vec<SuccessRecord>,
    pub records: Vec<MeasurementRecord>,
    /// Blocks elapsed, skipped ones included.
    pub blocks: u64,
    pub executed_blocks: u64,
    pub executed_excitations: u64,
    pub sim_time_ns: u64,
    pub faults: Vec<String>,
    pub log: EventLog,
    /// Analytic rate of the same link, s⁻¹.
    pub expected_rate_hz: f64,
}

impl CampaignResult {
    /// Successes per simulated second.
    pub fn rate_hz(&self) -> f64 {
        if self.sim_time_ns == 0 {
            0.0
        } else {
            self.successes.len() as f64 / (self.sim_time_ns as f64 * 1e-9)
        }
    }

    /// Fraction of accepted heralds not produced by two signal photons.
    pub fn false_herald_fraction(&self) -> f64 {
        if self.successes.is_empty() {
            return 0.0;
        }
        self.successes.iter().filter(|s| s.dark_involved).count() as f64 / self.successes.len() as f64
    }
}

/// Repeats blocks until `target_events` heralded pairs have been measured.
pub fn run_campaign(link: &LinkModel, opts: CampaignOptions, station: &mut dyn StationLink, rng: &mut SimRng) -> CampaignResult {
    let mut out = CampaignResult::default();
    let ff = FastForward::new(link);
    out.expected_rate_hz = ff.expected_rate(link);
    if opts.target_events == 0 {
        return out;
    }
    let t = &link.timing;
    let mut now = 0u64;
    let mut block: u64 = 0;
    while (out.successes.len() as u64) < opts.target_events && block < opts.max_blocks {
        let basis = basis_schedule(out.successes.len());
        let mut log = EventLog::default();
        let res = match link.engine {
            EngineMode::Direct => run_block(link, BlockStart::fresh(block as u32, now, link), &mut DirectPlanner, station, &basis, rng, &mut log),
            EngineMode::FastForward => {
                let Some(draw) = ff.draw_success(link, rng) else {
                    break;
                };
                if draw.failed_blocks > 0 {
                    let skipped = draw.failed_blocks.min(opts.max_blocks - block);
                    log.push(Event {
                        seq: 0,
                        time_ns: now,
                        kind: EventKind::FastForward,
                        actor: Actor::Station,
                        block: block as u32,
                        round: 0,
                        mode: 0,
                        payload: Payload::Skip { blocks: skipped, rounds: 0, skipped_ns: skipped * t.block_ns() },
                    });
                    block += skipped;
                    now += skipped * t.block_ns();
                    if block >= opts.max_blocks {
                        if opts.keep_events {
                            out.log.extend(log);
                        }
                        break;
                    }
                }
                let start = BlockStart { block: block as u32, start_ns: now, first_round: draw.round, ions: draw.ions };
                let mut planner = FastForwardPlanner { ff: &ff, draw };
                run_block(link, start, &mut planner, station, &basis, rng, &mut log)
            }
        };
        out.executed_blocks += 1;
        out.executed_excitations += res.excitations;
        block += 1;
        now = res.end_ns;
        if let Some(f) = &res.aborted {
            out.faults.push(f.to_string());
        }
        if let Some(s) = res.success {
            if let Some(m) = &s.measurement {
                out.records.push(m.clone());
            }
            out.successes.push(s);
        }
        if opts.keep_events {
            out.log.extend(log);
        }
    }
    out.blocks = block;
    out.sim_time_ns = now;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementPoint {
    pub modes: u32,
    pub rounds: u64,
    pub successes: u64,
    /// Heralded successes per round.
    pub success_per_round: f64,
    pub enhancement: f64,
    pub stderr: f64,
    /// Σ_{k≤N} (p_k/p_1)² from the population recursion.
    pub analytic: f64,
}

/// Σ_{k=1..N} (p_k/p_1)², with p_k the D3/2 arrival probability at excitation k.
pub fn analytic_enhancement(params: &EmissionParams, modes: u32) -> f64 {
    let p1 = params.emission_probability(1);
    (1..=modes).map(|k| (params.emission_probability(k) / p1).powi(2)).sum()
}

/// Per-round success probability as a function of the number of modes, by
/// round-level Monte Carlo of the level populations. One sequence of rounds
/// serves every N: a round with N modes is the first N excitations of the
/// longest round, so the counts are nested. Collection is set to unity and
/// dark counts to zero, which leaves the ratios unchanged and shortens the
/// run. Sampling stops once the single-mode count reaches `single_mode_successes`.
pub fn enhancement_sweep(link: &LinkModel, max_modes: u32, single_mode_successes: u64, rng: &mut SimRng) -> Vec<EnhancementPoint> {
    assert!(max_modes >= 1, "at least one mode");
    let mut unit = link.clone();
    unit.emission.collection_efficiency = 1.0;
    unit.dark_rate_hz = 0.0;
    unit.timing.modes_per_round = 1;
    let q = FastForward::new(&unit).slot_acceptance(true, true);
    let em = &unit.emission;
    let n = max_modes as usize;
    let mut first_at = vec![0u64; n + 1];
    let mut rounds = 0u64;
    if q > 0.0 && em.branch_d > 0.0 {
        while first_at[1] < single_mode_successes {
            rounds += 1;
            let ka = photon_mode(&sample_free_steps(em, max_modes, rng));
            let kb = photon_mode(&sample_free_steps(em, max_modes, rng));
            if let (Some(a), Some(b)) = (ka, kb) {
                if a == b && rng.random::<f64>() < q {
                    first_at[a] += 1;
                }
            }
        }
    }
    let s1 = first_at[1];
    let mut cum = 0u64;
    let mut out = Vec::with_capacity(n);
    for m in 1..=n {
        cum += first_at[m];
        let per_round = if rounds > 0 { cum as f64 / rounds as f64 } else { 0.0 };
        let (e, se) = if s1 == 0 {
            (f64::NAN, f64::NAN)
        } else if m == 1 {
            (1.0, 0.0)
        } else {
            let e = cum as f64 / s1 as f64;
            // S₁ ⊂ S_N, so Var(S_N/S₁) ≈ E²(1/S₁ − 1/S_N)
            (e, e * (1.0 / s1 as f64 - 1.0 / cum as f64).max(0.0).sqrt())
        };
        out.push(EnhancementPoint { modes: m as u32, rounds, successes: cum, success_per_round: per_round, enhancement: e, stderr: se, analytic: analytic_enhancement(&link.emission, m as u32) });
    }
    out
}

fn photon_mode(kinds: &[super::fastforward::StepKind]) -> Option<usize> {
    kinds.iter().position(|k| *k == super::fastforward::StepKind::Emit).map(|i| i + 1)
}

/// Single-node share of the link noise applied to an ion-photon pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IonPhotonNoise {
    pub merge: MergeErrorParams,
    pub phase_flip: f64,
    /// Polarization rotation of the photon, rad.
    pub pol_rotation: f64,
    pub lamb_dicke: f64,
    pub nbar: f64,
}

impl IonPhotonNoise {
    pub fn from_link(link: &LinkModel) -> Self {
        let nbar = link.emission.nbar_floor + link.emission.recoil_per_scatter * (link.emission.prep_scatters + 1.0);
        Self { merge: link.merge_params(0.0), phase_flip: link.noise.phase_flip, pol_rotation: link.setup.pol_rotation[0], lamb_dicke: link.noise.lamb_dicke, nbar }
    }
}

/// Ion-photon state (memory qubit ⊗ polarization) after the node's transfer,
/// averaged over the merge jitter and the dephasing.
pub fn ion_photon_memory_state(noise: &IonPhotonNoise) -> DensityMatrix {
    let js = JointState::from_pure(&ion_photon_pure(0.0), vec![3, 2]).expect("qutrit ⊗ qubit");
    let js = transfer_site(&js, 0, &noise.merge, &mut ChannelMode::Analytic).expect("qutrit");
    let rho = apply_qubit(&js.rho, 0, &channels::phase_flip(noise.phase_flip));
    let (c, s) = (noise.pol_rotation.cos(), noise.pol_rotation.sin());
    let r = CMatrix::from_row_slice(2, 2, &[c.into(), (-s).into(), s.into(), c.into()]);
    apply_qubit(&rho, 1, &[r])
}

/// Ion-photon tomography data: `shots` records in each of the nine bases.
pub fn run_ion_photon(link: &LinkModel, shots: u64, rng: &mut SimRng) -> (DensityMatrix, Vec<MeasurementRecord>) {
    let noise = IonPhotonNoise::from_link(link);
    let rho = ion_photon_memory_state(&noise);
    let mut records = Vec::with_capacity(9 * shots as usize);
    let mut i = 0u64;
    for basis in PauliLabel::all_two_qubit() {
        let p = outcome_probabilities(&rho, basis.0[0], basis.0[1]);
        for _ in 0..shots {
            let (mut a, b) = sample_outcomes(p, rng);
            if heating_flip(basis.0[0], noise.lamb_dicke, noise.nbar, rng) {
                a = -a;
            }
            records.push(MeasurementRecord { basis: basis.clone(), outcome_a: a, outcome_b: b, block: i as u32, round: 1, mode: 1 });
            i += 1;
        }
    }
    (rho, records)
}

/// Mean phonon number of each ion at the start of `round`, sampled forward
/// from cooling (used for heating calibration).
pub fn sample_nbar_at_round(link: &LinkModel, round: u32, rng: &mut SimRng) -> [f64; 2] {
    let mut ions = [LevelState::cooled(link.emission.nbar_floor); 2];
    for _ in 1..round {
        for ion in ions.iter_mut() {
            let kinds = sample_free_steps(&link.emission, link.timing.modes_per_round, rng);
            *ion = node_round_from_steps(*ion, &link.emission, &kinds, link.timing.modes_per_round).end;
        }
    }
    Node::BOTH.map(|n| ions[n.index()].phonon_nbar)
}
