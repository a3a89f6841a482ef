//! Single-node excitation and emission cycle, photon wavepackets and the
//! three-pulse Raman transfer from the communication qutrit into the memory qubit.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstate::{self, channels, cr, phase, CMatrix, CVector, JointState, Pauli, PureState, QStateError};
use crate::Node;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    SPlus,
    SMinus,
    /// D3/2 communication qutrit |0_C⟩, |1_C⟩, |2_C⟩.
    D0,
    D1,
    D2,
    /// P-manifold, transient only.
    P,
    /// D5/2 memory qubit.
    Up,
    Down,
}

impl Level {
    pub fn in_s(self) -> bool {
        matches!(self, Level::SPlus | Level::SMinus)
    }

    pub fn in_comm(self) -> bool {
        matches!(self, Level::D0 | Level::D1 | Level::D2)
    }

    pub fn in_memory(self) -> bool {
        matches!(self, Level::Up | Level::Down)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelState {
    pub level: Level,
    pub phonon_nbar: f64,
    /// Photons scattered since the last cooling.
    pub scatters: u32,
}

impl LevelState {
    pub fn cooled(nbar_floor: f64) -> Self {
        Self { level: Level::SPlus, phonon_nbar: nbar_floor, scatters: 0 }
    }

    fn scatter(mut self, level: Level, recoil: f64) -> Self {
        self.level = level;
        self.phonon_nbar += recoil;
        self.scatters += 1;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionParams {
    /// Probability that P decays into D3/2.
    pub branch_d: f64,
    /// Conditional probability that an S-decay returns to S₊½.
    pub branch_s_back_initial: f64,
    /// End-to-end probability that an emitted photon reaches the station detectors.
    pub collection_efficiency: f64,
    /// 1/e lifetime of the photon intensity envelope.
    pub envelope_tau_ns: f64,
    /// Fraction of S₋½ population the intermediate pump returns to S₊½.
    pub pump_survival: f64,
    /// Mean phonon number added per scattered photon.
    pub recoil_per_scatter: f64,
    /// Mean phonon number right after cooling.
    pub nbar_floor: f64,
    /// Mean photons scattered by each state preparation.
    #[serde(default)]
    pub prep_scatters: f64,
}

impl Default for EmissionParams {
    fn default() -> Self {
        Self {
            branch_d: 0.06,
            branch_s_back_initial: 2.0 / 3.0,
            collection_efficiency: 1.0,
            envelope_tau_ns: 7.0,
            pump_survival: 1.0,
            recoil_per_scatter: 0.0,
            nbar_floor: 0.0,
            prep_scatters: 0.0,
        }
    }
}

impl EmissionParams {
    /// Per-cycle probability that an ion which did not emit is back in S₊½
    /// for the next excitation.
    pub fn survival_per_cycle(&self) -> f64 {
        (1.0 - self.branch_d) * (self.branch_s_back_initial + (1.0 - self.branch_s_back_initial) * self.pump_survival)
    }

    /// D3/2 arrival probability at excitation k (1-based): s^(k-1)·branch_d.
    pub fn emission_probability(&self, k: u32) -> f64 {
        assert!(k >= 1);
        self.survival_per_cycle().powi(k as i32 - 1) * self.branch_d
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("branch_d", self.branch_d),
            ("branch_s_back_initial", self.branch_s_back_initial),
            ("collection_efficiency", self.collection_efficiency),
            ("pump_survival", self.pump_survival),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is not a probability"));
            }
        }
        if !(self.envelope_tau_ns > 0.0) {
            return Err(format!("envelope_tau_ns = {} must be positive", self.envelope_tau_ns));
        }
        if !(self.recoil_per_scatter >= 0.0) || !(self.nbar_floor >= 0.0) || !(self.prep_scatters >= 0.0) {
            return Err("phonon parameters must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotonRecord {
    pub node: Node,
    pub mode_index: u32,
    /// Emission time on the global clock, ns.
    pub emit_time_ns: f64,
    pub pol_amp_h: qstate::C64,
    pub pol_amp_v: qstate::C64,
    pub envelope_tau_ns: f64,
    /// Carrier angular frequencies of the three decay channels |e⟩→|i_C⟩, rad/ns.
    pub carrier_detunings: [f64; 3],
    /// Phases k_ei·z accumulated along the fiber, one per decay channel.
    pub channel_phases: [f64; 3],
    /// Arrival time at the station, set by propagation.
    pub arrival_ns: Option<f64>,
}

impl PhotonRecord {
    pub fn pol_norm_error(&self) -> f64 {
        (self.pol_amp_h.norm_sqr() + self.pol_amp_v.norm_sqr() - 1.0).abs()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmissionError {
    #[error("excitation requires the ion in S+1/2, found {0:?}")]
    NotInSPlus(Level),
    #[error("ion factor has dimension {0}, expected the 3-level communication subspace")]
    NotCommunicationSubspace(usize),
    #[error(transparent)]
    State(#[from] QStateError),
}

/// Where and when an excitation happens.
#[derive(Debug, Clone, Copy)]
pub struct ExciteContext {
    pub node: Node,
    pub mode_index: u32,
    pub time_ns: f64,
}

/// Decay weights into |0_C⟩ (π), |1_C⟩ and |2_C⟩ (σ) before collection.
const DECAY_WEIGHTS: [f64; 3] = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 2.0];
/// σ-light couples into the single-mode fiber at half the π efficiency.
const SIGMA_COLLECTION: f64 = 0.5;

fn collected_weights() -> [f64; 3] {
    let w = [DECAY_WEIGHTS[0], DECAY_WEIGHTS[1] * SIGMA_COLLECTION, DECAY_WEIGHTS[2] * SIGMA_COLLECTION];
    let t: f64 = w.iter().sum();
    [w[0] / t, w[1] / t, w[2] / t]
}

fn sample_comm_level<R: Rng + ?Sized>(weights: [f64; 3], rng: &mut R) -> Level {
    let u: f64 = rng.random();
    if u < weights[0] {
        Level::D0
    } else if u < weights[0] + weights[1] {
        Level::D1
    } else {
        Level::D2
    }
}

/// One excitation pulse on an ion in S₊½.
pub fn excite<R: Rng + ?Sized>(
    state: LevelState,
    params: &EmissionParams,
    ctx: ExciteContext,
    rng: &mut R,
) -> Result<(LevelState, Option<PhotonRecord>), EmissionError> {
    if state.level != Level::SPlus {
        return Err(EmissionError::NotInSPlus(state.level));
    }
    let recoil = params.recoil_per_scatter;
    if rng.random::<f64>() < params.branch_d {
        let collected = rng.random::<f64>() < params.collection_efficiency;
        if collected {
            let level = sample_comm_level(collected_weights(), rng);
            let amps = ion_photon_amplitudes(0.0);
            let h = (amps[1].norm_sqr() + amps[2].norm_sqr()).sqrt();
            let v = amps[3].norm();
            let photon = PhotonRecord {
                node: ctx.node,
                mode_index: ctx.mode_index,
                emit_time_ns: ctx.time_ns,
                pol_amp_h: cr(h),
                pol_amp_v: cr(v),
                envelope_tau_ns: params.envelope_tau_ns,
                carrier_detunings: [0.0; 3],
                channel_phases: [0.0; 3],
                arrival_ns: None,
            };
            Ok((state.scatter(level, recoil), Some(photon)))
        } else {
            let level = sample_comm_level(DECAY_WEIGHTS, rng);
            Ok((state.scatter(level, recoil), None))
        }
    } else if rng.random::<f64>() < params.branch_s_back_initial {
        Ok((state.scatter(Level::SPlus, recoil), None))
    } else {
        Ok((state.scatter(Level::SMinus, recoil), None))
    }
}

/// Optical pumping into S₊½ at the start of a round.
pub fn prepare(state: LevelState, params: &EmissionParams) -> LevelState {
    LevelState { level: Level::SPlus, phonon_nbar: state.phonon_nbar + params.recoil_per_scatter * params.prep_scatters, scatters: state.scatters }
}

/// 397 nm-only pumping between excitations. S₊½ is dark to the pump.
pub fn intermediate_pump<R: Rng + ?Sized>(state: LevelState, params: &EmissionParams, rng: &mut R) -> LevelState {
    match state.level {
        Level::SMinus => {
            if rng.random::<f64>() < params.pump_survival {
                state.scatter(Level::SPlus, params.recoil_per_scatter)
            } else {
                let level = sample_comm_level(DECAY_WEIGHTS, rng);
                state.scatter(level, params.recoil_per_scatter)
            }
        }
        _ => state,
    }
}

/// Amplitudes of the collected ion-photon state in the order
/// (|0_C⟩|H⟩, |1_C⟩|H⟩, |2_C⟩|H⟩, |0_C⟩|V⟩), with e^{iφ_M} on |2_C⟩.
fn ion_photon_amplitudes(phi_m: f64) -> [qstate::C64; 4] {
    let w = collected_weights();
    [cr(0.0), cr(w[1].sqrt()), phase(phi_m) * w[2].sqrt(), cr(w[0].sqrt())]
}

/// Collected ion-photon state over (qutrit ⊗ polarization).
pub fn ion_photon_state(_params: &EmissionParams) -> JointState {
    ion_photon_state_phased(0.0)
}

/// As [`ion_photon_state`] with the |2_C⟩–|1_C⟩ phase φ_M.
pub fn ion_photon_state_phased(phi_m: f64) -> JointState {
    let psi = ion_photon_pure(phi_m);
    JointState::from_pure(&psi, vec![3, 2]).expect("dims match")
}

pub fn ion_photon_pure(phi_m: f64) -> PureState {
    let a = ion_photon_amplitudes(phi_m);
    // index = ion*2 + pol, pol 0 = H, 1 = V
    let mut v = CVector::zeros(6);
    v[0 * 2 + 1] = a[3];
    v[1 * 2] = a[1];
    v[2 * 2] = a[2];
    PureState::new(v).expect("normalized by construction")
}

/// Intensity-normalized one-sided exponential envelope, ∫|f|² dt = 1.
pub fn envelope_amplitude(t_rel: f64, tau: f64) -> qstate::C64 {
    assert!(tau > 0.0, "envelope lifetime must be positive");
    if t_rel < 0.0 {
        cr(0.0)
    } else {
        cr((-t_rel / (2.0 * tau)).exp() / tau.sqrt())
    }
}

/// Fraction of the photon intensity inside `[0, window)`.
pub fn window_fraction(window: f64, tau: f64) -> f64 {
    1.0 - (-window / tau).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MergeErrorParams {
    /// Raman scattering probability per π-pulse, P_sc = 2πΓ/Δ.
    pub p_sc: f64,
    /// Std of the merge-pulse phase error, rad.
    pub sigma_phi: f64,
    /// φ_M the controller compensates when merging |1_C⟩ and |2_C⟩.
    pub phase_ref: f64,
}

/// Residual |2_C⟩ population per node for a merge-phase error δ.
/// Its Gaussian average over both nodes is (0.54σ)²/2.
pub fn merge_leak_for_error(delta: f64) -> f64 {
    let d = 0.54 * delta;
    d * d / 4.0
}

pub fn mean_merge_leak(sigma_phi: f64) -> f64 {
    merge_leak_for_error(sigma_phi)
}

/// How a stochastic channel is applied.
pub enum ChannelMode<'a> {
    /// Exact CPTP average.
    Analytic,
    /// One sampled trajectory.
    Sampled(&'a mut dyn RngCore),
}

/// Ideal three-pulse map from the qutrit to the memory qubit (3 → 2 Kraus set).
/// Population orthogonal to the merged superposition ends up unpolarized.
pub fn ideal_transfer_kraus(phase_ref: f64) -> Vec<CMatrix> {
    let s3 = 3f64.sqrt() / 2.0;
    let e = phase(-phase_ref);
    // rows: |↑⟩, |↓⟩; cols: |0_C⟩, |1_C⟩, |2_C⟩
    let main = CMatrix::from_row_slice(2, 3, &[cr(0.0), cr(0.5), e * s3, cr(1.0), cr(0.0), cr(0.0)]);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let chi = [cr(0.0), cr(s3 * h), -e * (0.5 * h)];
    let leak_up = CMatrix::from_row_slice(2, 3, &[chi[0], chi[1], chi[2], cr(0.0), cr(0.0), cr(0.0)]);
    let leak_down = CMatrix::from_row_slice(2, 3, &[cr(0.0), cr(0.0), cr(0.0), chi[0], chi[1], chi[2]]);
    vec![main, leak_up, leak_down]
}

fn random_pauli(rng: &mut dyn RngCore) -> CMatrix {
    match rng.random_range(0..4) {
        0 => Pauli::I.matrix(),
        1 => Pauli::X.matrix(),
        2 => Pauli::Y.matrix(),
        _ => Pauli::Z.matrix(),
    }
}

/// Error channels that follow the ideal transfer on one memory qubit:
/// merge-jitter leak, then two Raman π-pulses with scattering.
/// Returns a list of single-qubit Kraus sets to apply in order.
pub fn transfer_error_kraus(errs: &MergeErrorParams, mode: &mut ChannelMode<'_>) -> Vec<Vec<CMatrix>> {
    match mode {
        ChannelMode::Analytic => vec![
            channels::depolarize(mean_merge_leak(errs.sigma_phi)),
            channels::depolarize(errs.p_sc),
            channels::depolarize(errs.p_sc),
        ],
        ChannelMode::Sampled(rng) => {
            let delta = if errs.sigma_phi > 0.0 {
                Normal::new(0.0, errs.sigma_phi).expect("finite sigma").sample(rng)
            } else {
                0.0
            };
            let mut out = Vec::new();
            for p in [merge_leak_for_error(delta), errs.p_sc, errs.p_sc] {
                if rng.random::<f64>() < p {
                    out.push(vec![random_pauli(&mut **rng)]);
                }
            }
            out
        }
    }
}

/// Applies the transfer (ideal map plus error channels) to the qutrit at `site`.
pub fn transfer_site(
    state: &JointState,
    site: usize,
    errs: &MergeErrorParams,
    mode: &mut ChannelMode<'_>,
) -> Result<JointState, EmissionError> {
    let d = state.dims[site];
    if d != 3 {
        return Err(EmissionError::NotCommunicationSubspace(d));
    }
    let mut out = state.apply_local(site, &ideal_transfer_kraus(errs.phase_ref))?;
    for k in transfer_error_kraus(errs, mode) {
        out = out.apply_local(site, &k)?;
    }
    Ok(out)
}

/// Three-pulse transfer on an (ion qutrit ⊗ photon) state.
pub fn raman_merge_transfer(
    state: &JointState,
    errs: &MergeErrorParams,
    mut mode: ChannelMode<'_>,
) -> Result<JointState, EmissionError> {
    transfer_site(state, 0, errs, &mut mode)
}
