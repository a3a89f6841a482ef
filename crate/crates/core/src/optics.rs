//! Fibers, the polarization-dependent beamsplitter, two-photon interference
//! and coincidence classification at the central station.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::emission::PhotonRecord;
use crate::qstate::{cr, phase, CMatrix, CVector, DensityMatrix, PureState, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberChannel {
    pub length_m: f64,
    pub speed_m_per_ns: f64,
    pub transmission: f64,
    /// Extra optical path z₀ entering the k·z₀ phases, m.
    pub static_path_m: f64,
}

impl FiberChannel {
    pub fn delay_ns(&self) -> f64 {
        self.length_m / self.speed_m_per_ns
    }
}

/// Sends a photon down a fiber. Returns `None` if it is absorbed.
pub fn propagate<R: Rng + ?Sized>(photon: &PhotonRecord, fiber: &FiberChannel, rng: &mut R) -> Option<PhotonRecord> {
    if fiber.transmission < 1.0 && rng.random::<f64>() >= fiber.transmission {
        return None;
    }
    let mut out = photon.clone();
    out.arrival_ns = Some(photon.emit_time_ns + fiber.delay_ns());
    for (ph, w) in out.channel_phases.iter_mut().zip(photon.carrier_detunings) {
        *ph += w / fiber.speed_m_per_ns * fiber.static_path_m;
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamsplitterModel {
    pub r_h: f64,
    pub t_h: f64,
    pub r_v: f64,
    pub t_v: f64,
    pub phi_bs_h: f64,
    pub phi_bs_v: f64,
}

impl BeamsplitterModel {
    pub fn balanced() -> Self {
        Self { r_h: 0.5, t_h: 0.5, r_v: 0.5, t_v: 0.5, phi_bs_h: 0.0, phi_bs_v: 0.0 }
    }

    /// Measured polarization imbalance of the station's 50:50 splitter.
    pub fn measured() -> Self {
        Self { r_h: 0.49997, t_h: 0.50689, r_v: 0.49317, t_v: 0.49977, phi_bs_h: 0.0, phi_bs_v: 0.0 }
    }

    /// Measured values rescaled so that R + T never exceeds one.
    pub fn measured_normalized() -> Self {
        let m = Self::measured();
        let (sh, sv) = ((m.r_h + m.t_h).max(1.0), (m.r_v + m.t_v).max(1.0));
        Self { r_h: m.r_h / sh, t_h: m.t_h / sh, r_v: m.r_v / sv, t_v: m.t_v / sv, ..m }
    }

    /// Intensity coefficients for polarization 0 = H, 1 = V.
    pub fn coefficients(&self, pol: usize) -> (f64, f64, f64) {
        if pol == 0 {
            (self.r_h, self.t_h, self.phi_bs_h)
        } else {
            (self.r_v, self.t_v, self.phi_bs_v)
        }
    }

    /// [[t, r], [−r*, t]] with t = √T, r = √R·e^{iφ}.
    pub fn matrix(&self, pol: usize) -> [[C64; 2]; 2] {
        let (r, t, phi) = self.coefficients(pol);
        let rr = phase(phi) * r.sqrt();
        let tt = cr(t.sqrt());
        [[tt, rr], [-rr.conj(), tt]]
    }

    pub fn loss_amplitude(&self, pol: usize) -> f64 {
        let (r, t, _) = self.coefficients(pol);
        (1.0 - r - t).max(0.0).sqrt()
    }

    pub fn validate(&self) -> Result<(), String> {
        for pol in 0..2 {
            let (r, t, phi) = self.coefficients(pol);
            if r < 0.0 || t < 0.0 || r + t > 1.0 + 1e-12 || !phi.is_finite() {
                return Err(format!("beamsplitter polarization {pol}: R={r}, T={t} violates R+T <= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    AH,
    AV,
    BH,
    BV,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::AH, Detector::AV, Detector::BH, Detector::BV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Detector {
        Detector::ALL[i]
    }

    /// Output port, 0 = A, 1 = B.
    pub fn port(self) -> usize {
        self.index() / 2
    }

    /// Polarization, 0 = H, 1 = V.
    pub fn pol(self) -> usize {
        self.index() % 2
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Signal,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickEvent {
    pub detector: Detector,
    pub timestamp_ns: u64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeraldPattern {
    None,
    PsiPlus,
    PsiMinus,
}

impl HeraldPattern {
    pub fn code(self) -> u8 {
        match self {
            HeraldPattern::None => 0,
            HeraldPattern::PsiPlus => 1,
            HeraldPattern::PsiMinus => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(HeraldPattern::None),
            1 => Some(HeraldPattern::PsiPlus),
            2 => Some(HeraldPattern::PsiMinus),
            _ => None,
        }
    }

    pub fn accepted(self, accept_psi_minus: bool) -> bool {
        match self {
            HeraldPattern::PsiPlus => true,
            HeraldPattern::PsiMinus => accept_psi_minus,
            HeraldPattern::None => false,
        }
    }
}

/// Pattern of a set of clicked detectors (bitmask over `Detector::bit`).
pub fn pattern_of_set(mask: u8) -> HeraldPattern {
    if mask.count_ones() != 2 {
        return HeraldPattern::None;
    }
    let dets: Vec<Detector> = Detector::ALL.into_iter().filter(|d| mask & d.bit() != 0).collect();
    let (a, b) = (dets[0], dets[1]);
    if a.pol() == b.pol() {
        HeraldPattern::None
    } else if a.port() == b.port() {
        HeraldPattern::PsiPlus
    } else {
        HeraldPattern::PsiMinus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeraldVerdict {
    pub pattern: HeraldPattern,
    pub click_pair: Option<[ClickEvent; 2]>,
    /// Second minus first click time of the pair, in detector order.
    pub delta_tau_ns: Option<i64>,
}

impl HeraldVerdict {
    pub fn none() -> Self {
        Self { pattern: HeraldPattern::None, click_pair: None, delta_tau_ns: None }
    }

    /// True if either click of the pair was a dark count.
    pub fn involves_dark(&self) -> bool {
        self.click_pair.map(|p| p.iter().any(|c| c.origin == Origin::Dark)).unwrap_or(false)
    }
}

/// Per-polarization single-photon transform for amplitudes entering ports A and B.
/// Output order: AH, AV, BH, BV. Lost amplitude is dropped.
pub fn bs_transform(in_a: [C64; 2], in_b: [C64; 2], bs: &BeamsplitterModel) -> [C64; 4] {
    let mut out = [cr(0.0); 4];
    for pol in 0..2 {
        let u = bs.matrix(pol);
        out[pol] = u[0][0] * in_a[pol] + u[0][1] * in_b[pol];
        out[2 + pol] = u[1][0] * in_a[pol] + u[1][1] * in_b[pol];
    }
    out
}

/// |⟨f_a|f_b⟩|² for one-sided exponential envelopes offset by `dt`
/// with a carrier detuning mismatch `detuning` (rad/ns).
pub fn hom_overlap(tau_a: f64, tau_b: f64, dt: f64, detuning: f64) -> f64 {
    assert!(tau_a > 0.0 && tau_b > 0.0, "envelope lifetimes must be positive");
    let gamma = 0.5 / tau_a + 0.5 / tau_b;
    let lead = if dt >= 0.0 { tau_a } else { tau_b };
    let v = (-dt.abs() / lead).exp() / (tau_a * tau_b * (gamma * gamma + detuning * detuning));
    v.clamp(0.0, 1.0)
}

/// Output modes of one photon: the four detectors plus a loss sink per input
/// port and polarization (sinks never click and never interfere).
pub const N_MODES: usize = 8;

pub fn mode_detector(m: usize) -> Option<Detector> {
    (m < 4).then(|| Detector::from_index(m))
}

/// Interference settings for one attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceSetup {
    pub bs: BeamsplitterModel,
    /// Two-photon mode overlap |⟨f_a|f_b⟩|².
    pub overlap: f64,
    /// Static polarization rotation of each photon before the splitter, rad.
    pub pol_rotation: [f64; 2],
}

impl InterferenceSetup {
    pub fn ideal() -> Self {
        Self { bs: BeamsplitterModel::balanced(), overlap: 1.0, pol_rotation: [0.0; 2] }
    }
}

/// Amplitudes for photon entering `port` to reach each of the 8 output modes,
/// one vector over the emitter index per mode. `state` is (emitter ⊗ polarization).
fn routing(state: &PureState, ion_dim: usize, port: usize, setup: &InterferenceSetup) -> Vec<CVector> {
    assert_eq!(state.dim(), ion_dim * 2, "state must be emitter ⊗ polarization");
    let (c, s) = (setup.pol_rotation[port].cos(), setup.pol_rotation[port].sin());
    let mut modes = vec![CVector::zeros(ion_dim); N_MODES];
    for i in 0..ion_dim {
        let h = state.amp(i * 2);
        let v = state.amp(i * 2 + 1);
        let rot = [h * c - v * s, h * s + v * c];
        for pol in 0..2 {
            let u = setup.bs.matrix(pol);
            modes[pol][i] = u[0][port] * rot[pol];
            modes[2 + pol][i] = u[1][port] * rot[pol];
            modes[4 + 2 * port + pol][i] = cr(setup.bs.loss_amplitude(pol)) * rot[pol];
        }
    }
    modes
}

/// Where a lone photon ends up: probability per output mode.
pub fn single_photon_distribution(state: &PureState, ion_dim: usize, port: usize, setup: &InterferenceSetup) -> [f64; N_MODES] {
    let r = routing(state, ion_dim, port, setup);
    let mut p = [0.0; N_MODES];
    for (m, v) in r.iter().enumerate() {
        p[m] = v.norm_squared();
    }
    p
}

/// One two-photon outcome: photons in modes `modes.0 <= modes.1`.
#[derive(Debug, Clone)]
pub struct BsmOutcome {
    pub modes: (usize, usize),
    pub prob: f64,
    /// Normalized conditional state of the two emitters, `None` when `prob` is 0.
    pub emitters: Option<DensityMatrix>,
    /// Probability weight of photon A having gone to `modes.0` (for click timing).
    pub a_first_weight: f64,
}

impl BsmOutcome {
    pub fn click_mask(&self) -> u8 {
        let mut mask = 0;
        for m in [self.modes.0, self.modes.1] {
            if let Some(d) = mode_detector(m) {
                mask |= d.bit();
            }
        }
        mask
    }
}

/// Exact two-photon interference for photon A (port A) and photon B (port B)
/// entangled with their emitters. The joint emitter space is dim_a × dim_b.
pub fn bsm_outcomes(
    state_a: &PureState,
    dim_a: usize,
    state_b: &PureState,
    dim_b: usize,
    setup: &InterferenceSetup,
) -> Vec<BsmOutcome> {
    let ra = routing(state_a, dim_a, 0, setup);
    let rb = routing(state_b, dim_b, 1, setup);
    let v = setup.overlap.clamp(0.0, 1.0);
    let n = dim_a * dim_b;
    let phi = |m: usize, k: usize| -> CVector {
        let mut out = CVector::zeros(n);
        for i in 0..dim_a {
            for j in 0..dim_b {
                out[i * dim_b + j] = ra[m][i] * rb[k][j];
            }
        }
        out
    };
    let mut outcomes = Vec::new();
    for m in 0..N_MODES {
        for k in m..N_MODES {
            let (indist, dist, w_first) = if m == k {
                let p = phi(m, m);
                let ind = (&p * p.adjoint()) * cr(2.0);
                let dis = &p * p.adjoint();
                (ind, dis, 1.0)
            } else {
                let p1 = phi(m, k);
                let p2 = phi(k, m);
                let sum = &p1 + &p2;
                let ind = &sum * sum.adjoint();
                let dis = &p1 * p1.adjoint() + &p2 * p2.adjoint();
                let (w1, w2) = (p1.norm_squared(), p2.norm_squared());
                (ind, dis, if w1 + w2 > 0.0 { w1 / (w1 + w2) } else { 0.5 })
            };
            let rho: CMatrix = indist * cr(v) + dist * cr(1.0 - v);
            let prob = rho.trace().re;
            let emitters = (prob > 1e-300).then(|| DensityMatrix::from_matrix_unchecked(rho / cr(prob)));
            outcomes.push(BsmOutcome { modes: (m, k), prob, emitters, a_first_weight: w_first });
        }
    }
    outcomes
}

/// Photon as it reaches the splitter, with the emitter it is entangled with.
#[derive(Debug, Clone)]
pub struct ArrivingPhoton {
    pub record: PhotonRecord,
    /// (emitter ⊗ polarization) state; the emitter may be 1-dimensional.
    pub joint: PureState,
    pub emitter_dim: usize,
}

impl ArrivingPhoton {
    /// A photon in a pure polarization state taken from its record.
    pub fn unentangled(record: PhotonRecord) -> Self {
        let joint = PureState::from_slice(&[record.pol_amp_h, record.pol_amp_v]).expect("record is normalized");
        Self { record, joint, emitter_dim: 1 }
    }

    fn arrival(&self) -> f64 {
        self.record.arrival_ns.unwrap_or(self.record.emit_time_ns)
    }
}

#[derive(Debug, Clone)]
pub struct Coincidence {
    pub clicks: Vec<ClickEvent>,
    pub outcome: BsmOutcome,
}

fn sample_index<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Interferes two photons analytically, then samples one detection outcome.
pub fn two_photon_coincidence<R: Rng + ?Sized>(
    photon_a: &ArrivingPhoton,
    photon_b: &ArrivingPhoton,
    setup: &InterferenceSetup,
    rng: &mut R,
) -> Coincidence {
    let outcomes = bsm_outcomes(&photon_a.joint, photon_a.emitter_dim, &photon_b.joint, photon_b.emitter_dim, setup);
    let idx = sample_index(outcomes.iter().map(|o| o.prob), rng);
    let outcome = outcomes[idx].clone();
    let (m, k) = outcome.modes;
    let (ta, tb) = (photon_a.arrival(), photon_b.arrival());
    let a_first = rng.random::<f64>() < outcome.a_first_weight;
    let (t_m, t_k) = if a_first { (ta, tb) } else { (tb, ta) };
    let mut clicks = Vec::new();
    if m == k {
        if let Some(d) = mode_detector(m) {
            clicks.push(ClickEvent { detector: d, timestamp_ns: t_m.min(t_k).max(0.0) as u64, origin: Origin::Signal });
        }
    } else {
        for (mode, t) in [(m, t_m), (k, t_k)] {
            if let Some(d) = mode_detector(mode) {
                clicks.push(ClickEvent { detector: d, timestamp_ns: t.max(0.0) as u64, origin: Origin::Signal });
            }
        }
    }
    clicks.sort_by_key(|c| (c.timestamp_ns, c.detector));
    Coincidence { clicks, outcome }
}

/// Routes a lone photon to a detector (or loses it).
pub fn single_photon_click<R: Rng + ?Sized>(photon: &ArrivingPhoton, port: usize, setup: &InterferenceSetup, rng: &mut R) -> Option<ClickEvent> {
    let p = single_photon_distribution(&photon.joint, photon.emitter_dim, port, setup);
    let m = sample_index(p.iter().copied(), rng);
    mode_detector(m).map(|d| ClickEvent { detector: d, timestamp_ns: photon.arrival().max(0.0) as u64, origin: Origin::Signal })
}

/// Probability that a detector registers at least one dark count in a window.
pub fn dark_click_probability(window_ns: f64, dark_rate_hz: f64) -> f64 {
    1.0 - (-dark_rate_hz * window_ns * 1e-9).exp()
}

/// Poisson dark counts, uniform over `[open, open + window)`, on every detector.
pub fn inject_dark_counts<R: Rng + ?Sized>(open_ns: u64, window_ns: u64, dark_rate_hz: f64, rng: &mut R) -> Vec<ClickEvent> {
    let mean = dark_rate_hz * window_ns as f64 * 1e-9;
    let mut out = Vec::new();
    if mean <= 0.0 || window_ns == 0 {
        return out;
    }
    let poisson = Poisson::new(mean).expect("positive mean");
    for d in Detector::ALL {
        let n: f64 = poisson.sample(rng);
        for _ in 0..n as u64 {
            let t = open_ns + rng.random_range(0..window_ns);
            out.push(ClickEvent { detector: d, timestamp_ns: t, origin: Origin::Dark });
        }
    }
    out
}

/// Classifies the clicks inside `[open, open + window)`. Each detector counts
/// only its first click; exactly two distinct detectors are required.
pub fn classify(clicks: &[ClickEvent], open_ns: u64, window_ns: u64) -> HeraldVerdict {
    let mut first: [Option<ClickEvent>; 4] = [None; 4];
    for c in clicks {
        if c.timestamp_ns < open_ns || c.timestamp_ns >= open_ns + window_ns {
            continue;
        }
        let slot = &mut first[c.detector.index()];
        match slot {
            Some(prev) if (prev.timestamp_ns, prev.origin == Origin::Dark) <= (c.timestamp_ns, c.origin == Origin::Dark) => {}
            _ => *slot = Some(*c),
        }
    }
    let fired: Vec<ClickEvent> = first.iter().flatten().copied().collect();
    let mask = fired.iter().fold(0u8, |m, c| m | c.detector.bit());
    let pattern = pattern_of_set(mask);
    if pattern == HeraldPattern::None {
        return HeraldVerdict::none();
    }
    let pair = [fired[0], fired[1]];
    let dt = pair[1].timestamp_ns as i64 - pair[0].timestamp_ns as i64;
    HeraldVerdict { pattern, click_pair: Some(pair), delta_tau_ns: Some(dt) }
}

/// Adds dark counts and classifies, with the window anchored at `open_ns`.
pub fn detect_window_at<R: Rng + ?Sized>(
    open_ns: u64,
    clicks: &[ClickEvent],
    window_ns: u64,
    dark_rate_hz: f64,
    rng: &mut R,
) -> (HeraldVerdict, Vec<ClickEvent>) {
    let mut all = clicks.to_vec();
    all.extend(inject_dark_counts(open_ns, window_ns, dark_rate_hz, rng));
    all.sort_by_key(|c| (c.timestamp_ns, c.detector));
    (classify(&all, open_ns, window_ns), all)
}

/// Window anchored at the earliest click (or 0 when there are none).
pub fn detect_window<R: Rng + ?Sized>(clicks: &[ClickEvent], window_ns: u64, dark_rate_hz: f64, rng: &mut R) -> HeraldVerdict {
    assert!(window_ns > 0, "window must be positive");
    let open = clicks.iter().map(|c| c.timestamp_ns).min().unwrap_or(0);
    detect_window_at(open, clicks, window_ns, dark_rate_hz, rng).0
}
