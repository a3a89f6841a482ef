//! Phase bookkeeping of the ion-photon and ion-ion states, and extraction of
//! the ion-photon phases from parity scans.
//!
//! All functions return unwrapped phases; reduce with [`wrap_pi`] only when
//! comparing. Times are in ns, lengths in m, angular frequencies in rad/ns.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::numeric::wrap_pi;
use crate::numeric::{invert, nelder_mead};
use crate::Node;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseParams {
    /// Alice minus Bob mismatch of the |1_C⟩–|0_C⟩ splitting.
    pub delta_omega_10: f64,
    /// Alice minus Bob mismatch of the |e⟩–|0_C⟩ transition frequency.
    pub delta_omega_e0: f64,
    /// Alice minus Bob mismatch of the memory splitting.
    pub delta_omega_updown: f64,
    /// Mean |1_C⟩–|0_C⟩ splitting.
    pub omega_10_mean: f64,
    pub omega_12_a: f64,
    pub omega_12_b: f64,
    /// Mean wave number of the |1_C⟩–|0_C⟩ frequency difference, rad/m.
    pub kbar_10: f64,
    /// Alice minus Bob wave-number mismatch of the |e⟩→|0_C⟩ photon.
    pub delta_k_0: f64,
    /// Alice minus Bob wave-number mismatch of the |e⟩→|1_C⟩ photon.
    pub delta_k_1: f64,
    pub z0_a: f64,
    pub z0_b: f64,
    /// Path from the splitter to the H and V detectors.
    pub z_h: f64,
    pub z_v: f64,
    pub phi_bs_h: f64,
    pub phi_bs_v: f64,
    pub phi_misc: f64,
    /// Speed of light in the fiber, m/ns.
    pub light_speed: f64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self {
            delta_omega_10: 0.0,
            delta_omega_e0: 0.0,
            delta_omega_updown: 0.0,
            omega_10_mean: 0.0,
            omega_12_a: 0.0,
            omega_12_b: 0.0,
            kbar_10: 0.0,
            delta_k_0: 0.0,
            delta_k_1: 0.0,
            z0_a: 0.0,
            z0_b: 0.0,
            z_h: 0.0,
            z_v: 0.0,
            phi_bs_h: 0.0,
            phi_bs_v: 0.0,
            phi_misc: 0.0,
            light_speed: 0.2,
        }
    }
}

impl PhaseParams {
    /// Δk₁₀ = Δk₁ − Δk₀, since k₁₀ is the wave number of ω_e1 − ω_e0.
    pub fn delta_k_10(&self) -> f64 {
        self.delta_k_1 - self.delta_k_0
    }

    pub fn k_10(&self, node: Node) -> f64 {
        match node {
            Node::Alice => self.kbar_10 + 0.5 * self.delta_k_10(),
            Node::Bob => self.kbar_10 - 0.5 * self.delta_k_10(),
        }
    }

    pub fn omega_10(&self, node: Node) -> f64 {
        match node {
            Node::Alice => self.omega_10_mean + 0.5 * self.delta_omega_10,
            Node::Bob => self.omega_10_mean - 0.5 * self.delta_omega_10,
        }
    }

    pub fn omega_12(&self, node: Node) -> f64 {
        match node {
            Node::Alice => self.omega_12_a,
            Node::Bob => self.omega_12_b,
        }
    }

    pub fn k_12(&self, node: Node) -> f64 {
        self.omega_12(node) / self.light_speed
    }

    pub fn z0(&self, node: Node) -> f64 {
        match node {
            Node::Alice => self.z0_a,
            Node::Bob => self.z0_b,
        }
    }

    /// Alice and Bob parameter sets exchanged. Splitter and detector paths stay.
    pub fn swapped(&self) -> Self {
        Self {
            delta_omega_10: -self.delta_omega_10,
            delta_omega_e0: -self.delta_omega_e0,
            delta_omega_updown: -self.delta_omega_updown,
            omega_12_a: self.omega_12_b,
            omega_12_b: self.omega_12_a,
            delta_k_0: -self.delta_k_0,
            delta_k_1: -self.delta_k_1,
            z0_a: self.z0_b,
            z0_b: self.z0_a,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.delta_omega_10,
            self.delta_omega_e0,
            self.delta_omega_updown,
            self.omega_10_mean,
            self.omega_12_a,
            self.omega_12_b,
            self.kbar_10,
            self.delta_k_0,
            self.delta_k_1,
            self.z0_a,
            self.z0_b,
            self.z_h,
            self.z_v,
            self.phi_bs_h,
            self.phi_bs_v,
            self.phi_misc,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err("phase parameters must be finite".into());
        }
        if !(self.light_speed > 0.0) {
            return Err("light_speed must be positive".into());
        }
        Ok(())
    }
}

/// Phase of the heralded ion-ion state.
pub fn phi_e_total(t: f64, tau: f64, delta_tau: f64, p: &PhaseParams) -> f64 {
    -p.delta_omega_10 * (t - tau) - p.delta_omega_e0 * delta_tau
        + (p.delta_k_1 * p.z_h - p.delta_k_0 * p.z_v)
        + (p.k_10(Node::Alice) * p.z0_a - p.k_10(Node::Bob) * p.z0_b)
        + (p.phi_bs_h - p.phi_bs_v)
}

/// Alias with the conventional symbol name.
#[allow(non_snake_case)]
pub fn phi_E(t: f64, tau: f64, delta_tau: f64, p: &PhaseParams) -> f64 {
    phi_e_total(t, tau, delta_tau, p)
}

/// Phase between |2_C⟩ and |1_C⟩ of one node, referenced to the H photon.
#[allow(non_snake_case)]
pub fn phi_M(t: f64, tau: f64, node: Node, p: &PhaseParams) -> f64 {
    p.omega_12(node) * (t - tau) + p.k_12(node) * (p.z_h + p.z0(node))
}

/// Ion-photon phase of one node for a photon detected at path `z`.
pub fn phi_e(node: Node, z: f64, t: f64, tau: f64, p: &PhaseParams) -> f64 {
    let base = -p.omega_10(node) * (t - tau) + p.k_10(node) * (z + p.z0(node)) + PI;
    match node {
        Node::Alice => base,
        Node::Bob => base + (p.phi_bs_v - p.phi_bs_h),
    }
}

/// φ_E minus the ion-photon estimate φ_eᴬ(zH) − φ_eᴮ(zH), evaluated from both sides.
pub fn calibration_residual(t: f64, tau: f64, delta_tau: f64, p: &PhaseParams) -> f64 {
    phi_e_total(t, tau, delta_tau, p) - (phi_e(Node::Alice, p.z_h, t, tau, p) - phi_e(Node::Bob, p.z_h, t, tau, p))
}

/// Closed form of [`calibration_residual`]: −Δω_e0·Δτ + Δk₀(zH − zV).
pub fn calibration_residual_closed_form(delta_tau: f64, p: &PhaseParams) -> f64 {
    -p.delta_omega_e0 * delta_tau + p.delta_k_0 * (p.z_h - p.z_v)
}

/// Phase of the memory-qubit state at time `t` after the transfer at `t_m`.
pub fn delta_phi(t: f64, t_m: f64, p: &PhaseParams) -> f64 {
    assert!(t >= t_m, "evaluation time precedes the transfer");
    p.delta_omega_updown * (t - t_m) + p.delta_omega_10 * t_m - p.kbar_10 * (p.z0_a - p.z0_b) - p.phi_misc
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseFitError {
    #[error("scan {0} is degenerate: all parities equal")]
    DegenerateScan(usize),
    #[error("scan {index} is too short: {reason}")]
    InsufficientScan { index: usize, reason: String },
    #[error("fit did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("singular fit covariance")]
    SingularCovariance,
    #[error("scan csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParityPoint {
    pub phase_rad: f64,
    pub parity: f64,
    pub err: f64,
}

/// Photon analysis basis of a parity scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanBasis {
    /// Diagonal, no offset.
    D,
    /// Circular, offset −π/2.
    R,
}

impl ScanBasis {
    pub fn offset(self) -> f64 {
        match self {
            ScanBasis::D => 0.0,
            ScanBasis::R => -FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityScan {
    pub node: Node,
    pub basis: ScanBasis,
    pub points: Vec<ParityPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParityFit {
    pub phi_e_a: f64,
    pub phi_e_b: f64,
    pub se_a: f64,
    pub se_b: f64,
    pub visibilities: Vec<f64>,
    pub visibility_se: Vec<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

fn check_scan(index: usize, scan: &ParityScan) -> Result<(), PhaseFitError> {
    let n = scan.points.len();
    if n < 6 {
        return Err(PhaseFitError::InsufficientScan { index, reason: format!("{n} points, need at least 6") });
    }
    let lo = scan.points.iter().map(|p| p.phase_rad).fold(f64::INFINITY, f64::min);
    let hi = scan.points.iter().map(|p| p.phase_rad).fold(f64::NEG_INFINITY, f64::max);
    let coverage = (hi - lo) * n as f64 / (n as f64 - 1.0);
    if coverage < 2.0 * PI - 1e-9 {
        return Err(PhaseFitError::InsufficientScan { index, reason: format!("spans {:.3} rad, less than one period", hi - lo) });
    }
    if scan.points.iter().any(|p| !(p.err > 0.0) || !p.parity.is_finite()) {
        return Err(PhaseFitError::InsufficientScan { index, reason: "errors must be positive and parities finite".into() });
    }
    let first = scan.points[0].parity;
    if scan.points.iter().all(|p| (p.parity - first).abs() < 1e-12) {
        return Err(PhaseFitError::DegenerateScan(index));
    }
    Ok(())
}

/// Best amplitude and weighted squared residual of one curve for a fixed phase.
fn profile(scan: &ParityScan, phi0: f64) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for p in &scan.points {
        let w = 1.0 / (p.err * p.err);
        let c = (p.phase_rad + phi0 + scan.basis.offset()).cos();
        num += w * p.parity * c;
        den += w * c * c;
    }
    let a = if den > 0.0 { num / den } else { 0.0 };
    let chi2 = scan
        .points
        .iter()
        .map(|p| {
            let r = p.parity - a * (p.phase_rad + phi0 + scan.basis.offset()).cos();
            r * r / (p.err * p.err)
        })
        .sum();
    (a, chi2)
}

/// Phase estimate of a single curve from its first Fourier component.
fn fourier_phase(scan: &ParityScan) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for p in &scan.points {
        let w = 1.0 / (p.err * p.err);
        re += w * p.parity * p.phase_rad.cos();
        im += w * p.parity * p.phase_rad.sin();
    }
    // A·cos(φ+θ) correlates with e^{iφ} as (A/2)e^{−iθ}
    -im.atan2(re) - scan.basis.offset()
}

fn node_slot(node: Node) -> usize {
    node.index()
}

/// Joint fit of the parity curves. Each node's curves share one phase φ_e;
/// amplitudes are free per curve (negative amplitudes are folded into φ_e + π).
pub fn fit_parity_scans(scans: &[ParityScan]) -> Result<ParityFit, PhaseFitError> {
    for (i, s) in scans.iter().enumerate() {
        check_scan(i, s)?;
    }
    for node in Node::BOTH {
        if !scans.iter().any(|s| s.node == node) {
            return Err(PhaseFitError::InsufficientScan { index: scans.len(), reason: format!("no scan for {}", node.name()) });
        }
    }
    // seed: circular mean of per-curve estimates, weighted by fringe size
    let mut seed = [0.0; 2];
    for node in Node::BOTH {
        let (mut re, mut im) = (0.0, 0.0);
        for s in scans.iter().filter(|s| s.node == node) {
            let th = fourier_phase(s);
            re += th.cos();
            im += th.sin();
        }
        seed[node_slot(node)] = im.atan2(re);
    }
    let objective = |x: &[f64]| -> f64 { scans.iter().map(|s| profile(s, x[node_slot(s.node)]).1).sum() };
    let min = nelder_mead(objective, &seed, &[0.3, 0.3], 1e-15, 5000);
    if !min.converged {
        return Err(PhaseFitError::NonConvergence(min.iterations));
    }
    let mut phis = [min.x[0], min.x[1]];
    let mut amps: Vec<f64> = scans.iter().map(|s| profile(s, phis[node_slot(s.node)]).0).collect();
    // fold negative fringe amplitudes into the phase of that node
    for node in Node::BOTH {
        let idx: Vec<usize> = (0..scans.len()).filter(|&i| scans[i].node == node).collect();
        let total: f64 = idx.iter().map(|&i| amps[i]).sum();
        if total < 0.0 {
            phis[node_slot(node)] += PI;
            for &i in &idx {
                amps[i] = -amps[i];
            }
        }
    }
    // covariance from the weighted Jacobian over (φ_A, φ_B, A_1..A_n)
    let np = 2 + scans.len();
    let mut jtj = vec![vec![0.0; np]; np];
    for (ci, s) in scans.iter().enumerate() {
        let slot = node_slot(s.node);
        for p in &s.points {
            let w = 1.0 / (p.err * p.err);
            let arg = p.phase_rad + phis[slot] + s.basis.offset();
            let mut g = vec![0.0; np];
            g[slot] = -amps[ci] * arg.sin();
            g[2 + ci] = arg.cos();
            for a in 0..np {
                for b in 0..np {
                    jtj[a][b] += w * g[a] * g[b];
                }
            }
        }
    }
    let cov = invert(&jtj).ok_or(PhaseFitError::SingularCovariance)?;
    let n_points: usize = scans.iter().map(|s| s.points.len()).sum();
    Ok(ParityFit {
        phi_e_a: wrap_pi(phis[0]),
        phi_e_b: wrap_pi(phis[1]),
        se_a: cov[0][0].sqrt(),
        se_b: cov[1][1].sqrt(),
        visibilities: amps,
        visibility_se: (0..scans.len()).map(|i| cov[2 + i][2 + i].sqrt()).collect(),
        chi2: min.f,
        dof: n_points.saturating_sub(np),
        iterations: min.iterations,
    })
}

/// Synthetic parity scans for the four curves (A-D, A-R, B-D, B-R) with the
/// phases φ_e of both nodes at detector path zH and time `t`.
pub fn simulate_parity_scans<R: Rng + ?Sized>(
    p: &PhaseParams,
    t: f64,
    tau: f64,
    visibility: f64,
    points: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Vec<ParityScan> {
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let mut scans = Vec::new();
    for node in Node::BOTH {
        let phi0 = phi_e(node, p.z_h, t, tau, p);
        for basis in [ScanBasis::D, ScanBasis::R] {
            let pts = (0..points)
                .map(|k| {
                    let ph = 2.0 * PI * k as f64 / points as f64;
                    let clean = visibility * (ph + phi0 + basis.offset()).cos();
                    let parity = if noise_sigma > 0.0 { clean + noise.sample(rng) } else { clean };
                    ParityPoint { phase_rad: ph, parity, err: noise_sigma.max(1e-3) }
                })
                .collect();
            scans.push(ParityScan { node, basis, points: pts });
        }
    }
    scans
}

pub fn write_scan_csv<W: Write>(out: W, scan: &ParityScan, metadata: &[(String, String)]) -> Result<(), PhaseFitError> {
    let mut out = out;
    let io = |e: std::io::Error| PhaseFitError::Csv(e.to_string());
    writeln!(out, "# node={} basis={:?}", scan.node.name(), scan.basis).map_err(io)?;
    for (k, v) in metadata {
        writeln!(out, "# {k}={v}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    for p in &scan.points {
        w.serialize(p).map_err(|e| PhaseFitError::Csv(e.to_string()))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a scan; node and basis come from the `# node=... basis=...` header line.
pub fn read_scan_csv<R: Read>(input: R) -> Result<ParityScan, PhaseFitError> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text).map_err(|e| PhaseFitError::Csv(e.to_string()))?;
    let mut node = None;
    let mut basis = None;
    for line in text.lines().filter(|l| l.starts_with('#')) {
        for tok in line.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("node", "alice")) => node = Some(Node::Alice),
                Some(("node", "bob")) => node = Some(Node::Bob),
                Some(("basis", "D")) => basis = Some(ScanBasis::D),
                Some(("basis", "R")) => basis = Some(ScanBasis::R),
                _ => {}
            }
        }
    }
    let node = node.ok_or_else(|| PhaseFitError::Csv("missing '# node=' header".into()))?;
    let basis = basis.ok_or_else(|| PhaseFitError::Csv("missing '# basis=' header".into()))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let points = rdr
        .deserialize()
        .collect::<Result<Vec<ParityPoint>, _>>()
        .map_err(|e| PhaseFitError::Csv(e.to_string()))?;
    Ok(ParityScan { node, basis, points })
}

pub fn read_scan_file(path: &Path) -> Result<ParityScan, PhaseFitError> {
    let f = std::fs::File::open(path).map_err(|e| PhaseFitError::Csv(format!("{}: {e}", path.display())))?;
    read_scan_csv(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params<R: Rng>(rng: &mut R) -> PhaseParams {
        let mut u = |s: f64| (rng.random::<f64>() - 0.5) * 2.0 * s;
        PhaseParams {
            delta_omega_10: u(1e-3),
            delta_omega_e0: u(1e-3),
            delta_omega_updown: u(1e-3),
            omega_10_mean: u(0.1),
            omega_12_a: u(0.1),
            omega_12_b: u(0.1),
            kbar_10: u(1.0),
            delta_k_0: u(1e-3),
            delta_k_1: u(1e-3),
            z0_a: u(700.0),
            z0_b: u(700.0),
            z_h: u(3.0),
            z_v: u(3.0),
            phi_bs_h: u(PI),
            phi_bs_v: u(PI),
            phi_misc: u(PI),
            light_speed: 0.2,
        }
    }

    #[test]
    fn all_zero_phase_is_zero() {
        let p = PhaseParams::default();
        assert_eq!(phi_E(10.0, 7.0, 3.0, &p), 0.0);
        assert_eq!(phi_M(7.0, 7.0, Node::Alice, &p), 0.0);
        assert!((phi_e(Node::Alice, 0.0, 0.0, 0.0, &p) - PI).abs() < 1e-15);
        assert_eq!(delta_phi(5.0, 1.0, &p), 0.0);
    }

    #[test]
    fn splitter_phases_enter_directly() {
        let p = PhaseParams { phi_bs_h: PI / 3.0, phi_bs_v: PI / 6.0, ..Default::default() };
        assert!((phi_E(0.0, 0.0, 0.0, &p) - PI / 6.0).abs() < 1e-15);
        let b = phi_e(Node::Bob, 0.0, 0.0, 0.0, &p) - phi_e(Node::Alice, 0.0, 0.0, 0.0, &p);
        assert!((b - (PI / 6.0 - PI / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn frequency_mismatch_term_is_negligible() {
        let p = PhaseParams { delta_omega_e0: 2.0 * PI * 2e-7, ..Default::default() };
        let term = -phi_E(0.0, 0.0, 45.0, &p);
        assert!((term - 2.0 * PI * 9e-6).abs() < 1e-15);
    }

    #[test]
    fn merge_phase_arithmetic() {
        let w = 2.0 * PI * 1e-3; // 1 MHz
        let p = PhaseParams { omega_12_a: w, ..Default::default() };
        assert!((phi_M(1007.0, 7.0, Node::Alice, &p) - w * 1000.0).abs() < 1e-12);
        let q = PhaseParams { omega_12_a: w, z_h: 1.0, z0_a: 4.0, ..Default::default() };
        assert!((phi_M(7.0, 7.0, Node::Alice, &q) - w / 0.2 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn memory_phase_examples() {
        let p = PhaseParams { kbar_10: 2.0 * PI / 43.0, z0_a: 1.0, ..Default::default() };
        assert!((delta_phi(0.0, 0.0, &p) + 2.0 * PI / 43.0).abs() < 1e-15);
        let q = PhaseParams { delta_omega_updown: 2.0 * PI * 2e-7, ..Default::default() };
        assert!((delta_phi(1e6, 0.0, &q) - 0.4 * PI).abs() < 1e-12);
    }

    #[test]
    fn residual_identity_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = random_params(&mut rng);
            let t = rng.random::<f64>() * 1e5;
            let tau = 7.0;
            let dtau = (rng.random::<f64>() - 0.5) * 90.0;
            let lhs = calibration_residual(t, tau, dtau, &p);
            let rhs = calibration_residual_closed_form(dtau, &p);
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} {rhs}");
        }
        let p = PhaseParams { z_h: 2.0, z_v: 2.0, delta_k_0: 0.3, ..random_params(&mut rng) };
        assert!(calibration_residual_closed_form(0.0, &p).abs() < 1e-15);
    }

    #[test]
    fn exchange_negates_up_to_splitter_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_params(&mut rng);
            let bs = p.phi_bs_h - p.phi_bs_v;
            let a = phi_E(3e3, 7.0, 4.0, &p) - bs;
            let b = phi_E(3e3, 7.0, 4.0, &p.swapped()) - bs;
            assert!((a + b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn phases_are_linear_in_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng);
        let (t, tau, dtau) = (1234.0, 7.0, 5.0);
        let h = 1e-3;
        let slope = |f: &dyn Fn(&mut PhaseParams, f64)| {
            let mut a = p;
            let mut b = p;
            f(&mut a, h);
            f(&mut b, -h);
            (phi_E(t, tau, dtau, &a) - phi_E(t, tau, dtau, &b)) / (2.0 * h)
        };
        assert!((slope(&|q, d| q.delta_omega_10 += d) + (t - tau)).abs() < 1e-6);
        assert!((slope(&|q, d| q.delta_omega_e0 += d) + dtau).abs() < 1e-6);
        assert!((slope(&|q, d| q.phi_bs_h += d) - 1.0).abs() < 1e-9);
        assert!((slope(&|q, d| q.z0_a += d) - p.k_10(Node::Alice)).abs() < 1e-6);
        let z = slope(&|q, d| q.delta_k_0 += d);
        assert!((z - (-p.z_v - 0.5 * (p.z0_a + p.z0_b))).abs() < 1e-6);
    }

    #[test]
    fn noiseless_fringes_are_recovered() {
        let p = PhaseParams { omega_10_mean: 0.03, kbar_10: 2.0 * PI / 43.0, z0_a: 601.3, z0_b: 599.1, z_h: 1.0, phi_bs_v: 0.4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scans = simulate_parity_scans(&p, 1000.0, 7.0, 0.9, 20, 0.0, &mut rng);
        let fit = fit_parity_scans(&scans).unwrap();
        let ea = phi_e(Node::Alice, p.z_h, 1000.0, 7.0, &p);
        let eb = phi_e(Node::Bob, p.z_h, 1000.0, 7.0, &p);
        assert!(wrap_pi(fit.phi_e_a - ea).abs() < 1e-6, "{} {}", fit.phi_e_a, wrap_pi(ea));
        assert!(wrap_pi(fit.phi_e_b - eb).abs() < 1e-6);
        for v in &fit.visibilities {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_fringes_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut misses = 0;
        for trial in 0..50 {
            let p = PhaseParams { omega_10_mean: 0.01 * trial as f64, z_h: 1.0, phi_bs_v: 0.1, ..Default::default() };
            let scans = simulate_parity_scans(&p, 500.0, 7.0, 0.85, 20, 0.05, &mut rng);
            let fit = fit_parity_scans(&scans).unwrap();
            let ea = phi_e(Node::Alice, p.z_h, 500.0, 7.0, &p);
            if wrap_pi(fit.phi_e_a - ea).abs() > 3.0 * fit.se_a {
                misses += 1;
            }
        }
        assert!(misses <= 2, "{misses} of 50 outside 3 sigma");
    }

    #[test]
    fn zero_visibility_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scans = simulate_parity_scans(&PhaseParams::default(), 0.0, 0.0, 0.0, 12, 0.0, &mut rng);
        assert_eq!(fit_parity_scans(&scans).unwrap_err(), PhaseFitError::DegenerateScan(0));
    }

    #[test]
    fn short_scans_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut scans = simulate_parity_scans(&PhaseParams::default(), 0.0, 0.0, 0.9, 5, 0.0, &mut rng);
        assert!(matches!(fit_parity_scans(&scans), Err(PhaseFitError::InsufficientScan { .. })));
        scans = simulate_parity_scans(&PhaseParams::default(), 0.0, 0.0, 0.9, 12, 0.0, &mut rng);
        for s in &mut scans {
            for p in &mut s.points {
                p.phase_rad *= 0.5;
            }
        }
        assert!(matches!(fit_parity_scans(&scans), Err(PhaseFitError::InsufficientScan { .. })));
    }

    #[test]
    fn scan_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scans = simulate_parity_scans(&PhaseParams::default(), 0.0, 0.0, 0.9, 8, 0.02, &mut rng);
        let mut buf = Vec::new();
        write_scan_csv(&mut buf, &scans[3], &[("seed".into(), "8".into())]).unwrap();
        let back = read_scan_csv(buf.as_slice()).unwrap();
        assert_eq!(back, scans[3]);
    }
}
