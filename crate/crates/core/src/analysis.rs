//! Post-processing of measurement records: correlations, Bell fidelity,
//! two-qubit tomography, coherence fits, the error budget and the
//! rate/enhancement table.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstate::{cr, hermitian_part, CMatrix, DensityMatrix, Pauli, PauliLabel};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no records in basis {0}")]
    EmptyBasis(String),
    #[error("tomography needs basis {0}")]
    MissingBasis(String),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("delay values must be strictly increasing")]
    UnorderedDelays,
    #[error("coherence fit did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("fit prefers a negative coherence time ({0} ms)")]
    NegativeT2(f64),
    #[error("campaigns differ in more than modes_per_round: {0}")]
    InconsistentConfigs(String),
    #[error("no single-mode campaign to normalize against")]
    MissingReference,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One two-qubit measurement shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub basis: PauliLabel,
    pub outcome_a: i8,
    pub outcome_b: i8,
    pub block: u32,
    pub round: u16,
    pub mode: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub basis: PauliLabel,
    pub n: u64,
    pub mean: f64,
    pub stderr: f64,
}

/// Mean of the outcome products per basis, with the binomial standard error.
pub fn correlations(records: &[MeasurementRecord], bases: &[PauliLabel]) -> Result<Vec<Correlation>, AnalysisError> {
    let mut out = Vec::with_capacity(bases.len());
    for b in bases {
        let (mut n, mut plus) = (0u64, 0u64);
        for r in records.iter().filter(|r| &r.basis == b) {
            n += 1;
            if r.outcome_a * r.outcome_b > 0 {
                plus += 1;
            }
        }
        if n == 0 {
            return Err(AnalysisError::EmptyBasis(b.to_string()));
        }
        let p = plus as f64 / n as f64;
        out.push(Correlation { basis: b.clone(), n, mean: 2.0 * p - 1.0, stderr: 2.0 * (p * (1.0 - p) / n as f64).sqrt() });
    }
    Ok(out)
}

pub fn bell_bases() -> [PauliLabel; 3] {
    [PauliLabel::two(Pauli::X, Pauli::X), PauliLabel::two(Pauli::Y, Pauli::Y), PauliLabel::two(Pauli::Z, Pauli::Z)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellFidelity {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub fidelity: f64,
    pub stderr: f64,
}

/// ¼(1 + XX + YY − ZZ) with errors propagated from the three correlators.
pub fn bell_fidelity(records: &[MeasurementRecord]) -> Result<BellFidelity, AnalysisError> {
    let c = correlations(records, &bell_bases())?;
    let fidelity = 0.25 * (1.0 + c[0].mean + c[1].mean - c[2].mean);
    let stderr = 0.25 * c.iter().map(|x| x.stderr * x.stderr).sum::<f64>().sqrt();
    Ok(BellFidelity { xx: c[0].mean, yy: c[1].mean, zz: c[2].mean, fidelity, stderr })
}

/// ¼(1 + XX − YY + ZZ), the overlap with Φ⁺, with the same error propagation.
pub fn phi_plus_fidelity(records: &[MeasurementRecord]) -> Result<BellFidelity, AnalysisError> {
    let c = correlations(records, &bell_bases())?;
    let fidelity = 0.25 * (1.0 + c[0].mean - c[1].mean + c[2].mean);
    let stderr = 0.25 * c.iter().map(|x| x.stderr * x.stderr).sum::<f64>().sqrt();
    Ok(BellFidelity { xx: c[0].mean, yy: c[1].mean, zz: c[2].mean, fidelity, stderr })
}

/// Linear-inversion density matrix from Pauli expectations (labels without
/// an entry count as zero; II is fixed to 1).
pub fn state_from_expectations(exp: &BTreeMap<PauliLabel, f64>) -> DensityMatrix {
    let mut m = CMatrix::identity(4, 4) * cr(0.25);
    for (label, v) in exp {
        if label.0.iter().all(|p| *p == Pauli::I) {
            continue;
        }
        m += label.matrix() * cr(v / 4.0);
    }
    project_physical(&m)
}

/// Nearest-spectrum projection onto the density matrices: negative
/// eigenvalues are clipped to zero and the rest rescaled to unit trace.
pub fn project_physical(m: &CMatrix) -> DensityMatrix {
    let h = hermitian_part(m);
    let eig = h.clone().symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let n = vals.len();
    if total <= 0.0 {
        return DensityMatrix::maximally_mixed(n);
    }
    for v in vals.iter_mut() {
        *v /= total;
    }
    let mut out = CMatrix::zeros(n, n);
    for (i, v) in vals.iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        out += (col * col.adjoint()) * cr(*v);
    }
    DensityMatrix::from_matrix_unchecked(hermitian_part(&out))
}

/// Estimates all fifteen Pauli expectations from the nine local-basis settings.
/// Single-qubit terms are averaged over the three settings sharing that axis.
pub fn pauli_expectations(records: &[MeasurementRecord]) -> Result<BTreeMap<PauliLabel, f64>, AnalysisError> {
    let mut sums: BTreeMap<PauliLabel, (f64, f64)> = BTreeMap::new();
    let mut seen: BTreeMap<PauliLabel, u64> = BTreeMap::new();
    for r in records {
        *seen.entry(r.basis.clone()).or_default() += 1;
        let (a, b) = (r.basis.0[0], r.basis.0[1]);
        let (oa, ob) = (r.outcome_a as f64, r.outcome_b as f64);
        for (label, v) in [(PauliLabel::two(a, b), oa * ob), (PauliLabel::two(a, Pauli::I), oa), (PauliLabel::two(Pauli::I, b), ob)] {
            let e = sums.entry(label).or_default();
            e.0 += v;
            e.1 += 1.0;
        }
    }
    for b in PauliLabel::all_two_qubit() {
        if !seen.contains_key(&b) {
            return Err(AnalysisError::MissingBasis(b.to_string()));
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n)).collect())
}

/// Two-qubit state tomography by linear inversion and spectral projection.
pub fn tomography(records: &[MeasurementRecord]) -> Result<DensityMatrix, AnalysisError> {
    Ok(state_from_expectations(&pauli_expectations(records)?))
}

/// Off-diagonal visibility left by thermal motion, V = 1 − π²η⁴(n̄² + n̄), clipped to [0, 1].
pub fn heating_visibility(lamb_dicke: f64, nbar: f64) -> f64 {
    let eta4 = lamb_dicke.powi(4);
    (1.0 - std::f64::consts::PI.powi(2) * eta4 * (nbar * nbar + nbar)).clamp(0.0, 1.0)
}

/// Infidelity per unit of residual |2_C⟩ population after the merge.
pub const MERGE_INFIDELITY_PER_RESIDUAL: f64 = 0.41 / 0.55;

/// Residual population (0.54σ)²/2 and its infidelity.
pub fn merge_jitter_residual(sigma_phi: f64) -> (f64, f64) {
    let r = (0.54 * sigma_phi).powi(2) / 2.0;
    (r, r * MERGE_INFIDELITY_PER_RESIDUAL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoherenceModel {
    #[serde(rename = "exponential")]
    Exponential,
    #[serde(rename = "gaussian")]
    Gaussian,
}

impl CoherenceModel {
    fn power(self) -> i32 {
        match self {
            CoherenceModel::Exponential => 1,
            CoherenceModel::Gaussian => 2,
        }
    }

    /// F(τ) = 0.5 + 0.5·exp(−(τ/T₂)^p).
    pub fn eval(self, tau: f64, t2: f64) -> f64 {
        0.5 + 0.5 * (-(tau / t2).powi(self.power())).exp()
    }

    pub fn name(self) -> &'static str {
        match self {
            CoherenceModel::Exponential => "exponential",
            CoherenceModel::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherencePoint {
    pub tau_ms: f64,
    pub fidelity: f64,
    pub err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceFit {
    pub model: CoherenceModel,
    /// `None` when the data show no decay.
    pub t2_ms: Option<f64>,
    pub stderr_ms: Option<f64>,
    pub chi2: f64,
    pub iterations: usize,
}

/// Weighted least squares for T₂. The fit runs in the decay rate
/// u = T₂^(−p), which is linear near zero decay; u ≤ 0 within two standard
/// errors is reported as unbounded, clearly negative u is rejected.
pub fn fit_coherence(data: &[CoherencePoint], model: CoherenceModel) -> Result<CoherenceFit, AnalysisError> {
    if data.len() < 4 {
        return Err(AnalysisError::TooFewPoints { need: 4, got: data.len() });
    }
    if data.windows(2).any(|w| !(w[1].tau_ms > w[0].tau_ms)) {
        return Err(AnalysisError::UnorderedDelays);
    }
    let p = model.power();
    let g: Vec<f64> = data.iter().map(|d| d.tau_ms.powi(p)).collect();
    let w: Vec<f64> = data.iter().map(|d| if d.err > 0.0 { 1.0 / (d.err * d.err) } else { 1.0 }).collect();
    let chi2 = |u: f64| -> f64 { data.iter().zip(&g).zip(&w).map(|((d, g), w)| (d.fidelity - 0.5 - 0.5 * (-u * g).exp()).powi(2) * w).sum() };

    // seed from the log-linear form
    let (mut num, mut den) = (0.0, 0.0);
    for ((d, g), w) in data.iter().zip(&g).zip(&w) {
        let c = 2.0 * d.fidelity - 1.0;
        if c > 0.0 && c < 1.0 {
            num += w * g * (-c.ln());
            den += w * g * g;
        }
    }
    let mut u = if den > 0.0 { num / den } else { 0.0 };
    let max_iter = 200;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iter {
        iterations = it;
        let (mut jtj, mut jtr) = (0.0, 0.0);
        for ((d, g), w) in data.iter().zip(&g).zip(&w) {
            let e = (-u * g).exp();
            let r = d.fidelity - 0.5 - 0.5 * e;
            let j = -0.5 * g * e;
            jtj += w * j * j;
            jtr += w * j * r;
        }
        if jtj <= 0.0 {
            break;
        }
        let mut step = jtr / jtj;
        let base = chi2(u);
        // backtrack until χ² does not grow
        let mut tries = 0;
        while chi2(u + step) > base && tries < 40 {
            step *= 0.5;
            tries += 1;
        }
        u += step;
        if step.abs() <= 1e-12 * u.abs().max(1e-300) || step.abs() < 1e-300 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(AnalysisError::NonConvergence(iterations));
    }
    let info: f64 = data.iter().zip(&g).zip(&w).map(|((_, g), w)| {
        let j = -0.5 * g * (-u * g).exp();
        w * j * j
    }).sum();
    let se_u = if info > 0.0 { info.recip().sqrt() } else { f64::INFINITY };
    let chi = chi2(u);
    if u <= 0.0 {
        if u + 2.0 * se_u >= 0.0 {
            return Ok(CoherenceFit { model, t2_ms: None, stderr_ms: None, chi2: chi, iterations });
        }
        let t2 = -(-u).powf(-1.0 / p as f64);
        return Err(AnalysisError::NegativeT2(t2));
    }
    let t2 = u.powf(-1.0 / p as f64);
    // dT₂/du = −(1/p)·u^(−1/p − 1)
    let se = se_u * u.powf(-1.0 / p as f64 - 1.0) / p as f64;
    Ok(CoherenceFit { model, t2_ms: Some(t2), stderr_ms: Some(se), chi2: chi, iterations })
}

/// Synthetic spin-echo fidelities with Gaussian noise `sigma`.
pub fn simulate_coherence<R: Rng + ?Sized>(t2_ms: f64, taus: &[f64], sigma: f64, model: CoherenceModel, rng: &mut R) -> Vec<CoherencePoint> {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    taus.iter()
        .map(|&tau| {
            let f = model.eval(tau, t2_ms) + if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            CoherencePoint { tau_ms: tau, fidelity: f, err: if sigma > 0.0 { sigma } else { 0.0 } }
        })
        .collect()
}

/// Inputs of the ion-ion error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBudgetParams {
    /// Raman scattering probability per π-pulse (two pulses per node).
    pub p_sc: f64,
    /// Merge-pulse phase jitter, rad.
    pub sigma_phi: f64,
    pub lamb_dicke: f64,
    /// Mean phonon number at readout.
    pub nbar: f64,
    pub laser_coherence_ms: f64,
    /// Time the two qubits spend referenced to the excitation laser, ms.
    pub laser_exposure_ms: f64,
    pub dephasing: f64,
    pub polarization_mixing: f64,
    pub dark_count: f64,
    pub mode_mismatch: f64,
    pub misc: f64,
}

impl ErrorBudgetParams {
    pub fn zero() -> Self {
        Self {
            p_sc: 0.0,
            sigma_phi: 0.0,
            lamb_dicke: 0.0,
            nbar: 0.0,
            laser_coherence_ms: 5.0,
            laser_exposure_ms: 0.0,
            dephasing: 0.0,
            polarization_mixing: 0.0,
            dark_count: 0.0,
            mode_mismatch: 0.0,
            misc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("p_sc", self.p_sc),
            ("sigma_phi", self.sigma_phi),
            ("lamb_dicke", self.lamb_dicke),
            ("nbar", self.nbar),
            ("laser_exposure_ms", self.laser_exposure_ms),
            ("dephasing", self.dephasing),
            ("polarization_mixing", self.polarization_mixing),
            ("dark_count", self.dark_count),
            ("mode_mismatch", self.mode_mismatch),
            ("misc", self.misc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.laser_coherence_ms > 0.0) {
            return Err("laser_coherence_ms must be positive".into());
        }
        for (name, v) in [("p_sc", self.p_sc), ("dephasing", self.dephasing), ("polarization_mixing", self.polarization_mixing), ("dark_count", self.dark_count), ("mode_mismatch", self.mode_mismatch), ("misc", self.misc)] {
            if v > 0.05 {
                return Err(format!("{name} = {v} exceeds 0.05"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "20m")]
    Short,
    #[serde(rename = "1.2km")]
    Long,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Short => "20m",
            Scenario::Long => "1.2km",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "20m" => Some(Scenario::Short),
            "1.2km" => Some(Scenario::Long),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub name: String,
    /// Infidelity as a fraction.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Scenario or preset name.
    pub label: String,
    pub rows: Vec<BudgetRow>,
    pub total: f64,
}

/// Bell-state infidelity of four Raman π-pulses, each depolarizing with `p_sc`.
pub fn raman_infidelity(p_sc: f64) -> f64 {
    0.75 * (1.0 - (1.0 - p_sc).powi(4))
}

pub fn heating_infidelity(lamb_dicke: f64, nbar: f64) -> f64 {
    let v = heating_visibility(lamb_dicke, nbar);
    (1.0 - v * v) / 2.0
}

pub fn laser_infidelity(exposure_ms: f64, coherence_ms: f64) -> f64 {
    (1.0 - (-exposure_ms / coherence_ms).exp()) / 2.0
}

pub const BUDGET_ROWS: [&str; 9] = [
    "raman_scattering",
    "merge_jitter",
    "heating",
    "laser_coherence",
    "ion_dephasing",
    "polarization_mixing",
    "dark_counts",
    "mode_mismatch",
    "misc",
];

/// Ion-ion error budget; the total is the row sum.
pub fn error_budget(params: &ErrorBudgetParams, label: &str) -> ErrorBudget {
    let values = [
        raman_infidelity(params.p_sc),
        merge_jitter_residual(params.sigma_phi).1,
        heating_infidelity(params.lamb_dicke, params.nbar),
        laser_infidelity(params.laser_exposure_ms, params.laser_coherence_ms),
        params.dephasing,
        params.polarization_mixing,
        params.dark_count,
        params.mode_mismatch,
        params.misc,
    ];
    let rows: Vec<BudgetRow> = BUDGET_ROWS.iter().zip(values).map(|(n, v)| BudgetRow { name: n.to_string(), value: v }).collect();
    let total = rows.iter().map(|r| r.value).sum();
    ErrorBudget { label: label.to_string(), rows, total }
}

/// Inverse of [`raman_infidelity`].
pub fn p_sc_for_infidelity(eps: f64) -> f64 {
    1.0 - (1.0 - eps / 0.75).powf(0.25)
}

/// Inverse of the merge row: σ with (0.54σ)²/2 · 0.41/0.55 = eps.
pub fn sigma_phi_for_infidelity(eps: f64) -> f64 {
    (2.0 * eps / MERGE_INFIDELITY_PER_RESIDUAL).sqrt() / 0.54
}

/// Inverse of [`heating_infidelity`] in n̄.
pub fn nbar_for_infidelity(lamb_dicke: f64, eps: f64) -> f64 {
    let v = (1.0 - 2.0 * eps).sqrt();
    let c = (1.0 - v) / (std::f64::consts::PI.powi(2) * lamb_dicke.powi(4));
    (-1.0 + (1.0 + 4.0 * c).sqrt()) / 2.0
}

/// Inverse of [`laser_infidelity`] in the exposure time.
pub fn exposure_for_infidelity(eps: f64, coherence_ms: f64) -> f64 {
    -coherence_ms * (1.0 - 2.0 * eps).ln()
}

/// Per-campaign input of the rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSample {
    /// Digest of the configuration with `modes_per_round` removed.
    pub config_key: String,
    pub modes: u32,
    pub successes: u64,
    pub rounds: u64,
    pub sim_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub modes: u32,
    /// Successes per simulated second.
    pub rate_hz: f64,
    /// Successes per round, relative to the single-mode campaign.
    pub enhancement: f64,
    pub stderr: f64,
    pub analytic: Option<f64>,
}

/// Rate and per-round enhancement per campaign. `analytic` maps N to the
/// closed-form enhancement, emitted alongside when given.
pub fn rate_and_enhancement_report(samples: &[RateSample], analytic: impl Fn(u32) -> Option<f64>) -> Result<Vec<RateRow>, AnalysisError> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    if let Some(bad) = samples.iter().find(|s| s.config_key != first.config_key) {
        return Err(AnalysisError::InconsistentConfigs(format!("{} vs {}", first.config_key, bad.config_key)));
    }
    let reference = samples.iter().find(|s| s.modes == 1).ok_or(AnalysisError::MissingReference)?;
    let per_round = |s: &RateSample| if s.rounds > 0 { s.successes as f64 / s.rounds as f64 } else { 0.0 };
    let r1 = per_round(reference);
    let mut rows: Vec<RateRow> = samples
        .iter()
        .map(|s| {
            let rate = if s.sim_time_s > 0.0 { s.successes as f64 / s.sim_time_s } else { 0.0 };
            let (e, se) = if std::ptr::eq(s, reference) {
                (1.0, 0.0)
            } else if r1 > 0.0 && s.successes > 0 {
                let e = per_round(s) / r1;
                (e, e * (1.0 / s.successes as f64 + 1.0 / reference.successes as f64).sqrt())
            } else {
                (f64::NAN, f64::NAN)
            };
            RateRow { modes: s.modes, rate_hz: rate, enhancement: e, stderr: se, analytic: analytic(s.modes) }
        })
        .collect();
    rows.sort_by_key(|r| r.modes);
    Ok(rows)
}

/// Writes `# key=value` metadata lines followed by a CSV table.
pub fn write_csv_with_metadata<W: Write, S: Serialize>(mut out: W, metadata: &[(String, String)], rows: &[S]) -> Result<(), AnalysisError> {
    for (k, v) in metadata {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV table, skipping `#` metadata lines.
pub fn read_csv_rows<S: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<S>, AnalysisError> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
