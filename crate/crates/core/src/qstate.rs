//! Dense complex linear algebra for the small Hilbert spaces used here
//! (qubits, qutrits and their pairwise products, never above dimension 9).
//!
//! Basis ordering: index 0 is |↑_M⟩ (memory) or |H⟩ (photon), index 1 is
//! |↓_M⟩ or |V⟩. For the communication qutrit the indices are |0_C⟩, |1_C⟩,
//! |2_C⟩. Composite indices are row-major: `i_a * dim_b + i_b`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use nalgebra::Complex;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Tolerance for algebraic identities (hermiticity, trace, norms).
pub const ALGEBRAIC_TOL: f64 = 1e-12;
/// Tolerance for spectral quantities (eigenvalues, unitarity).
pub const SPECTRAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QStateError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("trace is {0}, expected 1")]
    BadTrace(f64),
    #[error("negative eigenvalue {0:.3e}")]
    NotPositive(f64),
    #[error("state norm is {0}, expected 1")]
    NotNormalized(f64),
    #[error("operator is not unitary (deviation {0:.3e})")]
    NonUnitary(f64),
    #[error("correlation {name}={value} outside [-1, 1]")]
    CorrelationOutOfRange { name: &'static str, value: f64 },
    #[error("invalid Pauli label {0:?}")]
    BadLabel(String),
    #[error("Kraus operators are not trace preserving (deviation {0:.3e})")]
    NotTracePreserving(f64),
}

pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    Complex::new(re, 0.0)
}

/// e^{iφ}
pub fn phase(phi: f64) -> C64 {
    Complex::from_polar(1.0, phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amps: CVector,
}

impl PureState {
    pub fn new(amps: CVector) -> Result<Self, QStateError> {
        let n = amps.norm_squared();
        if (n - 1.0).abs() > ALGEBRAIC_TOL {
            return Err(QStateError::NotNormalized(n));
        }
        Ok(Self { amps })
    }

    pub fn from_slice(amps: &[C64]) -> Result<Self, QStateError> {
        Self::new(CVector::from_column_slice(amps))
    }

    /// Normalizes a nonzero vector.
    pub fn normalized(amps: CVector) -> Self {
        let n = amps.norm();
        assert!(n > 0.0, "cannot normalize the zero vector");
        Self { amps: amps / cr(n) }
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = CVector::zeros(dim);
        v[i] = cr(1.0);
        Self { amps: v }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amps
    }

    pub fn amp(&self, i: usize) -> C64 {
        self.amps[i]
    }

    pub fn tensor(&self, other: &PureState) -> PureState {
        PureState { amps: kron_vec(&self.amps, &other.amps) }
    }

    pub fn inner(&self, other: &PureState) -> Result<C64, QStateError> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.amps.dotc(&other.amps))
    }

    /// Reorders tensor factors: output factor `j` is input factor `perm[j]`.
    pub fn permute(&self, dims: &[usize], perm: &[usize]) -> PureState {
        let n: usize = dims.iter().product();
        assert_eq!(n, self.dim());
        let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let mut out = CVector::zeros(n);
        for idx in 0..n {
            let digits = unravel(idx, dims);
            let new_digits: Vec<usize> = perm.iter().map(|&p| digits[p]).collect();
            out[ravel(&new_digits, &new_dims)] = self.amps[idx];
        }
        PureState { amps: out }
    }
}

/// |Ψ⁺⟩ = (|01⟩ + |10⟩)/√2
pub fn psi_plus() -> PureState {
    bell(0.0, true)
}

/// |Ψ⁻⟩ = (|01⟩ − |10⟩)/√2
pub fn psi_minus() -> PureState {
    bell(std::f64::consts::PI, true)
}

/// |Φ⁺⟩ = (|00⟩ + |11⟩)/√2
pub fn phi_plus() -> PureState {
    bell(0.0, false)
}

/// |Φ⁻⟩ = (|00⟩ − |11⟩)/√2
pub fn phi_minus() -> PureState {
    bell(std::f64::consts::PI, false)
}

fn bell(rel_phase: f64, odd: bool) -> PureState {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut v = CVector::zeros(4);
    if odd {
        v[1] = cr(s);
        v[2] = phase(rel_phase) * s;
    } else {
        v[0] = cr(s);
        v[3] = phase(rel_phase) * s;
    }
    PureState { amps: v }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: CMatrix,
}

impl DensityMatrix {
    /// Validates hermiticity, unit trace and positivity.
    pub fn new(m: CMatrix) -> Result<Self, QStateError> {
        let rho = Self { m };
        rho.validate()?;
        Ok(rho)
    }

    /// Wraps a matrix without checks. Callers own the invariants.
    pub fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self { m }
    }

    pub fn from_pure(psi: &PureState) -> Self {
        let a = psi.amplitudes();
        Self { m: a * a.adjoint() }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self { m: CMatrix::identity(dim, dim) * cr(1.0 / dim as f64) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.m[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.m - self.m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = hermitian_part(&self.m);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn validate(&self) -> Result<(), QStateError> {
        if !self.m.is_square() {
            return Err(QStateError::DimensionMismatch { expected: self.m.nrows(), got: self.m.ncols() });
        }
        let herm = self.hermiticity_error();
        if herm > ALGEBRAIC_TOL {
            return Err(QStateError::NotHermitian(herm));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > ALGEBRAIC_TOL {
            return Err(QStateError::BadTrace(tr));
        }
        let min = self.eigenvalues()[0];
        if min < -SPECTRAL_TOL {
            return Err(QStateError::NotPositive(min));
        }
        Ok(())
    }

    /// Divides by the trace. Panics on a vanishing trace.
    pub fn normalize(&mut self) {
        let tr = self.trace();
        assert!(tr > 0.0, "cannot normalize a traceless operator");
        self.m /= cr(tr);
        self.m = hermitian_part(&self.m);
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    pub fn purity(&self) -> f64 {
        (&self.m * &self.m).trace().re
    }

    /// Traces out every factor not listed in `keep` (kept in ascending order).
    pub fn partial_trace(&self, dims: &[usize], keep: &[usize]) -> DensityMatrix {
        let n: usize = dims.iter().product();
        assert_eq!(n, self.dim());
        let kept_dims: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
        let nk: usize = kept_dims.iter().product();
        let mut out = CMatrix::zeros(nk, nk);
        for i in 0..n {
            let di = unravel(i, dims);
            for j in 0..n {
                let dj = unravel(j, dims);
                let traced_equal = (0..dims.len()).filter(|k| !keep.contains(k)).all(|k| di[k] == dj[k]);
                if !traced_equal {
                    continue;
                }
                let ki: Vec<usize> = keep.iter().map(|&k| di[k]).collect();
                let kj: Vec<usize> = keep.iter().map(|&k| dj[k]).collect();
                out[(ravel(&ki, &kept_dims), ravel(&kj, &kept_dims))] += self.m[(i, j)];
            }
        }
        DensityMatrix { m: out }
    }
}

impl fmt::Display for DensityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.dim() {
            let row: Vec<String> = (0..self.dim())
                .map(|j| {
                    let z = self.m[(i, j)];
                    format!("{:+.4}{:+.4}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// Density matrix of a composite system with named factor dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub rho: DensityMatrix,
    pub dims: Vec<usize>,
}

impl JointState {
    pub fn new(rho: DensityMatrix, dims: Vec<usize>) -> Result<Self, QStateError> {
        check_dim(dims.iter().product(), rho.dim())?;
        Ok(Self { rho, dims })
    }

    pub fn from_pure(psi: &PureState, dims: Vec<usize>) -> Result<Self, QStateError> {
        Self::new(DensityMatrix::from_pure(psi), dims)
    }

    pub fn apply_local(&self, site: usize, kraus: &[CMatrix]) -> Result<JointState, QStateError> {
        let (rho, dims) = apply_local_channel(&self.rho, &self.dims, site, kraus)?;
        Ok(JointState { rho, dims })
    }

    pub fn reduced(&self, keep: &[usize]) -> DensityMatrix {
        self.rho.partial_trace(&self.dims, keep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> CMatrix {
        let z = cr(0.0);
        let o = cr(1.0);
        let i = c(0.0, 1.0);
        match self {
            Pauli::I => CMatrix::from_row_slice(2, 2, &[o, z, z, o]),
            Pauli::X => CMatrix::from_row_slice(2, 2, &[z, o, o, z]),
            Pauli::Y => CMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
            Pauli::Z => CMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub const AXES: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PauliLabel(pub Vec<Pauli>);

impl PauliLabel {
    pub fn new(axes: &[Pauli]) -> Self {
        Self(axes.to_vec())
    }

    pub fn two(a: Pauli, b: Pauli) -> Self {
        Self(vec![a, b])
    }

    pub fn n_qubits(&self) -> usize {
        self.0.len()
    }

    pub fn matrix(&self) -> CMatrix {
        self.0.iter().fold(CMatrix::identity(1, 1), |acc, p| acc.kronecker(&p.matrix()))
    }

    /// The nine non-identity two-qubit labels XX, XY, ..., ZZ.
    pub fn all_two_qubit() -> Vec<PauliLabel> {
        let mut v = Vec::with_capacity(9);
        for a in Pauli::AXES {
            for b in Pauli::AXES {
                v.push(PauliLabel::two(a, b));
            }
        }
        v
    }
}

impl fmt::Display for PauliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{}", p.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for PauliLabel {
    type Err = QStateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(QStateError::BadLabel(s.to_string()));
        }
        s.chars()
            .map(|ch| match ch.to_ascii_uppercase() {
                'I' => Ok(Pauli::I),
                'X' => Ok(Pauli::X),
                'Y' => Ok(Pauli::Y),
                'Z' => Ok(Pauli::Z),
                _ => Err(QStateError::BadLabel(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(PauliLabel)
    }
}

impl serde::Serialize for PauliLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for PauliLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), QStateError> {
    if expected != got {
        Err(QStateError::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

pub fn tensor(a: &DensityMatrix, b: &DensityMatrix) -> DensityMatrix {
    DensityMatrix { m: a.m.kronecker(&b.m) }
}

pub fn kron_vec(a: &CVector, b: &CVector) -> CVector {
    let mut out = CVector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

pub fn expectation(rho: &DensityMatrix, obs: &PauliLabel) -> Result<f64, QStateError> {
    let d = 1usize << obs.n_qubits();
    check_dim(d, rho.dim())?;
    let v = (&rho.m * obs.matrix()).trace().re;
    Ok(v.clamp(-1.0, 1.0))
}

pub fn fidelity_pure(rho: &DensityMatrix, psi: &PureState) -> Result<f64, QStateError> {
    check_dim(rho.dim(), psi.dim())?;
    let a = psi.amplitudes();
    let f = (a.adjoint() * &rho.m * a)[(0, 0)].re;
    Ok(f.clamp(0.0, 1.0))
}

/// F = ¼(1 + XX + YY − ZZ), the overlap with |Ψ⁺⟩.
pub fn fidelity_from_correlations(xx: f64, yy: f64, zz: f64) -> Result<f64, QStateError> {
    for (name, value) in [("XX", xx), ("YY", yy), ("ZZ", zz)] {
        if !value.is_finite() || value.abs() > 1.0 + ALGEBRAIC_TOL {
            return Err(QStateError::CorrelationOutOfRange { name, value });
        }
    }
    Ok(0.25 * (1.0 + xx + yy - zz))
}

pub fn unitarity_error(u: &CMatrix) -> f64 {
    let n = u.nrows();
    if !u.is_square() {
        return f64::INFINITY;
    }
    (u.adjoint() * u - CMatrix::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn apply_unitary(rho: &DensityMatrix, u: &CMatrix) -> Result<DensityMatrix, QStateError> {
    check_dim(rho.dim(), u.nrows())?;
    let err = unitarity_error(u);
    if err > SPECTRAL_TOL {
        return Err(QStateError::NonUnitary(err));
    }
    Ok(DensityMatrix { m: hermitian_part(&(u * &rho.m * u.adjoint())) })
}

/// Embeds a single-factor operator `op` (acting on factor `site`) into the full space.
/// `op` may change that factor's dimension (rows = new dim, cols = old dim).
pub fn embed(op: &CMatrix, dims: &[usize], site: usize) -> CMatrix {
    assert_eq!(op.ncols(), dims[site]);
    let mut full = CMatrix::identity(1, 1);
    for (k, &d) in dims.iter().enumerate() {
        if k == site {
            full = full.kronecker(op);
        } else {
            full = full.kronecker(&CMatrix::identity(d, d));
        }
    }
    full
}

/// Applies a local channel {K_i} to factor `site`; returns the state and new dims.
pub fn apply_local_channel(
    rho: &DensityMatrix,
    dims: &[usize],
    site: usize,
    kraus: &[CMatrix],
) -> Result<(DensityMatrix, Vec<usize>), QStateError> {
    check_dim(dims.iter().product(), rho.dim())?;
    let d_in = dims[site];
    let mut completeness = CMatrix::zeros(d_in, d_in);
    for k in kraus {
        check_dim(d_in, k.ncols())?;
        completeness += k.adjoint() * k;
    }
    let dev = (completeness - CMatrix::identity(d_in, d_in)).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if dev > SPECTRAL_TOL {
        return Err(QStateError::NotTracePreserving(dev));
    }
    let d_out = kraus.first().map(|k| k.nrows()).unwrap_or(d_in);
    let mut new_dims = dims.to_vec();
    new_dims[site] = d_out;
    let n_out: usize = new_dims.iter().product();
    let mut out = CMatrix::zeros(n_out, n_out);
    for k in kraus {
        let full = embed(k, dims, site);
        out += &full * &rho.m * full.adjoint();
    }
    Ok((DensityMatrix { m: hermitian_part(&out) }, new_dims))
}

/// Single-qubit rotation diag(1, e^{iφ}).
pub fn phase_gate(phi: f64) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(1.0), cr(0.0), cr(0.0), phase(phi)])
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * cr(0.5)
}

fn unravel(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut digits = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        digits[k] = idx % dims[k];
        idx /= dims[k];
    }
    digits
}

fn ravel(digits: &[usize], dims: &[usize]) -> usize {
    digits.iter().zip(dims).fold(0, |acc, (&d, &n)| acc * n + d)
}

/// Common single-qubit noise channels as Kraus sets.
pub mod channels {
    use super::*;

    /// ρ → (1−p)ρ + p·ZρZ
    pub fn phase_flip(p: f64) -> Vec<CMatrix> {
        let p = p.clamp(0.0, 1.0);
        vec![CMatrix::identity(2, 2) * cr((1.0 - p).sqrt()), Pauli::Z.matrix() * cr(p.sqrt())]
    }

    /// ρ → (1−p)ρ + p·I/2
    pub fn depolarize(p: f64) -> Vec<CMatrix> {
        let p = p.clamp(0.0, 1.0);
        let mut k = vec![CMatrix::identity(2, 2) * cr((1.0 - 0.75 * p).sqrt())];
        for a in Pauli::AXES {
            k.push(a.matrix() * cr((p / 4.0).sqrt()));
        }
        k
    }

    pub fn unitary(u: CMatrix) -> Vec<CMatrix> {
        vec![u]
    }
}

/// Draws a random density matrix of dimension `dim` from the Ginibre ensemble.
pub fn random_density_matrix<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> DensityMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        c(StandardNormal.sample(rng), StandardNormal.sample(rng))
    });
    let m = &g * g.adjoint();
    DensityMatrix::from_matrix_unchecked(m).normalized()
}

pub fn random_pure_state<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> PureState {
    use rand_distr::{Distribution, StandardNormal};
    let v = CVector::from_fn(dim, |_, _| c(StandardNormal.sample(rng), StandardNormal.sample(rng)));
    PureState::normalized(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ket(dim: usize, i: usize) -> DensityMatrix {
        DensityMatrix::from_pure(&PureState::basis(dim, i))
    }

    #[test]
    fn basis_ordering_convention() {
        // Z eigenvalue +1 on index 0 (|↑⟩/|H⟩)
        let up = ket(2, 0);
        assert_eq!(expectation(&up, &"Z".parse().unwrap()).unwrap(), 1.0);
        let psi = psi_plus();
        assert!((psi.amp(1).re - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((psi.amp(2).re - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn tensor_of_mixed_is_mixed() {
        let t = tensor(&DensityMatrix::maximally_mixed(2), &DensityMatrix::maximally_mixed(2));
        assert!((t.matrix() - DensityMatrix::maximally_mixed(4).matrix()).norm() < 1e-15);
    }

    #[test]
    fn tensor_of_basis_states() {
        let t = tensor(&ket(2, 0), &ket(2, 1));
        assert!((t.matrix() - ket(4, 1).matrix()).norm() < 1e-15);
        assert!((t.trace() - 1.0).abs() < ALGEBRAIC_TOL);
    }

    #[test]
    fn tensor_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_density_matrix(2, &mut rng);
        let b = random_density_matrix(3, &mut rng);
        let cc = random_density_matrix(2, &mut rng);
        let l = tensor(&tensor(&a, &b), &cc);
        let r = tensor(&a, &tensor(&b, &cc));
        assert!((l.matrix() - r.matrix()).norm() < 1e-14);
    }

    #[test]
    fn two_ion_photon_pairs_decompose_into_bell_pairs() {
        // ordering ion_A, photon_A, ion_B, photon_B -> ion_A, ion_B, photon_A, photon_B
        let prod = phi_plus().tensor(&phi_plus());
        let reordered = prod.permute(&[2, 2, 2, 2], &[0, 2, 1, 3]);
        let bells = [psi_plus(), psi_minus(), phi_plus(), phi_minus()];
        let mut total = 0.0;
        for ion in &bells {
            for photon in &bells {
                let comp = ion.tensor(photon);
                let ov = comp.inner(&reordered).unwrap();
                total += ov.norm_sqr();
                let m = ov.norm();
                assert!(m < 1e-12 || (m - 0.5).abs() < 1e-12, "overlap {m}");
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        // symbolic expansion: |Φ⁺Φ⁺⟩ = ½(|Φ⁺Φ⁺⟩+|Φ⁻Φ⁻⟩+|Ψ⁺Ψ⁺⟩+|Ψ⁻Ψ⁻⟩)
        for b in &bells {
            let ov = b.tensor(b).inner(&reordered).unwrap();
            assert!((ov - cr(0.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn psi_plus_correlations() {
        let rho = DensityMatrix::from_pure(&psi_plus());
        let e = |s: &str| expectation(&rho, &s.parse().unwrap()).unwrap();
        assert!((e("XX") - 1.0).abs() < 1e-14);
        assert!((e("YY") - 1.0).abs() < 1e-14);
        assert!((e("ZZ") + 1.0).abs() < 1e-14);
    }

    #[test]
    fn mixed_state_has_zero_correlations() {
        let rho = DensityMatrix::maximally_mixed(4);
        for l in PauliLabel::all_two_qubit() {
            assert!(expectation(&rho, &l).unwrap().abs() < 1e-15);
        }
        assert!(expectation(&rho, &"X".parse().unwrap()).is_err());
    }

    #[test]
    fn expectation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_density_matrix(4, &mut rng);
        let b = random_density_matrix(4, &mut rng);
        let mix = DensityMatrix::new(a.matrix() * cr(0.3) + b.matrix() * cr(0.7)).unwrap();
        for l in PauliLabel::all_two_qubit() {
            let lhs = expectation(&mix, &l).unwrap();
            let rhs = 0.3 * expectation(&a, &l).unwrap() + 0.7 * expectation(&b, &l).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_pure_cases() {
        let rho = DensityMatrix::from_pure(&psi_plus());
        assert!((fidelity_pure(&rho, &psi_plus()).unwrap() - 1.0).abs() < 1e-14);
        let mixed = DensityMatrix::maximally_mixed(4);
        assert!((fidelity_pure(&mixed, &psi_plus()).unwrap() - 0.25).abs() < 1e-14);
        assert!(fidelity_pure(&mixed, &PureState::basis(2, 0)).is_err());
    }

    #[test]
    fn fidelity_from_correlations_cases() {
        assert_eq!(fidelity_from_correlations(1.0, 1.0, -1.0).unwrap(), 1.0);
        assert_eq!(fidelity_from_correlations(0.0, 0.0, 0.0).unwrap(), 0.25);
        assert!(fidelity_from_correlations(1.2, 0.0, 0.0).is_err());
        assert!(fidelity_from_correlations(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn fidelity_agrees_on_bell_diagonal_states() {
        let weights = [0.7, 0.1, 0.15, 0.05];
        let bells = [psi_plus(), psi_minus(), phi_plus(), phi_minus()];
        let mut m = CMatrix::zeros(4, 4);
        for (w, b) in weights.iter().zip(&bells) {
            m += DensityMatrix::from_pure(b).matrix() * cr(*w);
        }
        let rho = DensityMatrix::new(m).unwrap();
        let e = |s: &str| expectation(&rho, &s.parse().unwrap()).unwrap();
        let f = fidelity_from_correlations(e("XX"), e("YY"), e("ZZ")).unwrap();
        assert!((f - 0.7).abs() < 1e-12);
        assert!((fidelity_pure(&rho, &psi_plus()).unwrap() - f).abs() < 1e-12);
    }

    #[test]
    fn apply_unitary_cases() {
        let rho = DensityMatrix::from_pure(&psi_plus());
        let id = CMatrix::identity(4, 4);
        assert_eq!(apply_unitary(&rho, &id).unwrap(), rho);
        let xx = PauliLabel::two(Pauli::X, Pauli::X).matrix();
        let out = apply_unitary(&rho, &xx).unwrap();
        assert!((out.matrix() - rho.matrix()).norm() < 1e-14);
        let bad = CMatrix::identity(4, 4) * cr(1.1);
        assert!(matches!(apply_unitary(&rho, &bad), Err(QStateError::NonUnitary(_))));
    }

    #[test]
    fn unitary_preserves_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_density_matrix(4, &mut rng);
        let h = random_density_matrix(4, &mut rng);
        // U = exp(iH) via eigendecomposition
        let eig = hermitian_part(h.matrix()).symmetric_eigen();
        let d = CMatrix::from_diagonal(&eig.eigenvalues.map(|x| phase(3.0 * x)));
        let u = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
        let out = apply_unitary(&rho, &u).unwrap();
        let (a, b) = (rho.eigenvalues(), out.eigenvalues());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < SPECTRAL_TOL);
        }
        assert!((out.trace() - 1.0).abs() < SPECTRAL_TOL);
    }

    #[test]
    fn validation_rejects_bad_matrices() {
        let m = CMatrix::identity(2, 2);
        assert!(matches!(DensityMatrix::new(m), Err(QStateError::BadTrace(_))));
        let m = CMatrix::from_row_slice(2, 2, &[cr(1.5), cr(0.0), cr(0.0), cr(-0.5)]);
        assert!(matches!(DensityMatrix::new(m), Err(QStateError::NotPositive(_))));
        let m = CMatrix::from_row_slice(2, 2, &[cr(0.5), cr(0.1), cr(0.0), cr(0.5)]);
        assert!(matches!(DensityMatrix::new(m), Err(QStateError::NotHermitian(_))));
        assert!(PureState::from_slice(&[cr(1.0), cr(1.0)]).is_err());
    }

    #[test]
    fn partial_trace_of_bell_state() {
        let rho = DensityMatrix::from_pure(&psi_plus());
        let a = rho.partial_trace(&[2, 2], &[0]);
        assert!((a.matrix() - DensityMatrix::maximally_mixed(2).matrix()).norm() < 1e-15);
    }

    #[test]
    fn local_channels_preserve_trace() {
        let rho = DensityMatrix::from_pure(&psi_plus());
        let (out, dims) = apply_local_channel(&rho, &[2, 2], 1, &channels::depolarize(1.0)).unwrap();
        assert_eq!(dims, vec![2, 2]);
        assert!((out.matrix() - DensityMatrix::maximally_mixed(4).matrix()).norm() < 1e-14);
        let (out, _) = apply_local_channel(&rho, &[2, 2], 0, &channels::phase_flip(0.1)).unwrap();
        let xx = expectation(&out, &"XX".parse().unwrap()).unwrap();
        assert!((xx - 0.8).abs() < 1e-14);
        let bad = vec![CMatrix::identity(2, 2) * cr(0.5)];
        assert!(apply_local_channel(&rho, &[2, 2], 0, &bad).is_err());
    }

    #[test]
    fn label_parsing_round_trips() {
        for l in PauliLabel::all_two_qubit() {
            assert_eq!(l.to_string().parse::<PauliLabel>().unwrap(), l);
        }
        assert!("XQ".parse::<PauliLabel>().is_err());
        assert!("".parse::<PauliLabel>().is_err());
    }
}
