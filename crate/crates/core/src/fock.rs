//! Truncated two-mode Fock space.
//!
//! Every reconstruction formula in this crate is checked against the dense
//! matrices built here. The basis is row-major in the occupation numbers:
//! `index(n1, n2) = n1 * (cutoff + 1) + n2`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-mode cutoff used when nothing else is requested.
pub const DEFAULT_CUTOFF: usize = 12;

/// Largest discarded probability weight accepted by [`perelomov_state`].
pub const DEFAULT_TRUNCATION_TOLERANCE: f64 = 1e-10;

/// Hermiticity defect below which an operator may carry the Hermitian flag.
pub const HERMITIAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FockError {
    #[error("Fock cutoff must be at least 1, got {0}")]
    InvalidCutoff(usize),

    #[error("invalid mode index {0}; expected 1 or 2")]
    InvalidMode(usize),

    #[error("operands live in different Fock spaces (cutoff {left} vs {right})")]
    SpaceMismatch { left: usize, right: usize },

    #[error("entry array has shape {rows}x{cols}, expected {dim}x{dim}")]
    ShapeMismatch { rows: usize, cols: usize, dim: usize },

    #[error(
        "cutoff {cutoff} too small for r = {r}: discarded weight {truncation_weight:e} exceeds {tolerance:e}"
    )]
    CutoffTooSmall {
        r: f64,
        cutoff: usize,
        truncation_weight: f64,
        tolerance: f64,
    },

    #[error("squeezing magnitude must be finite and non-negative, got {0}")]
    InvalidSqueezing(f64),

    #[error("superposition coefficients are not normalized: c1^2 + c2^2 = {0}")]
    NotNormalized(f64),

    #[error("state vector has zero norm")]
    ZeroNorm,
}

pub type FockResult<T> = Result<T, FockError>;

/// One of the two signal modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    One,
    Two,
}

impl Mode {
    pub fn other(self) -> Self {
        match self {
            Mode::One => Mode::Two,
            Mode::Two => Mode::One,
        }
    }

    /// Zero-based position, for indexing pairs.
    pub fn slot(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
        }
    }
}

impl TryFrom<usize> for Mode {
    type Error = FockError;

    fn try_from(k: usize) -> FockResult<Self> {
        match k {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            _ => Err(FockError::InvalidMode(k)),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.slot() + 1)
    }
}

/// Two-mode Fock space truncated at `cutoff` photons per mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FockSpace {
    cutoff: usize,
}

impl FockSpace {
    pub fn new(cutoff: usize) -> FockResult<Self> {
        if cutoff < 1 {
            return Err(FockError::InvalidCutoff(cutoff));
        }
        Ok(Self { cutoff })
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// Number of levels per mode, `cutoff + 1`.
    pub fn levels(&self) -> usize {
        self.cutoff + 1
    }

    pub fn dim(&self) -> usize {
        self.levels() * self.levels()
    }

    pub fn index(&self, n1: usize, n2: usize) -> usize {
        debug_assert!(n1 <= self.cutoff && n2 <= self.cutoff);
        n1 * self.levels() + n2
    }

    pub fn occupations(&self, index: usize) -> (usize, usize) {
        (index / self.levels(), index % self.levels())
    }

    /// Basis indices with both occupations at most `cutoff - margin`.
    ///
    /// Canonical commutation relations hold exactly on the span of these
    /// states for `margin >= 1`.
    pub fn interior(&self, margin: usize) -> Vec<usize> {
        let top = self.cutoff.saturating_sub(margin);
        (0..self.dim())
            .filter(|&i| {
                let (n1, n2) = self.occupations(i);
                n1 <= top && n2 <= top
            })
            .collect()
    }

    fn check_same(&self, other: &FockSpace) -> FockResult<()> {
        if self != other {
            return Err(FockError::SpaceMismatch {
                left: self.cutoff,
                right: other.cutoff,
            });
        }
        Ok(())
    }
}

impl Default for FockSpace {
    fn default() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

/// Dense complex operator on a [`FockSpace`].
#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    space: FockSpace,
    entries: Array2<C64>,
    hermitian: bool,
}

impl OperatorMatrix {
    pub fn zeros(space: FockSpace) -> Self {
        let d = space.dim();
        Self {
            space,
            entries: Array2::zeros((d, d)),
            hermitian: true,
        }
    }

    pub fn identity(space: FockSpace) -> Self {
        Self {
            space,
            entries: Array2::eye(space.dim()),
            hermitian: true,
        }
    }

    pub fn from_entries(space: FockSpace, entries: Array2<C64>) -> FockResult<Self> {
        let (rows, cols) = entries.dim();
        if rows != space.dim() || cols != space.dim() {
            return Err(FockError::ShapeMismatch {
                rows,
                cols,
                dim: space.dim(),
            });
        }
        Ok(Self {
            space,
            entries,
            hermitian: false,
        })
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn entry(&self, row: usize, col: usize) -> C64 {
        self.entries[[row, col]]
    }

    /// Whether the operator carries the (verified) Hermitian flag.
    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    /// `max |O - O^dagger|` over all entries.
    pub fn hermiticity_defect(&self) -> f64 {
        let d = self.space.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i..d {
                let gap = (self.entries[[i, j]] - self.entries[[j, i]].conj()).norm();
                worst = worst.max(gap);
            }
        }
        worst
    }

    /// Sets the Hermitian flag if the defect is below [`HERMITIAN_TOLERANCE`].
    pub fn mark_hermitian(mut self) -> Self {
        self.hermitian = self.hermiticity_defect() < HERMITIAN_TOLERANCE;
        self
    }

    pub fn adjoint(&self) -> Self {
        Self {
            space: self.space,
            entries: self.entries.t().mapv(|z| z.conj()),
            hermitian: self.hermitian,
        }
    }

    /// Matrix product `self * rhs`.
    pub fn dot(&self, rhs: &OperatorMatrix) -> Self {
        assert_eq!(self.space, rhs.space, "operator product across Fock spaces");
        Self {
            space: self.space,
            entries: self.entries.dot(&rhs.entries),
            hermitian: false,
        }
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self {
            space: self.space,
            entries: &self.entries * factor,
            hermitian: self.hermitian && factor.im == 0.0,
        }
    }

    /// `self += factor * other`, in place.
    pub fn add_scaled(&mut self, factor: C64, other: &OperatorMatrix) {
        assert_eq!(self.space, other.space, "operator sum across Fock spaces");
        self.entries.scaled_add(factor, &other.entries);
        self.hermitian = false;
    }

    pub fn apply(&self, vector: &Array1<C64>) -> Array1<C64> {
        self.entries.dot(vector)
    }

    /// Largest entrywise modulus.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    /// `max |self - other|` over all entries.
    pub fn max_abs_diff(&self, other: &OperatorMatrix) -> f64 {
        assert_eq!(self.space, other.space);
        self.entries
            .iter()
            .zip(other.entries.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()))
    }

    /// `max |self - other|` restricted to rows and columns in `indices`.
    pub fn max_abs_diff_on(&self, other: &OperatorMatrix, indices: &[usize]) -> f64 {
        assert_eq!(self.space, other.space);
        let mut worst = 0.0f64;
        for &i in indices {
            for &j in indices {
                worst = worst.max((self.entries[[i, j]] - other.entries[[i, j]]).norm());
            }
        }
        worst
    }
}

impl Add for &OperatorMatrix {
    type Output = OperatorMatrix;

    fn add(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        assert_eq!(self.space, rhs.space, "operator sum across Fock spaces");
        OperatorMatrix {
            space: self.space,
            entries: &self.entries + &rhs.entries,
            hermitian: self.hermitian && rhs.hermitian,
        }
    }
}

impl Sub for &OperatorMatrix {
    type Output = OperatorMatrix;

    fn sub(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        assert_eq!(self.space, rhs.space, "operator difference across Fock spaces");
        OperatorMatrix {
            space: self.space,
            entries: &self.entries - &rhs.entries,
            hermitian: self.hermitian && rhs.hermitian,
        }
    }
}

impl Neg for &OperatorMatrix {
    type Output = OperatorMatrix;

    fn neg(self) -> OperatorMatrix {
        self.scale(C64::new(-1.0, 0.0))
    }
}

impl Mul for &OperatorMatrix {
    type Output = OperatorMatrix;

    fn mul(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        self.dot(rhs)
    }
}

impl Mul<&OperatorMatrix> for C64 {
    type Output = OperatorMatrix;

    fn mul(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        rhs.scale(self)
    }
}

impl Mul<&OperatorMatrix> for f64 {
    type Output = OperatorMatrix;

    fn mul(self, rhs: &OperatorMatrix) -> OperatorMatrix {
        rhs.scale(C64::new(self, 0.0))
    }
}

/// `[a, b] = ab - ba`.
pub fn commutator(a: &OperatorMatrix, b: &OperatorMatrix) -> OperatorMatrix {
    &a.dot(b) - &b.dot(a)
}

/// Annihilation operator of `mode`, identity on the other tensor factor.
pub fn annihilation(space: FockSpace, mode: Mode) -> OperatorMatrix {
    let mut op = OperatorMatrix::zeros(space);
    for n1 in 0..=space.cutoff() {
        for n2 in 0..=space.cutoff() {
            let (n, lowered) = match mode {
                Mode::One if n1 > 0 => (n1, space.index(n1 - 1, n2)),
                Mode::Two if n2 > 0 => (n2, space.index(n1, n2 - 1)),
                _ => continue,
            };
            op.entries[[lowered, space.index(n1, n2)]] = C64::new((n as f64).sqrt(), 0.0);
        }
    }
    op.hermitian = false;
    op
}

pub fn creation(space: FockSpace, mode: Mode) -> OperatorMatrix {
    annihilation(space, mode).adjoint()
}

/// Diagonal number operator of `mode`.
pub fn number(space: FockSpace, mode: Mode) -> OperatorMatrix {
    let mut op = OperatorMatrix::zeros(space);
    for i in 0..space.dim() {
        let (n1, n2) = space.occupations(i);
        let n = match mode {
            Mode::One => n1,
            Mode::Two => n2,
        };
        op.entries[[i, i]] = C64::new(n as f64, 0.0);
    }
    op
}

/// Rotated quadrature `(a e^{-i phi} + a^dagger e^{i phi}) / sqrt(2)`.
pub fn quadrature(a: &OperatorMatrix, phi: f64) -> OperatorMatrix {
    let rot = C64::from_polar(FRAC_1_SQRT_2, -phi);
    let mut x = a.scale(rot);
    x.add_scaled(rot.conj(), &a.adjoint());
    x.mark_hermitian()
}

/// Normalized pure state on a [`FockSpace`].
#[derive(Clone, Debug)]
pub struct StateVector {
    space: FockSpace,
    amplitudes: Array1<C64>,
}

impl StateVector {
    /// Normalizes `amplitudes` onto the unit sphere.
    pub fn new(space: FockSpace, amplitudes: Array1<C64>) -> FockResult<Self> {
        if amplitudes.len() != space.dim() {
            return Err(FockError::ShapeMismatch {
                rows: amplitudes.len(),
                cols: 1,
                dim: space.dim(),
            });
        }
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(FockError::ZeroNorm);
        }
        Ok(Self {
            space,
            amplitudes: amplitudes / C64::new(norm, 0.0),
        })
    }

    pub fn vacuum(space: FockSpace) -> Self {
        Self::basis(space, 0, 0)
    }

    /// Number state `|n1, n2>`.
    pub fn basis(space: FockSpace, n1: usize, n2: usize) -> Self {
        let mut amplitudes = Array1::zeros(space.dim());
        amplitudes[space.index(n1, n2)] = C64::new(1.0, 0.0);
        Self { space, amplitudes }
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amplitudes
    }

    pub fn amplitude(&self, n1: usize, n2: usize) -> C64 {
        self.amplitudes[self.space.index(n1, n2)]
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest total occupation `n1 + n2` carrying non-zero amplitude.
    pub fn max_occupation(&self) -> (usize, usize) {
        let mut top = (0, 0);
        for (i, z) in self.amplitudes.iter().enumerate() {
            if z.norm() > 0.0 {
                let (n1, n2) = self.space.occupations(i);
                top = (top.0.max(n1), top.1.max(n2));
            }
        }
        top
    }
}

/// `<psi| op |psi>`; the imaginary part is dropped for Hermitian-flagged
/// operators.
pub fn expectation(state: &StateVector, op: &OperatorMatrix) -> FockResult<C64> {
    state.space.check_same(&op.space)?;
    let image = op.apply(&state.amplitudes);
    let value: C64 = state
        .amplitudes
        .iter()
        .zip(image.iter())
        .map(|(a, b)| a.conj() * b)
        .sum();
    if op.hermitian {
        Ok(C64::new(value.re, 0.0))
    } else {
        Ok(value)
    }
}

/// `<psi| op^dagger op |psi> = |op psi|^2`, without forming the product.
pub fn second_moment(state: &StateVector, op: &OperatorMatrix) -> FockResult<f64> {
    state.space.check_same(&op.space)?;
    Ok(op.apply(&state.amplitudes).iter().map(|z| z.norm_sqr()).sum())
}

/// A state obtained by cutting an infinite number-state expansion.
#[derive(Clone, Debug)]
pub struct TruncatedState {
    pub state: StateVector,
    /// Probability weight of the discarded tail, before renormalization.
    pub truncation_weight: f64,
}

/// Two-mode squeezed vacuum with `zeta = r e^{-i gamma}`, cut at the space's
/// cutoff and renormalized.
pub fn perelomov_state(space: FockSpace, r: f64, gamma: f64) -> FockResult<TruncatedState> {
    perelomov_state_with_tolerance(space, r, gamma, DEFAULT_TRUNCATION_TOLERANCE)
}

/// As [`perelomov_state`], accepting a discarded weight up to `tolerance`.
pub fn perelomov_state_with_tolerance(
    space: FockSpace,
    r: f64,
    gamma: f64,
    tolerance: f64,
) -> FockResult<TruncatedState> {
    if !(r.is_finite() && r >= 0.0) {
        return Err(FockError::InvalidSqueezing(r));
    }
    let t = r.tanh();
    // sum_{n <= N} (1 - t^2) t^{2n} = 1 - t^{2(N+1)}
    let truncation_weight = t.powi(2 * space.levels() as i32);
    if truncation_weight > tolerance {
        return Err(FockError::CutoffTooSmall {
            r,
            cutoff: space.cutoff(),
            truncation_weight,
            tolerance,
        });
    }
    let ratio = C64::from_polar(t, -gamma);
    let mut amplitudes = Array1::zeros(space.dim());
    let mut c = C64::new(1.0 / r.cosh(), 0.0);
    for n in 0..=space.cutoff() {
        amplitudes[space.index(n, n)] = c;
        c *= ratio;
    }
    Ok(TruncatedState {
        state: StateVector::new(space, amplitudes)?,
        truncation_weight,
    })
}

/// `c1 |0,0> + c2 e^{-i delta} |1,1>`.
pub fn truncated_perelomov_state(
    space: FockSpace,
    c1: f64,
    c2: f64,
    delta: f64,
) -> FockResult<StateVector> {
    let norm_sq = c1 * c1 + c2 * c2;
    if (norm_sq - 1.0).abs() > 1e-12 {
        return Err(FockError::NotNormalized(norm_sq));
    }
    let mut amplitudes = Array1::zeros(space.dim());
    amplitudes[space.index(0, 0)] = C64::new(c1, 0.0);
    amplitudes[space.index(1, 1)] = C64::from_polar(c2, -delta);
    StateVector::new(space, amplitudes)
}

/// Harmonic-oscillator eigenfunctions `psi_0(x) .. psi_nmax(x)` with
/// `psi_0(x) = pi^{-1/4} e^{-x^2/2}`.
pub fn hermite_functions(x: f64, nmax: usize) -> Vec<f64> {
    let mut psi = Vec::with_capacity(nmax + 1);
    psi.push(PI.powf(-0.25) * (-0.5 * x * x).exp());
    if nmax >= 1 {
        psi.push(std::f64::consts::SQRT_2 * x * psi[0]);
    }
    for n in 1..nmax {
        let next = (2.0 / (n as f64 + 1.0)).sqrt() * x * psi[n]
            - (n as f64 / (n as f64 + 1.0)).sqrt() * psi[n - 1];
        psi.push(next);
    }
    psi
}

/// Joint density of the quadratures `X_1(phi1)`, `X_2(phi2)` evaluated
/// directly from the Fock amplitudes.
pub fn quadrature_density_oracle(
    state: &StateVector,
    phi1: f64,
    phi2: f64,
    points: &[(f64, f64)],
) -> Vec<f64> {
    let space = state.space;
    let levels = space.levels();
    let phase1: Vec<C64> = (0..levels).map(|n| C64::from_polar(1.0, -(n as f64) * phi1)).collect();
    let phase2: Vec<C64> = (0..levels).map(|n| C64::from_polar(1.0, -(n as f64) * phi2)).collect();
    points
        .iter()
        .map(|&(x1, x2)| {
            let psi1 = hermite_functions(x1, space.cutoff());
            let psi2 = hermite_functions(x2, space.cutoff());
            let mut amp = C64::new(0.0, 0.0);
            for n1 in 0..levels {
                let mut inner = C64::new(0.0, 0.0);
                for n2 in 0..levels {
                    let c = state.amplitudes[space.index(n1, n2)];
                    if c.re != 0.0 || c.im != 0.0 {
                        inner += c * phase2[n2] * psi2[n2];
                    }
                }
                amp += inner * phase1[n1] * psi1[n1];
            }
            amp.norm_sqr()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8};

    fn small() -> FockSpace {
        FockSpace::new(4).unwrap()
    }

    #[test]
    fn basis_ordering_is_row_major() {
        let s = FockSpace::new(3).unwrap();
        assert_eq!(s.dim(), 16);
        assert_eq!(s.index(2, 1), 9);
        assert_eq!(s.occupations(9), (2, 1));
        assert_eq!(FockSpace::new(0), Err(FockError::InvalidCutoff(0)));
    }

    #[test]
    fn mode_index_validation() {
        assert_eq!(Mode::try_from(1), Ok(Mode::One));
        assert_eq!(Mode::try_from(2), Ok(Mode::Two));
        assert_eq!(Mode::try_from(3), Err(FockError::InvalidMode(3)));
        assert_eq!(Mode::try_from(0), Err(FockError::InvalidMode(0)));
    }

    #[test]
    fn annihilation_on_number_states() {
        let s = small();
        let a1 = annihilation(s, Mode::One);
        let vac = StateVector::vacuum(s);
        assert!(a1.apply(vac.amplitudes()).iter().all(|z| z.norm() == 0.0));

        let one = StateVector::basis(s, 1, 0);
        let lowered = a1.apply(one.amplitudes());
        assert_eq!(lowered[s.index(0, 0)], C64::new(1.0, 0.0));
        assert!((lowered.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-15);

        let n1 = a1.adjoint().dot(&a1).mark_hermitian();
        let two = StateVector::basis(s, 2, 0);
        assert!((expectation(&two, &n1).unwrap().re - 2.0).abs() < 1e-14);
        assert!(n1.max_abs_diff(&number(s, Mode::One)) < 1e-14);
    }

    #[test]
    fn commutators_in_truncated_space() {
        let s = FockSpace::new(6).unwrap();
        let a1 = annihilation(s, Mode::One);
        let a2 = annihilation(s, Mode::Two);
        let id = OperatorMatrix::identity(s);
        let interior = s.interior(1);
        assert!(commutator(&a1, &a1.adjoint()).max_abs_diff_on(&id, &interior) < 1e-13);
        assert!(commutator(&a2, &a2.adjoint()).max_abs_diff_on(&id, &interior) < 1e-13);
        // The top level breaks the relation: [a, a^dag] = -cutoff there.
        assert!(commutator(&a1, &a1.adjoint()).max_abs_diff(&id) > 1.0);
        assert_eq!(commutator(&a1, &a2).max_abs(), 0.0);
        assert_eq!(commutator(&a1, &a2.adjoint()).max_abs(), 0.0);
    }

    #[test]
    fn quadrature_conventions() {
        let s = FockSpace::new(8).unwrap();
        let a1 = annihilation(s, Mode::One);
        let vac = StateVector::vacuum(s);
        for phi in [0.0, 0.3, FRAC_PI_2, 2.0, 5.5] {
            let x = quadrature(&a1, phi);
            assert!(x.is_hermitian());
            let var = expectation(&vac, &x.dot(&x)).unwrap();
            assert!((var.re - 0.5).abs() < 1e-14);
            assert!(x.max_abs_diff(&quadrature(&a1, phi + 2.0 * PI)) < 1e-14);
        }
        let x0 = quadrature(&a1, 0.0);
        let direct = (&a1 + &a1.adjoint()).scale(C64::new(FRAC_1_SQRT_2, 0.0));
        assert!(x0.max_abs_diff(&direct) < 1e-15);

        // [X(0), X(pi/2)] = i on states well below the cutoff.
        let comm = commutator(&x0, &quadrature(&a1, FRAC_PI_2));
        let probe = StateVector::basis(s, 3, 2);
        let value = expectation(&probe, &comm).unwrap();
        assert!((value - C64::new(0.0, 1.0)).norm() < 1e-13);
    }

    #[test]
    fn perelomov_vacuum_limit_and_phase() {
        let s = small();
        let vac = perelomov_state(s, 0.0, 1.3).unwrap();
        assert_eq!(vac.truncation_weight, 0.0);
        assert!((vac.state.amplitude(0, 0) - C64::new(1.0, 0.0)).norm() < 1e-15);

        let big = FockSpace::new(44).unwrap();
        let sq = perelomov_state(big, 1.0, FRAC_PI_4).unwrap();
        let ratio = sq.state.amplitude(1, 1) / sq.state.amplitude(0, 0);
        assert!((ratio - C64::from_polar(1.0f64.tanh(), -FRAC_PI_4)).norm() < 1e-14);
        assert!((sq.state.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perelomov_rejects_small_cutoff() {
        let err = perelomov_state(FockSpace::default(), 1.0, 0.0).unwrap_err();
        match err {
            FockError::CutoffTooSmall { truncation_weight, .. } => {
                assert!((truncation_weight - 1.0f64.tanh().powi(26)).abs() < 1e-18)
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(perelomov_state_with_tolerance(FockSpace::default(), 1.0, 0.0, 1e-3).is_ok());
        assert!(matches!(
            perelomov_state(small(), -0.1, 0.0),
            Err(FockError::InvalidSqueezing(_))
        ));
    }

    #[test]
    fn perelomov_photon_number_matches_series() {
        // Independent series: sum_n n tanh^{2n}(1) / cosh^2(1), summed to
        // convergence, against the closed form sinh^2(1).
        let t2 = 1.0f64.tanh().powi(2);
        let series: f64 = (0..400).map(|n| n as f64 * t2.powi(n)).sum::<f64>() / 1.0f64.cosh().powi(2);
        assert!((series - 1.0f64.sinh().powi(2)).abs() < 1e-12);
        assert!((series - 1.381097845541817).abs() < 1e-12);

        let space = FockSpace::new(44).unwrap();
        let sq = perelomov_state(space, 1.0, 0.2).unwrap();
        let n1 = expectation(&sq.state, &number(space, Mode::One)).unwrap().re;
        assert!((n1 - series).abs() < 1e-8, "{n1} vs {series}");

        // <X_1(phi)^2> = cosh(2r)/2 for any phi
        let x = quadrature(&annihilation(space, Mode::One), 0.7);
        let m2 = second_moment(&sq.state, &x).unwrap();
        assert!((m2 - 2.0f64.cosh() / 2.0).abs() < 1e-8);
        assert!((m2 - 1.881097845541817).abs() < 1e-8);
    }

    #[test]
    fn truncated_perelomov_construction() {
        let s = small();
        let vac = truncated_perelomov_state(s, 1.0, 0.0, 0.4).unwrap();
        assert!((vac.amplitude(0, 0) - C64::new(1.0, 0.0)).norm() < 1e-15);

        let h = FRAC_1_SQRT_2;
        let fig3 = truncated_perelomov_state(s, h, h, FRAC_PI_8).unwrap();
        assert!((fig3.amplitude(1, 1) - C64::from_polar(h, -FRAC_PI_8)).norm() < 1e-15);
        let n1 = expectation(&fig3, &number(s, Mode::One)).unwrap();
        assert!((n1.re - 0.5).abs() < 1e-15);
        assert_eq!(n1.im, 0.0);

        assert!(matches!(
            truncated_perelomov_state(s, 0.8, 0.7, 0.0),
            Err(FockError::NotNormalized(_))
        ));
    }

    #[test]
    fn expectation_checks_space() {
        let state = StateVector::vacuum(small());
        let op = OperatorMatrix::identity(FockSpace::new(5).unwrap());
        assert_eq!(
            expectation(&state, &op),
            Err(FockError::SpaceMismatch { left: 4, right: 5 })
        );
        let id = OperatorMatrix::identity(small());
        assert_eq!(expectation(&state, &id).unwrap(), C64::new(1.0, 0.0));
    }

    #[test]
    fn oracle_density_for_vacuum() {
        let vac = StateVector::vacuum(small());
        let points = [(0.0, 0.0), (0.5, -1.2), (2.0, 1.0)];
        let p = quadrature_density_oracle(&vac, 0.3, 1.1, &points);
        for (&(x1, x2), v) in points.iter().zip(p) {
            let expected = (-x1 * x1 - x2 * x2).exp() / PI;
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_density_for_truncated_state() {
        let h = FRAC_1_SQRT_2;
        let state = truncated_perelomov_state(small(), h, h, FRAC_PI_8).unwrap();
        let points: Vec<(f64, f64)> = (0..21)
            .flat_map(|i| (0..21).map(move |j| (-3.0 + 0.3 * i as f64, -3.0 + 0.3 * j as f64)))
            .collect();
        let p = quadrature_density_oracle(&state, FRAC_PI_4, FRAC_PI_4, &points);
        let cos = (FRAC_PI_2 + FRAC_PI_8).cos();
        for (&(x1, x2), v) in points.iter().zip(p) {
            let bracket = h * h + 4.0 * h * h * x1 * x1 * x2 * x2 + 4.0 * x1 * x2 * h * h * cos;
            let closed = (-x1 * x1 - x2 * x2).exp() / PI * bracket;
            assert!((v - closed).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_density_normalizes() {
        let space = FockSpace::new(12).unwrap();
        let sq = perelomov_state(space, 0.3, 0.4).unwrap();
        let n = 241;
        let h = 12.0 / (n - 1) as f64;
        let points: Vec<(f64, f64)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (-6.0 + h * i as f64, -6.0 + h * j as f64)))
            .collect();
        let p = quadrature_density_oracle(&sq.state, 0.2, 0.9, &points);
        // Trapezoid weights on [-6, 6]^2; the integrand is negligible on the edge.
        let total: f64 = p.iter().sum::<f64>() * h * h;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn hermite_functions_are_orthonormal() {
        let n = 4001;
        let h = 24.0 / (n - 1) as f64;
        let table: Vec<Vec<f64>> = (0..n).map(|i| hermite_functions(-12.0 + h * i as f64, 10)).collect();
        for a in 0..=10 {
            for b in 0..=10 {
                let ip: f64 = table.iter().map(|row| row[a] * row[b]).sum::<f64>() * h;
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() < 1e-10, "{a} {b} {ip}");
            }
        }
    }
}
