//! Balanced homodyning with array detectors, at the operator level.
//!
//! The signal consists of two modes `U_1`, `U_2` that pass a linear mixing
//! device before meeting a uniform local oscillator on a 50:50 splitter.
//! Each pixel of each output port yields a count operator; this module builds
//! those operators, the difference counts, and every quadrature
//! reconstruction that can be assembled from them. Counts are expressed in
//! units where the counting time and quantization length cancel (`L = cT`).

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::{annihilation, expectation, FockError, FockSpace, Mode, OperatorMatrix, StateVector};
use crate::mode_grid::{ModeBasis, ModeFunction, Pixel, PixelGrid};

/// Local-oscillator amplitude used when none is given.
pub const DEFAULT_BETA: f64 = 1e3;

/// Two LO phases are considered equal when they agree to this modulo 2 pi.
pub const PHASE_TOLERANCE: f64 = 1e-12;

/// Smallest `|sin(nu2 - nu1)|` accepted by [`two_nu_inversion`].
pub const MIN_MIXING_SEPARATION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BhdError {
    #[error("the two-mode pipeline needs exactly 2 modes, got {0}")]
    BasisSize(usize),

    #[error("invalid mixer: {0}")]
    InvalidMixer(String),

    #[error("local-oscillator amplitude must be positive and finite, got {0}")]
    InvalidBeta(f64),

    #[error("mismatched measurement settings: {0}")]
    SettingsMismatch(String),

    #[error("mode function lives on a different grid than the count field")]
    GridMismatch,

    #[error("degenerate mixing angles nu1 = {nu1}, nu2 = {nu2}: |sin(nu2 - nu1)| = {separation:e}")]
    DegenerateMixing { nu1: f64, nu2: f64, separation: f64 },

    #[error(transparent)]
    Fock(#[from] FockError),
}

pub type BhdResult<T> = Result<T, BhdError>;

/// Mixing device parameters: interaction phase `theta` and mixing angle `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    theta: f64,
    nu: f64,
}

impl MixerConfig {
    /// `nu` must lie in `[0, pi/2]`; `theta` is reduced into `[0, 2 pi)`.
    pub fn new(theta: f64, nu: f64) -> BhdResult<Self> {
        if !theta.is_finite() {
            return Err(BhdError::InvalidMixer(format!("theta must be finite, got {theta}")));
        }
        if !(0.0..=FRAC_PI_2).contains(&nu) {
            return Err(BhdError::InvalidMixer(format!("nu must lie in [0, pi/2], got {nu}")));
        }
        let mut theta = theta.rem_euclid(2.0 * PI);
        if theta >= 2.0 * PI {
            theta = 0.0;
        }
        Ok(Self { theta, nu })
    }

    /// No mixing.
    pub fn identity() -> Self {
        Self { theta: 0.0, nu: 0.0 }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn with_nu(&self, nu: f64) -> BhdResult<Self> {
        Self::new(self.theta, nu)
    }
}

/// Coherent local oscillator `|beta e^{i phi}>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoConfig {
    beta: f64,
    phi: f64,
}

impl LoConfig {
    pub fn new(beta: f64, phi: f64) -> BhdResult<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(BhdError::InvalidBeta(beta));
        }
        if !phi.is_finite() {
            return Err(BhdError::SettingsMismatch(format!("LO phase must be finite, got {phi}")));
        }
        Ok(Self { beta, phi })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Same amplitude, phase advanced by `delta`.
    pub fn rotated(&self, delta: f64) -> Self {
        Self {
            beta: self.beta,
            phi: self.phi + delta,
        }
    }

    pub fn with_beta(&self, beta: f64) -> BhdResult<Self> {
        Self::new(beta, self.phi)
    }
}

fn same_angle(a: f64, b: f64) -> bool {
    let d = (a - b).rem_euclid(2.0 * PI);
    d < PHASE_TOLERANCE || 2.0 * PI - d < PHASE_TOLERANCE
}

/// Output operators of the mixing device together with their bilinears
/// `a'_n^dagger a'_m`, which every count operator needs.
#[derive(Clone, Debug)]
pub struct MixedModes {
    space: FockSpace,
    mixer: MixerConfig,
    lowering: [Arc<OperatorMatrix>; 2],
    raising: [Arc<OperatorMatrix>; 2],
    bilinear: [[Arc<OperatorMatrix>; 2]; 2],
}

impl MixedModes {
    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn mixer(&self) -> MixerConfig {
        self.mixer
    }

    /// `a'_k`.
    pub fn annihilation(&self, mode: Mode) -> &OperatorMatrix {
        &self.lowering[mode.slot()]
    }

    /// `a'_k^dagger`.
    pub fn creation(&self, mode: Mode) -> &OperatorMatrix {
        &self.raising[mode.slot()]
    }

    /// `a'_n^dagger a'_m`.
    pub fn bilinear(&self, n: Mode, m: Mode) -> &OperatorMatrix {
        &self.bilinear[n.slot()][m.slot()]
    }

    /// Rotated quadrature of an output mode, built directly from `a'_k`.
    pub fn quadrature(&self, mode: Mode, phi: f64) -> OperatorMatrix {
        crate::fock::quadrature(self.annihilation(mode), phi)
    }
}

/// `a'_1 = cos(nu) a_1 - i sin(nu) e^{-i theta} a_2` and
/// `a'_2 = cos(nu) a_2 - i sin(nu) e^{i theta} a_1`.
pub fn mixed_mode_operators(space: FockSpace, mix: MixerConfig) -> MixedModes {
    let a1 = annihilation(space, Mode::One);
    let a2 = annihilation(space, Mode::Two);
    let (s, c) = mix.nu.sin_cos();
    let i = C64::new(0.0, 1.0);

    let mut a1p = a1.scale(C64::new(c, 0.0));
    a1p.add_scaled(-i * s * C64::from_polar(1.0, -mix.theta), &a2);
    let mut a2p = a2.scale(C64::new(c, 0.0));
    a2p.add_scaled(-i * s * C64::from_polar(1.0, mix.theta), &a1);

    let lowering = [Arc::new(a1p), Arc::new(a2p)];
    let raising = [Arc::new(lowering[0].adjoint()), Arc::new(lowering[1].adjoint())];
    let product = |n: usize, m: usize| {
        let op = raising[n].dot(&lowering[m]);
        Arc::new(if n == m { op.mark_hermitian() } else { op })
    };
    let bilinear = [[product(0, 0), product(0, 1)], [product(1, 0), product(1, 1)]];
    MixedModes {
        space,
        mixer: mix,
        lowering,
        raising,
        bilinear,
    }
}

/// Output port of the balanced splitter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Port {
    One,
    Two,
}

impl Port {
    fn sign(self) -> f64 {
        match self {
            Port::One => 1.0,
            Port::Two => -1.0,
        }
    }
}

/// What a [`PixelOperatorField`] represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// Photocount of one port.
    Count(Port),
    /// Port 1 minus port 2.
    Difference,
    /// Non-Hermitian combination of two difference fields.
    Reconstruction,
}

/// Measurement settings carried by every field, so that combining fields
/// from incompatible runs is an error instead of a silently wrong answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSettings {
    pub phi: f64,
    pub beta: f64,
    pub mixer: Option<MixerConfig>,
    pub grid_fingerprint: u64,
    pub basis_fingerprint: u64,
}

#[derive(Clone, Debug)]
struct FieldTerm {
    op: Arc<OperatorMatrix>,
    weights: Vec<C64>,
}

/// Map pixel -> operator, stored as a short sum `sum_t w_t(pixel) B_t` of
/// shared operators `B_t` with per-pixel weights.
#[derive(Clone, Debug)]
pub struct PixelOperatorField {
    grid: PixelGrid,
    space: FockSpace,
    kind: FieldKind,
    settings: FieldSettings,
    terms: Vec<FieldTerm>,
}

impl PixelOperatorField {
    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn settings(&self) -> &FieldSettings {
        &self.settings
    }

    fn is_observable(&self) -> bool {
        !matches!(self.kind, FieldKind::Reconstruction)
    }

    /// Operator at one pixel.
    pub fn op_at(&self, pixel: Pixel) -> OperatorMatrix {
        let index = self.grid.index(pixel);
        let mut op = OperatorMatrix::zeros(self.space);
        for term in &self.terms {
            let w = term.weights[index];
            if w.re != 0.0 || w.im != 0.0 {
                op.add_scaled(w, &term.op);
            }
        }
        if self.is_observable() {
            op.mark_hermitian()
        } else {
            op
        }
    }

    /// `sum_pixels weights(pixel) * op(pixel)`.
    pub fn weighted_sum(&self, weights: &[C64]) -> OperatorMatrix {
        assert_eq!(weights.len(), self.grid.len(), "one weight per pixel");
        let mut op = OperatorMatrix::zeros(self.space);
        for term in &self.terms {
            let c: C64 = term.weights.iter().zip(weights).map(|(a, b)| a * b).sum();
            op.add_scaled(c, &term.op);
        }
        op
    }

    /// `<psi| op(pixel) |psi>` for every pixel, in flat pixel order.
    pub fn expectation_map(&self, state: &StateVector) -> BhdResult<Vec<C64>> {
        let per_term = self
            .terms
            .iter()
            .map(|t| expectation(state, &t.op))
            .collect::<Result<Vec<_>, _>>()?;
        let map = (0..self.grid.len())
            .map(|p| {
                let value: C64 = self.terms.iter().zip(&per_term).map(|(t, e)| t.weights[p] * e).sum();
                if self.is_observable() {
                    C64::new(value.re, 0.0)
                } else {
                    value
                }
            })
            .collect();
        Ok(map)
    }

    /// `a * self + b * other`, keeping `self`'s settings.
    fn combine(&self, a: C64, other: &PixelOperatorField, b: C64, kind: FieldKind) -> PixelOperatorField {
        fn scale(f: &PixelOperatorField, s: C64) -> impl Iterator<Item = FieldTerm> + '_ {
            f.terms.iter().map(move |t| FieldTerm {
                op: Arc::clone(&t.op),
                weights: t.weights.iter().map(|w| w * s).collect(),
            })
        }
        PixelOperatorField {
            grid: self.grid,
            space: self.space,
            kind,
            settings: self.settings.clone(),
            terms: scale(self, a).chain(scale(other, b)).collect(),
        }
    }
}

/// Writes `<N(j, j')>` as CSV with header `j,jprime,value`.
pub fn write_expectation_csv<W: Write>(mut out: W, grid: &PixelGrid, values: &[C64]) -> std::io::Result<()> {
    writeln!(out, "j,jprime,value")?;
    for (p, v) in grid.pixels().zip(values) {
        writeln!(out, "{},{},{:e}", p.j, p.jprime, v.re)?;
    }
    Ok(())
}

fn check_basis(basis: &ModeBasis, mixed: &MixedModes) -> BhdResult<PixelGrid> {
    if basis.len() != 2 {
        return Err(BhdError::BasisSize(basis.len()));
    }
    let _ = mixed;
    Ok(*basis.grid().expect("non-empty basis"))
}

fn settings_for(grid: &PixelGrid, basis_fingerprint: u64, mixer: Option<MixerConfig>, lo: LoConfig) -> FieldSettings {
    FieldSettings {
        phi: lo.phi,
        beta: lo.beta,
        mixer,
        grid_fingerprint: grid.fingerprint(),
        basis_fingerprint,
    }
}

/// Linear LO cross term `sum_m (e^{-i phi} U_m a_m + h.c.)`, weighted by
/// `prefactor`.
fn cross_terms(modes: &[(&ModeFunction, &Arc<OperatorMatrix>, &Arc<OperatorMatrix>)], phi: f64, prefactor: f64) -> Vec<FieldTerm> {
    let rot = C64::from_polar(prefactor, -phi);
    let mut terms = Vec::with_capacity(2 * modes.len());
    for &(u, lower, raise) in modes {
        terms.push(FieldTerm {
            op: Arc::clone(lower),
            weights: u.values().iter().map(|z| rot * z).collect(),
        });
        terms.push(FieldTerm {
            op: Arc::clone(raise),
            weights: u.values().iter().map(|z| (rot * z).conj()).collect(),
        });
    }
    terms
}

/// Photocount operator of every pixel of one output port.
pub fn pixel_counts(basis: &ModeBasis, mixed: &MixedModes, lo: LoConfig, port: Port) -> BhdResult<PixelOperatorField> {
    let grid = check_basis(basis, mixed)?;
    let half_area = 0.5 * grid.pixel_area();
    let area = grid.detector_area();
    let modes = basis.modes();
    let mm = [Mode::One, Mode::Two];

    let mut terms = vec![FieldTerm {
        op: Arc::new(OperatorMatrix::identity(mixed.space)),
        weights: vec![C64::new(half_area * lo.beta * lo.beta / area, 0.0); grid.len()],
    }];
    for n in mm {
        for m in mm {
            let (un, um) = (&modes[n.slot()], &modes[m.slot()]);
            terms.push(FieldTerm {
                op: Arc::clone(&mixed.bilinear[n.slot()][m.slot()]),
                weights: un
                    .values()
                    .iter()
                    .zip(um.values())
                    .map(|(a, b)| a.conj() * b * half_area)
                    .collect(),
            });
        }
    }
    let linear: Vec<_> = mm
        .iter()
        .map(|m| (&modes[m.slot()], &mixed.lowering[m.slot()], &mixed.raising[m.slot()]))
        .collect();
    terms.extend(cross_terms(&linear, lo.phi, port.sign() * half_area * lo.beta / area.sqrt()));

    Ok(PixelOperatorField {
        grid,
        space: mixed.space,
        kind: FieldKind::Count(port),
        settings: settings_for(&grid, basis.fingerprint(), Some(mixed.mixer), lo),
        terms,
    })
}

/// Difference count `N_1 - N_2` of every pixel, built from its closed form
/// `(dx dy beta / sqrt(D_x D_y)) sum_m (e^{-i phi} U_m a'_m + h.c.)`.
pub fn difference_field(basis: &ModeBasis, mixed: &MixedModes, lo: LoConfig) -> BhdResult<PixelOperatorField> {
    let grid = check_basis(basis, mixed)?;
    let modes = basis.modes();
    let linear: Vec<_> = [Mode::One, Mode::Two]
        .iter()
        .map(|m| (&modes[m.slot()], &mixed.lowering[m.slot()], &mixed.raising[m.slot()]))
        .collect();
    let prefactor = grid.pixel_area() * lo.beta / grid.detector_area().sqrt();
    Ok(PixelOperatorField {
        grid,
        space: mixed.space,
        kind: FieldKind::Difference,
        settings: settings_for(&grid, basis.fingerprint(), Some(mixed.mixer), lo),
        terms: cross_terms(&linear, lo.phi, prefactor),
    })
}

/// Difference field of a single-mode signal `u` with annihilation operator `a`.
pub fn single_mode_difference_field(u: &ModeFunction, a: &OperatorMatrix, lo: LoConfig) -> PixelOperatorField {
    let grid = *u.grid();
    let lower = Arc::new(a.clone());
    let raise = Arc::new(a.adjoint());
    let prefactor = grid.pixel_area() * lo.beta / grid.detector_area().sqrt();
    PixelOperatorField {
        grid,
        space: a.space(),
        kind: FieldKind::Difference,
        settings: settings_for(&grid, u.fingerprint(), None, lo),
        terms: cross_terms(&[(u, &lower, &raise)], lo.phi, prefactor),
    }
}

fn check_quarter_turn_pair(nd_phi: &PixelOperatorField, nd_phi_plus: &PixelOperatorField) -> BhdResult<()> {
    for f in [nd_phi, nd_phi_plus] {
        if f.kind != FieldKind::Difference {
            return Err(BhdError::SettingsMismatch(format!("expected difference counts, got {:?}", f.kind)));
        }
    }
    let (a, b) = (&nd_phi.settings, &nd_phi_plus.settings);
    if a.beta != b.beta {
        return Err(BhdError::SettingsMismatch(format!("LO amplitudes differ: {} vs {}", a.beta, b.beta)));
    }
    if a.mixer != b.mixer {
        return Err(BhdError::SettingsMismatch(format!("mixer settings differ: {:?} vs {:?}", a.mixer, b.mixer)));
    }
    if a.grid_fingerprint != b.grid_fingerprint || nd_phi.space != nd_phi_plus.space {
        return Err(BhdError::SettingsMismatch("fields come from different detectors or Fock spaces".into()));
    }
    if a.basis_fingerprint != b.basis_fingerprint {
        return Err(BhdError::SettingsMismatch("fields were recorded with different signal modes".into()));
    }
    if !same_angle(b.phi, a.phi + FRAC_PI_2) {
        return Err(BhdError::SettingsMismatch(format!(
            "second run must use LO phase phi + pi/2 = {}, got {}",
            a.phi + FRAC_PI_2,
            b.phi
        )));
    }
    Ok(())
}

fn check_lo(field: &PixelOperatorField, lo: LoConfig) -> BhdResult<()> {
    if field.settings.beta != lo.beta || !same_angle(field.settings.phi, lo.phi) {
        return Err(BhdError::SettingsMismatch(format!(
            "field was recorded with beta = {}, phi = {} but reconstruction assumes beta = {}, phi = {}",
            field.settings.beta, field.settings.phi, lo.beta, lo.phi
        )));
    }
    Ok(())
}

/// `R = (1 / 2 beta) sqrt(D_x D_y / 2) (N_d(phi) - i N_d(phi + pi/2))`.
pub fn r_field(
    nd_phi: &PixelOperatorField,
    nd_phi_plus: &PixelOperatorField,
    lo: LoConfig,
    grid: &PixelGrid,
) -> BhdResult<PixelOperatorField> {
    check_quarter_turn_pair(nd_phi, nd_phi_plus)?;
    check_lo(nd_phi, lo)?;
    if grid.fingerprint() != nd_phi.settings.grid_fingerprint {
        return Err(BhdError::GridMismatch);
    }
    let prefactor = (0.5 * grid.detector_area()).sqrt() / (2.0 * lo.beta);
    Ok(nd_phi.combine(
        C64::new(prefactor, 0.0),
        nd_phi_plus,
        C64::new(0.0, -prefactor),
        FieldKind::Reconstruction,
    ))
}

/// `X'_k(phi) = sum_pixels (R U_k + h.c.)`.
pub fn mixed_quadrature(r: &PixelOperatorField, mode: Mode, basis: &ModeBasis) -> BhdResult<OperatorMatrix> {
    if basis.len() != 2 {
        return Err(BhdError::BasisSize(basis.len()));
    }
    let u = &basis.modes()[mode.slot()];
    if u.grid() != &r.grid {
        return Err(BhdError::GridMismatch);
    }
    let s = r.weighted_sum(u.values());
    Ok((&s + &s.adjoint()).mark_hermitian())
}

/// Quadrature of a real mode `u` from a single difference field:
/// `X(phi) = sqrt(D_x D_y) / (sqrt(2) beta) * sum_pixels N_d U`.
///
/// Only valid for real `u`; for complex modes use
/// [`complex_single_mode_quadrature`].
pub fn real_mode_quadrature(nd: &PixelOperatorField, u: &ModeFunction, lo: LoConfig) -> BhdResult<OperatorMatrix> {
    check_lo(nd, lo)?;
    if u.grid() != &nd.grid {
        return Err(BhdError::GridMismatch);
    }
    let k = nd.grid.detector_area().sqrt() / (SQRT_2 * lo.beta);
    Ok(nd.weighted_sum(u.values()).scale(C64::new(k, 0.0)).mark_hermitian())
}

/// Quadrature of a possibly complex mode `u` from difference counts at LO
/// phases `phi` and `phi + pi/2`:
/// `X(phi) = sqrt(D_x D_y) / (2 sqrt(2) beta) *
///  sum_pixels [N_d(phi) (U + U*) + i N_d(phi + pi/2) (U* - U)]`.
pub fn complex_single_mode_quadrature(
    nd_phi: &PixelOperatorField,
    nd_phi_plus: &PixelOperatorField,
    u: &ModeFunction,
    lo: LoConfig,
) -> BhdResult<OperatorMatrix> {
    let (first, second) = complex_mode_terms(nd_phi, nd_phi_plus, u, lo)?;
    Ok((&first + &second).mark_hermitian())
}

/// The two sums of [`complex_single_mode_quadrature`] separately, already
/// scaled; the second vanishes for real modes.
pub fn complex_mode_terms(
    nd_phi: &PixelOperatorField,
    nd_phi_plus: &PixelOperatorField,
    u: &ModeFunction,
    lo: LoConfig,
) -> BhdResult<(OperatorMatrix, OperatorMatrix)> {
    check_quarter_turn_pair(nd_phi, nd_phi_plus)?;
    check_lo(nd_phi, lo)?;
    if u.grid() != &nd_phi.grid {
        return Err(BhdError::GridMismatch);
    }
    let k = C64::new(nd_phi.grid.detector_area().sqrt() / (2.0 * SQRT_2 * lo.beta), 0.0);
    let i = C64::new(0.0, 1.0);
    let real_weights: Vec<C64> = u.values().iter().map(|z| z + z.conj()).collect();
    let imag_weights: Vec<C64> = u.values().iter().map(|z| i * (z.conj() - z)).collect();
    Ok((
        nd_phi.weighted_sum(&real_weights).scale(k),
        nd_phi_plus.weighted_sum(&imag_weights).scale(k),
    ))
}

/// Signal quadratures recovered from two mixing angles.
#[derive(Clone, Debug)]
pub struct SignalQuadratures {
    /// `X_1(phi)`
    pub x1: OperatorMatrix,
    /// `X_2(phi)`
    pub x2: OperatorMatrix,
    /// `X_1(phi - theta + pi/2)`
    pub x1_shifted: OperatorMatrix,
    /// `X_2(phi + theta + pi/2)`
    pub x2_shifted: OperatorMatrix,
}

/// Sign convention for the two-angle inversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InversionSigns {
    /// Solves `X'_1 = cos(nu) X_1(phi) + sin(nu) X_2(phi + theta + pi/2)` and
    /// its mode-2 partner exactly: `X_1(phi)` and `X_2(phi)` carry the
    /// denominator `sin(nu1 - nu2)`, the shifted pair `sin(nu2 - nu1)`.
    Resolved,
    /// The same numerators with the two denominators exchanged; every
    /// output comes out negated.
    Swapped,
}

/// Inverts the mixed quadratures measured at `nu1` and `nu2` (same `phi`,
/// `theta`) into signal quadratures. Each pair is `(X'_1, X'_2)`.
pub fn two_nu_inversion(
    at_nu1: (&OperatorMatrix, &OperatorMatrix),
    at_nu2: (&OperatorMatrix, &OperatorMatrix),
    nu1: f64,
    nu2: f64,
) -> BhdResult<SignalQuadratures> {
    two_nu_inversion_with(at_nu1, at_nu2, nu1, nu2, InversionSigns::Resolved)
}

pub fn two_nu_inversion_with(
    at_nu1: (&OperatorMatrix, &OperatorMatrix),
    at_nu2: (&OperatorMatrix, &OperatorMatrix),
    nu1: f64,
    nu2: f64,
    signs: InversionSigns,
) -> BhdResult<SignalQuadratures> {
    let separation = (nu2 - nu1).sin();
    if separation.abs() <= MIN_MIXING_SEPARATION {
        return Err(BhdError::DegenerateMixing {
            nu1,
            nu2,
            separation: separation.abs(),
        });
    }
    let (s1, c1) = nu1.sin_cos();
    let (s2, c2) = nu2.sin_cos();
    let (unshifted, shifted) = match signs {
        InversionSigns::Resolved => ((nu1 - nu2).sin(), (nu2 - nu1).sin()),
        InversionSigns::Swapped => ((nu2 - nu1).sin(), (nu1 - nu2).sin()),
    };
    // a * X'(nu2) - b * X'(nu1), divided by `den`
    let combo = |x_nu1: &OperatorMatrix, x_nu2: &OperatorMatrix, a: f64, b: f64, den: f64| {
        let mut out = x_nu2.scale(C64::new(a / den, 0.0));
        out.add_scaled(C64::new(-b / den, 0.0), x_nu1);
        out.mark_hermitian()
    };
    Ok(SignalQuadratures {
        x1: combo(at_nu1.0, at_nu2.0, s1, s2, unshifted),
        x2: combo(at_nu1.1, at_nu2.1, s1, s2, unshifted),
        x1_shifted: combo(at_nu1.1, at_nu2.1, c1, c2, shifted),
        x2_shifted: combo(at_nu1.0, at_nu2.0, c1, c2, shifted),
    })
}

/// Runs the full two-port reconstruction for one mixing angle: difference
/// counts at `phi` and `phi + pi/2`, the `R` field, and both mixed
/// quadratures.
pub fn reconstruct_mixed_quadratures(
    basis: &ModeBasis,
    mixed: &MixedModes,
    lo: LoConfig,
) -> BhdResult<(OperatorMatrix, OperatorMatrix)> {
    let nd = difference_field(basis, mixed, lo)?;
    let nd_plus = difference_field(basis, mixed, lo.rotated(FRAC_PI_2))?;
    let grid = *basis.grid().expect("two-mode basis");
    let r = r_field(&nd, &nd_plus, lo, &grid)?;
    Ok((mixed_quadrature(&r, Mode::One, basis)?, mixed_quadrature(&r, Mode::Two, basis)?))
}
