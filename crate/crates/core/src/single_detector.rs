//! Reconstruction from nine pixels of a single output port.
//!
//! Differences of counts between a reference pixel and eight others are
//! linear in the eight operators of [`VVector`], with coefficients given by
//! the mode-function values on the chosen pixels ([`MMatrix`]). Inverting
//! `M` recovers the mixed-mode operators and hence both mixed quadratures.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, SMatrix};
use num_complex::Complex64 as C64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_bhd::{BhdError, LoConfig, MixedModes, PixelOperatorField};
use crate::fock::{Mode, OperatorMatrix};
use crate::mode_grid::{ModeFunction, Pixel, PixelGrid};

/// Number of pixels in a selection: one reference plus eight partners.
pub const SELECTION_SIZE: usize = 9;

/// Selections whose `M` has a larger condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Seeds tried by [`select_pixels`] unless configured otherwise.
pub const DEFAULT_SELECTION_SEEDS: usize = 500;

pub type Matrix8 = SMatrix<C64, 8, 8>;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid pixel selection: {0}")]
    InvalidSelection(String),

    #[error("the single-detector scheme needs exactly 2 modes, got {0}")]
    BasisSize(usize),

    #[error("grid has {0} pixels; at least 9 are needed")]
    TooFewPixels(usize),

    #[error("no invertible nine-pixel selection found (best condition number {best_condition:e}): {diagnosis}")]
    NoInvertibleSelection { best_condition: f64, diagnosis: String },

    #[error("M is singular or too ill-conditioned (condition number {0:e})")]
    Singular(f64),

    #[error("expected 8 difference counts, got {0}")]
    DifferenceCount(usize),

    #[error(transparent)]
    Bhd(#[from] BhdError),
}

pub type DetectorResult<T> = Result<T, DetectorError>;

/// Nine distinct pixels; the first is the reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelSelection {
    pixels: Vec<Pixel>,
}

impl PixelSelection {
    pub fn new(grid: &PixelGrid, pixels: Vec<Pixel>) -> DetectorResult<Self> {
        if pixels.len() != SELECTION_SIZE {
            return Err(DetectorError::InvalidSelection(format!("expected 9 pixels, got {}", pixels.len())));
        }
        for (i, p) in pixels.iter().enumerate() {
            if !grid.contains(*p) {
                return Err(DetectorError::InvalidSelection(format!("pixel {p} is outside the grid")));
            }
            if pixels[..i].contains(p) {
                return Err(DetectorError::InvalidSelection(format!("pixel {p} appears twice")));
            }
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn reference(&self) -> Pixel {
        self.pixels[0]
    }
}

/// The 8x8 coefficient matrix, with its condition number.
#[derive(Clone, Debug)]
pub struct MMatrix {
    entries: Matrix8,
    s_factor: f64,
    condition: f64,
}

impl MMatrix {
    pub fn entries(&self) -> &Matrix8 {
        &self.entries
    }

    /// `S = beta / sqrt(D_x D_y)`.
    pub fn s_factor(&self) -> f64 {
        self.s_factor
    }

    /// 2-norm condition number; infinite for a singular matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn is_invertible(&self) -> bool {
        self.condition <= MAX_CONDITION
    }
}

/// 2-norm condition number `sigma_max / sigma_min` of any matrix, over its
/// `min(rows, cols)` singular values.
pub fn condition_number(m: &DMatrix<C64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 || min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Row of `M` for the pair (reference, `k`).
fn m_row(u1: &ModeFunction, u2: &ModeFunction, reference: Pixel, k: Pixel, s: f64) -> [C64; 8] {
    let (a1, a2) = (u1.value(reference), u2.value(reference));
    let (b1, b2) = (u1.value(k), u2.value(k));
    let s = C64::new(s, 0.0);
    [
        C64::new(a1.norm_sqr() - b1.norm_sqr(), 0.0),
        C64::new(a2.norm_sqr() - b2.norm_sqr(), 0.0),
        a1.conj() * a2 - b1.conj() * b2,
        a1 * a2.conj() - b1 * b2.conj(),
        s * (a1 - b1),
        s * (a1.conj() - b1.conj()),
        s * (a2 - b2),
        s * (a2.conj() - b2.conj()),
    ]
}

fn check_modes(modes: &[ModeFunction]) -> DetectorResult<(&ModeFunction, &ModeFunction)> {
    match modes {
        [u1, u2] if u1.grid() == u2.grid() => Ok((u1, u2)),
        [_, _] => Err(DetectorError::Bhd(BhdError::GridMismatch)),
        _ => Err(DetectorError::BasisSize(modes.len())),
    }
}

fn s_factor(grid: &PixelGrid, lo: LoConfig) -> f64 {
    lo.beta() / grid.detector_area().sqrt()
}

/// Builds `M` for `selection`. Singularity is reported through the
/// condition number rather than as an error.
pub fn build_m_matrix(modes: &[ModeFunction], selection: &PixelSelection, lo: LoConfig) -> DetectorResult<MMatrix> {
    let (u1, u2) = check_modes(modes)?;
    let s = s_factor(u1.grid(), lo);
    let reference = selection.reference();
    let mut entries = Matrix8::zeros();
    for (row, &k) in selection.pixels()[1..].iter().enumerate() {
        for (col, v) in m_row(u1, u2, reference, k, s).into_iter().enumerate() {
            entries[(row, col)] = v;
        }
    }
    let condition = condition_number(&DMatrix::from_iterator(8, 8, entries.iter().cloned()));
    Ok(MMatrix {
        entries,
        s_factor: s,
        condition,
    })
}

/// Search strategy for [`select_pixels`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Grow the set one pixel at a time, each time taking the candidate that
    /// keeps the partial matrix best conditioned; then one swap pass.
    GreedyCondition,
    /// Random nine-pixel sets improved by swap passes.
    RandomRestart,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    /// Independent searches; the best result wins.
    pub seeds: usize,
    /// Seed of search 0; search `i` uses `base_seed + i`.
    pub base_seed: u64,
    /// Candidate pixels scored per greedy step or swap.
    pub candidates: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::GreedyCondition,
            seeds: DEFAULT_SELECTION_SEEDS,
            base_seed: 0,
            candidates: 16,
        }
    }
}

/// Outcome of a selection search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub pixels: Vec<Pixel>,
    pub condition: f64,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

impl SelectionReport {
    pub fn selection(&self, grid: &PixelGrid) -> DetectorResult<PixelSelection> {
        PixelSelection::new(grid, self.pixels.clone())
    }
}

struct SearchContext<'a> {
    u1: &'a ModeFunction,
    u2: &'a ModeFunction,
    grid: PixelGrid,
    s: f64,
    candidates: usize,
}

impl SearchContext<'_> {
    fn cost(&self, set: &[usize]) -> f64 {
        let reference = self.grid.pixel(set[0]);
        let rows: Vec<[C64; 8]> = set[1..]
            .iter()
            .map(|&k| m_row(self.u1, self.u2, reference, self.grid.pixel(k), self.s))
            .collect();
        let m = DMatrix::from_fn(rows.len(), 8, |r, c| rows[r][c]);
        condition_number(&m)
    }

    fn draw_candidates(&self, rng: &mut ChaCha8Rng, exclude: &[usize]) -> Vec<usize> {
        let n = self.grid.len();
        let mut out = Vec::with_capacity(self.candidates);
        let mut tries = 0;
        while out.len() < self.candidates && tries < 8 * self.candidates {
            let c = rng.random_range(0..n);
            if !exclude.contains(&c) && !out.contains(&c) {
                out.push(c);
            }
            tries += 1;
        }
        out
    }

    fn swap_pass(&self, rng: &mut ChaCha8Rng, set: &mut [usize], mut best: f64) -> f64 {
        for slot in 0..set.len() {
            for c in self.draw_candidates(rng, set) {
                let old = set[slot];
                set[slot] = c;
                let cost = self.cost(set);
                if cost < best {
                    best = cost;
                } else {
                    set[slot] = old;
                }
            }
        }
        best
    }

    fn greedy(&self, seed: u64) -> (Vec<usize>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = sample(&mut rng, self.grid.len(), 2).into_vec();
        let mut set = first;
        while set.len() < SELECTION_SIZE {
            let pick = self
                .draw_candidates(&mut rng, &set)
                .into_iter()
                .map(|c| {
                    set.push(c);
                    let cost = self.cost(&set);
                    set.pop();
                    (cost, c)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            match pick {
                Some((_, c)) => set.push(c),
                None => break,
            }
        }
        let cost = self.cost(&set);
        let cost = self.swap_pass(&mut rng, &mut set, cost);
        (set, cost)
    }

    fn random_restart(&self, seed: u64) -> (Vec<usize>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = sample(&mut rng, self.grid.len(), SELECTION_SIZE).into_vec();
        let mut cost = self.cost(&set);
        for _ in 0..2 {
            cost = self.swap_pass(&mut rng, &mut set, cost);
        }
        (set, cost)
    }
}

/// Searches for the nine-pixel set minimizing the condition number of `M`.
///
/// The result is the lowest `(condition, seed)` pair over all seeds, so it
/// does not depend on how the searches are scheduled.
pub fn select_pixels(
    modes: &[ModeFunction],
    grid: &PixelGrid,
    lo: LoConfig,
    config: SelectionConfig,
) -> DetectorResult<SelectionReport> {
    let (u1, u2) = check_modes(modes)?;
    if u1.grid() != grid {
        return Err(DetectorError::Bhd(BhdError::GridMismatch));
    }
    if grid.len() < SELECTION_SIZE {
        return Err(DetectorError::TooFewPixels(grid.len()));
    }
    let ctx = SearchContext {
        u1,
        u2,
        grid: *grid,
        s: s_factor(grid, lo),
        candidates: config.candidates.max(1),
    };
    let best = (0..config.seeds.max(1) as u64)
        .into_par_iter()
        .map(|i| {
            let seed = config.base_seed.wrapping_add(i);
            let (set, cost) = match config.strategy {
                SelectionStrategy::GreedyCondition => ctx.greedy(seed),
                SelectionStrategy::RandomRestart => ctx.random_restart(seed),
            };
            (cost, seed, set)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one seed");
    let (condition, seed, set) = best;
    if !(condition <= MAX_CONDITION) {
        return Err(DetectorError::NoInvertibleSelection {
            best_condition: condition,
            diagnosis: diagnose(u1, u2, grid),
        });
    }
    Ok(SelectionReport {
        pixels: set.into_iter().map(|i| grid.pixel(i)).collect(),
        condition,
        strategy: config.strategy,
        seed,
    })
}

fn diagnose(u1: &ModeFunction, u2: &ModeFunction, grid: &PixelGrid) -> String {
    let spread = |u: &ModeFunction| {
        let first = u.values()[0];
        u.values().iter().map(|z| (z - first).norm()).fold(0.0, f64::max)
    };
    let (s1, s2) = (spread(u1), spread(u2));
    if s1 == 0.0 && s2 == 0.0 {
        return "both mode functions are constant, so every pixel difference vanishes".into();
    }
    if u1.is_real() && u2.is_real() {
        return "both mode functions are real: the columns for U1* U2 and U1 U2*, U_k and U_k* coincide".into();
    }
    format!(
        "mode functions on the {}x{} grid do not separate the eight operators (value spreads {s1:.3e}, {s2:.3e})",
        grid.nx(),
        grid.ny()
    )
}

/// The eight operators `{a'1^dag a'1, a'2^dag a'2, a'1^dag a'2, a'2^dag a'1,
/// e^{-i phi} a'1, e^{i phi} a'1^dag, e^{-i phi} a'2, e^{i phi} a'2^dag}`.
///
/// Entry 4 is kept in normal order, the adjoint of entry 3. It equals
/// `a'1 a'2^dag` wherever the truncation does not bite.
#[derive(Clone, Debug)]
pub struct VVector {
    entries: Vec<OperatorMatrix>,
}

impl VVector {
    pub fn entries(&self) -> &[OperatorMatrix] {
        &self.entries
    }

    /// One-based access, matching the usual numbering.
    pub fn get(&self, j: usize) -> &OperatorMatrix {
        &self.entries[j - 1]
    }

    /// Largest violation of the fixed pairings: entries 1 and 2 Hermitian,
    /// 4 = 3^dag, 6 = 5^dag, 8 = 7^dag.
    pub fn pairing_defect(&self) -> f64 {
        let e = &self.entries;
        [
            e[0].hermiticity_defect(),
            e[1].hermiticity_defect(),
            e[3].max_abs_diff(&e[2].adjoint()),
            e[5].max_abs_diff(&e[4].adjoint()),
            e[7].max_abs_diff(&e[6].adjoint()),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// The [`VVector`] built directly from the mixed-mode operators.
pub fn direct_v(mixed: &MixedModes, phi: f64) -> VVector {
    let down = C64::from_polar(1.0, -phi);
    let (m1, m2) = (Mode::One, Mode::Two);
    VVector {
        entries: vec![
            mixed.bilinear(m1, m1).clone(),
            mixed.bilinear(m2, m2).clone(),
            mixed.bilinear(m1, m2).clone(),
            mixed.bilinear(m2, m1).clone(),
            mixed.annihilation(m1).scale(down),
            mixed.creation(m1).scale(down.conj()),
            mixed.annihilation(m2).scale(down),
            mixed.creation(m2).scale(down.conj()),
        ],
    }
}

/// `n_d(k) = N(reference) - N(k)` for the eight partner pixels.
pub fn pixel_differences(counts: &PixelOperatorField, selection: &PixelSelection) -> Vec<OperatorMatrix> {
    let reference = counts.op_at(selection.reference());
    selection.pixels()[1..]
        .iter()
        .map(|&k| (&reference - &counts.op_at(k)).mark_hermitian())
        .collect()
}

/// `(dx dy / 2) sum_j M_{kj} V_j` for each row `k`.
pub fn predicted_differences(m: &MMatrix, v: &VVector, grid: &PixelGrid) -> Vec<OperatorMatrix> {
    let half_area = 0.5 * grid.pixel_area();
    (0..8)
        .map(|row| {
            let mut op = OperatorMatrix::zeros(v.entries[0].space());
            for (col, vj) in v.entries.iter().enumerate() {
                op.add_scaled(m.entries[(row, col)] * half_area, vj);
            }
            op
        })
        .collect()
}

/// `V_j = (2 / dx dy) sum_k (M^-1)_{j,k} n_d(k)`.
pub fn recover_v(nd: &[OperatorMatrix], m: &MMatrix, grid: &PixelGrid) -> DetectorResult<VVector> {
    if nd.len() != 8 {
        return Err(DetectorError::DifferenceCount(nd.len()));
    }
    if !m.is_invertible() {
        return Err(DetectorError::Singular(m.condition));
    }
    let inverse = m.entries.try_inverse().ok_or(DetectorError::Singular(m.condition))?;
    let scale = 2.0 / grid.pixel_area();
    let entries = (0..8)
        .map(|j| {
            let mut op = OperatorMatrix::zeros(nd[0].space());
            for (k, n) in nd.iter().enumerate() {
                op.add_scaled(inverse[(j, k)] * scale, n);
            }
            op
        })
        .collect();
    Ok(VVector { entries })
}

/// `X'_1 = (V_5 + V_6) / sqrt(2)`, `X'_2 = (V_7 + V_8) / sqrt(2)`.
pub fn quadratures_from_v(v: &VVector) -> (OperatorMatrix, OperatorMatrix) {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    let x1 = (v.get(5) + v.get(6)).scale(h).mark_hermitian();
    let x2 = (v.get(7) + v.get(8)).scale(h).mark_hermitian();
    (x1, x2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_bhd::{mixed_mode_operators, pixel_counts, MixerConfig, Port, DEFAULT_BETA};
    use crate::fock::{expectation, FockSpace, StateVector};
    use crate::mode_grid::{gram_schmidt, sample_mode, uniform_lo_mode, BeamShape, ModeBasis, ModeFamily};

    fn vortex_basis() -> ModeBasis {
        let grid = PixelGrid::default();
        let shape = BeamShape::default_for(&grid);
        let raw = [
            sample_mode(grid, ModeFamily::Vortex { charge: 1 }, shape).unwrap(),
            sample_mode(grid, ModeFamily::Vortex { charge: 2 }, shape).unwrap(),
        ];
        gram_schmidt(&raw, grid).unwrap()
    }

    fn quick() -> SelectionConfig {
        SelectionConfig {
            seeds: 8,
            ..SelectionConfig::default()
        }
    }

    #[test]
    fn selection_validation() {
        let g = PixelGrid::default();
        let ok: Vec<Pixel> = (0..9).map(|i| Pixel::new(i, i)).collect();
        assert!(PixelSelection::new(&g, ok.clone()).is_ok());
        let mut dup = ok.clone();
        dup[8] = dup[0];
        assert!(PixelSelection::new(&g, dup).is_err());
        let mut outside = ok.clone();
        outside[3] = Pixel::new(16, 0);
        assert!(PixelSelection::new(&g, outside).is_err());
        assert!(PixelSelection::new(&g, ok[..8].to_vec()).is_err());
    }

    #[test]
    fn constant_modes_give_singular_m() {
        let g = PixelGrid::default();
        let lo_mode = uniform_lo_mode(g);
        let modes = [lo_mode.clone(), lo_mode.with_global_phase(1.0)];
        let sel = PixelSelection::new(&g, (0..9).map(|i| Pixel::new(i, 2 * i % 16)).collect()).unwrap();
        let m = build_m_matrix(&modes, &sel, LoConfig::new(DEFAULT_BETA, 0.0).unwrap()).unwrap();
        assert!(m.entries().iter().all(|z| z.norm() == 0.0));
        assert_eq!(m.condition(), f64::INFINITY);
        match select_pixels(&modes, &g, LoConfig::new(DEFAULT_BETA, 0.0).unwrap(), quick()) {
            Err(DetectorError::NoInvertibleSelection { diagnosis, .. }) => assert!(diagnosis.contains("constant")),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn real_modes_give_singular_m() {
        let g = PixelGrid::default();
        let shape = BeamShape::default_for(&g);
        let raw = [
            sample_mode(g, ModeFamily::HermiteGauss { m: 0, n: 0 }, shape).unwrap(),
            sample_mode(g, ModeFamily::HermiteGauss { m: 1, n: 0 }, shape).unwrap(),
        ];
        let basis = gram_schmidt(&raw, g).unwrap();
        let err = select_pixels(basis.modes(), &g, LoConfig::new(DEFAULT_BETA, 0.0).unwrap(), quick()).unwrap_err();
        assert!(matches!(err, DetectorError::NoInvertibleSelection { .. }));
    }

    #[test]
    fn selection_is_deterministic() {
        let b = vortex_basis();
        let g = *b.grid().unwrap();
        let lo = LoConfig::new(DEFAULT_BETA, 0.0).unwrap();
        let a = select_pixels(b.modes(), &g, lo, quick()).unwrap();
        let c = select_pixels(b.modes(), &g, lo, quick()).unwrap();
        assert_eq!(a, c);
        assert!(a.condition < MAX_CONDITION);
        let m = build_m_matrix(b.modes(), &a.selection(&g).unwrap(), lo).unwrap();
        assert!((m.condition() - a.condition).abs() <= 1e-9 * a.condition);
    }

    #[test]
    fn differences_match_m_times_v() {
        let space = FockSpace::new(5).unwrap();
        let b = vortex_basis();
        let g = *b.grid().unwrap();
        let lo = LoConfig::new(DEFAULT_BETA, 0.6).unwrap();
        let mixed = mixed_mode_operators(space, MixerConfig::new(0.9, 0.4).unwrap());
        let report = select_pixels(b.modes(), &g, lo, quick()).unwrap();
        let sel = report.selection(&g).unwrap();
        let m = build_m_matrix(b.modes(), &sel, lo).unwrap();
        let counts = pixel_counts(&b, &mixed, lo, Port::One).unwrap();
        let nd = pixel_differences(&counts, &sel);
        let predicted = predicted_differences(&m, &direct_v(&mixed, lo.phi()), &g);
        for (a, p) in nd.iter().zip(&predicted) {
            assert!(a.max_abs_diff(p) < 1e-12);
        }

        let v = recover_v(&nd, &m, &g).unwrap();
        let tol = 1e-9 * m.condition();
        assert!(v.pairing_defect() < tol);
        let direct = direct_v(&mixed, lo.phi());
        for j in 0..8 {
            assert!(v.entries()[j].max_abs_diff(&direct.entries()[j]) < tol);
        }
        let (x1, x2) = quadratures_from_v(&direct);
        assert!(x1.max_abs_diff(&mixed.quadrature(Mode::One, lo.phi())) < 1e-12);
        assert!(x2.max_abs_diff(&mixed.quadrature(Mode::Two, lo.phi())) < 1e-12);

        let vac = StateVector::vacuum(space);
        assert!(expectation(&vac, v.get(1)).unwrap().norm() < tol);
        let (r1, r2) = quadratures_from_v(&v);
        for x in [r1, r2] {
            let var = crate::fock::second_moment(&vac, &x).unwrap();
            assert!((var - 0.5).abs() < tol);
        }
    }

    #[test]
    fn recover_v_rejects_bad_input() {
        let g = PixelGrid::default();
        let lo_mode = uniform_lo_mode(g);
        let modes = [lo_mode.clone(), lo_mode.clone()];
        let sel = PixelSelection::new(&g, (0..9).map(|i| Pixel::new(i, 0)).collect()).unwrap();
        let m = build_m_matrix(&modes, &sel, LoConfig::new(1.0, 0.0).unwrap()).unwrap();
        let ops = vec![OperatorMatrix::zeros(FockSpace::new(2).unwrap()); 8];
        assert!(matches!(recover_v(&ops, &m, &g), Err(DetectorError::Singular(_))));
        assert!(matches!(recover_v(&ops[..3], &m, &g), Err(DetectorError::DifferenceCount(3))));
        assert!(matches!(build_m_matrix(&modes[..1], &sel, LoConfig::new(1.0, 0.0).unwrap()), Err(DetectorError::BasisSize(1))));
    }
}
