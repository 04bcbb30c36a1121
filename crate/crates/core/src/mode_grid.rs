//! Pixel-array geometry and complex mode functions sampled on it.
//!
//! A mode function is constant over each pixel, so it is a vector of one
//! complex value per pixel. All inner products use the discrete measure
//! `dx * dy` of the pixel area. Pixel `(j, j')` has `j` along x and `j'`
//! along y; the flat index is `j * ny + j'`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalization and orthogonality tolerance for mode functions.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

/// A raw field is rejected by [`gram_schmidt`] when the part left after
/// projecting out earlier modes carries less than this fraction of its norm.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("field has {got} values but the grid has {expected} pixels")]
    LengthMismatch { got: usize, expected: usize },

    #[error("mode is not normalized: dx dy sum |U|^2 = {0}")]
    NotNormalized(f64),

    #[error("modes {i} and {j} are not orthonormal: overlap {overlap}")]
    NotOrthonormal { i: usize, j: usize, overlap: C64 },

    #[error("field {index} is linearly dependent on the preceding fields (residual weight {residual:e})")]
    RankDeficient { index: usize, residual: f64 },

    #[error("unknown mode family `{0}`; expected hermite-gauss(m,n), vortex(l) or constant")]
    UnknownFamily(String),

    #[error("invalid beam parameter: {0}")]
    InvalidParameter(String),

    #[error("mode CSV line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type GridResult<T> = Result<T, GridError>;

/// Detector of `nx * ny` pixels of size `dx * dy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
}

impl PixelGrid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> GridResult<Self> {
        if nx == 0 || ny == 0 {
            return Err(GridError::InvalidGrid(format!("pixel counts must be positive, got {nx}x{ny}")));
        }
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(GridError::InvalidGrid(format!("pixel sizes must be positive, got {dx}x{dy}")));
        }
        Ok(Self { nx, ny, dx, dy })
    }

    /// Square grid of `n * n` pixels covering a detector of side `side`.
    pub fn square(n: usize, side: f64) -> GridResult<Self> {
        Self::new(n, n, side / n as f64, side / n as f64)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Detector width `D_x = nx * dx`.
    pub fn width(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    /// Detector height `D_y = ny * dy`.
    pub fn height(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    /// `D_x * D_y`.
    pub fn detector_area(&self) -> f64 {
        self.width() * self.height()
    }

    /// `dx * dy`.
    pub fn pixel_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, pixel: Pixel) -> usize {
        debug_assert!(self.contains(pixel));
        pixel.j * self.ny + pixel.jprime
    }

    pub fn pixel(&self, index: usize) -> Pixel {
        Pixel {
            j: index / self.ny,
            jprime: index % self.ny,
        }
    }

    pub fn contains(&self, pixel: Pixel) -> bool {
        pixel.j < self.nx && pixel.jprime < self.ny
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        (0..self.len()).map(|i| self.pixel(i))
    }

    /// Pixel-center coordinates, measured from the detector center.
    pub fn center(&self, pixel: Pixel) -> (f64, f64) {
        (
            (pixel.j as f64 + 0.5) * self.dx - 0.5 * self.width(),
            (pixel.jprime as f64 + 0.5) * self.dy - 0.5 * self.height(),
        )
    }

    /// Hash of the exact geometry, for matched-settings bookkeeping.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(self.nx as u64);
        h.write(self.ny as u64);
        h.write(self.dx.to_bits());
        h.write(self.dy.to_bits());
        h.finish()
    }
}

impl Default for PixelGrid {
    /// 16 x 16 pixels on a unit detector.
    fn default() -> Self {
        Self::square(16, 1.0).expect("default grid is valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub j: usize,
    pub jprime: usize,
}

impl Pixel {
    pub fn new(j: usize, jprime: usize) -> Self {
        Self { j, jprime }
    }
}

impl fmt::Display for Pixel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.j, self.jprime)
    }
}

// 64-bit FNV-1a over whole words; stable across builds, unlike
// `DefaultHasher`.
struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, word: u64) {
        for byte in word.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Arbitrary complex field, one value per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelField {
    grid: PixelGrid,
    values: Vec<C64>,
}

impl PixelField {
    pub fn new(grid: PixelGrid, values: Vec<C64>) -> GridResult<Self> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                expected: grid.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: PixelGrid, mut f: impl FnMut(f64, f64) -> C64) -> Self {
        let values = grid
            .pixels()
            .map(|p| {
                let (x, y) = grid.center(p);
                f(x, y)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn value(&self, pixel: Pixel) -> C64 {
        self.values[self.grid.index(pixel)]
    }

    /// `dx dy sum |U|^2`.
    pub fn norm_sqr(&self) -> f64 {
        self.grid.pixel_area() * self.values.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    /// `dx dy sum conj(self) * other`.
    pub fn inner(&self, other: &PixelField) -> GridResult<C64> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch);
        }
        Ok(inner(&self.grid, &self.values, &other.values))
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|z| z * factor).collect(),
        }
    }

    /// `true` if every value has zero imaginary part.
    pub fn is_real(&self) -> bool {
        self.values.iter().all(|z| z.im == 0.0)
    }
}

fn inner(grid: &PixelGrid, u: &[C64], v: &[C64]) -> C64 {
    let sum: C64 = u.iter().zip(v).map(|(a, b)| a.conj() * b).sum();
    sum * grid.pixel_area()
}

/// Mode function normalized under the pixel measure.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeFunction {
    field: PixelField,
}

impl ModeFunction {
    /// Wraps an already-normalized field.
    pub fn new(field: PixelField) -> GridResult<Self> {
        let norm = field.norm_sqr();
        if (norm - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(GridError::NotNormalized(norm));
        }
        Ok(Self { field })
    }

    /// Rescales a non-zero field to unit norm.
    pub fn normalize(field: PixelField) -> GridResult<Self> {
        let norm = field.norm_sqr();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(GridError::NotNormalized(norm));
        }
        Ok(Self {
            field: field.scaled(C64::new(norm.sqrt().recip(), 0.0)),
        })
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.field.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.field.values
    }

    pub fn value(&self, pixel: Pixel) -> C64 {
        self.field.value(pixel)
    }

    pub fn field(&self) -> &PixelField {
        &self.field
    }

    pub fn is_real(&self) -> bool {
        self.field.is_real()
    }

    /// Multiplies by a unit-modulus phase `e^{i alpha}`.
    pub fn with_global_phase(&self, alpha: f64) -> Self {
        Self {
            field: self.field.scaled(C64::from_polar(1.0, alpha)),
        }
    }

    /// Stable hash of the sampled values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(self.grid().fingerprint());
        for z in self.values() {
            h.write(z.re.to_bits());
            h.write(z.im.to_bits());
        }
        h.finish()
    }
}

/// Orthonormal set of modes on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeBasis {
    modes: Vec<ModeFunction>,
}

impl ModeBasis {
    pub fn new(modes: Vec<ModeFunction>) -> GridResult<Self> {
        if let Some(first) = modes.first() {
            if modes.iter().any(|m| m.grid() != first.grid()) {
                return Err(GridError::GridMismatch);
            }
        }
        let basis = Self { modes };
        let gram = basis.gram_matrix();
        for (i, row) in gram.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - C64::new(target, 0.0)).norm() > ORTHONORMAL_TOLERANCE {
                    return Err(GridError::NotOrthonormal { i, j, overlap: g });
                }
            }
        }
        Ok(basis)
    }

    pub fn modes(&self) -> &[ModeFunction] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn grid(&self) -> Option<&PixelGrid> {
        self.modes.first().map(|m| m.grid())
    }

    /// `G[i][j] = <U_i, U_j>`.
    pub fn gram_matrix(&self) -> Vec<Vec<C64>> {
        self.modes
            .iter()
            .map(|u| {
                self.modes
                    .iter()
                    .map(|v| inner(u.grid(), u.values(), v.values()))
                    .collect()
            })
            .collect()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.gram_matrix();
        let mut worst = 0.0f64;
        for (i, row) in gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).norm());
            }
        }
        worst
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for m in &self.modes {
            h.write(m.fingerprint());
        }
        h.finish()
    }

    /// Applies `e^{i alpha}` to every mode.
    pub fn with_global_phase(&self, alpha: f64) -> Self {
        Self {
            modes: self.modes.iter().map(|m| m.with_global_phase(alpha)).collect(),
        }
    }
}

/// Local-oscillator mode, constant `1/sqrt(D_x D_y)` over the detector.
pub fn uniform_lo_mode(grid: PixelGrid) -> ModeFunction {
    let value = C64::new(grid.detector_area().sqrt().recip(), 0.0);
    ModeFunction {
        field: PixelField {
            grid,
            values: vec![value; grid.len()],
        },
    }
}

/// Orthonormalizes `raw` in order (modified Gram-Schmidt, two passes).
pub fn gram_schmidt(raw: &[PixelField], grid: PixelGrid) -> GridResult<ModeBasis> {
    let mut modes: Vec<ModeFunction> = Vec::with_capacity(raw.len());
    for (index, field) in raw.iter().enumerate() {
        if field.grid != grid {
            return Err(GridError::GridMismatch);
        }
        let original = field.norm_sqr();
        if !(original > 0.0 && original.is_finite()) {
            return Err(GridError::RankDeficient { index, residual: 0.0 });
        }
        let mut v = field.values.clone();
        for _ in 0..2 {
            for m in &modes {
                let c = inner(&grid, m.values(), &v);
                for (vi, ui) in v.iter_mut().zip(m.values()) {
                    *vi -= c * ui;
                }
            }
        }
        let residual = grid.pixel_area() * v.iter().map(|z| z.norm_sqr()).sum::<f64>() / original;
        if residual < RANK_TOLERANCE {
            return Err(GridError::RankDeficient { index, residual });
        }
        modes.push(ModeFunction::normalize(PixelField { grid, values: v })?);
    }
    ModeBasis::new(modes)
}

/// Spatial profile families available to [`sample_mode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModeFamily {
    /// Hermite-Gauss `HG_{m n}`.
    HermiteGauss { m: u32, n: u32 },
    /// Laguerre-Gauss `LG_0^l` carrying orbital angular momentum `l`.
    Vortex { charge: i32 },
    Constant,
}

impl FromStr for ModeFamily {
    type Err = GridError;

    fn from_str(s: &str) -> GridResult<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let unknown = || GridError::UnknownFamily(s.to_string());
        if compact == "constant" {
            return Ok(ModeFamily::Constant);
        }
        let (name, rest) = compact.split_once('(').ok_or_else(unknown)?;
        let args = rest.strip_suffix(')').ok_or_else(unknown)?;
        let args: Vec<&str> = args.split(',').collect();
        match (name, args.as_slice()) {
            ("hermite-gauss" | "hg", [m, n]) => Ok(ModeFamily::HermiteGauss {
                m: m.parse().map_err(|_| unknown())?,
                n: n.parse().map_err(|_| unknown())?,
            }),
            ("vortex" | "lg", [l]) => Ok(ModeFamily::Vortex {
                charge: l.parse().map_err(|_| unknown())?,
            }),
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for ModeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeFamily::HermiteGauss { m, n } => write!(f, "hermite-gauss({m},{n})"),
            ModeFamily::Vortex { charge } => write!(f, "vortex({charge})"),
            ModeFamily::Constant => write!(f, "constant"),
        }
    }
}

/// Beam geometry shared by the Gaussian families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamShape {
    /// 1/e field radius.
    pub waist: f64,
    /// Linear phase gradient `(k_x, k_y)`; a tilt makes real profiles complex.
    #[serde(default)]
    pub tilt: (f64, f64),
    /// Beam center relative to the detector center.
    #[serde(default)]
    pub offset: (f64, f64),
}

impl BeamShape {
    pub fn with_waist(waist: f64) -> Self {
        Self {
            waist,
            tilt: (0.0, 0.0),
            offset: (0.0, 0.0),
        }
    }

    /// Waist of 0.3 detector widths, centered, no tilt.
    pub fn default_for(grid: &PixelGrid) -> Self {
        Self::with_waist(0.3 * grid.width().min(grid.height()))
    }

    pub fn tilted(mut self, kx: f64, ky: f64) -> Self {
        self.tilt = (kx, ky);
        self
    }
}

/// Samples a continuum mode (unit-normalized over the plane) at the pixel
/// centers. The result is not renormalized on the grid.
pub fn sample_mode(grid: PixelGrid, family: ModeFamily, shape: BeamShape) -> GridResult<PixelField> {
    if !(shape.waist > 0.0 && shape.waist.is_finite()) {
        return Err(GridError::InvalidParameter(format!("waist must be positive, got {}", shape.waist)));
    }
    let w = shape.waist;
    let (kx, ky) = shape.tilt;
    let (ox, oy) = shape.offset;
    let field = match family {
        ModeFamily::Constant => {
            let v = grid.detector_area().sqrt().recip();
            PixelField::from_fn(grid, |x, y| C64::from_polar(v, kx * x + ky * y))
        }
        ModeFamily::HermiteGauss { m, n } => {
            let norm = (2.0 / (PI * w * w * 2f64.powi((m + n) as i32) * factorial(m) * factorial(n))).sqrt();
            PixelField::from_fn(grid, |x, y| {
                let (x, y) = (x - ox, y - oy);
                let s = std::f64::consts::SQRT_2 / w;
                let amp = norm * hermite(m, s * x) * hermite(n, s * y) * (-(x * x + y * y) / (w * w)).exp();
                C64::from_polar(1.0, kx * (x + ox) + ky * (y + oy)) * amp
            })
        }
        ModeFamily::Vortex { charge } => {
            let l = charge.unsigned_abs();
            let norm = (2.0 / (PI * w * w * factorial(l))).sqrt();
            PixelField::from_fn(grid, |x, y| {
                let (x, y) = (x - ox, y - oy);
                let rho2 = x * x + y * y;
                let radial = norm * (2.0 * rho2 / (w * w)).powf(l as f64 / 2.0) * (-rho2 / (w * w)).exp();
                let phase = charge as f64 * y.atan2(x) + kx * (x + ox) + ky * (y + oy);
                C64::from_polar(radial, phase)
            })
        }
    };
    Ok(field)
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Physicists' Hermite polynomial.
fn hermite(n: u32, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0 * x);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = 2.0 * x * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `dx dy sum conj(u) v`.
pub fn overlap(u: &ModeFunction, v: &ModeFunction) -> GridResult<C64> {
    u.field.inner(&v.field)
}

/// Writes a field as CSV with header `j,jprime,re,im`.
pub fn write_field_csv<W: Write>(mut out: W, field: &PixelField) -> std::io::Result<()> {
    writeln!(out, "j,jprime,re,im")?;
    for p in field.grid.pixels() {
        let z = field.value(p);
        writeln!(out, "{},{},{:e},{:e}", p.j, p.jprime, z.re, z.im)?;
    }
    Ok(())
}

/// Reads a field written by [`write_field_csv`]; every pixel must appear
/// exactly once.
pub fn read_field_csv<R: BufRead>(input: R, grid: PixelGrid) -> GridResult<PixelField> {
    let mut values: Vec<Option<C64>> = vec![None; grid.len()];
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "j,jprime,re,im" {
        return Err(GridError::Csv {
            line: 1,
            message: format!("expected header `j,jprime,re,im`, got `{header}`"),
        });
    }
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| GridError::Csv { line: line_no, message };
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", cols.len())));
        }
        let j: usize = cols[0].parse().map_err(|e| bad(format!("j: {e}")))?;
        let jp: usize = cols[1].parse().map_err(|e| bad(format!("jprime: {e}")))?;
        let re: f64 = cols[2].parse().map_err(|e| bad(format!("re: {e}")))?;
        let im: f64 = cols[3].parse().map_err(|e| bad(format!("im: {e}")))?;
        let pixel = Pixel::new(j, jp);
        if !grid.contains(pixel) {
            return Err(bad(format!("pixel {pixel} is outside the grid")));
        }
        let slot = &mut values[grid.index(pixel)];
        if slot.is_some() {
            return Err(bad(format!("pixel {pixel} appears twice")));
        }
        *slot = Some(C64::new(re, im));
    }
    let values = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| GridError::Csv {
                line: 0,
                message: format!("pixel {} missing", grid.pixel(i)),
            })
        })
        .collect::<GridResult<Vec<_>>>()?;
    PixelField::new(grid, values)
}
