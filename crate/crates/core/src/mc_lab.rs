//! Joint quadrature densities and their Monte Carlo reconstruction.
//!
//! Two families are covered: the two-mode squeezed vacuum (a correlated
//! Gaussian) and the truncated state `c1 |0,0> + c2 e^{-i delta} |1,1>`.
//! Samples are drawn by rejection from a product-Gaussian proposal, binned
//! into a [`Histogram2D`] and compared with the analytic density.
//!
//! Quadratures follow `X = (a e^{-i phi} + a^dag e^{i phi}) / sqrt 2`, so the
//! vacuum variance is 1/2. In these units the squeezed-vacuum density is
//!
//! ```text
//! p = exp[-(x1+x2)^2 / (k A) - (x1-x2)^2 / (k B)] * 2 / (pi k sqrt(A B))
//! ```
//!
//! with `k = QUADRATURE_VARIANCE_FACTOR = 2`. Setting `k = 1` and replacing
//! `sqrt(A B)` by `A B` gives the textbook form in the quarter-vacuum
//! convention, which is normalized only when `A B = 1`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erf;
use thiserror::Error;

/// Factor between the printed Gaussian constants and the variances in the
/// half-vacuum convention: `Var(x1 + x2) = QUADRATURE_VARIANCE_FACTOR * A / 2`.
pub const QUADRATURE_VARIANCE_FACTOR: f64 = 2.0;

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_RANGE: f64 = 4.0;

/// Accepted samples produced per independently seeded chunk.
pub const SAMPLE_CHUNK: usize = 4096;

/// Histogram cells with a smaller expected count are pooled for the
/// chi-square test.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

/// Points per axis on the envelope verification grid.
pub const ENVELOPE_GRID: usize = 201;

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid density parameters: {0}")]
    InvalidParams(String),

    #[error("invalid proposal: {0}")]
    InvalidProposal(String),

    #[error("envelope violated at ({x1}, {x2}): density {density:e} exceeds bound {bound:e}")]
    EnvelopeViolation { x1: f64, x2: f64, density: f64, bound: f64 },

    #[error("sample batch is empty")]
    EmptyBatch,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type McResult<T> = Result<T, McError>;

/// Two-mode squeezed vacuum `zeta = r e^{-i gamma}` observed at LO phases
/// `phi1`, `phi2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerelomovDensityParams {
    pub r: f64,
    pub gamma: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl PerelomovDensityParams {
    pub fn new(r: f64, gamma: f64, phi1: f64, phi2: f64) -> McResult<Self> {
        let p = Self { r, gamma, phi1, phi2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> McResult<()> {
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(McError::InvalidParams(format!("squeezing r = {} must be finite and >= 0", self.r)));
        }
        if ![self.gamma, self.phi1, self.phi2].iter().all(|x| x.is_finite()) {
            return Err(McError::InvalidParams("phases must be finite".into()));
        }
        Ok(())
    }

    /// `phi1 + phi2 + gamma`.
    pub fn total_phase(&self) -> f64 {
        self.phi1 + self.phi2 + self.gamma
    }

    /// `|1 + tanh r e^{-i psi}|^2 / (1 - tanh^2 r)`, i.e. `cosh 2r + sinh 2r cos psi`.
    pub fn a(&self) -> f64 {
        let r2 = 2.0 * self.r;
        r2.cosh() + r2.sinh() * self.total_phase().cos()
    }

    /// `|1 - tanh r e^{-i psi}|^2 / (1 - tanh^2 r)`.
    pub fn b(&self) -> f64 {
        let r2 = 2.0 * self.r;
        r2.cosh() - r2.sinh() * self.total_phase().cos()
    }

    /// `2 / (pi k sqrt(A B))`.
    pub fn normalization(&self) -> f64 {
        2.0 / (PI * QUADRATURE_VARIANCE_FACTOR * (self.a() * self.b()).sqrt())
    }

    /// The uncorrected constant `2 / (pi A B)`.
    pub fn printed_normalization(&self) -> f64 {
        2.0 / (PI * self.a() * self.b())
    }

    pub fn density(&self, x1: f64, x2: f64) -> f64 {
        let (s, d) = (x1 + x2, x1 - x2);
        let k = QUADRATURE_VARIANCE_FACTOR;
        self.normalization() * (-s * s / (k * self.a()) - d * d / (k * self.b())).exp()
    }

    /// The density with the uncorrected constants.
    pub fn printed_density(&self, x1: f64, x2: f64) -> f64 {
        let (s, d) = (x1 + x2, x1 - x2);
        self.printed_normalization() * (-s * s / self.a() - d * d / self.b()).exp()
    }

    /// Variance of either single quadrature, `k (A + B) / 8`.
    pub fn marginal_variance(&self) -> f64 {
        QUADRATURE_VARIANCE_FACTOR * (self.a() + self.b()) / 8.0
    }
}

/// `c1 |0,0> + c2 e^{-i delta} |1,1>` observed at LO phases `phi1`, `phi2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedDensityParams {
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl TruncatedDensityParams {
    pub fn new(c1: f64, c2: f64, delta: f64, phi1: f64, phi2: f64) -> McResult<Self> {
        let p = Self { c1, c2, delta, phi1, phi2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> McResult<()> {
        let norm = self.c1 * self.c1 + self.c2 * self.c2;
        if !((norm - 1.0).abs() <= 1e-12) {
            return Err(McError::InvalidParams(format!("c1^2 + c2^2 = {norm}, expected 1")));
        }
        if ![self.delta, self.phi1, self.phi2].iter().all(|x| x.is_finite()) {
            return Err(McError::InvalidParams("phases must be finite".into()));
        }
        Ok(())
    }

    /// `c1^2 + 4 c2^2 x1^2 x2^2 + 4 x1 x2 c1 c2 cos(phi1 + phi2 + delta)`.
    pub fn bracket(&self, x1: f64, x2: f64) -> f64 {
        let q = x1 * x2;
        let cos = (self.phi1 + self.phi2 + self.delta).cos();
        self.c1 * self.c1 + 4.0 * self.c2 * self.c2 * q * q + 4.0 * q * self.c1 * self.c2 * cos
    }

    pub fn density(&self, x1: f64, x2: f64) -> f64 {
        (-x1 * x1 - x2 * x2).exp() / PI * self.bracket(x1, x2)
    }

    /// CDF of either marginal, `G(x) - c2^2 x e^{-x^2} / sqrt(pi)` with `G`
    /// the CDF of `e^{-x^2} / sqrt(pi)`.
    pub fn marginal_cdf(&self, x: f64) -> f64 {
        0.5 * (1.0 + erf(x)) - self.c2 * self.c2 * x * (-x * x).exp() / PI.sqrt()
    }

    pub fn marginal_variance(&self) -> f64 {
        0.5 * self.c1 * self.c1 + 1.5 * self.c2 * self.c2
    }
}

/// Either supported joint density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum JointDensity {
    Perelomov(PerelomovDensityParams),
    Truncated(TruncatedDensityParams),
}

impl JointDensity {
    pub fn validate(&self) -> McResult<()> {
        match self {
            JointDensity::Perelomov(p) => p.validate(),
            JointDensity::Truncated(p) => p.validate(),
        }
    }

    pub fn density(&self, x1: f64, x2: f64) -> f64 {
        match self {
            JointDensity::Perelomov(p) => p.density(x1, x2),
            JointDensity::Truncated(p) => p.density(x1, x2),
        }
    }

    /// CDF of either single-quadrature marginal; both share one form.
    pub fn marginal_cdf(&self, x: f64) -> f64 {
        match self {
            JointDensity::Perelomov(p) => 0.5 * (1.0 + erf(x / (2.0 * p.marginal_variance()).sqrt())),
            JointDensity::Truncated(p) => p.marginal_cdf(x),
        }
    }

    pub fn marginal_variance(&self) -> f64 {
        match self {
            JointDensity::Perelomov(p) => p.marginal_variance(),
            JointDensity::Truncated(p) => p.marginal_variance(),
        }
    }

    /// Unit variance for the truncated state, `k max(A, B) / 4` for the
    /// squeezed vacuum.
    pub fn default_proposal(&self) -> Proposal {
        match self {
            JointDensity::Perelomov(p) => {
                Proposal::new((QUADRATURE_VARIANCE_FACTOR * p.a().max(p.b()) / 4.0).sqrt()).expect("positive width")
            }
            JointDensity::Truncated(_) => Proposal::new(1.0).expect("positive width"),
        }
    }

    /// Smallest `K` with `density <= K q` for the product-Gaussian proposal `q`.
    pub fn envelope_constant(&self, proposal: Proposal) -> McResult<f64> {
        let var = proposal.sigma * proposal.sigma;
        match self {
            JointDensity::Perelomov(p) => {
                let k = QUADRATURE_VARIANCE_FACTOR;
                let needed = k * p.a().max(p.b()) / 4.0;
                if var < needed * (1.0 - 1e-12) {
                    return Err(McError::InvalidProposal(format!(
                        "variance {var} is below {needed}, so the density ratio is unbounded"
                    )));
                }
                Ok(4.0 * var / (k * (p.a() * p.b()).sqrt()))
            }
            JointDensity::Truncated(p) => {
                // Along x1 = x2 the ratio is 2 var e^{-alpha t} (c1 + c2 t)^2 with t = x1^2 + x2^2.
                let alpha = 1.0 - 0.5 / var;
                if alpha <= 0.0 {
                    return Err(McError::InvalidProposal(format!("variance {var} must exceed 1/2")));
                }
                let (c1, c2) = (p.c1.abs(), p.c2.abs());
                let f = |t: f64| 2.0 * var * (-alpha * t).exp() * (c1 + c2 * t).powi(2);
                let mut k = f(0.0);
                if c2 > 0.0 {
                    let t = 2.0 / alpha - c1 / c2;
                    if t > 0.0 {
                        k = k.max(f(t));
                    }
                }
                Ok(k)
            }
        }
    }
}

/// Product of two centered Gaussians of standard deviation `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    sigma: f64,
}

impl Proposal {
    pub fn new(sigma: f64) -> McResult<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(McError::InvalidProposal(format!("width {sigma} must be positive")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn density(&self, x1: f64, x2: f64) -> f64 {
        let var = self.sigma * self.sigma;
        (-(x1 * x1 + x2 * x2) / (2.0 * var)).exp() / (2.0 * PI * var)
    }
}

/// Checks `density <= K q` on a square grid spanning eight proposal widths.
pub fn verify_envelope(density: &JointDensity, proposal: Proposal, k: f64) -> McResult<()> {
    let half = 8.0 * proposal.sigma;
    let step = 2.0 * half / (ENVELOPE_GRID - 1) as f64;
    for i in 0..ENVELOPE_GRID {
        for j in 0..ENVELOPE_GRID {
            let (x1, x2) = (-half + i as f64 * step, -half + j as f64 * step);
            let p = density.density(x1, x2);
            let bound = k * proposal.density(x1, x2);
            if p > bound * (1.0 + 1e-10) + f64::MIN_POSITIVE {
                return Err(McError::EnvelopeViolation { x1, x2, density: p, bound });
            }
        }
    }
    Ok(())
}

/// Accepted quadrature samples from one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub seed: u64,
    pub count: usize,
    pub samples: Vec<(f64, f64)>,
    /// Accepted / proposed.
    pub acceptance_rate: f64,
    pub proposed: u64,
}

impl SampleBatch {
    pub fn mean(&self) -> (f64, f64) {
        let n = self.samples.len() as f64;
        let (s1, s2) = self.samples.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
        (s1 / n, s2 / n)
    }

    /// Sample variances of both coordinates.
    pub fn variance(&self) -> (f64, f64) {
        let (m1, m2) = self.mean();
        let n = self.samples.len() as f64;
        let (v1, v2) = self
            .samples
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + (x - m1).powi(2), b + (y - m2).powi(2)));
        (v1 / (n - 1.0), v2 / (n - 1.0))
    }

    /// Standard errors of the two sample variances, from the fourth central moments.
    pub fn variance_standard_error(&self) -> (f64, f64) {
        let (m1, m2) = self.mean();
        let (v1, v2) = self.variance();
        let n = self.samples.len() as f64;
        let (q1, q2) = self
            .samples
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + (x - m1).powi(4), b + (y - m2).powi(4)));
        (((q1 / n - v1 * v1) / n).sqrt(), ((q2 / n - v2 * v2) / n).sqrt())
    }

    /// Writes `x1,x2` rows using shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x1,x2")?;
        for (x1, x2) in &self.samples {
            writeln!(out, "{x1},{x2}")?;
        }
        Ok(())
    }
}

/// Reads the samples written by [`SampleBatch::write_csv`].
pub fn read_samples_csv<R: BufRead>(input: R) -> McResult<Vec<(f64, f64)>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some("x1,x2") {
        return Err(McError::Csv { line: 1, message: "expected header x1,x2".into() });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| McError::Csv { line: i + 2, message };
        let mut parts = line.split(',');
        let mut next = || -> McResult<f64> {
            let s = parts.next().ok_or_else(|| bad("missing column".into()))?;
            s.trim().parse().map_err(|e| bad(format!("{s:?}: {e}")))
        };
        let x1 = next()?;
        let x2 = next()?;
        if parts.next().is_some() {
            return Err(bad("too many columns".into()));
        }
        out.push((x1, x2));
    }
    Ok(out)
}

/// Von Neumann rejection sampling of `count` points under `density`.
///
/// Chunk `i` draws from ChaCha8 seeded with `seed` on stream `i`, and chunks
/// are concatenated in order, so the batch depends only on `seed` and
/// `count`, not on the number of worker threads.
pub fn rejection_sample(density: &JointDensity, proposal: Proposal, seed: u64, count: usize) -> McResult<SampleBatch> {
    density.validate()?;
    let k = density.envelope_constant(proposal)?;
    verify_envelope(density, proposal, k)?;
    let chunks = count.div_ceil(SAMPLE_CHUNK);
    let parts: Vec<(Vec<(f64, f64)>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let quota = SAMPLE_CHUNK.min(count - chunk * SAMPLE_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let mut accepted = Vec::with_capacity(quota);
            let mut proposed = 0u64;
            while accepted.len() < quota {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.random();
                let (x1, x2) = (proposal.sigma * z1, proposal.sigma * z2);
                proposed += 1;
                if u * k * proposal.density(x1, x2) < density.density(x1, x2) {
                    accepted.push((x1, x2));
                }
            }
            (accepted, proposed)
        })
        .collect();
    let proposed: u64 = parts.iter().map(|p| p.1).sum();
    let samples: Vec<(f64, f64)> = parts.into_iter().flat_map(|p| p.0).collect();
    Ok(SampleBatch {
        seed,
        count,
        acceptance_rate: if proposed == 0 { 1.0 } else { count as f64 / proposed as f64 },
        proposed,
        samples,
    })
}

/// Binned density estimate. Samples outside the ranges are counted in
/// `overflow`; `counts` plus `overflow` is the batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub bins: (usize, usize),
    /// Row-major, `ix * bins.1 + iy`.
    pub counts: Vec<u64>,
    pub overflow: u64,
    /// `count / (N_in dx dy)`; integrates to 1 over the ranges.
    pub density: Vec<f64>,
}

impl Histogram2D {
    pub fn bin_width(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.bins.0 as f64,
            (self.y_range.1 - self.y_range.0) / self.bins.1 as f64,
        )
    }

    pub fn bin_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (wx, wy) = self.bin_width();
        (self.x_range.0 + (ix as f64 + 0.5) * wx, self.y_range.0 + (iy as f64 + 0.5) * wy)
    }

    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.in_range() + self.overflow
    }

    /// Riemann sum of the estimate; 1 up to rounding.
    pub fn integral(&self) -> f64 {
        let (wx, wy) = self.bin_width();
        self.density.iter().sum::<f64>() * wx * wy
    }

    /// Writes `x1,x2,value` rows at the bin centers.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let points: Vec<(f64, f64)> = (0..self.bins.0)
            .flat_map(|ix| (0..self.bins.1).map(move |iy| (ix, iy)))
            .map(|(ix, iy)| self.bin_center(ix, iy))
            .collect();
        write_grid_csv(out, &points, &self.density)
    }

    /// Bin probabilities of `density`, each integrated by 4x4-point
    /// Gauss-Legendre quadrature.
    pub fn bin_probabilities(&self, density: &JointDensity) -> Vec<f64> {
        const NODES: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        const WEIGHTS: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        let (wx, wy) = self.bin_width();
        let mut out = Vec::with_capacity(self.counts.len());
        for ix in 0..self.bins.0 {
            for iy in 0..self.bins.1 {
                let (cx, cy) = self.bin_center(ix, iy);
                let mut acc = 0.0;
                for (a, wa) in NODES.iter().zip(WEIGHTS) {
                    for (b, wb) in NODES.iter().zip(WEIGHTS) {
                        acc += wa * wb * density.density(cx + 0.5 * wx * a, cy + 0.5 * wy * b);
                    }
                }
                out.push(acc * 0.25 * wx * wy);
            }
        }
        out
    }

    /// Analytic bin averages, renormalized to the mass inside the ranges so
    /// they are comparable with [`Histogram2D::density`].
    pub fn analytic_density(&self, density: &JointDensity) -> Vec<f64> {
        let probs = self.bin_probabilities(density);
        let mass: f64 = probs.iter().sum();
        let (wx, wy) = self.bin_width();
        probs.into_iter().map(|p| p / (mass * wx * wy)).collect()
    }

    pub fn mean_abs_error(&self, density: &JointDensity) -> f64 {
        let exact = self.analytic_density(density);
        exact.iter().zip(&self.density).map(|(a, b)| (a - b).abs()).sum::<f64>() / exact.len() as f64
    }

    pub fn max_abs_error(&self, density: &JointDensity) -> f64 {
        let exact = self.analytic_density(density);
        exact.iter().zip(&self.density).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Bins `samples` on `bins.0 x bins.1` cells over the given ranges; upper
/// edges belong to the last bin.
pub fn histogram(samples: &[(f64, f64)], bins: (usize, usize), x_range: (f64, f64), y_range: (f64, f64)) -> McResult<Histogram2D> {
    if samples.is_empty() {
        return Err(McError::EmptyBatch);
    }
    if bins.0 == 0 || bins.1 == 0 {
        return Err(McError::InvalidHistogram("bin counts must be positive".into()));
    }
    for (lo, hi) in [x_range, y_range] {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(McError::InvalidHistogram(format!("range ({lo}, {hi}) is empty")));
        }
    }
    let mut h = Histogram2D {
        x_range,
        y_range,
        bins,
        counts: vec![0; bins.0 * bins.1],
        overflow: 0,
        density: Vec::new(),
    };
    let (wx, wy) = h.bin_width();
    let locate = |x: f64, (lo, hi): (f64, f64), w: f64, n: usize| -> Option<usize> {
        if !(x >= lo && x <= hi) {
            return None;
        }
        Some((((x - lo) / w) as usize).min(n - 1))
    };
    for &(x1, x2) in samples {
        match (locate(x1, x_range, wx, bins.0), locate(x2, y_range, wy, bins.1)) {
            (Some(ix), Some(iy)) => h.counts[ix * bins.1 + iy] += 1,
            _ => h.overflow += 1,
        }
    }
    let inside = h.in_range();
    if inside == 0 {
        return Err(McError::InvalidHistogram("no samples fall inside the ranges".into()));
    }
    let scale = 1.0 / (inside as f64 * wx * wy);
    h.density = h.counts.iter().map(|&c| c as f64 * scale).collect();
    Ok(h)
}

/// Symmetric square histogram `[-range, range]^2`.
pub fn square_histogram(samples: &[(f64, f64)], bins: usize, range: f64) -> McResult<Histogram2D> {
    histogram(samples, (bins, bins), (-range, range), (-range, range))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub samples: usize,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// Cells entering the chi-square sum, including the pooled cell.
    pub cells: usize,
    /// Bins merged into the pooled cell with the overflow.
    pub pooled_bins: usize,
    pub ks_x1: KsResult,
    pub ks_x2: KsResult,
    pub mean_abs_bin_error: f64,
    pub max_abs_bin_error: f64,
}

/// `P(D > d)` under the asymptotic Kolmogorov distribution, with the
/// usual small-sample correction of the argument.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test of `values` against `cdf`.
pub fn ks_test(values: &mut [f64], cdf: impl Fn(f64) -> f64) -> McResult<KsResult> {
    if values.is_empty() {
        return Err(McError::EmptyBatch);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let statistic = values.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i as f64 + 1.0) / n - f)
    });
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_p_value(statistic, values.len()),
    })
}

/// Chi-square test of the histogram against `density` and KS tests of both
/// marginals of `samples`, which must be the batch the histogram was built from.
pub fn goodness_of_fit(h: &Histogram2D, samples: &[(f64, f64)], density: &JointDensity) -> McResult<FitReport> {
    if samples.is_empty() {
        return Err(McError::InsufficientSamples("no samples".into()));
    }
    if h.total() != samples.len() as u64 {
        return Err(McError::InvalidHistogram(format!(
            "histogram holds {} samples but the batch has {}",
            h.total(),
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let probs = h.bin_probabilities(density);
    let inside: f64 = probs.iter().sum();

    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = ((1.0 - inside).max(0.0) * n, h.overflow as f64);
    let mut pooled_bins = 0;
    for (p, &c) in probs.iter().zip(&h.counts) {
        let e = p * n;
        if e >= MIN_EXPECTED_COUNT {
            cells.push((e, c as f64));
        } else {
            pooled.0 += e;
            pooled.1 += c as f64;
            pooled_bins += 1;
        }
    }
    if pooled.0 >= MIN_EXPECTED_COUNT || cells.is_empty() {
        cells.push(pooled);
    } else if let Some(smallest) = cells.iter_mut().min_by(|a, b| a.0.total_cmp(&b.0)) {
        smallest.0 += pooled.0;
        smallest.1 += pooled.1;
    }
    if cells.len() < 2 {
        return Err(McError::InsufficientSamples(format!(
            "only {} chi-square cell(s) reach an expected count of {MIN_EXPECTED_COUNT}",
            cells.len()
        )));
    }
    let chi_square: f64 = cells.iter().filter(|c| c.0 > 0.0).map(|(e, o)| (o - e).powi(2) / e).sum();
    let degrees_of_freedom = cells.len() - 1;
    let dist = ChiSquared::new(degrees_of_freedom as f64).expect("positive degrees of freedom");
    let p_value = dist.sf(chi_square);

    let mut x1: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mut x2: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let cdf = |x| density.marginal_cdf(x);
    Ok(FitReport {
        samples: samples.len(),
        chi_square,
        degrees_of_freedom,
        p_value,
        cells: cells.len(),
        pooled_bins,
        ks_x1: ks_test(&mut x1, cdf)?,
        ks_x2: ks_test(&mut x2, cdf)?,
        mean_abs_bin_error: h.mean_abs_error(density),
        max_abs_bin_error: h.max_abs_error(density),
    })
}

/// Square `n x n` grid of points on `[-range, range]^2`, row-major in `x1`.
pub fn square_grid(n: usize, range: f64) -> Vec<(f64, f64)> {
    let step = if n > 1 { 2.0 * range / (n - 1) as f64 } else { 0.0 };
    let coord = |i: usize| if n > 1 { -range + i as f64 * step } else { 0.0 };
    (0..n).flat_map(|i| (0..n).map(move |j| (coord(i), coord(j)))).collect()
}

pub fn density_grid(density: &JointDensity, points: &[(f64, f64)]) -> Vec<f64> {
    points.iter().map(|&(x1, x2)| density.density(x1, x2)).collect()
}

/// Writes `x1,x2,value` rows.
pub fn write_grid_csv<W: Write>(mut out: W, points: &[(f64, f64)], values: &[f64]) -> std::io::Result<()> {
    writeln!(out, "x1,x2,value")?;
    for ((x1, x2), v) in points.iter().zip(values) {
        writeln!(out, "{x1},{x2},{v}")?;
    }
    Ok(())
}

/// Result of fitting `ln p = c0 - (x1+x2)^2 / (kA A) - (x1-x2)^2 / (kB B)`
/// to reference density values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionFit {
    pub variance_factor_sum: f64,
    pub variance_factor_difference: f64,
    /// Fitted prefactor divided by `1 / (pi sqrt(A B))`.
    pub prefactor_ratio: f64,
    /// Fitted prefactor divided by the printed `2 / (pi A B)`.
    pub printed_prefactor_ratio: f64,
    pub points_used: usize,
}

/// Least-squares fit of the Gaussian constants to reference values of the
/// squeezed-vacuum density, typically from the Fock-space oracle. Log
/// residuals are weighted by `p / max p`; points below `1e-12` of the
/// largest value are ignored.
pub fn fit_variance_convention(params: &PerelomovDensityParams, points: &[(f64, f64)], values: &[f64]) -> McResult<ConventionFit> {
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let (a, b) = (params.a(), params.b());
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    let mut used = 0;
    for (&(x1, x2), &p) in points.iter().zip(values) {
        if !(p > 1e-12 * peak) {
            continue;
        }
        let row = Vector3::new(1.0, -(x1 + x2).powi(2) / a, -(x1 - x2).powi(2) / b);
        let w = p / peak;
        normal += row * row.transpose() * w;
        rhs += row * (p.ln() * w);
        used += 1;
    }
    let sol = normal
        .try_inverse()
        .map(|inv| inv * rhs)
        .filter(|_| used >= 3)
        .ok_or_else(|| McError::InsufficientSamples("fit points do not determine all three constants".into()))?;
    let prefactor = sol[0].exp();
    Ok(ConventionFit {
        variance_factor_sum: 1.0 / sol[1],
        variance_factor_difference: 1.0 / sol[2],
        prefactor_ratio: prefactor * PI * (a * b).sqrt(),
        printed_prefactor_ratio: prefactor / params.printed_normalization(),
        points_used: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{perelomov_state, quadrature_density_oracle, truncated_perelomov_state, FockSpace};
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, FRAC_PI_8};

    fn fig1() -> PerelomovDensityParams {
        PerelomovDensityParams::new(1.0, FRAC_PI_4, FRAC_PI_4, FRAC_PI_2).unwrap()
    }

    fn fig2() -> PerelomovDensityParams {
        PerelomovDensityParams::new(1.0, FRAC_PI_4, FRAC_PI_4, -FRAC_PI_4).unwrap()
    }

    fn fig3() -> TruncatedDensityParams {
        TruncatedDensityParams::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, FRAC_PI_8, FRAC_PI_4, FRAC_PI_4).unwrap()
    }

    fn integrate(f: impl Fn(f64, f64) -> f64, half: f64, n: usize) -> f64 {
        // Composite Simpson in both directions.
        let h = 2.0 * half / n as f64;
        let w = |i: usize| if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let mut acc = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                acc += w(i) * w(j) * f(-half + i as f64 * h, -half + j as f64 * h);
            }
        }
        acc * h * h / 9.0
    }

    #[test]
    fn printed_constants_at_fig1() {
        let p = fig1();
        assert!((p.a() - (-2.0f64).exp()).abs() < 1e-12);
        assert!((p.b() - 2.0f64.exp()).abs() < 1e-12);
        assert!((p.a() - 0.135335).abs() < 1e-6);
        assert!((p.b() - 7.389056).abs() < 1e-6);
        // With A B = 1 the printed form is normalized, but in quarter-vacuum units.
        assert!((p.printed_normalization() - 2.0 * p.normalization()).abs() < 1e-12);
        assert!((integrate(|a, b| p.printed_density(a, b), 12.0, 600) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn product_ab_identity() {
        for (r, psi) in [(0.3, 0.2), (1.0, 1.3), (0.7, -2.0)] {
            let p = PerelomovDensityParams::new(r, psi, 0.0, 0.0).unwrap();
            let t2 = r.tanh().powi(2);
            let z = C64::new(1.0, 0.0) - C64::from_polar(t2, -2.0 * psi);
            let expected = z.norm_sqr() / (1.0 - t2).powi(2);
            assert!((p.a() * p.b() - expected).abs() < 1e-10 * expected);
        }
    }

    use num_complex::Complex64 as C64;

    #[test]
    fn densities_integrate_to_one() {
        for p in [fig1(), fig2(), PerelomovDensityParams::new(0.6, 0.3, 1.0, -0.4).unwrap()] {
            assert!((integrate(|a, b| p.density(a, b), 12.0, 600) - 1.0).abs() < 1e-6);
        }
        let t = fig3();
        assert!((integrate(|a, b| t.density(a, b), 6.0, 400) - 1.0).abs() < 1e-6);
        // The printed form fails once A B != 1.
        let p = fig2();
        assert!((integrate(|a, b| p.printed_density(a, b), 12.0, 600) - 1.0).abs() > 0.1);
    }

    #[test]
    fn vacuum_limit_and_symmetry() {
        let p = PerelomovDensityParams::new(0.0, 0.4, 0.1, 0.2).unwrap();
        for (x1, x2) in [(0.0f64, 0.0f64), (0.5, -1.2), (2.0, 1.0)] {
            let vac = (-x1 * x1 - x2 * x2).exp() / PI;
            assert!((p.density(x1, x2) - vac).abs() < 1e-15);
            let q = fig2();
            assert_eq!(q.density(x1, x2), q.density(-x1, -x2));
        }
    }

    #[test]
    fn oracle_agreement() {
        let space = FockSpace::new(60).unwrap();
        let points = square_grid(41, 4.0);
        for p in [fig1(), fig2(), PerelomovDensityParams::new(0.8, 0.5, 0.7, -1.1).unwrap()] {
            let state = perelomov_state(space, p.r, p.gamma).unwrap().state;
            let oracle = quadrature_density_oracle(&state, p.phi1, p.phi2, &points);
            let dev = points
                .iter()
                .zip(&oracle)
                .map(|(&(a, b), o)| (p.density(a, b) - o).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-8, "deviation {dev}");
        }
        let t = fig3();
        let state = truncated_perelomov_state(space, t.c1, t.c2, t.delta).unwrap();
        let oracle = quadrature_density_oracle(&state, t.phi1, t.phi2, &points);
        for (&(a, b), o) in points.iter().zip(&oracle) {
            assert!((t.density(a, b) - o).abs() < 1e-10);
        }
    }

    #[test]
    fn convention_fit_recovers_factor_two() {
        let space = FockSpace::new(60).unwrap();
        let p = fig2();
        let points = square_grid(41, 4.0);
        let state = perelomov_state(space, p.r, p.gamma).unwrap().state;
        let oracle = quadrature_density_oracle(&state, p.phi1, p.phi2, &points);
        let fit = fit_variance_convention(&p, &points, &oracle).unwrap();
        assert!((fit.variance_factor_sum - QUADRATURE_VARIANCE_FACTOR).abs() < 1e-6);
        assert!((fit.variance_factor_difference - QUADRATURE_VARIANCE_FACTOR).abs() < 1e-6);
        assert!((fit.prefactor_ratio - 1.0).abs() < 1e-6);
        let expected_printed = (p.a() * p.b()).sqrt() / 2.0;
        assert!((fit.printed_prefactor_ratio - expected_printed).abs() < 1e-6);
    }

    #[test]
    fn truncated_density_properties() {
        let t = fig3();
        for x2 in [-1.0, 0.0, 0.7] {
            assert!((t.density(0.0, x2) - t.c1 * t.c1 * (-x2 * x2).exp() / PI).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let x1 = rng.random_range(-6.0..6.0);
            let x2 = rng.random_range(-6.0..6.0);
            assert!(t.density(x1, x2) >= 0.0);
        }
        // Marginal CDF against direct integration.
        let h = 1e-4;
        let direct: f64 = (0..63_000)
            .map(|i| -6.0 + (i as f64 + 0.5) * h)
            .map(|x| (-x * x).exp() / PI.sqrt() * (t.c1 * t.c1 + 2.0 * t.c2 * t.c2 * x * x) * h)
            .sum();
        assert!((t.marginal_cdf(0.3) - direct).abs() < 1e-6);
    }

    #[test]
    fn envelope_constants() {
        let t = JointDensity::Truncated(fig3());
        let k = t.envelope_constant(t.default_proposal()).unwrap();
        assert!((k - 16.0 * (-1.5f64).exp()).abs() < 1e-12);
        verify_envelope(&t, t.default_proposal(), k).unwrap();
        // The bracket bound is attained when the interference term is in phase.
        let tight = JointDensity::Truncated(TruncatedDensityParams::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0, 0.0).unwrap());
        assert!(matches!(
            verify_envelope(&tight, tight.default_proposal(), 0.99 * k),
            Err(McError::EnvelopeViolation { .. })
        ));
        let p = JointDensity::Perelomov(fig1());
        let k = p.envelope_constant(p.default_proposal()).unwrap();
        assert!((k - 2.0f64.exp()).abs() < 1e-9);
        assert!(p.envelope_constant(Proposal::new(0.5).unwrap()).is_err());
        assert!(t.envelope_constant(Proposal::new(0.7).unwrap()).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_matches_moments() {
        for d in [JointDensity::Perelomov(fig1()), JointDensity::Truncated(fig3())] {
            let proposal = d.default_proposal();
            let a = rejection_sample(&d, proposal, 11, 20_000).unwrap();
            let b = rejection_sample(&d, proposal, 11, 20_000).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.samples.len(), 20_000);
            let n = a.samples.len() as f64;
            let var = d.marginal_variance();
            let (m1, m2) = a.mean();
            assert!(m1.abs() < 5.0 * (var / n).sqrt() && m2.abs() < 5.0 * (var / n).sqrt());
            let (v1, v2) = a.variance();
            let (e1, e2) = a.variance_standard_error();
            assert!((v1 - var).abs() < 5.0 * e1 && (v2 - var).abs() < 5.0 * e2);

            let k = d.envelope_constant(proposal).unwrap();
            let p = 1.0 / k;
            let se = (p * (1.0 - p) / a.proposed as f64).sqrt();
            assert!((a.acceptance_rate - p).abs() < 3.0 * se, "rate {} vs {}", a.acceptance_rate, p);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let d = JointDensity::Truncated(fig3());
        let a = rejection_sample(&d, d.default_proposal(), 1, 100).unwrap();
        let b = rejection_sample(&d, d.default_proposal(), 2, 100).unwrap();
        assert_ne!(a.samples, b.samples);
        let c = rejection_sample(&d, d.default_proposal(), 1, 5000).unwrap();
        assert_eq!(&c.samples[..100], &a.samples[..]);
    }

    #[test]
    fn histogram_basics() {
        let h = square_histogram(&[(0.1, -0.1)], 10, 1.0).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert!((h.integral() - 1.0).abs() < 1e-12);
        let h = square_histogram(&[(1.0, 1.0), (-1.0, -1.0), (3.0, 0.0)], 4, 1.0).unwrap();
        assert_eq!(h.counts[15], 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.overflow, 1);
        assert_eq!(h.total(), 3);
        assert!(matches!(square_histogram(&[], 4, 1.0), Err(McError::EmptyBatch)));
        assert!(square_histogram(&[(0.0, 0.0)], 0, 1.0).is_err());
        assert!(square_histogram(&[(5.0, 0.0)], 4, 1.0).is_err());
    }

    #[test]
    fn bin_probabilities_sum_to_mass() {
        let d = JointDensity::Perelomov(fig1());
        let h = square_histogram(&[(0.0, 0.0)], 50, 12.0).unwrap();
        let total: f64 = h.bin_probabilities(&d).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn goodness_of_fit_accepts_own_density_and_rejects_other() {
        let d1 = JointDensity::Perelomov(fig1());
        let d2 = JointDensity::Perelomov(fig2());
        let batch = rejection_sample(&d1, d1.default_proposal(), 3, 40_000).unwrap();
        let h = square_histogram(&batch.samples, 50, 5.0).unwrap();
        let own = goodness_of_fit(&h, &batch.samples, &d1).unwrap();
        assert!(own.p_value > 0.001, "{own:?}");
        assert!(own.ks_x1.p_value > 0.001 && own.ks_x2.p_value > 0.001);
        let other = goodness_of_fit(&h, &batch.samples, &d2).unwrap();
        assert!(other.p_value < 1e-6);
        assert!(matches!(goodness_of_fit(&h, &[], &d1), Err(McError::InsufficientSamples(_))));
    }

    #[test]
    fn csv_round_trip() {
        let d = JointDensity::Truncated(fig3());
        let batch = rejection_sample(&d, d.default_proposal(), 5, 300).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let back = read_samples_csv(buf.as_slice()).unwrap();
        assert_eq!(back, batch.samples);
        assert!(read_samples_csv("a,b\n".as_bytes()).is_err());
        assert!(matches!(read_samples_csv("x1,x2\n1,zz\n".as_bytes()), Err(McError::Csv { line: 2, .. })));
    }

    #[test]
    fn kolmogorov_limits() {
        assert_eq!(kolmogorov_p_value(0.0, 100), 1.0);
        assert!(kolmogorov_p_value(0.5, 100) < 1e-10);
        // Critical value 1.358 / sqrt(n) has p close to 0.05.
        let n = 10_000;
        assert!((kolmogorov_p_value(1.358 / (n as f64).sqrt(), n) - 0.05).abs() < 0.003);
    }
}
