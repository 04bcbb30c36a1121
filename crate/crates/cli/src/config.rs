//! Run configuration: TOML files, shipped presets and flag overrides.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use arrayhd::array_bhd::DEFAULT_BETA;
use arrayhd::mc_lab::{JointDensity, PerelomovDensityParams, TruncatedDensityParams, DEFAULT_BINS};
use arrayhd::mode_grid::ModeFamily;
use arrayhd::single_detector::{SelectionStrategy, DEFAULT_SELECTION_SEEDS};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },

    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("unknown preset {0:?} (available: fig1, fig2, fig3, vacuum)")]
    UnknownPreset(String),

    #[error("invalid value: {0}")]
    Invalid(String),
}

/// An angle in radians. In TOML it may be a number or an expression such
/// as `"pi/4"`, `"-3pi/2"` or `"0.5*pi"`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Angle(pub f64);

impl Angle {
    pub fn radians(self) -> f64 {
        self.0
    }
}

impl FromStr for Angle {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::Invalid(format!("cannot parse angle {s:?}"));
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        let (num, den) = match compact.split_once('/') {
            Some((n, d)) => (n.to_string(), d.parse::<f64>().map_err(|_| bad())?),
            None => (compact.clone(), 1.0),
        };
        let value = if let Some(front) = num.strip_suffix("pi") {
            let front = front.strip_suffix('*').unwrap_or(front);
            let coeff = match front {
                "" | "+" => 1.0,
                "-" => -1.0,
                f => f.parse::<f64>().map_err(|_| bad())?,
            };
            coeff * PI
        } else {
            num.parse::<f64>().map_err(|_| bad())?
        };
        let angle = value / den;
        if !angle.is_finite() {
            return Err(bad());
        }
        Ok(Angle(angle))
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Angle {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Angle {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(x) => Ok(Angle(x)),
            Raw::Int(x) => Ok(Angle(x as f64)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Signal state whose joint quadrature density is studied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StateConfig {
    Perelomov {
        r: f64,
        gamma: Angle,
        phi1: Angle,
        phi2: Angle,
    },
    Truncated {
        c1: f64,
        c2: f64,
        delta: Angle,
        phi1: Angle,
        phi2: Angle,
    },
}

impl StateConfig {
    pub fn density(&self) -> Result<JointDensity, ConfigError> {
        let invalid = |e: arrayhd::mc_lab::McError| ConfigError::Invalid(e.to_string());
        Ok(match *self {
            StateConfig::Perelomov { r, gamma, phi1, phi2 } => JointDensity::Perelomov(
                PerelomovDensityParams::new(r, gamma.0, phi1.0, phi2.0).map_err(invalid)?,
            ),
            StateConfig::Truncated { c1, c2, delta, phi1, phi2 } => JointDensity::Truncated(
                TruncatedDensityParams::new(c1, c2, delta.0, phi1.0, phi2.0).map_err(invalid)?,
            ),
        })
    }

    /// Short tag for file names, e.g. `perelomov-r1-g0.785398-p0.785398_1.570796`.
    pub fn tag(&self) -> String {
        match *self {
            StateConfig::Perelomov { r, gamma, phi1, phi2 } => {
                format!("perelomov-r{}-g{}-p{}_{}", num(r), num(gamma.0), num(phi1.0), num(phi2.0))
            }
            StateConfig::Truncated { c1, c2, delta, phi1, phi2 } => format!(
                "truncated-c{}_{}-d{}-p{}_{}",
                num(c1),
                num(c2),
                num(delta.0),
                num(phi1.0),
                num(phi2.0)
            ),
        }
    }
}

fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub samples: usize,
    pub bins: usize,
    /// Histogram covers `[-range, range]^2`.
    pub range: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            samples: 160_000,
            bins: DEFAULT_BINS,
            range: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitiesConfig {
    /// Points per axis.
    pub points: usize,
    pub range: f64,
    /// Fock cutoff of the oracle evaluation.
    pub cutoff: usize,
}

impl Default for DensitiesConfig {
    fn default() -> Self {
        Self {
            points: 41,
            range: 4.0,
            cutoff: 60,
        }
    }
}

/// Pixel grid and mode basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub pixels: usize,
    pub side: f64,
    /// Waist as a fraction of the detector side.
    pub waist: f64,
    pub basis: BasisConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pixels: 16,
            side: 1.0,
            waist: 0.3,
            basis: BasisConfig::default(),
        }
    }
}

/// A mode basis: named families orthonormalized on the grid, each with an
/// optional tilt `(kx, ky)` in units of `2 pi / side`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub modes: Vec<String>,
    #[serde(default)]
    pub tilts: Vec<(f64, f64)>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            modes: vec!["hg(0,0)".into(), "hg(1,0)".into()],
            tilts: vec![(1.0, 0.0), (0.0, 1.0)],
        }
    }
}

impl BasisConfig {
    pub fn families(&self) -> Result<Vec<ModeFamily>, ConfigError> {
        self.modes
            .iter()
            .map(|m| m.parse().map_err(|e: arrayhd::mode_grid::GridError| ConfigError::Invalid(e.to_string())))
            .collect()
    }

    pub fn tilt(&self, i: usize) -> (f64, f64) {
        self.tilts.get(i).copied().unwrap_or((0.0, 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleDetectorConfig {
    pub cutoff: usize,
    pub beta: f64,
    pub phi: Angle,
    pub theta: Angle,
    pub nu: Angle,
    pub seeds: usize,
    pub candidates: usize,
    pub strategy: SelectionStrategy,
}

impl Default for SingleDetectorConfig {
    fn default() -> Self {
        Self {
            cutoff: 12,
            beta: DEFAULT_BETA,
            phi: Angle(PI / 4.0),
            theta: Angle(PI / 2.0),
            nu: Angle(PI / 6.0),
            seeds: DEFAULT_SELECTION_SEEDS,
            candidates: 16,
            strategy: SelectionStrategy::GreedyCondition,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub cutoff: usize,
    pub beta: f64,
    /// `(theta, nu)` pairs.
    pub mixers: Vec<(Angle, Angle)>,
    pub phis: Vec<Angle>,
    pub nu1: Angle,
    pub nu2: Angle,
    pub thetas: Vec<Angle>,
    pub tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            cutoff: 12,
            beta: DEFAULT_BETA,
            mixers: vec![(Angle(0.0), Angle(0.0)), (Angle(PI / 2.0), Angle(PI / 6.0)), (Angle(0.9), Angle(1.2))],
            phis: vec![Angle(0.0), Angle(PI / 4.0), Angle(PI / 2.0)],
            nu1: Angle(PI / 6.0),
            nu2: Angle(PI / 3.0),
            thetas: vec![Angle(0.0), Angle(PI / 2.0), Angle(PI)],
            tolerance: 1e-10,
        }
    }
}

/// Everything a run needs. Every field has a default, so a config file only
/// lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub state: StateConfig,
    pub simulate: SimulateConfig,
    pub densities: DensitiesConfig,
    pub detector: DetectorConfig,
    pub single_detector: SingleDetectorConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "fig1".into(),
            seed: 1,
            state: StateConfig::Perelomov {
                r: 1.0,
                gamma: Angle(PI / 4.0),
                phi1: Angle(PI / 4.0),
                phi2: Angle(PI / 2.0),
            },
            simulate: SimulateConfig::default(),
            densities: DensitiesConfig::default(),
            detector: DetectorConfig::default(),
            single_detector: SingleDetectorConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

const PRESETS: [(&str, &str); 4] = [
    ("fig1", include_str!("../presets/fig1.toml")),
    ("fig2", include_str!("../presets/fig2.toml")),
    ("fig3", include_str!("../presets/fig3.toml")),
    ("vacuum", include_str!("../presets/vacuum.toml")),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
        Self::from_toml(text)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}
