//! The `simulate`, `densities` and `single-detector` commands.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use arrayhd::array_bhd::{mixed_mode_operators, pixel_counts, reconstruct_mixed_quadratures, LoConfig, MixerConfig, Port};
use arrayhd::fock::{perelomov_state, quadrature_density_oracle, truncated_perelomov_state, FockSpace, Mode, StateVector};
use arrayhd::mc_lab::{
    density_grid, goodness_of_fit, rejection_sample, square_grid, square_histogram, write_grid_csv, FitReport, JointDensity,
};
use arrayhd::mode_grid::{gram_schmidt, sample_mode, BeamShape, ModeBasis, ModeFunction, PixelField, PixelGrid};
use arrayhd::single_detector::{
    build_m_matrix, direct_v, pixel_differences, quadratures_from_v, recover_v, select_pixels, DetectorError,
    SelectionConfig, SelectionReport,
};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, StateConfig};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Failed(String),

    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

impl CommandError {
    /// 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type CommandResult<T> = Result<T, CommandError>;

fn failed(e: impl std::fmt::Display) -> CommandError {
    CommandError::Failed(e.to_string())
}

/// Creates `dir` and writes `name` inside it through `f`.
pub fn write_file(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CommandResult<PathBuf> {
    let path = dir.join(name);
    let err = |source| CommandError::Write {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(err)?;
    let file = File::create(&path).map_err(err)?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(err)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CommandResult<PathBuf> {
    write_file(dir, name, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        writeln!(out)
    })
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct VarianceCheck {
    pub analytic: f64,
    pub sample: (f64, f64),
    /// Largest relative deviation of the two sample variances.
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub name: String,
    pub seed: u64,
    pub samples: usize,
    pub state: StateConfig,
    pub proposal_sigma: f64,
    pub envelope_constant: f64,
    pub acceptance_rate: f64,
    pub expected_acceptance_rate: f64,
    pub proposed: u64,
    pub marginal_variance: VarianceCheck,
    pub bins: usize,
    pub range: f64,
    pub overflow: u64,
    pub fit: FitReport,
    pub files: Vec<String>,
}

/// Draws samples, bins them and writes samples, histogram, analytic grid
/// and fit report to `out`.
pub fn simulate(config: &RunConfig, out: &Path) -> CommandResult<SimulateReport> {
    let density = config.state.density()?;
    let sim = &config.simulate;
    if sim.samples == 0 {
        return Err(ConfigError::Invalid("samples must be positive".into()).into());
    }
    if sim.bins == 0 || !(sim.range > 0.0) {
        return Err(ConfigError::Invalid("bins and range must be positive".into()).into());
    }
    let proposal = density.default_proposal();
    let k = density.envelope_constant(proposal).map_err(failed)?;
    let batch = rejection_sample(&density, proposal, config.seed, sim.samples).map_err(failed)?;
    let h = square_histogram(&batch.samples, sim.bins, sim.range).map_err(failed)?;
    let fit = goodness_of_fit(&h, &batch.samples, &density).map_err(failed)?;

    let analytic_var = density.marginal_variance();
    let (v1, v2) = batch.variance();
    let marginal_variance = VarianceCheck {
        analytic: analytic_var,
        sample: (v1, v2),
        relative_error: ((v1 - analytic_var).abs().max((v2 - analytic_var).abs())) / analytic_var,
    };

    let stem = format!("{}-{}-n{}-seed{}", config.name, config.state.tag(), sim.samples, config.seed);
    let centers: Vec<(f64, f64)> = (0..sim.bins)
        .flat_map(|i| (0..sim.bins).map(move |j| (i, j)))
        .map(|(i, j)| h.bin_center(i, j))
        .collect();
    let analytic = density_grid(&density, &centers);
    let mut files = vec![
        write_file(out, &format!("{stem}-samples.csv"), |w| batch.write_csv(w))?,
        write_file(out, &format!("{stem}-histogram.csv"), |w| h.write_csv(w))?,
        write_json(out, &format!("{stem}-histogram.json"), &h)?,
        write_file(out, &format!("{stem}-analytic.csv"), |w| write_grid_csv(w, &centers, &analytic))?,
    ];
    let report_name = format!("{stem}-report.json");
    files.push(out.join(&report_name));
    let report = SimulateReport {
        name: config.name.clone(),
        seed: config.seed,
        samples: sim.samples,
        state: config.state,
        proposal_sigma: proposal.sigma(),
        envelope_constant: k,
        acceptance_rate: batch.acceptance_rate,
        expected_acceptance_rate: 1.0 / k,
        proposed: batch.proposed,
        marginal_variance,
        bins: sim.bins,
        range: sim.range,
        overflow: h.overflow,
        fit,
        files: file_names(&files),
    };
    write_json(out, &report_name, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DensitiesReport {
    pub name: String,
    pub state: StateConfig,
    pub points: usize,
    pub range: f64,
    pub cutoff: usize,
    pub truncation_weight: f64,
    pub max_abs_delta: f64,
    pub files: Vec<String>,
}

/// Fock-space state matching `state`, with its discarded tail weight.
pub fn oracle_state(state: &StateConfig, cutoff: usize) -> CommandResult<(StateVector, f64)> {
    let space = FockSpace::new(cutoff).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    match *state {
        StateConfig::Perelomov { r, gamma, .. } => {
            let t = perelomov_state(space, r, gamma.radians()).map_err(failed)?;
            Ok((t.state, t.truncation_weight))
        }
        StateConfig::Truncated { c1, c2, delta, .. } => {
            let s = truncated_perelomov_state(space, c1, c2, delta.radians()).map_err(failed)?;
            Ok((s, 0.0))
        }
    }
}

fn phases(state: &StateConfig) -> (f64, f64) {
    match *state {
        StateConfig::Perelomov { phi1, phi2, .. } | StateConfig::Truncated { phi1, phi2, .. } => {
            (phi1.radians(), phi2.radians())
        }
    }
}

/// Writes the analytic density, the Fock-space oracle and their difference
/// on a square grid.
pub fn densities(config: &RunConfig, out: &Path) -> CommandResult<DensitiesReport> {
    let density: JointDensity = config.state.density()?;
    let d = &config.densities;
    if d.points == 0 || !(d.range > 0.0) {
        return Err(ConfigError::Invalid("points and range must be positive".into()).into());
    }
    let (state, truncation_weight) = oracle_state(&config.state, d.cutoff)?;
    let (phi1, phi2) = phases(&config.state);
    let points = square_grid(d.points, d.range);
    let analytic = density_grid(&density, &points);
    let oracle = quadrature_density_oracle(&state, phi1, phi2, &points);
    let delta: Vec<f64> = analytic.iter().zip(&oracle).map(|(a, o)| a - o).collect();
    let max_abs_delta = delta.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let stem = format!("{}-{}-grid{}-range{}", config.name, config.state.tag(), d.points, d.range);
    let files = vec![
        write_file(out, &format!("{stem}-analytic.csv"), |w| write_grid_csv(w, &points, &analytic))?,
        write_file(out, &format!("{stem}-oracle.csv"), |w| write_grid_csv(w, &points, &oracle))?,
        write_file(out, &format!("{stem}-delta.csv"), |w| write_grid_csv(w, &points, &delta))?,
    ];
    let report_name = format!("{stem}-densities.json");
    let mut names = file_names(&files);
    names.push(report_name.clone());
    let report = DensitiesReport {
        name: config.name.clone(),
        state: config.state,
        points: d.points,
        range: d.range,
        cutoff: d.cutoff,
        truncation_weight,
        max_abs_delta,
        files: names,
    };
    write_json(out, &report_name, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviationRow {
    pub quantity: String,
    pub single_vs_two_port: Option<f64>,
    pub single_vs_direct: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SingleDetectorReport {
    pub modes: Vec<String>,
    pub grid: (usize, usize),
    pub cutoff: usize,
    pub selection: Option<SelectionReport>,
    pub condition: Option<f64>,
    pub tolerance: Option<f64>,
    pub deviations: Vec<DeviationRow>,
    pub v_pairing_defect: Option<f64>,
    pub passed: bool,
    pub diagnosis: Option<String>,
    pub files: Vec<String>,
}

/// Builds the configured mode functions; a basis is formed only when they
/// are linearly independent.
pub fn detector_modes(config: &RunConfig) -> CommandResult<(PixelGrid, Vec<ModeFunction>, Result<ModeBasis, String>)> {
    let det = &config.detector;
    let grid = PixelGrid::square(det.pixels, det.side).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let families = det.basis.families()?;
    let shape = BeamShape::with_waist(det.waist * det.side);
    let k = 2.0 * PI / det.side;
    let raw: Vec<PixelField> = families
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let (tx, ty) = det.basis.tilt(i);
            sample_mode(grid, f, shape.tilted(k * tx, k * ty)).map_err(|e| ConfigError::Invalid(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let normalized: Vec<ModeFunction> = raw
        .iter()
        .map(|f| ModeFunction::normalize(f.clone()).map_err(|e| ConfigError::Invalid(e.to_string())))
        .collect::<Result<_, _>>()?;
    let basis = gram_schmidt(&raw, grid).map_err(|e| e.to_string());
    let modes = match &basis {
        Ok(b) => b.modes().to_vec(),
        Err(_) => normalized,
    };
    Ok((grid, modes, basis))
}

/// Selects nine pixels, recovers both mixed quadratures from one port and
/// compares them with the two-port reconstruction and the direct operators.
pub fn single_detector(config: &RunConfig, out: &Path) -> CommandResult<SingleDetectorReport> {
    let sd = &config.single_detector;
    let (grid, modes, basis) = detector_modes(config)?;
    if modes.len() != 2 {
        return Err(ConfigError::Invalid(format!("the single-detector scheme needs 2 modes, got {}", modes.len())).into());
    }
    let space = FockSpace::new(sd.cutoff).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let lo = LoConfig::new(sd.beta, sd.phi.radians()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mix = MixerConfig::new(sd.theta.radians(), sd.nu.radians()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let selection_config = SelectionConfig {
        strategy: sd.strategy,
        seeds: sd.seeds,
        base_seed: config.seed,
        candidates: sd.candidates,
    };
    let mut report = SingleDetectorReport {
        modes: config.detector.basis.modes.clone(),
        grid: (grid.nx(), grid.ny()),
        cutoff: sd.cutoff,
        selection: None,
        condition: None,
        tolerance: None,
        deviations: Vec::new(),
        v_pairing_defect: None,
        passed: false,
        diagnosis: None,
        files: Vec::new(),
    };
    let name = format!("single-detector-{}-seed{}.json", config.name, config.seed);
    report.files.push(name.clone());

    let selection = match select_pixels(&modes, &grid, lo, selection_config) {
        Ok(s) => s,
        Err(e @ DetectorError::NoInvertibleSelection { .. }) => {
            let mut diagnosis = e.to_string();
            if let Err(b) = &basis {
                diagnosis = format!("{diagnosis}; the modes are not independent ({b})");
            }
            report.diagnosis = Some(diagnosis);
            write_json(out, &name, &report)?;
            return Ok(report);
        }
        Err(e) => return Err(failed(e)),
    };
    let basis = basis.map_err(CommandError::Failed)?;
    let chosen = selection.selection(&grid).map_err(failed)?;
    let m = build_m_matrix(&modes, &chosen, lo).map_err(failed)?;
    let mixed = mixed_mode_operators(space, mix);
    let counts = pixel_counts(&basis, &mixed, lo, Port::One).map_err(failed)?;
    let nd = pixel_differences(&counts, &chosen);
    let v = recover_v(&nd, &m, &grid).map_err(failed)?;
    let (x1, x2) = quadratures_from_v(&v);
    let (t1, t2) = reconstruct_mixed_quadratures(&basis, &mixed, lo).map_err(failed)?;

    let tolerance = 1e-9 * m.condition();
    let mut rows = vec![
        DeviationRow {
            quantity: "X'1(phi)".into(),
            single_vs_two_port: Some(x1.max_abs_diff(&t1)),
            single_vs_direct: x1.max_abs_diff(&mixed.quadrature(Mode::One, lo.phi())),
        },
        DeviationRow {
            quantity: "X'2(phi)".into(),
            single_vs_two_port: Some(x2.max_abs_diff(&t2)),
            single_vs_direct: x2.max_abs_diff(&mixed.quadrature(Mode::Two, lo.phi())),
        },
    ];
    let direct = direct_v(&mixed, lo.phi());
    let v_dev = v
        .entries()
        .iter()
        .zip(direct.entries())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    rows.push(DeviationRow {
        quantity: "V (all eight entries)".into(),
        single_vs_two_port: None,
        single_vs_direct: v_dev,
    });
    report.passed = rows
        .iter()
        .all(|r| r.single_vs_direct <= tolerance && r.single_vs_two_port.is_none_or(|d| d <= tolerance));
    report.v_pairing_defect = Some(v.pairing_defect());
    report.condition = Some(m.condition());
    report.tolerance = Some(tolerance);
    report.deviations = rows;
    report.selection = Some(selection);
    write_json(out, &name, &report)?;
    Ok(report)
}
