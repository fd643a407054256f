//! Black-body radiation: Planck density, Einstein rates, first-order rate
//! propagation and purity-degradation bounds.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, HBAR, PLANCK, SPEED_OF_LIGHT, TWO_PI};
use crate::error::{Error, Result};
use crate::levels::{LevelTable, PopulationState};
use crate::pulses::PulseLibrary;

/// Spectral energy density per unit angular frequency, J s / m^3.
pub fn planck_energy_density(omega: f64, temperature: f64) -> Result<f64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::config(format!("angular frequency must be positive, got {omega}")));
    }
    if !(temperature >= 0.0) {
        return Err(Error::config(format!("temperature must be non-negative, got {temperature}")));
    }
    if temperature == 0.0 {
        return Ok(0.0);
    }
    let prefactor = HBAR * omega.powi(3) / (std::f64::consts::PI.powi(2) * SPEED_OF_LIGHT.powi(3));
    Ok(prefactor / (HBAR * omega / (BOLTZMANN * temperature)).exp_m1())
}

/// Mean photon number at angular frequency omega.
fn occupation(omega: f64, temperature: f64) -> f64 {
    if temperature == 0.0 {
        0.0
    } else {
        1.0 / (HBAR * omega / (BOLTZMANN * temperature)).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EinsteinEntry {
    pub upper: usize,
    pub lower: usize,
    /// Spontaneous emission rate, 1/s.
    pub a: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EinsteinTable {
    pub entries: Vec<EinsteinEntry>,
}

impl EinsteinTable {
    pub fn validate(&self, table: &LevelTable) -> Result<()> {
        for e in &self.entries {
            if e.upper >= table.len() || e.lower >= table.len() {
                return Err(Error::data("Einstein entry references an unknown level"));
            }
            if !(e.a >= 0.0) || !e.a.is_finite() {
                return Err(Error::data("Einstein A must be finite and non-negative"));
            }
            let gap = table.energy_hz(e.upper) - table.energy_hz(e.lower);
            if gap == 0.0 {
                return Err(Error::data(format!(
                    "Einstein entry {} -> {} has zero frequency",
                    table.label(e.upper),
                    table.label(e.lower)
                )));
            }
            if gap < 0.0 {
                return Err(Error::data(format!(
                    "Einstein entry upper level {} lies below {}",
                    table.label(e.upper),
                    table.label(e.lower)
                )));
            }
        }
        Ok(())
    }
}

/// Parse rows `upper,lower,A_per_s` where levels are given by their key.
pub fn parse_einstein_table<R: Read>(reader: R, table: &LevelTable, delimiter: u8) -> Result<EinsteinTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("Einstein table header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["upper", "lower", "A_per_s"] {
        return Err(Error::data("Einstein table header must be upper,lower,A_per_s"));
    }
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        let find = |s: &str| {
            table
                .find_key(s)
                .ok_or_else(|| Error::data(format!("row {row}: unknown level {s:?}")))
        };
        let upper = find(&rec[0])?;
        let lower = find(&rec[1])?;
        let a: f64 = rec[2]
            .parse()
            .map_err(|_| Error::data(format!("row {row}: malformed A {:?}", &rec[2])))?;
        entries.push(EinsteinEntry { upper, lower, a });
    }
    let t = EinsteinTable { entries };
    t.validate(table)?;
    Ok(t)
}

pub fn load_einstein_table(path: &Path, table: &LevelTable, delimiter: u8) -> Result<EinsteinTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_einstein_table(file, table, delimiter).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_einstein_table<W: std::io::Write>(einstein: &EinsteinTable, table: &LevelTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::data(e.to_string());
    w.write_record(["upper", "lower", "A_per_s"]).map_err(wrap)?;
    for e in &einstein.entries {
        w.write_record([
            table.label(e.upper).key(),
            table.label(e.lower).key(),
            format!("{:?}", e.a),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}

/// Rate generator G with G[f, i] the rate i -> f and diagonal minus the column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct BbrGenerator {
    pub g: DMatrix<f64>,
    pub temperature: f64,
    /// First-order step, s.
    pub dt: f64,
}

pub const DEFAULT_MAX_DT: f64 = 10e-6;
const MIN_DT: f64 = 1e-15;

/// Einstein rates at temperature T: down = rho B + A, up = rho B, with
/// B = A pi^2 c^3 / (hbar omega^3) so that rho B = A n(omega, T).
pub fn bbr_rates(einstein: &EinsteinTable, table: &LevelTable, temperature: f64) -> Result<BbrGenerator> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!("BBR temperature must be finite and >= 0, got {temperature}")));
    }
    einstein.validate(table)?;
    let n = table.len();
    let mut g = DMatrix::zeros(n, n);
    for e in &einstein.entries {
        let omega = TWO_PI * (table.energy_hz(e.upper) - table.energy_hz(e.lower));
        let b = e.a * std::f64::consts::PI.powi(2) * SPEED_OF_LIGHT.powi(3) / (HBAR * omega.powi(3));
        let rho_b = planck_energy_density(omega, temperature)? * b;
        debug_assert!((rho_b - e.a * occupation(omega, temperature)).abs() <= 1e-9 * (rho_b + e.a));
        g[(e.lower, e.upper)] += rho_b + e.a;
        g[(e.upper, e.lower)] += rho_b;
    }
    for j in 0..n {
        let leave: f64 = (0..n).filter(|&i| i != j).map(|i| g[(i, j)]).sum();
        g[(j, j)] = -leave;
    }
    let max_rate = (0..n).map(|j| -g[(j, j)]).fold(0.0, f64::max);
    let dt = if max_rate > 0.0 {
        DEFAULT_MAX_DT.min(0.1 / max_rate)
    } else {
        DEFAULT_MAX_DT
    };
    Ok(BbrGenerator { g, temperature, dt })
}

impl BbrGenerator {
    pub fn zero(n: usize) -> Self {
        BbrGenerator {
            g: DMatrix::zeros(n, n),
            temperature: 0.0,
            dt: DEFAULT_MAX_DT,
        }
    }

    pub fn n_states(&self) -> usize {
        self.g.nrows()
    }

    pub fn max_column_sum_error(&self) -> f64 {
        (0..self.g.ncols())
            .map(|j| self.g.column(j).sum().abs())
            .fold(0.0, f64::max)
    }

    /// Rate matrix that maps populations over `duration`: T^round(duration/dt),
    /// with dt halved until T has no negative entries.
    pub fn step_matrix(&self, duration: f64) -> Result<DMatrix<f64>> {
        if !(duration >= 0.0) || !duration.is_finite() {
            return Err(Error::numerical(format!("invalid BBR exposure {duration}")));
        }
        let n = self.n_states();
        let mut dt = self.dt;
        let t = loop {
            let t = DMatrix::identity(n, n) + &self.g * dt;
            if t.iter().all(|&x| x >= 0.0) {
                break t;
            }
            dt *= 0.5;
            if dt < MIN_DT {
                return Err(Error::numerical("BBR step cannot be made non-negative"));
            }
            log::warn!("halving BBR step to {dt:e} s to keep the step matrix non-negative");
        };
        let steps = (duration / dt).round();
        if steps > u64::MAX as f64 {
            return Err(Error::numerical("BBR exposure needs too many steps"));
        }
        Ok(matrix_power(&t, steps as u64))
    }

    /// Slowest non-zero relaxation rate, from the symmetrized generator.
    pub fn slowest_relaxation_rate(&self, stationary: &[f64]) -> Result<f64> {
        let n = self.n_states();
        if stationary.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::numerical("stationary distribution must be strictly positive"));
        }
        let s = DMatrix::from_fn(n, n, |r, c| {
            self.g[(r, c)] * (stationary[c] / stationary[r]).sqrt()
        });
        let sym = (&s + s.transpose()) * 0.5;
        let eig = sym
            .try_symmetric_eigen(f64::EPSILON, 10_000)
            .ok_or_else(|| Error::numerical("generator eigen-decomposition did not converge"))?;
        let scale = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let rate = eig
            .eigenvalues
            .iter()
            .map(|v| v.abs())
            .filter(|&v| v > 1e-9 * scale)
            .fold(f64::INFINITY, f64::min);
        Ok(rate)
    }
}

pub fn matrix_power(m: &DMatrix<f64>, mut k: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Apply a population map and renormalize.
pub fn apply_rate_map(state: &PopulationState, map: &DMatrix<f64>, elapsed: f64) -> Result<PopulationState> {
    let n = state.len();
    if map.nrows() != n || map.ncols() != n {
        return Err(Error::numerical("BBR map has the wrong dimension"));
    }
    let mut p = vec![0.0; n];
    for (j, &pj) in state.p.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for (i, pi) in p.iter_mut().enumerate() {
            *pi += map[(i, j)] * pj;
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::numerical("BBR propagation lost all population"));
    }
    for x in &mut p {
        *x = (*x / total).max(0.0);
    }
    Ok(PopulationState {
        p,
        step_time: state.step_time + elapsed,
    })
}

pub fn bbr_propagate(state: &PopulationState, gen: &BbrGenerator, duration: f64) -> Result<PopulationState> {
    if duration == 0.0 {
        return Ok(state.clone());
    }
    let map = gen.step_matrix(duration)?;
    apply_rate_map(state, &map, duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurityBounds {
    /// Worst single-state degradation over the longest pulse.
    pub lower: f64,
    /// Worst single-state degradation over the shortest pulse.
    pub upper: f64,
}

/// Degradation 1 - max component after exposing each pure state to BBR for the
/// longest (resp. shortest) pulse plus the measurement time.
pub fn purity_degradation_bounds(
    table: &LevelTable,
    gen: &BbrGenerator,
    library: &PulseLibrary,
    t_meas: f64,
) -> Result<PurityBounds> {
    if library.is_empty() {
        return Err(Error::config("purity bounds need a non-empty pulse library"));
    }
    let n = table.len();
    let worst = |duration: f64| -> Result<f64> {
        let map = gen.step_matrix(duration)?;
        let mut worst: f64 = 0.0;
        for s in 0..n {
            let out = apply_rate_map(&PopulationState::pure(n, s), &map, duration)?;
            worst = worst.max(1.0 - out.max_component().1);
        }
        Ok(worst)
    };
    Ok(PurityBounds {
        lower: worst(library.max_duration() + t_meas)?,
        upper: worst(library.min_duration() + t_meas)?,
    })
}

/// Boltzmann weight ratio for a level pair, for detailed-balance checks.
pub fn boltzmann_ratio(upper_hz: f64, lower_hz: f64, temperature: f64) -> f64 {
    (-(PLANCK * (upper_hz - lower_hz)) / (BOLTZMANN * temperature)).exp()
}
