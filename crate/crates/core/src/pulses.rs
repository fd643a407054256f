//! Raman-Rabi rates, tabulated rate ingestion and the blue-sideband pulse library.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constants::TWO_PI;
use crate::error::{Error, Result};
use crate::levels::{HalfInt, LevelLabel, LevelTable, Parity, Xi};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapConfig {
    /// Motional mode frequency, Hz.
    pub motional_frequency_hz: f64,
    pub lamb_dicke: f64,
    /// Number of motional Fock states kept.
    pub n_motional: usize,
}

impl TrapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.motional_frequency_hz > 0.0) || !self.motional_frequency_hz.is_finite() {
            return Err(Error::config("motional frequency must be positive"));
        }
        if !(self.lamb_dicke > 0.0 && self.lamb_dicke < 1.0) {
            return Err(Error::config("Lamb-Dicke parameter must lie in (0, 1)"));
        }
        if self.n_motional < 2 {
            return Err(Error::config("at least two motional levels are required"));
        }
        Ok(())
    }
}

impl Default for TrapConfig {
    fn default() -> Self {
        TrapConfig {
            motional_frequency_hz: 5.164e6,
            lamb_dicke: 0.09,
            n_motional: 2,
        }
    }
}

/// Polarization channel of one Raman beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Pi,
    SigmaPlus,
    SigmaMinus,
}

/// Polarization of the stimulated-emission beam (the absorption beam is pi).
/// Emitting a sigma- photon raises m by one; sigma+ lowers it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StokesPolarization {
    SigmaMinus,
    SigmaPlus,
}

impl StokesPolarization {
    pub fn delta_m_twice(self) -> i32 {
        match self {
            StokesPolarization::SigmaMinus => 2,
            StokesPolarization::SigmaPlus => -2,
        }
    }

    pub fn from_delta_m(delta: HalfInt) -> Option<Self> {
        match delta.twice() {
            2 => Some(StokesPolarization::SigmaMinus),
            -2 => Some(StokesPolarization::SigmaPlus),
            _ => None,
        }
    }

    pub fn channel(self) -> Channel {
        match self {
            StokesPolarization::SigmaMinus => Channel::SigmaMinus,
            StokesPolarization::SigmaPlus => Channel::SigmaPlus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intermediate {
    pub name: String,
    pub energy_hz: f64,
}

/// One matrix element <M| d.e_channel |state> / hbar, in rad/s per unit field amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub intermediate: usize,
    pub state: usize,
    pub channel: Channel,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DipoleCouplingSet {
    pub intermediates: Vec<Intermediate>,
    pub entries: Vec<CouplingEntry>,
}

impl DipoleCouplingSet {
    pub fn validate(&self, n_states: usize) -> Result<()> {
        for e in &self.entries {
            if e.intermediate >= self.intermediates.len() || e.state >= n_states {
                return Err(Error::data("dipole coupling references an unknown state"));
            }
            if !e.value.is_finite() {
                return Err(Error::data("non-finite dipole coupling"));
            }
        }
        if self.intermediates.iter().any(|m| !m.energy_hz.is_finite()) {
            return Err(Error::data("non-finite intermediate energy"));
        }
        Ok(())
    }

    /// (intermediate, state, channel) -> value, summing duplicates.
    fn lookup(&self) -> HashMap<(usize, usize, Channel), f64> {
        let mut map = HashMap::new();
        for e in &self.entries {
            *map.entry((e.intermediate, e.state, e.channel)).or_insert(0.0) += e.value;
        }
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamanField {
    pub channel: Channel,
    pub amplitude: f64,
    /// rad/s.
    pub angular_frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamanDrive {
    /// Absorption (pump) field.
    pub field1: RamanField,
    /// Stimulated-emission (Stokes) field.
    pub field2: RamanField,
    /// Smallest allowed |denominator|, rad/s.
    pub resonance_floor: f64,
}

/// Two-photon Rabi rate (rad/s, signed) from adiabatic elimination of the
/// intermediates. Both the co- and counter-rotating denominators are kept.
pub fn raman_rabi_rate(
    initial: usize,
    final_: usize,
    energies_hz: &[f64],
    couplings: &DipoleCouplingSet,
    drive: &RamanDrive,
) -> Result<f64> {
    raman_rabi_rate_with(initial, final_, energies_hz, couplings, &couplings.lookup(), drive)
}

fn raman_rabi_rate_with(
    initial: usize,
    final_: usize,
    energies_hz: &[f64],
    couplings: &DipoleCouplingSet,
    table: &HashMap<(usize, usize, Channel), f64>,
    drive: &RamanDrive,
) -> Result<f64> {
    if couplings.intermediates.is_empty() || couplings.entries.is_empty() {
        return Err(Error::data("empty dipole coupling set"));
    }
    let (f1, f2) = (&drive.field1, &drive.field2);
    if !(f1.angular_frequency > 0.0 && f2.angular_frequency > 0.0) {
        return Err(Error::config("Raman field frequencies must be positive"));
    }
    let g = |m: usize, s: usize, ch: Channel| table.get(&(m, s, ch)).copied().unwrap_or(0.0);
    let e_i = energies_hz[initial];
    let mut total = 0.0;
    for (m, inter) in couplings.intermediates.iter().enumerate() {
        let w_im = TWO_PI * (inter.energy_hz - e_i);
        let d1 = w_im - f1.angular_frequency;
        let d2 = w_im + f2.angular_frequency;
        let first = f2.amplitude * g(m, final_, f2.channel) * f1.amplitude * g(m, initial, f1.channel);
        let second = f1.amplitude * g(m, final_, f1.channel) * f2.amplitude * g(m, initial, f2.channel);
        if first != 0.0 && d1.abs() < drive.resonance_floor {
            return Err(Error::numerical(format!(
                "intermediate {} is resonant with the pump field ({d1:e} rad/s)",
                inter.name
            )));
        }
        if second != 0.0 && d2.abs() < drive.resonance_floor {
            return Err(Error::numerical(format!(
                "intermediate {} is resonant with the Stokes field ({d2:e} rad/s)",
                inter.name
            )));
        }
        if first != 0.0 {
            total += first / d1;
        }
        if second != 0.0 {
            total += second / d2;
        }
    }
    Ok(0.25 * total)
}

/// Rates for every (initial, final) pair whose total m changes by the Stokes
/// polarization's step. Zero rates are omitted.
pub fn raman_rate_table(
    table: &LevelTable,
    couplings: &DipoleCouplingSet,
    drives: &[(StokesPolarization, RamanDrive)],
    same_manifold_only: bool,
) -> Result<RabiTable> {
    couplings.validate(table.len())?;
    let lookup = couplings.lookup();
    let energies = table.energies_hz();
    let mut entries = Vec::new();
    for &(pol, drive) in drives {
        for i in 0..table.len() {
            for f in 0..table.len() {
                let (li, lf) = (table.label(i), table.label(f));
                if (lf.m - li.m).twice() != pol.delta_m_twice() {
                    continue;
                }
                if same_manifold_only && li.manifold_id != lf.manifold_id {
                    continue;
                }
                let rate = raman_rabi_rate_with(i, f, &energies, couplings, &lookup, &drive)?;
                if rate.abs() > 0.0 {
                    entries.push(RabiEntry {
                        initial: i,
                        final_: f,
                        rabi_rate: rate.abs(),
                        calibration: false,
                    });
                }
            }
        }
    }
    RabiTable::new(entries, table.len(), false)
}

pub fn pi_pulse_duration(rabi_rate: f64, trap: &TrapConfig) -> Result<f64> {
    if !(rabi_rate > 0.0) || !rabi_rate.is_finite() {
        return Err(Error::config(format!("Rabi rate must be positive, got {rabi_rate}")));
    }
    Ok(std::f64::consts::PI / (trap.lamb_dicke * rabi_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiEntry {
    pub initial: usize,
    #[serde(rename = "final")]
    pub final_: usize,
    /// rad/s.
    pub rabi_rate: f64,
    pub calibration: bool,
}

/// Directed two-photon couplings. `listed` keeps the rows as supplied; lookups
/// through `rate` also see the mirrored direction when the table is symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiTable {
    listed: Vec<RabiEntry>,
    symmetric: bool,
    n_states: usize,
}

impl RabiTable {
    pub fn new(listed: Vec<RabiEntry>, n_states: usize, symmetric: bool) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &listed {
            if e.initial >= n_states || e.final_ >= n_states || e.initial == e.final_ {
                return Err(Error::data("Rabi entry references an invalid state pair"));
            }
            if !(e.rabi_rate >= 0.0) || !e.rabi_rate.is_finite() {
                return Err(Error::data("Rabi rate must be finite and non-negative"));
            }
            if !seen.insert((e.initial, e.final_)) {
                return Err(Error::data(format!(
                    "Rabi entry {} -> {} listed twice",
                    e.initial, e.final_
                )));
            }
        }
        Ok(RabiTable {
            listed,
            symmetric,
            n_states,
        })
    }

    pub fn listed(&self) -> &[RabiEntry] {
        &self.listed
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Every available direction, listed rows first.
    pub fn directed(&self) -> Vec<RabiEntry> {
        let mut out = self.listed.clone();
        if self.symmetric {
            let have: std::collections::HashSet<(usize, usize)> =
                self.listed.iter().map(|e| (e.initial, e.final_)).collect();
            for e in &self.listed {
                if !have.contains(&(e.final_, e.initial)) {
                    out.push(RabiEntry {
                        initial: e.final_,
                        final_: e.initial,
                        ..*e
                    });
                }
            }
        }
        out
    }

    pub fn rate(&self, initial: usize, final_: usize) -> Option<f64> {
        self.listed
            .iter()
            .find(|e| e.initial == initial && e.final_ == final_)
            .or_else(|| {
                if self.symmetric {
                    self.listed
                        .iter()
                        .find(|e| e.initial == final_ && e.final_ == initial)
                } else {
                    None
                }
            })
            .map(|e| e.rabi_rate)
    }
}

fn find_symmetric_top(
    table: &LevelTable,
    j: u32,
    k: u32,
    parity: Parity,
    m: HalfInt,
    xi: u32,
) -> Option<usize> {
    table
        .levels()
        .iter()
        .position(|l| {
            let lab = &l.label;
            lab.j == j
                && lab.k == Some(k)
                && lab.parity == Some(parity)
                && lab.m == m
                && lab.xi == Xi::Index(xi)
        })
}

/// Parse Rabi rows `J_i,K_i,parity_i,mF_i,xi_i,J_f,K_f,parity_f,mF_f,xi_f,rabi_2pi_kHz`.
/// A leading `*` on the rate marks the calibration row.
pub fn parse_rabi_table<R: Read>(reader: R, table: &LevelTable, delimiter: u8) -> Result<RabiTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(reader);
    let expected = [
        "J_i", "K_i", "parity_i", "mF_i", "xi_i", "J_f", "K_f", "parity_f", "mF_f", "xi_f",
        "rabi_2pi_kHz",
    ];
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("Rabi table header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::data(format!("Rabi table header must be {expected:?}")));
    }
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        if rec.len() != expected.len() {
            return Err(Error::data(format!("row {row}: expected 11 columns")));
        }
        let field = |c: usize| rec[c].trim().to_string();
        let num = |c: usize| -> Result<u32> {
            field(c)
                .parse()
                .map_err(|_| Error::data(format!("row {row}: malformed {} {:?}", expected[c], field(c))))
        };
        let half = |c: usize| -> Result<HalfInt> {
            field(c)
                .parse()
                .map_err(|_| Error::data(format!("row {row}: malformed {} {:?}", expected[c], field(c))))
        };
        let par = |c: usize| -> Result<Parity> {
            field(c)
                .parse()
                .map_err(|_| Error::data(format!("row {row}: malformed {} {:?}", expected[c], field(c))))
        };
        let (ji, ki, pi, mi, xii) = (num(0)?, num(1)?, par(2)?, half(3)?, num(4)?);
        let (jf, kf, pf, mf, xif) = (num(5)?, num(6)?, par(7)?, half(8)?, num(9)?);
        let raw_rate = field(10);
        let (calibration, rate_txt) = match raw_rate.strip_prefix('*') {
            Some(rest) => (true, rest.trim().to_string()),
            None => (false, raw_rate.clone()),
        };
        let rate_khz: f64 = rate_txt
            .parse()
            .map_err(|_| Error::data(format!("row {row}: malformed rate {raw_rate:?}")))?;
        if !rate_khz.is_finite() || rate_khz < 0.0 {
            return Err(Error::data(format!("row {row}: invalid rate {raw_rate:?}")));
        }
        let initial = find_symmetric_top(table, ji, ki, pi, mi, xii).ok_or_else(|| {
            Error::data(format!("row {row}: initial state ({ji},{ki},{pi:?},{mi},{xii}) not in level table"))
        })?;
        let final_ = find_symmetric_top(table, jf, kf, pf, mf, xif).ok_or_else(|| {
            Error::data(format!("row {row}: final state ({jf},{kf},{pf:?},{mf},{xif}) not in level table"))
        })?;
        check_selection_rules(table.label(initial), table.label(final_))
            .map_err(|e| Error::data(format!("row {row}: {e}")))?;
        entries.push(RabiEntry {
            initial,
            final_,
            rabi_rate: rate_khz * 1e3 * TWO_PI,
            calibration,
        });
    }
    if entries.is_empty() {
        return Err(Error::data("Rabi table has no rows"));
    }
    RabiTable::new(entries, table.len(), true)
}

/// Two-photon rules for tabulated symmetric-top transitions: K and parity
/// conserved, m_F raised by one, |dJ| <= 2.
pub fn check_selection_rules(initial: &LevelLabel, final_: &LevelLabel) -> Result<()> {
    if initial.k != final_.k {
        return Err(Error::data(format!("{initial} -> {final_} changes K")));
    }
    if initial.parity != final_.parity {
        return Err(Error::data(format!("{initial} -> {final_} changes parity")));
    }
    if (final_.m - initial.m).twice() != 2 {
        return Err(Error::data(format!("{initial} -> {final_} does not raise m_F by one")));
    }
    if (initial.j as i64 - final_.j as i64).abs() > 2 {
        return Err(Error::data(format!("{initial} -> {final_} changes J by more than two")));
    }
    Ok(())
}

pub fn load_rabi_table(path: &Path, table: &LevelTable, delimiter: u8) -> Result<RabiTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_rabi_table(file, table, delimiter).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sideband {
    Carrier,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivenTransition {
    pub initial: usize,
    #[serde(rename = "final")]
    pub final_: usize,
    pub rabi_rate: f64,
    /// Resonant laser frequency for this transition alone, Hz.
    pub frequency_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    /// 1-based.
    pub id: usize,
    pub transitions: Vec<DrivenTransition>,
    /// Laser (Raman difference) frequency, Hz.
    pub laser_frequency_hz: f64,
    /// Effective rate implied by the duration, rad/s.
    pub rabi_rate: f64,
    pub duration_s: f64,
    pub sideband: Sideband,
    pub polarization: StokesPolarization,
}

/// A directed term |final><initial| of the pulse Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub initial: usize,
    #[serde(rename = "final")]
    pub final_: usize,
    pub rabi_rate: f64,
    pub polarization: StokesPolarization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveSelection {
    /// Drive every listed row in its listed direction.
    Listed,
    /// Drive every available transition that changes m by the given step
    /// (in units of 1/2), plus the strongest opposite-step transition out of
    /// any level otherwise left without one.
    DeltaMWithEscape { delta_m_twice: i32 },
    Explicit { pairs: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRule {
    /// Transitions whose frequencies lie within this window of a group's first
    /// member share one pulse, Hz.
    pub window_hz: f64,
    /// Rate ratio at which the merged duration switches from the average to
    /// the slowest member's pi time.
    pub slow_factor: f64,
    /// Transitions below this rate are not driven, rad/s.
    pub weak_floor: f64,
    pub drive: DriveSelection,
}

impl Default for MergeRule {
    fn default() -> Self {
        MergeRule {
            window_hz: 1_000.0,
            slow_factor: 2.5,
            weak_floor: TWO_PI * 100.0,
            drive: DriveSelection::Listed,
        }
    }
}

impl MergeRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_hz >= 0.0) || !self.window_hz.is_finite() {
            return Err(Error::config("merge window must be non-negative"));
        }
        if !(self.slow_factor >= 1.0) {
            return Err(Error::config("slow factor must be at least 1"));
        }
        if !(self.weak_floor >= 0.0) {
            return Err(Error::config("weak-pulse floor must be non-negative"));
        }
        Ok(())
    }
}

pub const LIBRARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseLibrary {
    pub version: u32,
    pub trap: TrapConfig,
    pub pulses: Vec<PulseSpec>,
    /// Every directed coupling, by polarization. A pulse's Hamiltonian contains
    /// all couplings sharing its polarization.
    pub couplings: Vec<Coupling>,
    pub sideband: Sideband,
}

impl PulseLibrary {
    pub fn len(&self) -> usize {
        self.pulses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulses.is_empty()
    }

    pub fn couplings_for(&self, polarization: StokesPolarization) -> impl Iterator<Item = &Coupling> {
        self.couplings.iter().filter(move |c| c.polarization == polarization)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lib: PulseLibrary =
            serde_json::from_str(s).map_err(|e| Error::data(format!("pulse library json: {e}")))?;
        if lib.version != LIBRARY_FORMAT_VERSION {
            return Err(Error::data(format!(
                "pulse library version {} is not supported (expected {LIBRARY_FORMAT_VERSION})",
                lib.version
            )));
        }
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        for (pos, p) in self.pulses.iter().enumerate() {
            if p.id != pos + 1 {
                return Err(Error::data("pulse ids must be dense 1..N_A"));
            }
            if p.transitions.is_empty() || !(p.rabi_rate > 0.0) || !(p.duration_s > 0.0) {
                return Err(Error::data(format!("pulse {} is degenerate", p.id)));
            }
        }
        Ok(())
    }

    pub fn max_duration(&self) -> f64 {
        self.pulses.iter().map(|p| p.duration_s).fold(0.0, f64::max)
    }

    pub fn min_duration(&self) -> f64 {
        self.pulses.iter().map(|p| p.duration_s).fold(f64::INFINITY, f64::min)
    }
}

fn driven_transitions(
    table: &LevelTable,
    rabi: &RabiTable,
    rule: &MergeRule,
) -> Result<Vec<(usize, usize, f64)>> {
    let out = match &rule.drive {
        DriveSelection::Listed => rabi
            .listed()
            .iter()
            .map(|e| (e.initial, e.final_, e.rabi_rate))
            .collect(),
        DriveSelection::Explicit { pairs } => pairs
            .iter()
            .map(|&(i, f)| {
                rabi.rate(i, f)
                    .map(|r| (i, f, r))
                    .ok_or_else(|| Error::data(format!("no Rabi rate for driven pair {i} -> {f}")))
            })
            .collect::<Result<Vec<_>>>()?,
        DriveSelection::DeltaMWithEscape { delta_m_twice } => {
            let all = rabi.directed();
            let dm = |e: &RabiEntry| (table.label(e.final_).m - table.label(e.initial).m).twice();
            let strong = |e: &&RabiEntry| e.rabi_rate >= rule.weak_floor;
            let mut chosen: Vec<(usize, usize, f64)> = all
                .iter()
                .filter(|e| dm(e) == *delta_m_twice)
                .map(|e| (e.initial, e.final_, e.rabi_rate))
                .collect();
            for s in 0..table.len() {
                let has_out = all.iter().filter(strong).any(|e| e.initial == s && dm(e) == *delta_m_twice);
                if has_out {
                    continue;
                }
                let escape = all
                    .iter()
                    .filter(strong)
                    .filter(|e| e.initial == s && dm(e) == -delta_m_twice)
                    .max_by(|a, b| a.rabi_rate.total_cmp(&b.rabi_rate).then(b.final_.cmp(&a.final_)));
                if let Some(e) = escape {
                    chosen.push((e.initial, e.final_, e.rabi_rate));
                }
            }
            chosen
        }
    };
    Ok(out)
}

/// Group driven transitions into pulses.
pub fn build_pulse_library(
    table: &LevelTable,
    rabi: &RabiTable,
    trap: &TrapConfig,
    rule: &MergeRule,
    sideband: Sideband,
) -> Result<PulseLibrary> {
    trap.validate()?;
    rule.validate()?;
    if rabi.listed().is_empty() {
        return Err(Error::data("no Rabi entries to build pulses from"));
    }
    let offset = match sideband {
        Sideband::Blue => trap.motional_frequency_hz,
        Sideband::Carrier => 0.0,
    };

    let mut by_pol: BTreeMap<StokesPolarization, Vec<DrivenTransition>> = BTreeMap::new();
    for (i, f, rate) in driven_transitions(table, rabi, rule)? {
        if rate < rule.weak_floor {
            log::warn!(
                "excluding weak transition {} -> {} ({:.1} Hz < floor {:.1} Hz)",
                table.label(i),
                table.label(f),
                rate / TWO_PI,
                rule.weak_floor / TWO_PI
            );
            continue;
        }
        let dm = table.label(f).m - table.label(i).m;
        let pol = StokesPolarization::from_delta_m(dm).ok_or_else(|| {
            Error::data(format!(
                "driven transition {} -> {} does not change m by one",
                table.label(i),
                table.label(f)
            ))
        })?;
        by_pol.entry(pol).or_default().push(DrivenTransition {
            initial: i,
            final_: f,
            rabi_rate: rate,
            frequency_hz: table.energy_hz(f) - table.energy_hz(i) + offset,
        });
    }

    let mut groups: Vec<(StokesPolarization, Vec<DrivenTransition>)> = Vec::new();
    for (pol, mut list) in by_pol {
        list.sort_by(|a, b| {
            a.frequency_hz
                .total_cmp(&b.frequency_hz)
                .then(a.initial.cmp(&b.initial))
                .then(a.final_.cmp(&b.final_))
        });
        let mut current: Vec<DrivenTransition> = Vec::new();
        for t in list {
            if let Some(first) = current.first() {
                if (t.frequency_hz - first.frequency_hz).abs() > rule.window_hz {
                    groups.push((pol, std::mem::take(&mut current)));
                }
            }
            current.push(t);
        }
        if !current.is_empty() {
            groups.push((pol, current));
        }
    }
    groups.sort_by(|a, b| {
        a.1[0]
            .frequency_hz
            .total_cmp(&b.1[0].frequency_hz)
            .then(a.0.cmp(&b.0))
    });

    let mut pulses = Vec::with_capacity(groups.len());
    for (pos, (pol, members)) in groups.into_iter().enumerate() {
        let n = members.len() as f64;
        let freq = members.iter().map(|t| t.frequency_hz).sum::<f64>() / n;
        let durations = members
            .iter()
            .map(|t| pi_pulse_duration(t.rabi_rate, trap))
            .collect::<Result<Vec<_>>>()?;
        let fastest = members.iter().map(|t| t.rabi_rate).fold(0.0, f64::max);
        let slowest = members.iter().map(|t| t.rabi_rate).fold(f64::INFINITY, f64::min);
        let duration = if fastest / slowest >= rule.slow_factor {
            durations.iter().copied().fold(0.0, f64::max)
        } else {
            durations.iter().sum::<f64>() / n
        };
        pulses.push(PulseSpec {
            id: pos + 1,
            transitions: members,
            laser_frequency_hz: freq,
            rabi_rate: std::f64::consts::PI / (trap.lamb_dicke * duration),
            duration_s: duration,
            sideband,
            polarization: pol,
        });
    }

    let mut couplings = Vec::new();
    for e in rabi.directed() {
        let dm = table.label(e.final_).m - table.label(e.initial).m;
        if let Some(pol) = StokesPolarization::from_delta_m(dm) {
            if e.rabi_rate > 0.0 {
                couplings.push(Coupling {
                    initial: e.initial,
                    final_: e.final_,
                    rabi_rate: e.rabi_rate,
                    polarization: pol,
                });
            }
        }
    }
    couplings.sort_by(|a, b| {
        (a.polarization, a.initial, a.final_).cmp(&(b.polarization, b.initial, b.final_))
    });

    let lib = PulseLibrary {
        version: LIBRARY_FORMAT_VERSION,
        trap: *trap,
        pulses,
        couplings,
        sideband,
    };
    lib.validate()?;
    Ok(lib)
}
