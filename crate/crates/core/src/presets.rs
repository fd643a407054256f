//! Bundled models: the 3-state synthetic toy, the desk CaH+-style model and
//! the tabulated H3O+ data.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::constants::TWO_PI;
use crate::env::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::levels::{
    build_cah_hamiltonian, diagonalize_to_levels, parse_level_table, CahConstants, HalfInt, LabelingRule, Level,
    LevelLabel, LevelTable, PopulationState, Xi,
};
use crate::propagator::TransitionMatrixPair;
use crate::pulses::{
    build_pulse_library, parse_rabi_table, raman_rabi_rate, raman_rate_table, Channel, CouplingEntry,
    DipoleCouplingSet, DriveSelection, DrivenTransition, Intermediate, MergeRule, PulseLibrary, PulseSpec, RabiTable,
    RamanDrive, RamanField, Sideband, StokesPolarization, TrapConfig, LIBRARY_FORMAT_VERSION,
};
use crate::thermal::{EinsteinEntry, EinsteinTable};

/// Pulse matrices from (source, destination, probability) transfers, each
/// transfer heralded by outcome 1.
pub fn heralded_transfers(n: usize, transfers: &[(usize, usize, f64)], pulse_id: usize) -> TransitionMatrixPair {
    let mut a0 = DMatrix::identity(n, n);
    let mut a1 = DMatrix::zeros(n, n);
    for &(src, dst, p) in transfers {
        a1[(dst, src)] += p;
        a0[(src, src)] -= p;
    }
    TransitionMatrixPair { a0, a1, pulse_id }
}

pub const TOY_INITIAL: [f64; 3] = [0.5, 0.3, 0.2];

/// Pulse 0 moves half of state 2 into state 0; pulse 1 empties state 0 and a
/// third of state 2 into state 1.
pub fn toy_actions() -> Vec<TransitionMatrixPair> {
    vec![
        heralded_transfers(3, &[(2, 0, 0.5)], 0),
        heralded_transfers(3, &[(0, 1, 1.0), (2, 1, 0.3)], 1),
    ]
}

/// Pulse descriptions matching [`toy_actions`], for archiving.
pub fn toy_library() -> PulseLibrary {
    let transfers: [&[(usize, usize, f64)]; 2] = [&[(2, 0, 0.5)], &[(0, 1, 1.0), (2, 1, 0.3)]];
    let pulses = transfers
        .iter()
        .enumerate()
        .map(|(i, moves)| PulseSpec {
            id: i + 1,
            transitions: moves
                .iter()
                .map(|&(initial, final_, p)| DrivenTransition {
                    initial,
                    final_,
                    rabi_rate: p,
                    frequency_hz: 0.0,
                })
                .collect(),
            laser_frequency_hz: 0.0,
            rabi_rate: 1.0,
            duration_s: TOY_DURATION_S,
            sideband: Sideband::Blue,
            polarization: StokesPolarization::SigmaMinus,
        })
        .collect();
    PulseLibrary {
        version: LIBRARY_FORMAT_VERSION,
        trap: TrapConfig::default(),
        pulses,
        couplings: Vec::new(),
        sideband: Sideband::Blue,
    }
}

pub const TOY_DURATION_S: f64 = 1e-3;

pub fn toy_config() -> EnvConfig {
    EnvConfig {
        purity_threshold: 0.01,
        step_reward: -1.0,
        overlap_penalty: 0.0,
        overlap_threshold: None,
        bbr_enabled: false,
        bbr_temperature_k: 0.0,
        t_meas: 0.0,
        max_steps: 50,
        initial_temperature_k: 300.0,
    }
}

pub fn toy_environment() -> Environment {
    Environment::new(
        toy_config(),
        PopulationState::new(TOY_INITIAL.to_vec()).expect("valid toy state"),
        toy_actions(),
        vec![TOY_DURATION_S; 2],
        None,
    )
    .expect("valid toy environment")
}

/// Clebsch-Gordan coefficient <j1 m1; j2 m2 | j m>, all arguments doubled.
pub fn clebsch_gordan(j1: i32, m1: i32, j2: i32, m2: i32, j: i32, m: i32) -> f64 {
    if m1 + m2 != m || m1.abs() > j1 || m2.abs() > j2 || m.abs() > j {
        return 0.0;
    }
    if j < (j1 - j2).abs() || j > j1 + j2 || (j1 + j2 + j) % 2 != 0 {
        return 0.0;
    }
    if (j1 + m1) % 2 != 0 || (j2 + m2) % 2 != 0 || (j + m) % 2 != 0 {
        return 0.0;
    }
    let f = |twice: i32| -> f64 { (1..=twice / 2).map(f64::from).product() };
    let pre = ((j + 1) as f64 * f(j + j1 - j2) * f(j - j1 + j2) * f(j1 + j2 - j) / f(j1 + j2 + j + 2)).sqrt()
        * (f(j + m) * f(j - m) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)).sqrt();
    let mut sum = 0.0;
    let mut k = 0;
    loop {
        let args = [
            j1 + j2 - j - k,
            j1 - m1 - k,
            j2 + m2 - k,
            j - j2 + m1 + k,
            j - j1 - m2 + k,
        ];
        if args[..3].iter().any(|&a| a < 0) {
            break;
        }
        if args[3..].iter().all(|&a| a >= 0) {
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign / (f(k) * args.iter().map(|&a| f(a)).product::<f64>());
        }
        k += 2;
    }
    pre * sum
}

/// Placeholder constants for the desk CaH+-style model. They are round,
/// non-physical numbers chosen to give kHz-scale, resolvable splittings.
pub fn desk_constants() -> CahConstants {
    CahConstants {
        rotational_hz: 140e9,
        g_rot: -1.5,
        g_nuclear: 5.0,
        spin_rotation_hz: 8e3,
        field_tesla: 0.4e-3,
    }
}

/// Rate of the reference transition |1,-3/2,-> -> |1,-1/2,->, rad/s.
pub const DESK_CALIBRATION_RATE: f64 = TWO_PI * 2.087e3;
/// Synthetic spontaneous decay rate out of every J = 2 level, 1/s.
pub const DESK_DECAY_RATE_J2: f64 = 0.05;
const DESK_INTERMEDIATE_HZ: f64 = 300e12;
const DESK_DETUNING_HZ: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct DeskModel {
    pub table: LevelTable,
    pub couplings: DipoleCouplingSet,
    pub rabi: RabiTable,
    pub library: PulseLibrary,
    pub einstein: EinsteinTable,
}

/// Real representation of a level's eigenvector (the Hamiltonian is real, so a
/// global phase makes every amplitude real).
fn real_components(level: &Level) -> Result<Vec<(i32, i32, f64)>> {
    let lead = level
        .components
        .iter()
        .max_by(|a, b| a.amplitude.norm().total_cmp(&b.amplitude.norm()))
        .ok_or_else(|| Error::data(format!("level {} has no eigenvector", level.label)))?;
    let phase = lead.amplitude.conj() / lead.amplitude.norm();
    level
        .components
        .iter()
        .map(|c| {
            let a = c.amplitude * phase;
            if a.im.abs() > 1e-9 {
                return Err(Error::numerical(format!("level {} is not real up to a phase", level.label)));
            }
            Ok((c.m_j.twice(), c.m_i.twice(), a.re))
        })
        .collect()
}

/// Q-branch intermediates |J, m_J'> x |m_I> for every manifold, with dipole
/// couplings proportional to <J m_J; 1 q | J m_J + q>.
pub fn desk_couplings(table: &LevelTable) -> Result<DipoleCouplingSet> {
    let mut set = DipoleCouplingSet::default();
    let mut index = BTreeMap::new();
    let mut js: Vec<u32> = table.levels().iter().map(|l| l.label.j).collect();
    js.dedup();
    for &j in &js {
        for mj in -(j as i32)..=(j as i32) {
            for mi in [-1, 1] {
                index.insert((j, 2 * mj, mi), set.intermediates.len());
                set.intermediates.push(Intermediate {
                    name: format!("J'={j} mJ={mj} mI={}", HalfInt::from_twice(mi)),
                    energy_hz: DESK_INTERMEDIATE_HZ + 2.0 * 1e9 * (j * (j + 1)) as f64,
                });
            }
        }
    }
    for (s, level) in table.levels().iter().enumerate() {
        let j = level.label.j;
        let mut acc: BTreeMap<(usize, Channel), f64> = BTreeMap::new();
        for (mj, mi, a) in real_components(level)? {
            for (channel, q) in [(Channel::Pi, 0), (Channel::SigmaPlus, 2), (Channel::SigmaMinus, -2)] {
                let w = clebsch_gordan(2 * j as i32, mj, 2, q, 2 * j as i32, mj + q);
                if w != 0.0 {
                    let m = index[&(j, mj + q, mi)];
                    *acc.entry((m, channel)).or_default() += w * a;
                }
            }
        }
        for ((intermediate, channel), value) in acc {
            if value.abs() > 1e-12 {
                set.entries.push(CouplingEntry {
                    intermediate,
                    state: s,
                    channel,
                    value,
                });
            }
        }
    }
    Ok(set)
}

/// Pump (pi) plus Stokes beam for each Stokes polarization, both fields at
/// `amplitude`.
pub fn desk_drives(amplitude: f64) -> Vec<(StokesPolarization, RamanDrive)> {
    let w1 = TWO_PI * (DESK_INTERMEDIATE_HZ - DESK_DETUNING_HZ);
    [StokesPolarization::SigmaMinus, StokesPolarization::SigmaPlus]
        .into_iter()
        .map(|pol| {
            (
                pol,
                RamanDrive {
                    field1: RamanField {
                        channel: Channel::Pi,
                        amplitude,
                        angular_frequency: w1,
                    },
                    field2: RamanField {
                        channel: pol.channel(),
                        amplitude,
                        angular_frequency: w1,
                    },
                    resonance_floor: TWO_PI * 1e9,
                },
            )
        })
        .collect()
}

pub fn desk_levels(j_values: &[u32]) -> Result<LevelTable> {
    let manifolds = build_cah_hamiltonian(&desk_constants(), j_values)?;
    diagonalize_to_levels(&manifolds, LabelingRule::CahRelativeSign)
}

/// Field amplitude that puts the reference transition at the calibration rate.
fn desk_field_amplitude() -> Result<f64> {
    let table = desk_levels(&[1])?;
    let key = |m: i32| LevelLabel::cah(1, 1, HalfInt::from_twice(m), Xi::Minus);
    let (i, f) = match (table.find(&key(-3)), table.find(&key(-1))) {
        (Some(i), Some(f)) => (i, f),
        _ => return Err(Error::data("calibration levels missing from the J = 1 manifold")),
    };
    let couplings = desk_couplings(&table)?;
    let drive = desk_drives(1.0)[0].1;
    let unit = raman_rabi_rate(i, f, &table.energies_hz(), &couplings, &drive)?.abs();
    if !(unit > 0.0) {
        return Err(Error::numerical("calibration transition has no Raman coupling"));
    }
    // the rate is bilinear in the two field amplitudes
    Ok((DESK_CALIBRATION_RATE / unit).sqrt())
}

/// Synthetic J -> J-1 emission: every upper level decays at a total rate that
/// scales with the cube of the rotational frequency, shared out by the squared
/// dipole matrix elements.
pub fn desk_einstein(table: &LevelTable) -> Result<EinsteinTable> {
    let mut entries = Vec::new();
    let comps: Vec<_> = table.levels().iter().map(real_components).collect::<Result<_>>()?;
    for (u, upper) in table.levels().iter().enumerate() {
        let ju = upper.label.j;
        if ju == 0 {
            continue;
        }
        let jl = ju - 1;
        let total = DESK_DECAY_RATE_J2 * (ju as f64 / 2.0).powi(3);
        // sum over m', q of <Ju m; 1 q | Jl m'>^2 is (2Jl+1)/(2Ju+1)
        let norm = (2 * ju + 1) as f64 / (2 * jl + 1) as f64;
        for (l, lower) in table.levels().iter().enumerate() {
            if lower.label.j != jl {
                continue;
            }
            let mut strength = 0.0;
            for q in [-2, 0, 2] {
                let mut amp = 0.0;
                for &(mu, miu, au) in &comps[u] {
                    for &(ml, mil, al) in &comps[l] {
                        if mil == miu && ml == mu + q {
                            amp += al * au * clebsch_gordan(2 * ju as i32, mu, 2, q, 2 * jl as i32, ml);
                        }
                    }
                }
                strength += amp * amp;
            }
            let a = total * norm * strength;
            if a > 1e-15 {
                entries.push(EinsteinEntry { upper: u, lower: l, a });
            }
        }
    }
    let einstein = EinsteinTable { entries };
    einstein.validate(table)?;
    Ok(einstein)
}

/// Level structure, Raman rates, blue-sideband library and emission table of
/// the desk model over the given rotational manifolds.
pub fn desk_model(j_values: &[u32], trap: &TrapConfig, rule: &MergeRule) -> Result<DeskModel> {
    let table = desk_levels(j_values)?;
    let couplings = desk_couplings(&table)?;
    let amplitude = desk_field_amplitude()?;
    // rates computed in the m-raising orientation; the reverse direction is
    // driven by the same beam pair and shares the rate
    let raising = raman_rate_table(&table, &couplings, &desk_drives(amplitude)[..1], true)?;
    let rabi = RabiTable::new(raising.listed().to_vec(), table.len(), true)?;
    let library = build_pulse_library(&table, &rabi, trap, rule, Sideband::Blue)?;
    let einstein = desk_einstein(&table)?;
    Ok(DeskModel {
        table,
        couplings,
        rabi,
        library,
        einstein,
    })
}

/// Merge rule of the desk model: drive every m -> m-1 transition, plus an
/// escape pulse out of each level that has none.
pub fn desk_merge_rule() -> MergeRule {
    MergeRule {
        drive: DriveSelection::DeltaMWithEscape { delta_m_twice: -2 },
        ..MergeRule::default()
    }
}

pub const H3O_LEVELS_CSV: &str = include_str!("../data/h3o_levels.csv");
pub const H3O_RABI_CSV: &str = include_str!("../data/h3o_rabi.csv");

pub fn h3o_levels() -> Result<LevelTable> {
    parse_level_table(H3O_LEVELS_CSV.as_bytes(), b',')
}

pub fn h3o_rabi(table: &LevelTable) -> Result<RabiTable> {
    parse_rabi_table(H3O_RABI_CSV.as_bytes(), table, b',')
}

pub fn h3o_trap() -> TrapConfig {
    TrapConfig {
        n_motional: 4,
        ..TrapConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::{compile_pulse, PropagationSettings};

    #[test]
    fn h3o_thermal_share_at_20k() {
        let table = h3o_levels().unwrap();
        let p = crate::levels::boltzmann_populations(&table, crate::levels::Temperature::Kelvin(20.0)).unwrap();
        let (h, kb) = (6.62607015e-34, 1.380649e-23);
        let w: Vec<f64> = (0..table.len())
            .map(|i| (-h * table.energy_hz(i) / (kb * 20.0)).exp())
            .collect();
        let z: f64 = w.iter().sum();
        let in_low_j = |i: usize| (1..=3).contains(&table.label(i).j);
        let direct: f64 = (0..table.len()).filter(|&i| in_low_j(i)).map(|i| w[i] / z).sum();
        let share: f64 = (0..table.len()).filter(|&i| in_low_j(i)).map(|i| p.p[i]).sum();
        assert!((share - direct).abs() < 1e-12);
        // the four J = 0 levels hold the rest
        assert!((share - 0.98421).abs() < 1e-4, "{share}");
    }

    #[test]
    fn toy_library_matches_toy_actions() {
        let lib = toy_library();
        lib.validate().unwrap();
        for (p, a) in lib.pulses.iter().zip(toy_actions()) {
            let rebuilt: Vec<_> = p.transitions.iter().map(|t| (t.initial, t.final_, t.rabi_rate)).collect();
            assert_eq!(heralded_transfers(3, &rebuilt, a.pulse_id), a);
        }
    }

    #[test]
    fn clebsch_gordan_known_values() {
        let r = 0.5f64.sqrt();
        assert!((clebsch_gordan(2, 2, 2, -2, 2, 0) - r).abs() < 1e-14);
        assert!((clebsch_gordan(2, -2, 2, 2, 2, 0) + r).abs() < 1e-14);
        assert!((clebsch_gordan(1, 1, 1, -1, 0, 0) - r).abs() < 1e-14);
        assert!((clebsch_gordan(2, 0, 2, 0, 4, 0) - (2.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert_eq!(clebsch_gordan(2, 0, 2, 0, 2, 0), 0.0);
        assert_eq!(clebsch_gordan(2, 2, 2, 2, 2, 2), 0.0);
    }

    #[test]
    fn clebsch_gordan_rows_are_orthonormal() {
        // sum over m1 of <j1 m1; 1 m-m1 | j m><j1 m1; 1 m-m1 | j' m> = delta_jj'
        for j1 in [2i32, 4, 6] {
            for m in (-j1 - 2..=j1 + 2).step_by(2) {
                for j in [j1 - 2, j1, j1 + 2] {
                    for jp in [j1 - 2, j1, j1 + 2] {
                        if m.abs() > j || m.abs() > jp {
                            continue;
                        }
                        let s: f64 = (-j1..=j1)
                            .step_by(2)
                            .filter(|m1| (m - m1).abs() <= 2)
                            .map(|m1| clebsch_gordan(j1, m1, 2, m - m1, j, m) * clebsch_gordan(j1, m1, 2, m - m1, jp, m))
                            .sum();
                        let want = if j == jp { 1.0 } else { 0.0 };
                        assert!((s - want).abs() < 1e-12, "j1 {j1} m {m} j {j} j' {jp}: {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn desk_model_shape_and_calibration() {
        let m = desk_model(&[1, 2], &TrapConfig::default(), &desk_merge_rule()).unwrap();
        assert_eq!(m.table.len(), 16);
        let key = |m: i32| LevelLabel::cah(1, 1, HalfInt::from_twice(m), Xi::Minus);
        let (i, f) = (m.table.find(&key(-3)).unwrap(), m.table.find(&key(-1)).unwrap());
        let rate = m.rabi.rate(i, f).unwrap();
        assert!((rate.abs() / DESK_CALIBRATION_RATE - 1.0).abs() < 1e-9);
        for e in m.rabi.listed() {
            assert_eq!(m.rabi.rate(e.final_, e.initial), Some(e.rabi_rate));
        }
        m.library.validate().unwrap();
        assert!(m.library.pulses.iter().all(|p| p.duration_s > 1e-4 && p.duration_s < 0.1));

        let big = desk_levels(&[1, 2, 3]).unwrap();
        assert_eq!(big.len(), 30);
        assert_eq!(desk_levels(&[2, 3]).unwrap().len(), 24);
    }

    #[test]
    fn desk_emission_totals() {
        let table = desk_levels(&[1, 2, 3]).unwrap();
        let einstein = desk_einstein(&table).unwrap();
        for (u, level) in table.levels().iter().enumerate() {
            let total: f64 = einstein.entries.iter().filter(|e| e.upper == u).map(|e| e.a).sum();
            let j = level.label.j;
            let want = if j <= 1 { 0.0 } else { DESK_DECAY_RATE_J2 * (j as f64 / 2.0).powi(3) };
            assert!((total - want).abs() < 1e-12 * want.max(1.0), "{}: {total} vs {want}", level.label);
            assert!(einstein
                .entries
                .iter()
                .filter(|e| e.upper == u)
                .all(|e| table.levels()[e.lower].label.j + 1 == j));
        }
    }

    #[test]
    fn desk_pulse_converges_under_step_halving() {
        let m = desk_model(&[1, 2], &TrapConfig::default(), &desk_merge_rule()).unwrap();
        let pulse = m
            .library
            .pulses
            .iter()
            .min_by(|a, b| a.duration_s.total_cmp(&b.duration_s))
            .unwrap();
        let settings = |step_s| PropagationSettings {
            step_s,
            ..PropagationSettings::default()
        };
        let coarse = compile_pulse(pulse, &m.library, &m.table, &settings(1e-6)).unwrap();
        let fine = compile_pulse(pulse, &m.library, &m.table, &settings(5e-7)).unwrap();
        let diff = (&coarse.a0 - &fine.a0).abs().max().max((&coarse.a1 - &fine.a1).abs().max());
        assert!(diff < 1e-5, "halving difference {diff:e}");
        assert!(coarse.column_sum_error() < 1e-9);
    }
}
