//! Interaction-picture propagation of a single pulse and compilation of the
//! measurement-conditioned transition matrices.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::TWO_PI;
use crate::error::{Error, Result};
use crate::levels::{LevelTable, PopulationState};
use crate::pulses::{Coupling, PulseLibrary, PulseSpec, TrapConfig};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `amplitude * exp(i frequency t) |row><col| + h.c.`, angular units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseTerm {
    pub row: usize,
    pub col: usize,
    pub amplitude: Complex64,
    pub frequency: f64,
}

/// Time-dependent interaction-picture Hamiltonian over the product of the
/// level basis and a truncated motional mode. Basis index = state * N_mot + n.
#[derive(Debug, Clone)]
pub struct InteractionHamiltonian {
    pub dim: usize,
    pub n_motional: usize,
    pub terms: Vec<SparseTerm>,
}

impl InteractionHamiltonian {
    /// First-order Lamb-Dicke expansion of the Raman drive for one pulse.
    pub fn build<'a>(
        pulse: &PulseSpec,
        couplings: impl IntoIterator<Item = &'a Coupling>,
        energies_hz: &[f64],
        trap: &TrapConfig,
    ) -> Self {
        let n_mot = trap.n_motional;
        let omega = TWO_PI * pulse.laser_frequency_hz;
        let omega_mot = TWO_PI * trap.motional_frequency_hz;
        let lambda = trap.lamb_dicke;
        let mut terms = Vec::new();
        for c in couplings {
            if c.polarization != pulse.polarization || c.rabi_rate == 0.0 {
                continue;
            }
            let half = 0.5 * c.rabi_rate;
            let delta = TWO_PI * (energies_hz[c.final_] - energies_hz[c.initial]);
            for n in 0..n_mot {
                let col = c.initial * n_mot + n;
                terms.push(SparseTerm {
                    row: c.final_ * n_mot + n,
                    col,
                    amplitude: Complex64::new(half, 0.0),
                    frequency: delta - omega,
                });
                if n + 1 < n_mot {
                    terms.push(SparseTerm {
                        row: c.final_ * n_mot + n + 1,
                        col,
                        amplitude: I * (half * lambda * ((n + 1) as f64).sqrt()),
                        frequency: delta - omega + omega_mot,
                    });
                }
                if n > 0 {
                    terms.push(SparseTerm {
                        row: c.final_ * n_mot + n - 1,
                        col,
                        amplitude: I * (half * lambda * (n as f64).sqrt()),
                        frequency: delta - omega - omega_mot,
                    });
                }
            }
        }
        InteractionHamiltonian {
            dim: energies_hz.len() * n_mot,
            n_motional: n_mot,
            terms,
        }
    }

    pub fn for_pulse(pulse: &PulseSpec, library: &PulseLibrary, table: &LevelTable) -> Self {
        Self::build(pulse, &library.couplings, &table.energies_hz(), &library.trap)
    }

    /// Dense H'(t) in rad/s.
    pub fn at(&self, t: f64) -> DMatrix<Complex64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            let v = term.amplitude * Complex64::from_polar(1.0, term.frequency * t);
            h[(term.row, term.col)] += v;
            h[(term.col, term.row)] += v.conj();
        }
        h
    }

    /// Upper bound on the operator norm of H'(t) for every t (max row sum).
    pub fn norm_bound(&self) -> f64 {
        let mut rows = vec![0.0; self.dim];
        for term in &self.terms {
            rows[term.row] += term.amplitude.norm();
            rows[term.col] += term.amplitude.norm();
        }
        rows.into_iter().fold(0.0, f64::max)
    }

    /// Replace every term oscillating at |frequency| >= `cutoff` (rad/s) by its
    /// second-order time average. Writing the fast part as
    /// sum_m h_m e^{-i w_m t} + h.c. with w_m > 0, the average is
    /// sum_{m,n} (1/w_m + 1/w_n)/2 [h_m^dag, h_n] e^{i (w_m - w_n) t},
    /// keeping only pairs with |w_m - w_n| < cutoff. Light shifts and
    /// two-photon couplings through far-detuned carriers survive; the fast
    /// micromotion they cause (relative size (amplitude/frequency)^2) does not.
    pub fn with_fast_terms_averaged(&self, cutoff: f64) -> Self {
        // (x, y, alpha, w) for h = alpha |x><y|
        let mut fast = Vec::new();
        let mut terms = Vec::new();
        for t in &self.terms {
            if t.frequency.abs() < cutoff {
                terms.push(*t);
            } else if t.frequency < 0.0 {
                fast.push((t.row, t.col, t.amplitude, -t.frequency));
            } else {
                fast.push((t.col, t.row, t.amplitude.conj(), t.frequency));
            }
        }
        let mut by_x: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut by_y: HashMap<usize, Vec<usize>> = HashMap::new();
        for (k, f) in fast.iter().enumerate() {
            by_x.entry(f.0).or_default().push(k);
            by_y.entry(f.1).or_default().push(k);
        }
        let mut acc: BTreeMap<(usize, usize, u64), Complex64> = BTreeMap::new();
        let mut add = |row: usize, col: usize, freq: f64, v: Complex64| {
            *acc.entry((row, col, freq.to_bits())).or_default() += v;
        };
        for group in by_x.values() {
            for &m in group {
                for &n in group {
                    let (fm, fn_) = (fast[m], fast[n]);
                    if (fm.3 - fn_.3).abs() < cutoff {
                        let c = 0.5 * (1.0 / fm.3 + 1.0 / fn_.3);
                        add(fm.1, fn_.1, fm.3 - fn_.3, fm.2.conj() * fn_.2 * c);
                    }
                }
            }
        }
        for group in by_y.values() {
            for &m in group {
                for &n in group {
                    let (fm, fn_) = (fast[m], fast[n]);
                    if (fm.3 - fn_.3).abs() < cutoff {
                        let c = 0.5 * (1.0 / fm.3 + 1.0 / fn_.3);
                        add(fn_.0, fm.0, fm.3 - fn_.3, -(fm.2.conj() * fn_.2 * c));
                    }
                }
            }
        }
        // each entry's conjugate partner sits at (col, row, -freq); keep one
        // of them, and split diagonal entries between the term and its h.c.
        for ((row, col, bits), v) in acc {
            let frequency = f64::from_bits(bits);
            let amplitude = match row.cmp(&col) {
                std::cmp::Ordering::Less => v,
                std::cmp::Ordering::Equal => 0.5 * v,
                std::cmp::Ordering::Greater => continue,
            };
            if amplitude != Complex64::new(0.0, 0.0) {
                terms.push(SparseTerm {
                    row,
                    col,
                    amplitude,
                    frequency,
                });
            }
        }
        InteractionHamiltonian {
            dim: self.dim,
            n_motional: self.n_motional,
            terms,
        }
    }

    /// Hamiltonian actually propagated under the given settings.
    pub fn for_settings(
        pulse: &PulseSpec,
        library: &PulseLibrary,
        table: &LevelTable,
        settings: &PropagationSettings,
    ) -> Self {
        let h = Self::for_pulse(pulse, library, table);
        match settings.fast_cutoff_hz {
            Some(hz) => h.with_fast_terms_averaged(TWO_PI * hz),
            None => h,
        }
    }

    /// Connected components of the coupling graph, as sorted index lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.dim).collect();
        fn root(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for term in &self.terms {
            let (a, b) = (root(&mut parent, term.row), root(&mut parent, term.col));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for x in 0..self.dim {
            let r = root(&mut parent, x);
            groups.entry(r).or_default().push(x);
        }
        groups.into_values().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationSettings {
    /// Nominal time step, s.
    pub step_s: f64,
    /// Halve the step instead of failing when the sampling criterion trips.
    pub auto_refine: bool,
    /// Smallest step auto-refinement may reach, s.
    pub min_step_s: f64,
    /// Terms oscillating faster than this (Hz) enter through their
    /// second-order time average instead of being stepped. None steps all.
    #[serde(default = "default_fast_cutoff")]
    pub fast_cutoff_hz: Option<f64>,
}

fn default_fast_cutoff() -> Option<f64> {
    Some(1e6)
}

impl Default for PropagationSettings {
    fn default() -> Self {
        PropagationSettings {
            step_s: 1e-6,
            auto_refine: true,
            min_step_s: 1e-10,
            fast_cutoff_hz: default_fast_cutoff(),
        }
    }
}

impl PropagationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_s > 0.0) || !self.step_s.is_finite() {
            return Err(Error::config("propagation step must be positive"));
        }
        if !(self.min_step_s > 0.0) || self.min_step_s > self.step_s {
            return Err(Error::config("minimum propagation step must lie in (0, step]"));
        }
        if let Some(hz) = self.fast_cutoff_hz {
            if !(hz > 0.0) || !hz.is_finite() {
                return Err(Error::config("fast-term cutoff must be positive"));
            }
        }
        Ok(())
    }
}

/// Largest allowed step * ||H'|| per step, rad.
pub const SAMPLING_LIMIT: f64 = 0.5;

/// (e^{ix} - 1)/(ix), accurate near 0.
fn phi1(x: f64) -> Complex64 {
    if x.abs() < 1e-3 {
        let ix = Complex64::new(0.0, x);
        1.0 + ix / 2.0 + ix * ix / 6.0 + ix * ix * ix / 24.0
    } else {
        (Complex64::from_polar(1.0, x) - 1.0) / Complex64::new(0.0, x)
    }
}

/// int_0^1 ds e^{i a s} int_0^s du e^{i b u}, by composite Gauss-Legendre on
/// the outer integral (the inner one is closed-form).
fn ordered_double_integral(a: f64, b: f64) -> Complex64 {
    const NODES: [(f64, f64); 8] = [
        (-0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
        (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
        (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
        (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
        (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
        (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
        (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
        (0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
    ];
    let pieces = ((a.abs() + b.abs()) / 2.0).ceil().max(1.0) as usize;
    let h = 1.0 / pieces as f64;
    let mut total = Complex64::new(0.0, 0.0);
    for p in 0..pieces {
        let mid = (p as f64 + 0.5) * h;
        for &(x, w) in &NODES {
            let s = mid + 0.5 * h * x;
            total += 0.5 * h * w * Complex64::from_polar(1.0, a * s) * s * phi1(b * s);
        }
    }
    total
}

/// One step's Hamiltonian terms restricted to one block of the basis: the
/// first Magnus term (exact step integral of every term) and the second
/// (exact ordered double integral of every commutator).
struct Block {
    /// Local dimension.
    dim: usize,
    /// (local row, local col, amplitude * sinc, frequency), before h.c.
    entries: Vec<(usize, usize, Complex64, f64)>,
    /// Distinct (row, col) positions of the second-order part.
    slots: Vec<(usize, usize)>,
    /// Frequencies of the second-order terms.
    second_frequencies: Vec<f64>,
    /// Second-order terms (slot, coefficient / dt, frequency index): at a step
    /// the slot gains coefficient * e^{i frequency t_mid}.
    second: Vec<(usize, Complex64, usize)>,
}

impl Block {
    fn new(h: &InteractionHamiltonian, members: &[usize], dt: f64) -> Self {
        let mut local = vec![usize::MAX; h.dim];
        for (k, &g) in members.iter().enumerate() {
            local[g] = k;
        }
        let kept: Vec<&SparseTerm> = h.terms.iter().filter(|t| local[t.row] != usize::MAX).collect();
        let entries = kept
            .iter()
            .map(|t| {
                let x = 0.5 * t.frequency * dt;
                let sinc = if x.abs() < 1e-8 { 1.0 - x * x / 6.0 } else { x.sin() / x };
                (local[t.row], local[t.col], t.amplitude * sinc, t.frequency)
            })
            .collect();

        // Elementary operators alpha e^{i nu t} |x><y|: each term and its h.c.
        struct Op {
            x: usize,
            y: usize,
            alpha: Complex64,
            nu: f64,
        }
        let mut ops = Vec::with_capacity(2 * kept.len());
        for t in &kept {
            let (r, c) = (local[t.row], local[t.col]);
            ops.push(Op { x: r, y: c, alpha: t.amplitude, nu: t.frequency });
            ops.push(Op { x: c, y: r, alpha: t.amplitude.conj(), nu: -t.frequency });
        }
        let mut by_x: Vec<Vec<usize>> = vec![Vec::new(); members.len()];
        for (k, op) in ops.iter().enumerate() {
            by_x[op.x].push(k);
        }
        // Omega_2 / dt = -(i/2) dt sum_{y_k = x_l} alpha_k alpha_l
        //   (J(nu_k dt, nu_l dt) - J(nu_l dt, nu_k dt)) e^{i (nu_k + nu_l) t0} |x_k><y_l|
        let mut merged: BTreeMap<(usize, usize, u64), Complex64> = BTreeMap::new();
        let mut cache: HashMap<(u64, u64), Complex64> = HashMap::new();
        for k in &ops {
            for &li in &by_x[k.y] {
                let l = &ops[li];
                let key = (k.nu.to_bits(), l.nu.to_bits());
                let kernel = *cache.entry(key).or_insert_with(|| {
                    let (a, b) = (k.nu * dt, l.nu * dt);
                    (ordered_double_integral(a, b) - ordered_double_integral(b, a))
                        * Complex64::from_polar(1.0, -0.5 * (a + b))
                });
                let coef = Complex64::new(0.0, -0.5 * dt) * k.alpha * l.alpha * kernel;
                *merged.entry((k.x, l.y, (k.nu + l.nu).to_bits())).or_default() += coef;
            }
        }
        // Terms this small change nothing over any realistic pulse length.
        let floor = 1e-9 * merged.values().map(|c| c.norm()).fold(0.0, f64::max);
        let mut slots: Vec<(usize, usize)> = Vec::new();
        let mut second = Vec::new();
        let mut frequency_index: BTreeMap<u64, usize> = BTreeMap::new();
        for ((r, c, f), coef) in merged {
            if coef.norm() <= floor {
                continue;
            }
            if slots.last() != Some(&(r, c)) {
                slots.push((r, c));
            }
            let n = frequency_index.len();
            let idx = *frequency_index.entry(f).or_insert(n);
            second.push((slots.len() - 1, coef, idx));
        }
        let mut second_frequencies = vec![0.0; frequency_index.len()];
        for (f, i) in frequency_index {
            second_frequencies[i] = f64::from_bits(f);
        }
        Block {
            dim: members.len(),
            entries,
            slots,
            second_frequencies,
            second,
        }
    }
}

/// Evolve the columns `psi` (row-major: `dim` rows of `ncols`) through
/// `n_steps` steps of length `dt` starting at t = 0. Each step applies the
/// exact exponential of the first two Magnus terms.
fn propagate_block(
    block: &Block,
    psi: &mut [Complex64],
    ncols: usize,
    n_steps: usize,
    dt: f64,
    mut observer: Option<&mut dyn FnMut(f64, &[Complex64])>,
) -> Result<()> {
    let dim = block.dim;
    debug_assert_eq!(psi.len(), dim * ncols);
    if block.entries.is_empty() || n_steps == 0 {
        if let Some(obs) = observer.as_mut() {
            for k in 1..=n_steps {
                obs(k as f64 * dt, psi);
            }
        }
        return Ok(());
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut values = vec![zero; block.entries.len()];
    let frequencies: Vec<f64> = block
        .entries
        .iter()
        .map(|e| e.3)
        .chain(block.second_frequencies.iter().copied())
        .collect();
    let mut phases = vec![zero; frequencies.len()];
    let mut second = vec![zero; block.slots.len()];
    let rotation: Vec<Complex64> = frequencies.iter().map(|&w| Complex64::from_polar(1.0, w * dt)).collect();
    let n_first = block.entries.len();
    let mut term = psi.to_vec();
    let mut next = vec![zero; dim * ncols];
    for k in 0..n_steps {
        // phases advance by a fixed rotation; re-anchor now and then to stop drift
        if k % 256 == 0 {
            let t_mid = (k as f64 + 0.5) * dt;
            for (p, &w) in phases.iter_mut().zip(&frequencies) {
                *p = Complex64::from_polar(1.0, w * t_mid);
            }
        } else {
            for (p, r) in phases.iter_mut().zip(&rotation) {
                *p *= r;
            }
        }
        for ((v, p), &(_, _, a, _)) in values.iter_mut().zip(&phases).zip(&block.entries) {
            *v = a * p;
        }
        second.iter_mut().for_each(|z| *z = zero);
        for &(slot, c, f) in &block.second {
            second[slot] += c * phases[n_first + f];
        }
        // psi <- sum_n (-i dt X)^n / n! psi
        term.copy_from_slice(psi);
        let mut order = 0usize;
        loop {
            order += 1;
            if order > 80 {
                return Err(Error::numerical("propagator series failed to converge"));
            }
            next.iter_mut().for_each(|z| *z = zero);
            for (&(r, c, _, _), &v) in block.entries.iter().zip(&values) {
                let (rr, cc) = (r * ncols, c * ncols);
                let vc = v.conj();
                for j in 0..ncols {
                    next[rr + j] += v * term[cc + j];
                    next[cc + j] += vc * term[rr + j];
                }
            }
            for (&(r, c), &v) in block.slots.iter().zip(&second) {
                let (rr, cc) = (r * ncols, c * ncols);
                for j in 0..ncols {
                    next[rr + j] += v * term[cc + j];
                }
            }
            let scale = Complex64::new(0.0, -dt / order as f64);
            let mut biggest = 0.0f64;
            for (t, n) in term.iter_mut().zip(&next) {
                *t = scale * n;
                biggest = biggest.max(t.norm_sqr());
            }
            for (p, t) in psi.iter_mut().zip(&term) {
                *p += t;
            }
            if biggest < 1e-36 {
                break;
            }
        }
        if let Some(obs) = observer.as_mut() {
            obs((k + 1) as f64 * dt, psi);
        }
    }
    Ok(())
}

fn step_count(duration: f64, step: f64) -> Result<(usize, f64)> {
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::numerical(format!("invalid pulse duration {duration}")));
    }
    if duration == 0.0 {
        return Ok((0, 0.0));
    }
    let n = (duration / step).ceil().max(1.0);
    if n > 1e9 {
        return Err(Error::numerical("pulse needs more than 1e9 propagation steps"));
    }
    let n = n as usize;
    Ok((n, duration / n as f64))
}

fn check_sampling(h: &InteractionHamiltonian, dt: f64) -> Result<()> {
    let phase = dt * h.norm_bound();
    if phase > SAMPLING_LIMIT {
        return Err(Error::numerical(format!(
            "step {dt:e} s gives {phase:.3} rad per step (limit {SAMPLING_LIMIT}); use a step below {:e} s",
            SAMPLING_LIMIT / h.norm_bound()
        )));
    }
    Ok(())
}

/// Resolve the step actually used, halving when allowed.
pub fn effective_step(h: &InteractionHamiltonian, duration: f64, settings: &PropagationSettings) -> Result<f64> {
    settings.validate()?;
    let mut step = settings.step_s.min(duration.max(f64::MIN_POSITIVE));
    loop {
        let (_, dt) = step_count(duration, step)?;
        match check_sampling(h, dt) {
            Ok(()) => return Ok(step),
            Err(e) if !settings.auto_refine => return Err(e),
            Err(e) => {
                step *= 0.5;
                if step < settings.min_step_s {
                    return Err(e);
                }
                log::warn!("halving propagation step to {step:e} s");
            }
        }
    }
}

/// Propagate the given basis columns for `duration`. Returns a dim x ncols matrix.
pub fn propagate_columns(
    h: &InteractionHamiltonian,
    columns: &[usize],
    duration: f64,
    step: f64,
) -> Result<DMatrix<Complex64>> {
    let (n_steps, dt) = step_count(duration, step)?;
    if n_steps > 0 {
        check_sampling(h, dt)?;
    }
    let mut out = DMatrix::zeros(h.dim, columns.len());
    for members in h.components() {
        let mut local = vec![usize::MAX; h.dim];
        for (k, &g) in members.iter().enumerate() {
            local[g] = k;
        }
        let cols: Vec<(usize, usize)> = columns
            .iter()
            .enumerate()
            .filter(|(_, &c)| local[c] != usize::MAX)
            .map(|(pos, &c)| (pos, local[c]))
            .collect();
        if cols.is_empty() {
            continue;
        }
        let nc = cols.len();
        let mut psi = vec![Complex64::new(0.0, 0.0); members.len() * nc];
        for (j, &(_, lc)) in cols.iter().enumerate() {
            psi[lc * nc + j] = Complex64::new(1.0, 0.0);
        }
        let block = Block::new(h, &members, dt);
        propagate_block(&block, &mut psi, nc, n_steps, dt, None)?;
        for (j, &(pos, _)) in cols.iter().enumerate() {
            for (k, &g) in members.iter().enumerate() {
                out[(g, pos)] = psi[k * nc + j];
            }
        }
    }
    Ok(out)
}

/// Propagate one initial state and report the state after every step.
pub fn propagate_traced(
    h: &InteractionHamiltonian,
    initial: &[Complex64],
    duration: f64,
    step: f64,
    observer: &mut dyn FnMut(f64, &[Complex64]),
) -> Result<Vec<Complex64>> {
    if initial.len() != h.dim {
        return Err(Error::numerical("initial state has the wrong dimension"));
    }
    let (n_steps, dt) = step_count(duration, step)?;
    if n_steps > 0 {
        check_sampling(h, dt)?;
    }
    let all: Vec<usize> = (0..h.dim).collect();
    let block = Block::new(h, &all, dt);
    let mut psi = initial.to_vec();
    propagate_block(&block, &mut psi, 1, n_steps, dt, Some(observer))?;
    Ok(psi)
}

#[derive(Debug, Clone)]
pub struct UnitaryEvolution {
    pub u: DMatrix<Complex64>,
    pub pulse_id: usize,
    pub elapsed: f64,
    pub n_motional: usize,
}

impl UnitaryEvolution {
    pub fn unitarity_error(&self) -> f64 {
        let n = self.u.nrows();
        let g = self.u.adjoint() * &self.u - DMatrix::<Complex64>::identity(n, n);
        g.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Full propagator of one pulse over the level x motion space.
pub fn evolve_pulse(
    pulse: &PulseSpec,
    library: &PulseLibrary,
    table: &LevelTable,
    settings: &PropagationSettings,
) -> Result<UnitaryEvolution> {
    let h = InteractionHamiltonian::for_settings(pulse, library, table, settings);
    let step = effective_step(&h, pulse.duration_s, settings)?;
    let all: Vec<usize> = (0..h.dim).collect();
    let u = propagate_columns(&h, &all, pulse.duration_s, step)?;
    let ev = UnitaryEvolution {
        u,
        pulse_id: pulse.id,
        elapsed: pulse.duration_s,
        n_motional: h.n_motional,
    };
    let err = ev.unitarity_error();
    if !(err < 1e-7) {
        return Err(Error::numerical(format!(
            "pulse {} propagator lost unitarity ({err:e})",
            pulse.id
        )));
    }
    Ok(ev)
}

/// Population maps for motional outcome 0 and for any excited outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrixPair {
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub pulse_id: usize,
}

pub const COLUMN_SUM_TOLERANCE: f64 = 1e-5;

impl TransitionMatrixPair {
    pub fn n_states(&self) -> usize {
        self.a0.nrows()
    }

    /// Largest |sum_i (A0 + A1)[i, j] - 1| over columns.
    pub fn column_sum_error(&self) -> f64 {
        let n = self.a0.ncols();
        (0..n)
            .map(|j| (self.a0.column(j).sum() + self.a1.column(j).sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn identity(n: usize, pulse_id: usize) -> Self {
        TransitionMatrixPair {
            a0: DMatrix::identity(n, n),
            a1: DMatrix::zeros(n, n),
            pulse_id,
        }
    }

    fn check(self) -> Result<Self> {
        let err = self.column_sum_error();
        if !(err <= COLUMN_SUM_TOLERANCE) {
            return Err(Error::numerical(format!(
                "pulse {}: transition-matrix column sums deviate from 1 by {err:e}",
                self.pulse_id
            )));
        }
        Ok(self)
    }
}

fn populations_from_columns(
    psi: &DMatrix<Complex64>,
    n_states: usize,
    n_mot: usize,
    pulse_id: usize,
) -> TransitionMatrixPair {
    let mut a0 = DMatrix::zeros(n_states, n_states);
    let mut a1 = DMatrix::zeros(n_states, n_states);
    for j in 0..n_states {
        for i in 0..n_states {
            a0[(i, j)] = psi[(i * n_mot, j)].norm_sqr();
            a1[(i, j)] = (1..n_mot).map(|n| psi[(i * n_mot + n, j)].norm_sqr()).sum();
        }
    }
    TransitionMatrixPair { a0, a1, pulse_id }
}

/// Discard coherence and sort final populations by motional outcome, starting
/// from every |state, n = 0>.
pub fn compile_transition_matrices(u: &UnitaryEvolution) -> Result<TransitionMatrixPair> {
    let n_mot = u.n_motional;
    let n_states = u.u.nrows() / n_mot;
    let ground: Vec<usize> = (0..n_states).map(|s| s * n_mot).collect();
    let cols = u.u.select_columns(&ground);
    populations_from_columns(&cols, n_states, n_mot, u.pulse_id).check()
}

/// Same as `evolve_pulse` followed by `compile_transition_matrices`, but only
/// the motional-ground columns are propagated.
pub fn compile_pulse(
    pulse: &PulseSpec,
    library: &PulseLibrary,
    table: &LevelTable,
    settings: &PropagationSettings,
) -> Result<TransitionMatrixPair> {
    let h = InteractionHamiltonian::for_settings(pulse, library, table, settings);
    let step = effective_step(&h, pulse.duration_s, settings)?;
    let n_mot = h.n_motional;
    let ground: Vec<usize> = (0..table.len()).map(|s| s * n_mot).collect();
    let psi = propagate_columns(&h, &ground, pulse.duration_s, step)?;
    populations_from_columns(&psi, table.len(), n_mot, pulse.id).check()
}

/// Compile every pulse of the library, in parallel.
pub fn compile_library(
    library: &PulseLibrary,
    table: &LevelTable,
    settings: &PropagationSettings,
) -> Result<Vec<TransitionMatrixPair>> {
    library
        .pulses
        .par_iter()
        .map(|p| compile_pulse(p, library, table, settings))
        .collect()
}

/// p_k = ||A_k p||_1.
pub fn measurement_probabilities(state: &PopulationState, tm: &TransitionMatrixPair) -> (f64, f64) {
    let (q0, q1) = apply_pair(state, tm);
    (q0.iter().sum(), q1.iter().sum())
}

/// Unnormalized post-measurement vectors A0 p and A1 p.
pub fn apply_pair(state: &PopulationState, tm: &TransitionMatrixPair) -> (Vec<f64>, Vec<f64>) {
    let n = tm.n_states();
    let mut q0 = vec![0.0; n];
    let mut q1 = vec![0.0; n];
    for (j, &pj) in state.p.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for i in 0..n {
            q0[i] += tm.a0[(i, j)] * pj;
            q1[i] += tm.a1[(i, j)] * pj;
        }
    }
    (q0, q1)
}

/// Laboratory-frame propagation on small systems, for cross-checking the
/// interaction picture. Returns the ground-column transition matrices.
pub fn compile_pulse_lab_frame(
    pulse: &PulseSpec,
    library: &PulseLibrary,
    table: &LevelTable,
    step: f64,
) -> Result<TransitionMatrixPair> {
    let trap = &library.trap;
    let n_mot = trap.n_motional;
    let n_states = table.len();
    let dim = n_states * n_mot;
    if dim > 64 {
        return Err(Error::config("laboratory-frame propagation is limited to toy sizes"));
    }
    let energies = table.energies_hz();
    let omega = TWO_PI * pulse.laser_frequency_hz;
    let omega_mot = TWO_PI * trap.motional_frequency_hz;
    let e_ref = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let h0: Vec<f64> = (0..dim)
        .map(|k| TWO_PI * (energies[k / n_mot] - e_ref) + omega_mot * (k % n_mot) as f64)
        .collect();
    // H_int(t) = sum Omega/2 [(1 + i lambda (a + a^dag)) e^{-i omega t} |f><i| + h.c.]
    let mut coupling = DMatrix::<Complex64>::zeros(dim, dim);
    for c in library.couplings_for(pulse.polarization) {
        let half = 0.5 * c.rabi_rate;
        for n in 0..n_mot {
            let col = c.initial * n_mot + n;
            coupling[(c.final_ * n_mot + n, col)] += Complex64::new(half, 0.0);
            if n + 1 < n_mot {
                coupling[(c.final_ * n_mot + n + 1, col)] += I * half * trap.lamb_dicke * ((n + 1) as f64).sqrt();
            }
            if n > 0 {
                coupling[(c.final_ * n_mot + n - 1, col)] += I * half * trap.lamb_dicke * (n as f64).sqrt();
            }
        }
    }
    let (n_steps, dt) = step_count(pulse.duration_s, step)?;
    let mut u = DMatrix::<Complex64>::identity(dim, dim);
    for k in 0..n_steps {
        let t = (k as f64 + 0.5) * dt;
        let phase = Complex64::from_polar(1.0, -omega * t);
        let v = &coupling * phase;
        let mut h = &v + v.adjoint();
        for i in 0..dim {
            h[(i, i)] += Complex64::new(h0[i], 0.0);
        }
        if dt * h.iter().map(|z| z.norm()).fold(0.0, f64::max) * dim as f64 > 50.0 {
            return Err(Error::numerical("laboratory-frame step too large"));
        }
        u = dense_expm_i(&h, dt) * u;
    }
    let ground: Vec<usize> = (0..n_states).map(|s| s * n_mot).collect();
    let cols = u.select_columns(&ground);
    populations_from_columns(&cols, n_states, n_mot, pulse.id).check()
}

/// exp(-i H dt) for a small dense Hermitian H via eigendecomposition.
fn dense_expm_i(h: &DMatrix<Complex64>, dt: f64) -> DMatrix<Complex64> {
    let eig = h.clone().symmetric_eigen();
    let phases = eig
        .eigenvalues
        .iter()
        .map(|&l| Complex64::from_polar(1.0, -l * dt))
        .collect::<Vec<_>>();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (c, ph) in phases.iter().enumerate() {
        for r in 0..scaled.nrows() {
            scaled[(r, c)] *= ph;
        }
    }
    scaled * v.adjoint()
}
