//! Molecular level structure: CaH+ hyperfine/Zeeman diagonalization, tabulated
//! level ingestion and thermal initial populations.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, NUCLEAR_MAGNETON, PLANCK};
use crate::error::{Error, Result};

/// A half-integer stored as twice its value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HalfInt(i32);

impl HalfInt {
    pub const fn from_twice(twice: i32) -> Self {
        HalfInt(twice)
    }

    pub const fn from_int(v: i32) -> Self {
        HalfInt(2 * v)
    }

    pub const fn twice(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub fn is_integer(self) -> bool {
        self.0 % 2 == 0
    }
}

impl std::ops::Add for HalfInt {
    type Output = HalfInt;
    fn add(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 + rhs.0)
    }
}

impl std::ops::Sub for HalfInt {
    type Output = HalfInt;
    fn sub(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 - rhs.0)
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

impl FromStr for HalfInt {
    type Err = Error;

    /// Accepts `1.5`, `-0.5`, `2`, `3/2` and `-1/2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::data(format!("not a half-integer: {s:?}"));
        if let Some((num, den)) = s.split_once('/') {
            let num: i32 = num.trim().parse().map_err(|_| bad())?;
            return match den.trim() {
                "2" => Ok(HalfInt(num)),
                "1" => Ok(HalfInt(2 * num)),
                _ => Err(bad()),
            };
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        let twice = 2.0 * v;
        if !twice.is_finite() || (twice - twice.round()).abs() > 1e-9 {
            return Err(bad());
        }
        Ok(HalfInt(twice.round() as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Parity {
    Plus,
    Minus,
}

impl Parity {
    fn symbol(self) -> char {
        match self {
            Parity::Plus => '+',
            Parity::Minus => '-',
        }
    }
}

impl FromStr for Parity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+" => Ok(Parity::Plus),
            "-" | "\u{2212}" => Ok(Parity::Minus),
            other => Err(Error::data(format!("bad parity {other:?}"))),
        }
    }
}

/// The label distinguishing states that share all other quantum numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Xi {
    Minus,
    Plus,
    Index(u32),
}

impl fmt::Display for Xi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Xi::Minus => write!(f, "-"),
            Xi::Plus => write!(f, "+"),
            Xi::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for Xi {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+" => Ok(Xi::Plus),
            "-" | "\u{2212}" => Ok(Xi::Minus),
            other => other
                .parse::<u32>()
                .map(Xi::Index)
                .map_err(|_| Error::data(format!("bad xi label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LevelLabel {
    pub manifold_id: u32,
    pub j: u32,
    /// Present for symmetric-top labels only.
    pub k: Option<u32>,
    pub parity: Option<Parity>,
    /// Total magnetic quantum number (m, or m_F).
    pub m: HalfInt,
    pub xi: Xi,
}

impl LevelLabel {
    pub fn cah(manifold_id: u32, j: u32, m: HalfInt, xi: Xi) -> Self {
        LevelLabel {
            manifold_id,
            j,
            k: None,
            parity: None,
            m,
            xi,
        }
    }

    pub fn symmetric_top(
        manifold_id: u32,
        j: u32,
        k: u32,
        parity: Parity,
        m: HalfInt,
        xi: u32,
    ) -> Self {
        LevelLabel {
            manifold_id,
            j,
            k: Some(k),
            parity: Some(parity),
            m,
            xi: Xi::Index(xi),
        }
    }

    fn check(&self) -> Result<()> {
        match (self.k, self.parity) {
            (None, None) => {
                if self.m.twice().unsigned_abs() > 2 * self.j + 1 {
                    return Err(Error::data(format!("|m| > J + 1/2 in {self}")));
                }
            }
            (Some(k), Some(_)) => {
                if k > self.j {
                    return Err(Error::data(format!("K > J in {self}")));
                }
            }
            _ => return Err(Error::data(format!("K and parity must be given together in {self}"))),
        }
        Ok(())
    }
}

impl LevelLabel {
    /// Compact text key, `J:m:xi` or `J:K:p:mF:xi`, used in data files.
    pub fn key(&self) -> String {
        match (self.k, self.parity) {
            (Some(k), Some(p)) => format!("{}:{}:{}:{}:{}", self.j, k, p.symbol(), self.m, self.xi),
            _ => format!("{}:{}:{}", self.j, self.m, self.xi),
        }
    }
}

impl fmt::Display for LevelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.k, self.parity) {
            (Some(k), Some(p)) => write!(
                f,
                "|{},{},{},{},{}\u{27e9}",
                self.j,
                k,
                p.symbol(),
                self.m,
                self.xi
            ),
            _ => write!(f, "|{},{},{}\u{27e9}", self.j, self.m, self.xi),
        }
    }
}

/// Amplitude of an eigenstate on one |J, m_J> x |m_I> product vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductComponent {
    pub m_j: HalfInt,
    pub m_i: HalfInt,
    pub amplitude: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub label: LevelLabel,
    /// E/h in Hz.
    pub energy_hz: f64,
    /// Eigenvector in the product basis; empty for tabulated levels.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ProductComponent>,
}

/// Ordered list of levels. The list index is the basis index used by every
/// matrix downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Level>", into = "Vec<Level>")]
pub struct LevelTable {
    levels: Vec<Level>,
    index: HashMap<LevelLabel, usize>,
}

impl TryFrom<Vec<Level>> for LevelTable {
    type Error = Error;
    fn try_from(levels: Vec<Level>) -> Result<Self> {
        LevelTable::new(levels)
    }
}

impl From<LevelTable> for Vec<Level> {
    fn from(t: LevelTable) -> Self {
        t.levels
    }
}

impl LevelTable {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        let mut index = HashMap::with_capacity(levels.len());
        for (i, level) in levels.iter().enumerate() {
            if !level.energy_hz.is_finite() {
                return Err(Error::data(format!("non-finite energy for {}", level.label)));
            }
            level.label.check()?;
            if let Some(prev) = index.insert(level.label.clone(), i) {
                return Err(Error::data(format!(
                    "duplicate label {} at positions {prev} and {i}",
                    level.label
                )));
            }
        }
        Ok(LevelTable { levels, index })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Level {
        &self.levels[i]
    }

    pub fn label(&self, i: usize) -> &LevelLabel {
        &self.levels[i].label
    }

    pub fn energy_hz(&self, i: usize) -> f64 {
        self.levels[i].energy_hz
    }

    pub fn energies_hz(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.energy_hz).collect()
    }

    pub fn find(&self, label: &LevelLabel) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Look up a level by its text key; m may be written as `3/2` or `1.5`.
    pub fn find_key(&self, key: &str) -> Option<usize> {
        let parts: Vec<&str> = key.trim().split(':').map(str::trim).collect();
        let m_pos = match parts.len() {
            3 => 1,
            5 => 3,
            _ => return None,
        };
        let m: HalfInt = parts[m_pos].parse().ok()?;
        let mut canonical = parts.clone();
        let m_text = m.to_string();
        canonical[m_pos] = &m_text;
        let xi: Xi = parts[parts.len() - 1].parse().ok()?;
        let xi_text = xi.to_string();
        let last = canonical.len() - 1;
        canonical[last] = &xi_text;
        let wanted = canonical.join(":");
        self.levels.iter().position(|l| l.label.key() == wanted)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data(format!("level table json: {e}")))
    }
}

/// Molecular constants for a 2Sigma-free rotor with one spin-1/2 nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CahConstants {
    /// Rotational constant, Hz.
    pub rotational_hz: f64,
    pub g_rot: f64,
    pub g_nuclear: f64,
    /// Spin-rotation constant, Hz.
    pub spin_rotation_hz: f64,
    /// Magnetic field, tesla.
    pub field_tesla: f64,
}

impl CahConstants {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rotational_hz,
            self.g_rot,
            self.g_nuclear,
            self.spin_rotation_hz,
            self.field_tesla,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("molecular constants must be finite"));
        }
        if self.rotational_hz <= 0.0 {
            return Err(Error::config("rotational constant must be positive"));
        }
        if self.field_tesla < 0.0 {
            return Err(Error::config("magnetic field must be non-negative"));
        }
        Ok(())
    }
}

/// Hamiltonian (E/h, Hz) of one rotational manifold in the |J,m_J> x |m_I> basis.
#[derive(Debug, Clone)]
pub struct ManifoldHamiltonian {
    pub j: u32,
    /// (m_J, m_I) for each basis index.
    pub basis: Vec<(HalfInt, HalfInt)>,
    pub matrix: DMatrix<Complex64>,
}

/// Basis index of |J, m_J> x |m_I> with nuclear spin 1/2.
pub fn product_index(j: u32, m_j: i32, m_i_twice: i32) -> usize {
    ((m_j + j as i32) * 2 + (m_i_twice + 1) / 2) as usize
}

/// Rotational, Zeeman and spin-rotation Hamiltonian for each requested J.
pub fn build_cah_hamiltonian(
    constants: &CahConstants,
    j_manifolds: &[u32],
) -> Result<Vec<ManifoldHamiltonian>> {
    constants.validate()?;
    if j_manifolds.is_empty() {
        return Err(Error::config("no rotational manifolds requested"));
    }
    let mut seen = std::collections::HashSet::new();
    for &j in j_manifolds {
        if !seen.insert(j) {
            return Err(Error::config(format!("rotational manifold J={j} listed twice")));
        }
    }

    let zeeman_rot = constants.g_rot * NUCLEAR_MAGNETON * constants.field_tesla / PLANCK;
    let zeeman_nuc = constants.g_nuclear * NUCLEAR_MAGNETON * constants.field_tesla / PLANCK;
    let c = constants.spin_rotation_hz;

    let mut out = Vec::with_capacity(j_manifolds.len());
    for &j in j_manifolds {
        let jf = j as f64;
        let dim = (2 * j as usize + 1) * 2;
        let mut h = DMatrix::<Complex64>::zeros(dim, dim);
        let mut basis = vec![(HalfInt::from_int(0), HalfInt::from_int(0)); dim];
        for m_j in -(j as i32)..=(j as i32) {
            for m_i2 in [-1, 1] {
                let idx = product_index(j, m_j, m_i2);
                basis[idx] = (HalfInt::from_int(m_j), HalfInt::from_twice(m_i2));
                let mj = m_j as f64;
                let mi = m_i2 as f64 / 2.0;
                let diag = constants.rotational_hz * jf * (jf + 1.0)
                    - zeeman_rot * mj
                    - zeeman_nuc * mi
                    - c * mi * mj;
                h[(idx, idx)] = Complex64::new(diag, 0.0);
            }
            // I+ J- couples |m_J, -1/2> to |m_J - 1, +1/2>.
            if m_j > -(j as i32) {
                let from = product_index(j, m_j, -1);
                let to = product_index(j, m_j - 1, 1);
                let mj = m_j as f64;
                let elem = -0.5 * c * (jf * (jf + 1.0) - mj * (mj - 1.0)).sqrt();
                h[(to, from)] = Complex64::new(elem, 0.0);
                h[(from, to)] = Complex64::new(elem, 0.0);
            }
        }
        let asym = max_abs(&(&h - h.adjoint()));
        if asym >= 1e-12 * max_abs(&h).max(1.0) {
            return Err(Error::numerical(format!(
                "assembled Hamiltonian for J={j} is not Hermitian ({asym:e})"
            )));
        }
        out.push(ManifoldHamiltonian {
            j,
            basis,
            matrix: h,
        });
    }
    Ok(out)
}

/// Largest entry modulus.
pub fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Ascending eigenvalues and matching unit eigenvectors (columns).
pub fn hermitian_eigen(h: &DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let n = h.nrows();
    if n != h.ncols() {
        return Err(Error::numerical("eigen-decomposition of a non-square matrix"));
    }
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let scale = max_abs(h);
    // Shift by the mean diagonal so a large common offset does not swamp
    // the small splittings.
    let shift = (0..n).map(|i| h[(i, i)].re).sum::<f64>() / n as f64;
    let mut shifted = h.clone();
    for i in 0..n {
        shifted[(i, i)] -= Complex64::new(shift, 0.0);
    }
    let eig = shifted
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical(format!("eigensolver did not converge on {n}x{n} block")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i] + shift).collect();
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let norm = scale.max(1.0);
    for (c, &lambda) in values.iter().enumerate() {
        let v = vectors.column(c);
        let resid = (h * v - v * Complex64::new(lambda, 0.0)).norm();
        if !(resid < 1e-9 * norm) {
            return Err(Error::numerical(format!(
                "eigenpair residual {resid:e} exceeds tolerance"
            )));
        }
    }
    Ok((values, vectors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelingRule {
    /// xi is the relative sign of the two product-basis amplitudes; product
    /// states fall back to ascending energy (- then +). Edge states are -.
    CahRelativeSign,
    /// xi = 1, 2, ... in ascending energy within each (J, m) block.
    AscendingIndex,
}

/// Diagonalize each manifold block by block in total m and label the result.
/// Levels are ordered by (J, m, energy).
pub fn diagonalize_to_levels(
    manifolds: &[ManifoldHamiltonian],
    rule: LabelingRule,
) -> Result<LevelTable> {
    let mut levels = Vec::new();
    for (manifold_pos, mh) in manifolds.iter().enumerate() {
        let h = &mh.matrix;
        let n = h.nrows();
        if mh.basis.len() != n || h.ncols() != n {
            return Err(Error::numerical(format!("inconsistent basis for J={}", mh.j)));
        }
        let scale = max_abs(&h).max(1.0);
        let m_of = |i: usize| mh.basis[i].0 + mh.basis[i].1;
        for r in 0..n {
            for c in 0..n {
                if m_of(r) != m_of(c) && h[(r, c)].norm() >= 1e-12 * scale {
                    return Err(Error::numerical(format!(
                        "J={} Hamiltonian couples different total m",
                        mh.j
                    )));
                }
            }
        }
        let mut ms: Vec<HalfInt> = (0..n).map(m_of).collect();
        ms.sort();
        ms.dedup();
        for m in ms {
            let members: Vec<usize> = (0..n).filter(|&i| m_of(i) == m).collect();
            let k = members.len();
            let block = DMatrix::from_fn(k, k, |r, c| h[(members[r], members[c])]);
            let (values, vectors) = hermitian_eigen(&block)?;

            let off_diag = (0..k)
                .flat_map(|r| (0..k).map(move |c| (r, c)))
                .filter(|&(r, c)| r != c)
                .map(|(r, c)| block[(r, c)].norm())
                .fold(0.0, f64::max);
            let decoupled = off_diag < 1e-12 * scale;
            // Product vectors are eigenvectors when the block is diagonal; use
            // them so degenerate pairs are labeled deterministically.
            let (values, vectors) = if decoupled {
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| block[(a, a)].re.total_cmp(&block[(b, b)].re).then(a.cmp(&b)));
                let vals = order.iter().map(|&i| block[(i, i)].re).collect::<Vec<_>>();
                let vecs = DMatrix::from_fn(k, k, |r, c| {
                    if r == order[c] {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                });
                (vals, vecs)
            } else {
                (values, vectors)
            };

            let xis = assign_xi(&vectors, decoupled, rule)?;
            for c in 0..k {
                let components = members
                    .iter()
                    .enumerate()
                    .map(|(r, &basis_i)| ProductComponent {
                        m_j: mh.basis[basis_i].0,
                        m_i: mh.basis[basis_i].1,
                        amplitude: vectors[(r, c)],
                    })
                    .collect();
                levels.push(Level {
                    label: LevelLabel::cah(manifold_pos as u32 + 1, mh.j, m, xis[c]),
                    energy_hz: values[c],
                    components,
                });
            }
        }
    }
    LevelTable::new(levels)
}

fn assign_xi(vectors: &DMatrix<Complex64>, decoupled: bool, rule: LabelingRule) -> Result<Vec<Xi>> {
    let k = vectors.ncols();
    match rule {
        LabelingRule::AscendingIndex => Ok((1..=k as u32).map(Xi::Index).collect()),
        LabelingRule::CahRelativeSign => match k {
            1 => Ok(vec![Xi::Minus]),
            2 if decoupled => Ok(vec![Xi::Minus, Xi::Plus]),
            2 => {
                let sign = |c: usize| (vectors[(0, c)] * vectors[(1, c)].conj()).re;
                let (s0, s1) = (sign(0), sign(1));
                if s0 == 0.0 || s1 == 0.0 || (s0 > 0.0) == (s1 > 0.0) {
                    // Orthogonal mixed pairs always have opposite relative sign;
                    // anything else is a near-product pair.
                    return Ok(vec![Xi::Minus, Xi::Plus]);
                }
                Ok(vec![
                    if s0 > 0.0 { Xi::Plus } else { Xi::Minus },
                    if s1 > 0.0 { Xi::Plus } else { Xi::Minus },
                ])
            }
            _ => Err(Error::config(
                "relative-sign labeling only applies to blocks of size 1 or 2",
            )),
        },
    }
}

fn parse_field<T: FromStr>(raw: &str, row: usize, column: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::data(format!("row {row}: malformed {column} value {raw:?}")))
}

/// Parse level rows `manifold_id, J, K, parity, m, xi, energy_kHz`. K and parity
/// are blank for CaH+-style labels.
pub fn parse_level_table<R: Read>(reader: R, delimiter: u8) -> Result<LevelTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(reader);
    let expected = ["manifold_id", "J", "K", "parity", "m", "xi", "energy_kHz"];
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("level table header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::data(format!(
            "level table header must be {expected:?}, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut levels = Vec::new();
    let mut seen: HashMap<LevelLabel, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        if rec.len() != expected.len() {
            return Err(Error::data(format!("row {row}: expected 7 columns, found {}", rec.len())));
        }
        let manifold_id: u32 = parse_field(&rec[0], row, "manifold_id")?;
        let j: u32 = parse_field(&rec[1], row, "J")?;
        let k: Option<u32> = match rec[2].trim() {
            "" => None,
            s => Some(parse_field(s, row, "K")?),
        };
        let parity: Option<Parity> = match rec[3].trim() {
            "" => None,
            s => Some(parse_field(s, row, "parity")?),
        };
        let m: HalfInt = parse_field(&rec[4], row, "m")?;
        let xi: Xi = parse_field(&rec[5], row, "xi")?;
        let energy_khz: f64 = parse_field(&rec[6], row, "energy_kHz")?;
        if !energy_khz.is_finite() {
            return Err(Error::data(format!("row {row}: non-finite energy")));
        }
        let label = LevelLabel {
            manifold_id,
            j,
            k,
            parity,
            m,
            xi,
        };
        label.check().map_err(|e| Error::data(format!("row {row}: {e}")))?;
        if let Some(prev) = seen.insert(label.clone(), row) {
            return Err(Error::data(format!(
                "row {row}: duplicate label {label} (first seen at row {prev})"
            )));
        }
        levels.push(Level {
            label,
            energy_hz: energy_khz * 1e3,
            components: Vec::new(),
        });
    }
    if levels.is_empty() {
        return Err(Error::data("level table has no rows"));
    }
    LevelTable::new(levels)
}

pub fn load_level_table(path: &Path, delimiter: u8) -> Result<LevelTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_level_table(file, delimiter)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write a table in the same format `parse_level_table` reads.
pub fn write_level_table<W: std::io::Write>(table: &LevelTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::data(e.to_string());
    w.write_record(["manifold_id", "J", "K", "parity", "m", "xi", "energy_kHz"])
        .map_err(wrap)?;
    for level in table.levels() {
        let l = &level.label;
        let m = format!("{}", l.m.value());
        w.write_record([
            l.manifold_id.to_string(),
            l.j.to_string(),
            l.k.map(|k| k.to_string()).unwrap_or_default(),
            l.parity.map(|p| p.symbol().to_string()).unwrap_or_default(),
            m,
            l.xi.to_string(),
            format!("{:?}", level.energy_hz / 1e3),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    Kelvin(f64),
    /// All population on the lowest level(s).
    Zero,
    /// Uniform.
    Infinite,
}

impl Temperature {
    pub fn kelvin(self) -> f64 {
        match self {
            Temperature::Kelvin(t) => t,
            Temperature::Zero => 0.0,
            Temperature::Infinite => f64::INFINITY,
        }
    }
}

/// Population vector over the level basis plus the wall-clock time elapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    pub p: Vec<f64>,
    pub step_time: f64,
}

impl PopulationState {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let s = PopulationState { p, step_time: 0.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn pure(n: usize, i: usize) -> Self {
        let mut p = vec![0.0; n];
        p[i] = 1.0;
        PopulationState { p, step_time: 0.0 }
    }

    pub fn uniform(n: usize) -> Self {
        PopulationState {
            p: vec![1.0 / n as f64; n],
            step_time: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.is_empty() {
            return Err(Error::data("empty population vector"));
        }
        if self.p.iter().any(|&x| !x.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&x)) {
            return Err(Error::data("population outside [0, 1]"));
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::data(format!("population sums to {sum}, not 1")));
        }
        Ok(())
    }

    /// Index and value of the largest component (lowest index on ties).
    pub fn max_component(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &x) in self.p.iter().enumerate() {
            if x > best.1 {
                best = (i, x);
            }
        }
        best
    }
}

/// Thermal populations over the table at the given temperature.
pub fn boltzmann_populations(table: &LevelTable, temperature: Temperature) -> Result<PopulationState> {
    let n = table.len();
    if n == 0 {
        return Err(Error::data("empty level table"));
    }
    let energies = table.energies_hz();
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::data("non-finite level energy"));
    }
    let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let p = match temperature {
        Temperature::Infinite => vec![1.0 / n as f64; n],
        Temperature::Zero => ground_split(&energies, e_min),
        Temperature::Kelvin(t) => {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::config(format!(
                    "temperature must be positive and finite, got {t}; use the zero/infinite flags"
                )));
            }
            let beta = PLANCK / (BOLTZMANN * t);
            let w: Vec<f64> = energies.iter().map(|e| (-(e - e_min) * beta).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        }
    };
    Ok(PopulationState { p, step_time: 0.0 })
}

fn ground_split(energies: &[f64], e_min: f64) -> Vec<f64> {
    let ground: Vec<bool> = energies.iter().map(|&e| e == e_min).collect();
    let count = ground.iter().filter(|&&g| g).count() as f64;
    ground.iter().map(|&g| if g { 1.0 / count } else { 0.0 }).collect()
}
