//! Population states: finite Dirac mixtures and sparse lattice maps.
//!
//! A [`MeasureState`] is a list of weighted atoms `(x_i, w_i)` with `x_i` a
//! nonzero composition vector. A [`DiscreteState`] maps multi-indices to
//! number densities. [`BinGrid`] bins atoms into cells (exact integer cells for
//! small lattice points, log-radial times angular cells elsewhere) and merges
//! atoms sharing a cell at their weight barycenter.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::kernels::{check_eps, norm1};

/// Relative slack used when testing whether a norm lies inside a band.
pub const BAND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub x: Vec<f64>,
    pub w: f64,
}

impl Particle {
    pub fn norm(&self) -> f64 {
        norm1(&self.x)
    }
}

/// Finite Dirac mixture `sum_i w_i delta_{x_i}` at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureState {
    pub dim: usize,
    pub time: f64,
    pub particles: Vec<Particle>,
}

fn check_atom(dim: usize, x: &[f64], w: f64) -> Result<()> {
    if x.len() != dim {
        return Err(CoagError::Domain(format!(
            "atom has {} coordinates, state dimension is {dim}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) || norm1(x) <= 0.0 {
        return Err(CoagError::Domain(format!("atom position {x:?} must be a nonzero nonnegative vector")));
    }
    if !(w > 0.0 && w.is_finite()) {
        return Err(CoagError::Domain(format!("atom weight {w} must be positive and finite")));
    }
    Ok(())
}

impl MeasureState {
    pub fn empty(dim: usize, time: f64) -> Self {
        Self {
            dim,
            time,
            particles: Vec::new(),
        }
    }

    /// Build from `(x, w)` atoms, validating each.
    pub fn from_atoms(dim: usize, time: f64, atoms: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self> {
        let mut s = Self::empty(dim, time);
        for (x, w) in atoms {
            s.push(x, w)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, x: Vec<f64>, w: f64) -> Result<()> {
        check_atom(self.dim, &x, w)?;
        self.particles.push(Particle { x, w });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// `sum_i w_i |x_i|^alpha`.
    pub fn moment(&self, alpha: f64) -> f64 {
        self.particles.iter().map(|p| p.w * pow_norm(p.norm(), alpha)).sum()
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.w).sum()
    }

    pub fn mass_vector(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in &self.particles {
            for (mk, xk) in m.iter_mut().zip(&p.x) {
                *mk += p.w * xk;
            }
        }
        m
    }

    /// Keep the atoms with `eps <= |x| <= 2/eps`.
    pub fn restrict(&self, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        let (lo, hi) = (eps, 2.0 / eps);
        Ok(Self {
            dim: self.dim,
            time: self.time,
            particles: self
                .particles
                .iter()
                .filter(|p| {
                    let r = p.norm();
                    r >= lo && r <= hi
                })
                .cloned()
                .collect(),
        })
    }

    /// Largest distance of any coordinate from the nearest integer.
    pub fn lattice_defect(&self) -> f64 {
        self.particles
            .iter()
            .flat_map(|p| p.x.iter())
            .map(|v| (v - v.round()).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# t={} d={}", fmt_f64(self.time), self.dim)?;
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        header.push("w".into());
        wtr.write_record(&header).map_err(csv_err)?;
        for p in &self.particles {
            let row: Vec<String> = p.x.iter().chain(std::iter::once(&p.w)).map(|v| fmt_f64(*v)).collect();
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        let (time, dim) = parse_preamble(first.trim())?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.len() != dim + 1 {
            return Err(CoagError::Parse(format!(
                "header has {} columns, expected {} for d = {dim}",
                header.len(),
                dim + 1
            )));
        }
        let mut state = Self::empty(dim, time);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let vals = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| CoagError::Parse(format!("row {}: {e}", line + 1)))?;
            if vals.len() != dim + 1 {
                return Err(CoagError::Parse(format!("row {} has {} fields", line + 1, vals.len())));
            }
            let w = vals[dim];
            state
                .push(vals[..dim].to_vec(), w)
                .map_err(|e| CoagError::Parse(format!("row {}: {e}", line + 1)))?;
        }
        Ok(state)
    }
}

fn parse_preamble(line: &str) -> Result<(f64, usize)> {
    let bad = || CoagError::Parse(format!("expected preamble '# t=<time> d=<dim>', got '{line}'"));
    let rest = line.strip_prefix('#').ok_or_else(bad)?;
    let mut t = None;
    let mut d = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("t=") {
            t = Some(v.parse::<f64>().map_err(|_| bad())?);
        } else if let Some(v) = tok.strip_prefix("d=") {
            d = Some(v.parse::<usize>().map_err(|_| bad())?);
        }
    }
    match (t, d) {
        (Some(t), Some(d)) if d >= 1 => Ok((t, d)),
        _ => Err(bad()),
    }
}

fn csv_err(e: csv::Error) -> CoagError {
    CoagError::Parse(e.to_string())
}

/// Decimal text with 17 significant digits (exact round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
pub(crate) fn pow_norm(r: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else if alpha == 1.0 {
        r
    } else {
        r.powf(alpha)
    }
}

/// Sparse lattice state `alpha -> n(alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteState {
    pub dim: usize,
    pub time: f64,
    pub size_cap: u64,
    pub entries: BTreeMap<Vec<u32>, f64>,
}

impl DiscreteState {
    pub fn new(dim: usize, size_cap: u64) -> Self {
        Self {
            dim,
            time: 0.0,
            size_cap,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, alpha: Vec<u32>, n: f64) -> Result<()> {
        if alpha.len() != self.dim {
            return Err(CoagError::Domain(format!("index {alpha:?} has wrong dimension")));
        }
        let size: u64 = alpha.iter().map(|&a| a as u64).sum();
        if size == 0 {
            return Err(CoagError::Domain("zero multi-index".into()));
        }
        if size > self.size_cap {
            return Err(CoagError::Domain(format!("index {alpha:?} exceeds size cap {}", self.size_cap)));
        }
        if !(n >= 0.0 && n.is_finite()) {
            return Err(CoagError::Domain(format!("density {n} must be nonnegative")));
        }
        self.entries.insert(alpha, n);
        Ok(())
    }

    pub fn get(&self, alpha: &[u32]) -> f64 {
        self.entries.get(alpha).copied().unwrap_or(0.0)
    }

    pub fn moment(&self, alpha_exp: f64) -> f64 {
        self.entries
            .iter()
            .map(|(a, n)| n * pow_norm(a.iter().map(|&v| v as f64).sum(), alpha_exp))
            .sum()
    }

    pub fn mass_vector(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (a, n) in &self.entries {
            for (mk, ak) in m.iter_mut().zip(a) {
                *mk += n * *ak as f64;
            }
        }
        m
    }

    pub fn to_measure(&self) -> MeasureState {
        MeasureState {
            dim: self.dim,
            time: self.time,
            particles: self
                .entries
                .iter()
                .filter(|(_, n)| **n > 0.0)
                .map(|(a, n)| Particle {
                    x: a.iter().map(|&v| v as f64).collect(),
                    w: *n,
                })
                .collect(),
        }
    }

    /// Convert an integer-supported measure; fails if any coordinate is off-lattice.
    pub fn from_measure(m: &MeasureState, size_cap: u64) -> Result<Self> {
        let mut s = Self::new(m.dim, size_cap);
        s.time = m.time;
        for p in &m.particles {
            let alpha = lattice_index(&p.x, 1e-9)
                .ok_or_else(|| CoagError::Domain(format!("atom {:?} is not a lattice point", p.x)))?;
            let prev = s.get(&alpha);
            s.insert(alpha, prev + p.w)?;
        }
        Ok(s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("alpha_{k}")).collect();
        header.push("n".into());
        wtr.write_record(&header).map_err(csv_err)?;
        for (a, n) in &self.entries {
            let mut row: Vec<String> = a.iter().map(|v| v.to_string()).collect();
            row.push(fmt_f64(*n));
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Integer multi-index of `x` if every coordinate is within `tol` of an integer.
pub fn lattice_index(x: &[f64], tol: f64) -> Option<Vec<u32>> {
    x.iter()
        .map(|&v| {
            let r = v.round();
            if (v - r).abs() <= tol && r >= 0.0 && r <= u32::MAX as f64 {
                Some(r as u32)
            } else {
                None
            }
        })
        .collect()
}

/// Cell identifier in a [`BinGrid`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKey {
    /// Exact lattice point.
    Lattice(Vec<u32>),
    /// Log-radial shell and angular sector.
    Bin { shell: i32, sector: Vec<u16> },
}

/// Support-compaction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinGrid {
    pub dim: usize,
    /// Radial ratio; shells are `[q^k, q^(k+1))`.
    pub q: f64,
    /// Subdivisions per direction coordinate on the l1 simplex.
    pub angular: u16,
    /// Lattice points with `|alpha| <= lattice_cap` get their own exact cell.
    pub lattice_cap: f64,
    /// Lower end of the coverage band `[eps, 2/eps]`.
    pub eps: f64,
}

impl BinGrid {
    pub const DEFAULT_Q: f64 = 1.090_507_732_665_257_7; // 2^(1/8)
    pub const DEFAULT_ANGULAR: u16 = 16;

    pub fn new(dim: usize, eps: f64) -> Result<Self> {
        let g = Self {
            dim,
            q: Self::DEFAULT_Q,
            angular: Self::DEFAULT_ANGULAR,
            lattice_cap: 0.0,
            eps,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_q(mut self, q: f64) -> Result<Self> {
        self.q = q;
        self.validate()?;
        Ok(self)
    }

    pub fn with_angular(mut self, angular: u16) -> Result<Self> {
        self.angular = angular;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lattice_cap(mut self, cap: f64) -> Result<Self> {
        self.lattice_cap = cap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(CoagError::Parameter("grid dimension must be at least 1".into()));
        }
        if !(self.q > 1.0 && self.q.is_finite()) {
            return Err(CoagError::Parameter(format!("grid ratio q must exceed 1, got {}", self.q)));
        }
        if self.angular == 0 {
            return Err(CoagError::Parameter("angular resolution must be at least 1".into()));
        }
        if !(self.lattice_cap >= 0.0) {
            return Err(CoagError::Parameter("lattice_cap must be nonnegative".into()));
        }
        check_eps(self.eps)
    }

    /// Coverage band `[eps, 2/eps]`.
    pub fn coverage(&self) -> (f64, f64) {
        (self.eps, 2.0 / self.eps)
    }

    pub fn covers(&self, r: f64) -> bool {
        let (lo, hi) = self.coverage();
        r >= lo * (1.0 - BAND_TOL) && r <= hi * (1.0 + BAND_TOL)
    }

    /// Cell of `x` (assumes `x` is covered).
    pub fn cell_of(&self, x: &[f64]) -> CellKey {
        let r = norm1(x);
        if r <= self.lattice_cap + 1e-9 {
            if let Some(a) = lattice_index(x, 1e-9) {
                return CellKey::Lattice(a);
            }
        }
        let shell = (r.ln() / self.q.ln() + 1e-12).floor() as i32;
        let s = self.angular as f64;
        let sector = x[..self.dim.saturating_sub(1)]
            .iter()
            .map(|&v| ((v / r) * s).floor().clamp(0.0, s - 1.0) as u16)
            .collect();
        CellKey::Bin { shell, sector }
    }

    pub fn try_cell(&self, index: usize, x: &[f64]) -> Result<CellKey> {
        let r = norm1(x);
        if !self.covers(r) {
            let (lo, hi) = self.coverage();
            return Err(CoagError::Compaction { index, norm: r, lo, hi });
        }
        Ok(self.cell_of(x))
    }

    fn check_dim(&self, state: &MeasureState) -> Result<()> {
        if state.dim != self.dim {
            return Err(CoagError::GridMismatch(format!(
                "state dimension {} does not match grid dimension {}",
                state.dim, self.dim
            )));
        }
        Ok(())
    }

    /// Aggregate weights per cell.
    pub fn bin_weights(&self, state: &MeasureState) -> Result<BTreeMap<CellKey, f64>> {
        self.check_dim(state)?;
        let mut out = BTreeMap::new();
        for (i, p) in state.particles.iter().enumerate() {
            *out.entry(self.try_cell(i, &p.x)?).or_insert(0.0) += p.w;
        }
        Ok(out)
    }
}

/// Merge atoms that share a cell into one atom at their weight barycenter.
/// Output is ordered by cell key. Lattice cells keep their exact integer position.
pub fn compact(state: &MeasureState, grid: &BinGrid) -> Result<MeasureState> {
    grid.check_dim(state)?;
    let mut cells: BTreeMap<CellKey, (f64, Vec<f64>)> = BTreeMap::new();
    for (i, p) in state.particles.iter().enumerate() {
        let key = grid.try_cell(i, &p.x)?;
        let e = cells.entry(key).or_insert_with(|| (0.0, vec![0.0; state.dim]));
        e.0 += p.w;
        for (m, x) in e.1.iter_mut().zip(&p.x) {
            *m += p.w * x;
        }
    }
    let particles = cells
        .into_iter()
        .map(|(key, (w, mv))| {
            let x = match key {
                CellKey::Lattice(a) => a.iter().map(|&v| v as f64).collect(),
                CellKey::Bin { .. } => mv.iter().map(|m| m / w).collect(),
            };
            Particle { x, w }
        })
        .collect();
    Ok(MeasureState {
        dim: state.dim,
        time: state.time,
        particles,
    })
}

/// Binned total variation: `sum over cells |w_a - w_b|`.
pub fn tv_distance(a: &MeasureState, b: &MeasureState, grid: &BinGrid) -> Result<f64> {
    if a.dim != b.dim {
        return Err(CoagError::GridMismatch(format!(
            "states have dimensions {} and {}",
            a.dim, b.dim
        )));
    }
    let wa = grid.bin_weights(a)?;
    let wb = grid.bin_weights(b)?;
    let mut total = 0.0;
    for (k, va) in &wa {
        total += (va - wb.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, vb) in &wb {
        if !wa.contains_key(k) {
            total += vb.abs();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(dim: usize, atoms: &[(&[f64], f64)]) -> MeasureState {
        MeasureState::from_atoms(dim, 0.0, atoms.iter().map(|(x, w)| (x.to_vec(), *w))).unwrap()
    }

    #[test]
    fn moments_and_mass() {
        let s = st(2, &[(&[1.0, 2.0], 3.0)]);
        assert_eq!(s.moment(1.0), 9.0);
        assert_eq!(s.mass_vector(), vec![3.0, 6.0]);
        let s = st(2, &[(&[1.0, 0.0], 2.0), (&[0.0, 4.0], 1.0)]);
        assert_eq!(s.moment(0.0), 3.0);
        assert_eq!(st(1, &[(&[1.0], 1.0)]).moment(-0.5), 1.0);
        assert_eq!(MeasureState::empty(3, 0.0).mass_vector(), vec![0.0; 3]);
        assert_eq!(MeasureState::empty(3, 0.0).moment(0.5), 0.0);
        let s = st(2, &[(&[1.0, 0.0], 0.5), (&[0.0, 1.0], 0.5)]);
        assert_eq!(s.mass_vector(), vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(MeasureState::from_atoms(1, 0.0, [(vec![0.0], 1.0)]).is_err());
        assert!(MeasureState::from_atoms(1, 0.0, [(vec![1.0], 0.0)]).is_err());
        assert!(MeasureState::from_atoms(2, 0.0, [(vec![1.0], 1.0)]).is_err());
    }

    #[test]
    fn restrict_band() {
        let s = st(1, &[(&[0.2], 1.0), (&[1.0], 1.0)]);
        let r = s.restrict(0.5).unwrap();
        assert_eq!(r.particles, vec![Particle { x: vec![1.0], w: 1.0 }]);
        assert_eq!(s.restrict(0.01).unwrap(), s);
        assert!(st(1, &[(&[100.0], 1.0)]).restrict(0.5).unwrap().is_empty());
        assert!(s.restrict(1.0).is_err());
    }

    #[test]
    fn compact_examples() {
        let g = BinGrid::new(2, 0.01).unwrap();
        let s = st(2, &[(&[1.0, 0.0], 1.0), (&[1.05, 0.0], 1.0)]);
        let c = compact(&s, &g).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.particles[0].x[0] - 1.025).abs() < 1e-15);
        assert_eq!(c.particles[0].w, 2.0);

        let s = st(2, &[(&[1.0, 0.0], 1.0), (&[4.0, 0.0], 1.0)]);
        assert_eq!(compact(&s, &g).unwrap().len(), 2);

        let coarse = BinGrid::new(2, 0.01).unwrap().with_q(4.0).unwrap().with_angular(1).unwrap();
        let s = st(2, &[(&[2.0, 0.0], 1.0), (&[0.0, 2.0], 3.0)]);
        let c = compact(&s, &coarse).unwrap();
        assert_eq!(c.particles, vec![Particle { x: vec![0.5, 1.5], w: 4.0 }]);
        assert_eq!(c.mass_vector(), vec![2.0, 6.0]);
    }

    #[test]
    fn compact_reports_uncovered_particle() {
        let g = BinGrid::new(1, 0.1).unwrap();
        let s = st(1, &[(&[1.0], 1.0), (&[50.0], 1.0)]);
        match compact(&s, &g) {
            Err(CoagError::Compaction { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lattice_cells_are_exact() {
        let g = BinGrid::new(2, 0.01).unwrap().with_lattice_cap(10.0).unwrap();
        assert_eq!(g.cell_of(&[3.0, 4.0]), CellKey::Lattice(vec![3, 4]));
        assert!(matches!(g.cell_of(&[3.5, 4.0]), CellKey::Bin { .. }));
        assert!(matches!(g.cell_of(&[30.0, 4.0]), CellKey::Bin { .. }));
    }

    #[test]
    fn tv_examples() {
        let g = BinGrid::new(1, 0.01).unwrap();
        let a = st(1, &[(&[1.0], 1.0)]);
        assert_eq!(tv_distance(&a, &a, &g).unwrap(), 0.0);
        let b = st(1, &[(&[10.0], 2.0)]);
        assert_eq!(tv_distance(&a, &b, &g).unwrap(), 3.0);
        let c = st(1, &[(&[1.0], 5.0)]);
        let d = st(1, &[(&[1.0], 3.0)]);
        assert_eq!(tv_distance(&c, &d, &g).unwrap(), 2.0);
        assert!(matches!(
            tv_distance(&a, &st(2, &[(&[1.0, 1.0], 1.0)]), &g),
            Err(CoagError::GridMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let s = MeasureState::from_atoms(
            2,
            0.1 + 0.2,
            [(vec![1.0 / 3.0, 2.0f64.sqrt()], 1e-17 * std::f64::consts::PI), (vec![7.0, 0.0], 0.1)],
        )
        .unwrap();
        let text = s.to_csv_string();
        assert!(text.starts_with("# t="));
        assert!(text.lines().nth(1).unwrap() == "x1,x2,w");
        let back = MeasureState::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(MeasureState::read_csv("x1,w\n1,1\n".as_bytes()).is_err());
        assert!(MeasureState::read_csv("# t=0 d=1\nx1,w\n1,abc\n".as_bytes()).is_err());
        assert!(MeasureState::read_csv("# t=0 d=1\nx1,w\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn discrete_state_basics() {
        let mut d = DiscreteState::new(2, 10);
        d.insert(vec![1, 0], 2.0).unwrap();
        d.insert(vec![0, 3], 1.0).unwrap();
        assert_eq!(d.mass_vector(), vec![2.0, 3.0]);
        assert_eq!(d.moment(1.0), 5.0);
        assert!(d.insert(vec![0, 0], 1.0).is_err());
        assert!(d.insert(vec![11, 0], 1.0).is_err());
        let back = DiscreteState::from_measure(&d.to_measure(), 10).unwrap();
        assert_eq!(back, d);
    }

    fn arb_state(max_dim: usize) -> impl Strategy<Value = MeasureState> {
        (1..=max_dim).prop_flat_map(|dim| {
            prop::collection::vec(
                (prop::collection::vec(0.0f64..1.0, dim), 0.02f64..5.0, 1e-3f64..10.0),
                1..200,
            )
            .prop_map(move |atoms| {
                let mut s = MeasureState::empty(dim, 0.0);
                for (dir, r, w) in atoms {
                    let mut x: Vec<f64> = dir.iter().map(|v| v + 1e-3).collect();
                    let n = norm1(&x);
                    x.iter_mut().for_each(|v| *v *= r / n);
                    s.push(x, w).unwrap();
                }
                s
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn compact_preserves_weight_and_mass(s in arb_state(3)) {
            let g = BinGrid::new(s.dim, 0.01).unwrap().with_q(1.5).unwrap().with_angular(4).unwrap();
            let c = compact(&s, &g).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
            prop_assert!(rel(c.total_weight(), s.total_weight()) < 1e-14);
            for (a, b) in c.mass_vector().iter().zip(s.mass_vector()) {
                prop_assert!(rel(*a, b) < 1e-14);
            }
            prop_assert!(c.len() <= s.len());
        }

        #[test]
        fn restrict_is_idempotent(s in arb_state(3), eps in 0.05f64..0.9) {
            let r = s.restrict(eps).unwrap();
            prop_assert_eq!(r.restrict(eps).unwrap(), r);
        }

        #[test]
        fn first_moment_is_l1_of_mass_vector(s in arb_state(3)) {
            let m1 = s.moment(1.0);
            let mv: f64 = s.mass_vector().iter().sum();
            prop_assert!((m1 - mv).abs() <= 1e-12 * m1);
        }

        #[test]
        fn tv_is_a_metric(a in arb_state(2), b in arb_state(2), c in arb_state(2)) {
            prop_assume!(a.dim == b.dim && b.dim == c.dim);
            let g = BinGrid::new(a.dim, 0.01).unwrap().with_q(1.5).unwrap().with_angular(4).unwrap();
            let (a, b, c) = (compact(&a, &g).unwrap(), compact(&b, &g).unwrap(), compact(&c, &g).unwrap());
            let ab = tv_distance(&a, &b, &g).unwrap();
            let ba = tv_distance(&b, &a, &g).unwrap();
            let bc = tv_distance(&b, &c, &g).unwrap();
            let ac = tv_distance(&a, &c, &g).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert_eq!(tv_distance(&a, &a, &g).unwrap(), 0.0);
            prop_assert!(ac <= ab + bc + 1e-12 * (1.0 + ab + bc));
        }
    }
}
