//! Monomial bases, the lifting functional `L_y`, moment and localizing
//! matrices, and the relaxation builders.
//!
//! Every relaxation is assembled from a [`PolyProblem`]: polynomial equality
//! and inequality constraints, quadratic costs on injections, apparent-power
//! limits and optional injection targets. [`build`] lowers it to a
//! [`ConicProgram`] whose variables are the lifted moments `y_α` that the
//! constraints actually touch, plus auxiliary epigraph variables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::conic::{AffineExpr, ConeKind, ConicProgram, RowSpace};
use crate::network::NetworkCase;
use crate::poly::{build_opf_polynomials, Exponent, OpfPolynomials, Polynomial};
use crate::{Error, Result};

/// Which relaxation to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relaxation {
    /// First-order semidefinite relaxation (same as `Moment(1)`).
    Sdp,
    Moment(u32),
    /// Mixed SDP/SOCP hierarchy; order at least 2.
    Mixed(u32),
}

impl Relaxation {
    pub fn order(&self) -> u32 {
        match *self {
            Relaxation::Sdp => 1,
            Relaxation::Moment(g) | Relaxation::Mixed(g) => g,
        }
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self, Relaxation::Mixed(_))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Relaxation::Moment(0) => Err(Error::Validation(
                "moment relaxation order must be at least 1".into(),
            )),
            Relaxation::Mixed(g) if g < 2 => Err(Error::Validation(
                "mixed relaxation order must be at least 2".into(),
            )),
            Relaxation::Moment(g) | Relaxation::Mixed(g) if g > 6 => Err(Error::Validation(format!(
                "relaxation order {g} is beyond what the dense solver can handle"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Relaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relaxation::Sdp => write!(f, "sdp"),
            Relaxation::Moment(g) => write!(f, "moment:{g}"),
            Relaxation::Mixed(g) => write!(f, "mixed:{g}"),
        }
    }
}

impl FromStr for Relaxation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("sdp") {
            return Ok(Relaxation::Sdp);
        }
        let bad = || {
            Error::Validation(format!(
                "unknown relaxation `{s}` (expected sdp, moment:K or mixed:K)"
            ))
        };
        let (kind, order) = s.split_once(':').ok_or_else(bad)?;
        let order: u32 = order.parse().map_err(|_| bad())?;
        let r = match kind {
            "moment" => Relaxation::Moment(order),
            "mixed" => Relaxation::Mixed(order),
            _ => return Err(bad()),
        };
        r.validate()?;
        Ok(r)
    }
}

/// Monomials of degree ≤ `degree` in graded lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    monomials: Vec<Exponent>,
    positions: HashMap<Exponent, usize>,
}

fn push_exponents(nvars: usize, degree: u32, prefix: &mut Vec<u8>, out: &mut Vec<Exponent>) {
    if prefix.len() == nvars - 1 {
        prefix.push(degree as u8);
        out.push(Exponent::from_vec(prefix.clone()));
        prefix.pop();
        return;
    }
    for e in (0..=degree).rev() {
        prefix.push(e as u8);
        push_exponents(nvars, degree - e, prefix, out);
        prefix.pop();
    }
}

impl MonomialBasis {
    pub fn new(nvars: usize, degree: u32) -> Self {
        assert!(nvars >= 1, "basis needs at least one variable");
        assert!(degree <= u8::MAX as u32, "degree exceeds exponent storage");
        let mut monomials = Vec::new();
        for d in 0..=degree {
            push_exponents(nvars, d, &mut Vec::with_capacity(nvars), &mut monomials);
        }
        let positions = monomials
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        MonomialBasis {
            monomials,
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn get(&self, i: usize) -> &Exponent {
        &self.monomials[i]
    }

    pub fn position(&self, e: &Exponent) -> Option<usize> {
        self.positions.get(e).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exponent> {
        self.monomials.iter()
    }

    /// Number of leading monomials with degree ≤ `degree`.
    pub fn prefix_len(&self, degree: u32) -> usize {
        self.monomials.partition_point(|e| e.degree() <= degree)
    }
}

/// Graded-lex monomial basis of degree ≤ `degree` in `nvars` variables.
pub fn basis(nvars: usize, degree: u32) -> MonomialBasis {
    MonomialBasis::new(nvars, degree)
}

/// `C(n + k, k)`, the number of monomials of degree ≤ k in n variables.
pub fn basis_size(nvars: usize, degree: u32) -> u128 {
    let mut acc: u128 = 1;
    for i in 1..=degree as u128 {
        acc = acc * (nvars as u128 + i) / i;
    }
    acc
}

/// One lifted variable `y_α` per monomial of degree ≤ 2γ. Slot 0 is the
/// constant monomial, pinned to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedIndex {
    order: u32,
    slots: MonomialBasis,
}

impl LiftedIndex {
    pub fn new(nvars: usize, order: u32) -> Self {
        LiftedIndex {
            order,
            slots: MonomialBasis::new(nvars, 2 * order),
        }
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn nvars(&self) -> usize {
        self.slots.get(0).nvars()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, e: &Exponent) -> Option<usize> {
        self.slots.position(e)
    }

    pub fn exponent(&self, slot: usize) -> &Exponent {
        self.slots.get(slot)
    }

    /// Slot values `y_α = point^α` of a real point.
    pub fn lift(&self, point: &[f64]) -> Vec<f64> {
        self.slots.iter().map(|e| e.eval(point)).collect()
    }
}

/// Linear form `Σ coef·y_slot`; slot 0 carries the constant term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearForm {
    pub terms: BTreeMap<usize, f64>,
}

impl LinearForm {
    pub fn constant(value: f64) -> Self {
        let mut f = LinearForm::default();
        f.add(0, value);
        f
    }

    pub fn slot(slot: usize) -> Self {
        let mut f = LinearForm::default();
        f.add(slot, 1.0);
        f
    }

    pub fn add(&mut self, slot: usize, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let e = self.terms.entry(slot).or_insert(0.0);
        *e += coef;
        if *e == 0.0 {
            self.terms.remove(&slot);
        }
    }

    pub fn add_scaled(&mut self, other: &LinearForm, factor: f64) {
        for (&s, &c) in &other.terms {
            self.add(s, c * factor);
        }
    }

    pub fn scaled(&self, factor: f64) -> LinearForm {
        let mut f = LinearForm::default();
        f.add_scaled(self, factor);
        f
    }

    pub fn coefficient(&self, slot: usize) -> f64 {
        self.terms.get(&slot).copied().unwrap_or(0.0)
    }

    /// True when only the constant slot appears.
    pub fn is_constant(&self) -> bool {
        self.terms.keys().all(|&s| s == 0)
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.terms.iter().map(|(&s, &c)| c * y[s]).sum()
    }
}

/// `L_y{p}`: replaces each monomial `x^α` by `y_α`.
pub fn apply_ly(p: &Polynomial, idx: &LiftedIndex) -> Result<LinearForm> {
    let mut f = LinearForm::default();
    for (e, c) in p.terms() {
        let slot = idx.slot(e).ok_or_else(|| Error::DegreeOverflow {
            term: format!("{e:?} (degree {})", e.degree()),
            limit: 2 * idx.order(),
        })?;
        f.add(slot, c);
    }
    Ok(f)
}

/// Symmetric matrix of linear forms, stored densely by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicMatrix {
    dim: usize,
    entries: Vec<LinearForm>,
}

impl SymbolicMatrix {
    fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Result<LinearForm>) -> Result<Self> {
        let mut entries = vec![LinearForm::default(); dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j)?;
                entries[j * dim + i] = v.clone();
                entries[i * dim + j] = v;
            }
        }
        Ok(SymbolicMatrix { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> &LinearForm {
        &self.entries[i * self.dim + j]
    }

    pub fn submatrix(&self, rows: &[usize]) -> SymbolicMatrix {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for &i in rows {
            for &j in rows {
                entries.push(self.entry(i, j).clone());
            }
        }
        SymbolicMatrix { dim, entries }
    }

    /// `Qᵀ M Q` for a dense `dim × k` matrix `Q`.
    pub fn congruence(&self, q: &DMatrix<f64>) -> SymbolicMatrix {
        let k = q.ncols();
        let mut entries = vec![LinearForm::default(); k * k];
        for a in 0..k {
            for b in a..k {
                let mut f = LinearForm::default();
                for i in 0..self.dim {
                    let qa = q[(i, a)];
                    if qa == 0.0 {
                        continue;
                    }
                    for j in 0..self.dim {
                        let w = qa * q[(j, b)];
                        if w != 0.0 {
                            f.add_scaled(self.entry(i, j), w);
                        }
                    }
                }
                f.terms.retain(|_, c| c.abs() > 1e-13);
                entries[b * k + a] = f.clone();
                entries[a * k + b] = f;
            }
        }
        SymbolicMatrix { dim: k, entries }
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j).eval(y))
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(LinearForm::is_constant)
    }
}

/// `M_γ{y} = L_y{x_γ x_γᵀ}`.
pub fn moment_matrix(idx: &LiftedIndex, order: u32) -> SymbolicMatrix {
    let b = basis(idx.nvars(), order);
    SymbolicMatrix::from_fn(b.len(), |i, j| {
        let e = b.get(i).checked_add(b.get(j))?;
        let slot = idx.slot(&e).ok_or_else(|| Error::DegreeOverflow {
            term: format!("{e:?}"),
            limit: 2 * idx.order(),
        })?;
        Ok(LinearForm::slot(slot))
    })
    .expect("moment matrix order exceeds lifted index")
}

/// `M_order{g y} = L_y{g x_order x_orderᵀ}`.
pub fn localizing_matrix(g: &Polynomial, idx: &LiftedIndex, order: u32) -> Result<SymbolicMatrix> {
    let b = basis(idx.nvars(), order);
    SymbolicMatrix::from_fn(b.len(), |i, j| {
        let shift = b.get(i).checked_add(b.get(j))?;
        apply_ly(&g.shift(&shift)?, idx)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    /// `g ≥ 0`
    NonNegative,
    /// `g = 0`
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyConstraint {
    pub label: String,
    pub poly: Polynomial,
    pub sense: ConstraintSense,
}

/// Cost `c2·p² + c1·p + c0` of an injection polynomial `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTerm {
    pub label: String,
    pub injection: Polynomial,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

/// `‖(p, q)‖ ≤ s_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLimit {
    pub label: String,
    pub p: Polynomial,
    pub q: Polynomial,
    pub s_max: f64,
}

/// Penalty term `w·(L_y{f} − value)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingTarget {
    pub label: String,
    pub poly: Polynomial,
    pub value: f64,
}

/// A polynomial optimization problem in the shape the builders understand.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyProblem {
    pub var_names: Vec<String>,
    pub constraints: Vec<PolyConstraint>,
    pub costs: Vec<CostTerm>,
    pub flow_limits: Vec<FlowLimit>,
    pub targets: Vec<TrackingTarget>,
    pub penalty: f64,
}

impl PolyProblem {
    pub fn nvars(&self) -> usize {
        self.var_names.len()
    }

    fn polynomials(&self) -> impl Iterator<Item = &Polynomial> {
        self.constraints
            .iter()
            .map(|c| &c.poly)
            .chain(self.costs.iter().map(|c| &c.injection))
            .chain(self.flow_limits.iter().flat_map(|f| [&f.p, &f.q]))
            .chain(self.targets.iter().map(|t| &t.poly))
    }

    pub fn all_even(&self) -> bool {
        self.polynomials().all(Polynomial::is_even)
    }

    /// Largest polynomial degree, counting the squared forms used at higher orders.
    pub fn max_degree(&self) -> u32 {
        self.polynomials().map(Polynomial::degree).max().unwrap_or(0)
    }

    /// Objective value of a real point (costs plus tracking penalty).
    pub fn objective_at(&self, point: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.costs {
            let p = c.injection.eval(point)?;
            total += c.c2 * p * p + c.c1 * p + c.c0;
        }
        for t in &self.targets {
            let d = t.poly.eval(point)? - t.value;
            total += self.penalty * d * d;
        }
        Ok(total)
    }
}

/// Releases bus `bus` from its active-power bounds and tracks `p` instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionTarget {
    pub bus: u32,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxOptions {
    /// Split moment and localizing matrices by monomial degree parity when
    /// every polynomial is even.
    pub even_reduction: bool,
    /// Restrict PSD moment blocks to the complement of the kernel forced by
    /// equality constraints.
    pub facial_reduction: bool,
    pub targets: Vec<InjectionTarget>,
    pub penalty: f64,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        RelaxOptions {
            even_reduction: true,
            facial_reduction: true,
            targets: Vec::new(),
            penalty: 1e3,
        }
    }
}

/// Converts a case into a polynomial problem. Buses listed in `targets` lose
/// their active-power bounds and gain a tracking term.
pub fn opf_problem(
    case: &NetworkCase,
    polys: &OpfPolynomials,
    targets: &[InjectionTarget],
    penalty: f64,
) -> Result<PolyProblem> {
    let mut released = BTreeSet::new();
    let mut tracking = Vec::new();
    for t in targets {
        let k = case
            .bus_index(t.bus)
            .ok_or_else(|| Error::Validation(format!("target bus {} does not exist", t.bus)))?;
        if !t.p.is_finite() {
            return Err(Error::Validation(format!("target for bus {} is not finite", t.bus)));
        }
        if !released.insert(k) {
            return Err(Error::Validation(format!("bus {} targeted twice", t.bus)));
        }
        tracking.push(TrackingTarget {
            label: format!("P{}", t.bus),
            poly: polys.f_p[k].clone(),
            value: t.p,
        });
    }
    if !tracking.is_empty() && !(penalty > 0.0 && penalty.is_finite()) {
        return Err(Error::Validation("tracking penalty must be positive".into()));
    }

    let mut constraints = Vec::new();
    let mut push_bounds = |label: String, poly: &Polynomial, min: Option<f64>, max: Option<f64>| {
        if let (Some(lo), Some(hi)) = (min, max) {
            if lo == hi {
                constraints.push(PolyConstraint {
                    label,
                    poly: poly.add_constant(-lo),
                    sense: ConstraintSense::Zero,
                });
                return;
            }
        }
        if let Some(lo) = min {
            constraints.push(PolyConstraint {
                label: format!("{label}.min"),
                poly: poly.add_constant(-lo),
                sense: ConstraintSense::NonNegative,
            });
        }
        if let Some(hi) = max {
            constraints.push(PolyConstraint {
                label: format!("{label}.max"),
                poly: (-poly).add_constant(hi),
                sense: ConstraintSense::NonNegative,
            });
        }
    };
    for (k, bus) in case.buses.iter().enumerate() {
        let v = case.vsq_bounds(k);
        push_bounds(format!("V{}", bus.id), &polys.f_v[k], v.min, v.max);
        if !released.contains(&k) {
            let p = case.p_bounds(k);
            push_bounds(format!("P{}", bus.id), &polys.f_p[k], p.min, p.max);
        }
        let q = case.q_bounds(k);
        push_bounds(format!("Q{}", bus.id), &polys.f_q[k], q.min, q.max);
    }

    let mut costs = Vec::new();
    for g in &case.generators {
        if !g.has_cost() {
            continue;
        }
        let k = case.bus_index(g.bus).expect("validated generator bus");
        costs.push(CostTerm {
            label: format!("C{}", g.bus),
            injection: polys.f_p[k].clone(),
            c2: g.cost_c2,
            c1: g.cost_c1,
            c0: g.cost_c0,
        });
    }

    let mut flow_limits = Vec::new();
    for (br, fl) in case.branches.iter().zip(&polys.flows) {
        if let Some(s_max) = br.s_max {
            flow_limits.push(FlowLimit {
                label: format!("S{}-{}", br.from, br.to),
                p: fl.p_lm.clone(),
                q: fl.q_lm.clone(),
                s_max,
            });
            flow_limits.push(FlowLimit {
                label: format!("S{}-{}", br.to, br.from),
                p: fl.p_ml.clone(),
                q: fl.q_ml.clone(),
                s_max,
            });
        }
    }

    Ok(PolyProblem {
        var_names: polys.layout.names(),
        constraints,
        costs,
        flow_limits,
        targets: tracking,
        penalty,
    })
}

/// A lowered relaxation together with the bookkeeping needed to interpret
/// solver output.
#[derive(Debug, Clone)]
pub struct BuiltRelaxation {
    pub relaxation: Relaxation,
    pub program: ConicProgram,
    pub problem: PolyProblem,
    pub index: LiftedIndex,
    /// Program variable of each lifted slot, if the slot is used.
    pub slot_var: Vec<Option<usize>>,
    /// Cost epigraph variables, parallel to `problem.costs` (None when c2 = 0).
    pub cost_vars: Vec<Option<usize>>,
    /// Squared tracking error `Σ (L_y{f_Pk} − target_k)²`; weighted by the
    /// penalty in the objective.
    pub tracking_var: Option<usize>,
    /// Whether the parity split was applied.
    pub reduced: bool,
}

impl BuiltRelaxation {
    pub fn nvars(&self) -> usize {
        self.index.nvars()
    }

    /// Lifted slot values for a program solution; unused slots read as 0 and
    /// slot 0 as 1.
    pub fn slot_values(&self, x: &[f64]) -> Vec<f64> {
        self.slot_var
            .iter()
            .enumerate()
            .map(|(s, v)| match v {
                _ if s == 0 => 1.0,
                Some(i) => x[*i],
                None => 0.0,
            })
            .collect()
    }

    /// Second-moment matrix `L_y{x̂ x̂ᵀ}` from slot values.
    pub fn second_moments(&self, y: &[f64]) -> DMatrix<f64> {
        let n = self.nvars();
        DMatrix::from_fn(n, n, |i, j| {
            let e = Exponent::unit(n, i).add(&Exponent::unit(n, j));
            y[self.index.slot(&e).expect("degree-two slot")]
        })
    }

    /// `L_y{p}` evaluated at a program solution.
    pub fn lifted_value(&self, p: &Polynomial, x: &[f64]) -> Result<f64> {
        Ok(apply_ly(p, &self.index)?.eval(&self.slot_values(x)))
    }

    /// Program point obtained by lifting a real point: `y_α = point^α`,
    /// epigraph variables at their tight values.
    pub fn lift_point(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.nvars() {
            return Err(Error::Dimension {
                expected: self.nvars(),
                got: point.len(),
            });
        }
        let mut x = vec![0.0; self.program.num_vars()];
        let y = self.index.lift(point);
        for (s, v) in self.slot_var.iter().enumerate() {
            if let Some(i) = v {
                x[*i] = y[s];
            }
        }
        for (c, v) in self.problem.costs.iter().zip(&self.cost_vars) {
            if let Some(i) = v {
                let p = c.injection.eval(point)?;
                x[*i] = c.c2 * p * p + c.c1 * p + c.c0;
            }
        }
        if let Some(i) = self.tracking_var {
            let mut t = 0.0;
            for tr in &self.problem.targets {
                let d = tr.poly.eval(point)? - tr.value;
                t += d * d;
            }
            x[i] = t;
        }
        Ok(x)
    }
}

/// Forms over lifted slots, with auxiliary variables numbered after the slots.
struct Emitter {
    num_slots: usize,
    aux_names: Vec<String>,
    equalities: Vec<(LinearForm, String)>,
    cones: Vec<(ConeKind, Vec<LinearForm>, String)>,
    objective: LinearForm,
}

impl Emitter {
    fn aux(&mut self, name: String) -> usize {
        self.aux_names.push(name);
        self.num_slots + self.aux_names.len() - 1
    }

    fn eq(&mut self, f: LinearForm, label: String) {
        if f.terms.is_empty() {
            return;
        }
        self.equalities.push((f, label));
    }

    fn cone(&mut self, kind: ConeKind, rows: Vec<LinearForm>, label: String) {
        self.cones.push((kind, rows, label));
    }

    /// PSD constraint, with 1×1 blocks demoted to nonnegativity.
    fn psd(&mut self, m: &SymbolicMatrix, label: String) {
        if m.dim() == 0 || m.is_constant() {
            return;
        }
        if m.dim() == 1 {
            self.cone(ConeKind::NonNeg, vec![m.entry(0, 0).clone()], label);
            return;
        }
        let n = m.dim();
        let mut rows = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for i in j..n {
                rows.push(m.entry(i, j).clone());
            }
        }
        self.cone(ConeKind::Psd { dim: n }, rows, label);
    }

    /// Diagonal nonnegativity plus rotated-cone 2×2 minors, skipping pairs
    /// inside `skip` and off-diagonal entries rejected by `keep`.
    fn minors(
        &mut self,
        m: &SymbolicMatrix,
        label: &str,
        skip: &[bool],
        keep: &dyn Fn(&LinearForm) -> bool,
    ) {
        let n = m.dim();
        for i in 0..n {
            if !skip[i] && !m.entry(i, i).is_constant() {
                self.cone(ConeKind::NonNeg, vec![m.entry(i, i).clone()], format!("{label}.d{i}"));
            }
        }
        for i in 0..n {
            for k in i + 1..n {
                if skip[i] && skip[k] {
                    continue;
                }
                let w = m.entry(i, k);
                if w.terms.is_empty() || !keep(w) {
                    continue;
                }
                self.cone(
                    ConeKind::RotatedSecondOrder,
                    vec![m.entry(i, i).clone(), m.entry(k, k).clone(), w.clone()],
                    format!("{label}.m{i}-{k}"),
                );
            }
        }
    }
}

/// Row groups of a basis prefix: by degree parity when reducing, else one group.
fn row_blocks(b: &MonomialBasis, len: usize, reduced: bool) -> Vec<(Vec<usize>, &'static str)> {
    if !reduced {
        return vec![((0..len).collect(), "full")];
    }
    let even: Vec<usize> = (0..len).filter(|&i| b.get(i).degree() % 2 == 0).collect();
    let odd: Vec<usize> = (0..len).filter(|&i| b.get(i).degree() % 2 == 1).collect();
    vec![(even, "even"), (odd, "odd")]
}

/// Orthonormal basis of the complement of the moment-block kernel implied by
/// the equality constraints.
fn facial_basis(
    b: &MonomialBasis,
    rows: &[usize],
    equalities: &[&Polynomial],
    order: u32,
    reduced: bool,
) -> Option<DMatrix<f64>> {
    let dim = rows.len();
    let local: HashMap<&Exponent, usize> = rows.iter().enumerate().map(|(k, &i)| (b.get(i), k)).collect();
    let parity = rows.first().map(|&i| b.get(i).degree() % 2);
    let mut vecs: Vec<nalgebra::DVector<f64>> = Vec::new();
    for g in equalities {
        let gdeg = g.degree();
        if 2 * gdeg > 2 * order + gdeg || gdeg > order {
            continue;
        }
        let max_shift = order - gdeg;
        for m in b.iter().take_while(|m| m.degree() <= max_shift) {
            if reduced && Some(m.degree() % 2) != parity.map(|p| (p + gdeg) % 2) {
                continue;
            }
            let Ok(gm) = g.shift(m) else { continue };
            let mut v = nalgebra::DVector::zeros(dim);
            let mut inside = true;
            for (e, c) in gm.terms() {
                match local.get(e) {
                    Some(&k) => v[k] = c,
                    None => {
                        inside = false;
                        break;
                    }
                }
            }
            if inside && v.norm() > 0.0 {
                vecs.push(v);
            }
        }
    }
    if vecs.is_empty() {
        return None;
    }
    let kernel = DMatrix::from_columns(&vecs).transpose();
    let keep = RowSpace::new(&kernel, 1e-9).null;
    (keep.ncols() < dim).then_some(keep)
}

/// Lowers a polynomial problem to a conic program.
pub fn build_problem(problem: PolyProblem, relaxation: Relaxation, options: &RelaxOptions) -> Result<BuiltRelaxation> {
    relaxation.validate()?;
    let gamma = relaxation.order();
    let nv = problem.nvars();
    if nv == 0 {
        return Err(Error::Validation("problem has no variables".into()));
    }
    for c in &problem.constraints {
        if c.poly.nvars() != nv {
            return Err(Error::Dimension {
                expected: nv,
                got: c.poly.nvars(),
            });
        }
        if c.poly.degree() > 2 * gamma {
            return Err(Error::DegreeOverflow {
                term: c.label.clone(),
                limit: 2 * gamma,
            });
        }
    }
    let reduced = options.even_reduction && problem.all_even();
    let mixed = relaxation.is_mixed();
    let idx = LiftedIndex::new(nv, gamma);
    let mb = basis(nv, gamma);
    let mut em = Emitter {
        num_slots: idx.num_slots(),
        aux_names: Vec::new(),
        equalities: Vec::new(),
        cones: Vec::new(),
        objective: LinearForm::default(),
    };

    // Localizing constraints g ≥ 0 / g = 0, plus quartic flow limits at γ ≥ 2.
    let mut localizing: Vec<(String, Polynomial, ConstraintSense)> = problem
        .constraints
        .iter()
        .map(|c| (c.label.clone(), c.poly.clone(), c.sense))
        .collect();
    if gamma >= 2 {
        for f in &problem.flow_limits {
            let sq = &(&f.p * &f.p) + &(&f.q * &f.q);
            localizing.push((
                format!("{}.sq", f.label),
                (-&sq).add_constant(f.s_max * f.s_max),
                ConstraintSense::NonNegative,
            ));
        }
    }
    for (label, g, sense) in &localizing {
        let eta = g.degree().div_ceil(2);
        let order = gamma - eta;
        let len = mb.prefix_len(order);
        let lm = localizing_matrix(g, &idx, order)?;
        for (rows, part) in row_blocks(&mb, len, reduced && g.is_even()) {
            let block = lm.submatrix(&rows);
            let name = format!("L[{label}].{part}");
            match sense {
                ConstraintSense::Zero => {
                    for i in 0..block.dim() {
                        for j in i..block.dim() {
                            em.eq(block.entry(i, j).clone(), format!("{name}.{i}-{j}"));
                        }
                    }
                }
                ConstraintSense::NonNegative if mixed && block.dim() > 1 => {
                    let skip = vec![false; block.dim()];
                    em.minors(&block, &name, &skip, &|_| true);
                }
                ConstraintSense::NonNegative => em.psd(&block, name),
            }
        }
    }

    // Costs.
    let mut cost_vars = Vec::with_capacity(problem.costs.len());
    for c in &problem.costs {
        let lp = apply_ly(&c.injection, &idx)?;
        if c.c2 == 0.0 {
            em.objective.add_scaled(&lp, c.c1);
            em.objective.add(0, c.c0);
            cost_vars.push(None);
            continue;
        }
        let w = em.aux(format!("omega[{}]", c.label));
        em.objective.add(w, 1.0);
        let mut u = LinearForm::slot(w);
        u.add_scaled(&lp, -c.c1);
        u.add(0, -c.c0);
        em.cone(
            ConeKind::RotatedSecondOrder,
            vec![u, LinearForm::constant(1.0), lp.scaled(c.c2.sqrt())],
            format!("cost[{}]", c.label),
        );
        if gamma >= 2 {
            let fc = (&(&c.injection * &c.injection).scale(c.c2) + &c.injection.scale(c.c1)).add_constant(c.c0);
            let mut f = apply_ly(&fc, &idx)?;
            f.add(w, -1.0);
            em.eq(f, format!("cost-eq[{}]", c.label));
        }
        cost_vars.push(Some(w));
    }

    for f in &problem.flow_limits {
        em.cone(
            ConeKind::SecondOrder,
            vec![
                LinearForm::constant(f.s_max),
                apply_ly(&f.p, &idx)?,
                apply_ly(&f.q, &idx)?,
            ],
            format!("flow[{}]", f.label),
        );
    }

    let mut tracking_var = None;
    if !problem.targets.is_empty() {
        let t = em.aux("track".into());
        em.objective.add(t, problem.penalty);
        let mut rows = vec![LinearForm::slot(t), LinearForm::constant(1.0)];
        for tr in &problem.targets {
            let mut d = apply_ly(&tr.poly, &idx)?;
            d.add(0, -tr.value);
            rows.push(d);
        }
        em.cone(ConeKind::RotatedSecondOrder, rows, "track".into());
        if gamma >= 2 {
            let mut sum = Polynomial::zero(nv);
            for tr in &problem.targets {
                let d = tr.poly.add_constant(-tr.value);
                sum = &sum + &(&d * &d);
            }
            let mut f = apply_ly(&sum, &idx)?;
            f.add(t, -1.0);
            em.eq(f, "track-eq".into());
        }
        tracking_var = Some(t);
    }

    // Moment matrix.
    let mm = moment_matrix(&idx, gamma);
    let used_elsewhere: BTreeSet<usize> = em
        .equalities
        .iter()
        .map(|e| &e.0)
        .chain(em.cones.iter().flat_map(|c| c.1.iter()))
        .flat_map(|f| f.terms.keys().copied())
        .collect();
    let equality_polys: Vec<&Polynomial> = localizing
        .iter()
        .filter(|l| l.2 == ConstraintSense::Zero)
        .map(|l| &l.1)
        .collect();
    for (rows, part) in row_blocks(&mb, mb.len(), reduced) {
        let block = mm.submatrix(&rows);
        let name = format!("M{gamma}.{part}");
        if mixed {
            let green: Vec<bool> = rows.iter().map(|&i| mb.get(i).degree() == 1).collect();
            let green_rows: Vec<usize> = (0..rows.len()).filter(|&k| green[k]).collect();
            em.psd(&block.submatrix(&green_rows), format!("{name}.deg2"));
            em.minors(&block, &name, &green, &|w: &LinearForm| {
                w.terms.keys().all(|s| used_elsewhere.contains(s))
            });
            continue;
        }
        let reduced_block = if options.facial_reduction {
            facial_basis(&mb, &rows, &equality_polys, gamma, reduced).map(|q| block.congruence(&q))
        } else {
            None
        };
        em.psd(reduced_block.as_ref().unwrap_or(&block), name);
    }

    // Assign program variables to the slots in use.
    let used: BTreeSet<usize> = em
        .equalities
        .iter()
        .map(|e| &e.0)
        .chain(em.cones.iter().flat_map(|c| c.1.iter()))
        .chain(std::iter::once(&em.objective))
        .flat_map(|f| f.terms.keys().copied())
        .filter(|&s| s != 0 && s < idx.num_slots())
        .collect();
    let mut slot_var = vec![None; idx.num_slots()];
    let mut names = Vec::with_capacity(used.len() + em.aux_names.len());
    for &s in &used {
        slot_var[s] = Some(names.len());
        names.push(format!("y[{}]", idx.exponent(s).render(&problem.var_names)));
    }
    let aux_base = names.len();
    names.extend(em.aux_names.iter().cloned());
    let to_var = |s: usize| -> usize {
        if s >= idx.num_slots() {
            aux_base + (s - idx.num_slots())
        } else {
            slot_var[s].expect("used slot")
        }
    };
    let lower = |f: &LinearForm| -> AffineExpr {
        AffineExpr::new(
            f.terms
                .iter()
                .filter(|(&s, _)| s != 0)
                .map(|(&s, &c)| (to_var(s), c))
                .collect(),
            f.coefficient(0),
        )
    };
    let mut program = ConicProgram::new(names);
    program.objective = lower(&em.objective);
    for (f, label) in &em.equalities {
        program.add_equality(lower(f), label.clone());
    }
    for (kind, rows, label) in &em.cones {
        program.add_cone(*kind, rows.iter().map(&lower).collect(), label.clone());
    }
    let cost_vars = cost_vars.into_iter().map(|v| v.map(to_var)).collect();
    let tracking_var = tracking_var.map(to_var);

    Ok(BuiltRelaxation {
        relaxation,
        program,
        problem,
        index: idx,
        slot_var,
        cost_vars,
        tracking_var,
        reduced,
    })
}

/// Builds a relaxation of the OPF problem of `case`.
pub fn build(case: &NetworkCase, relaxation: Relaxation, options: &RelaxOptions) -> Result<BuiltRelaxation> {
    let polys = build_opf_polynomials(case)?;
    let problem = opf_problem(case, &polys, &options.targets, options.penalty)?;
    build_problem(problem, relaxation, options)
}

pub fn build_first_order(case: &NetworkCase) -> Result<BuiltRelaxation> {
    build(case, Relaxation::Sdp, &RelaxOptions::default())
}

pub fn build_moment(case: &NetworkCase, order: u32) -> Result<BuiltRelaxation> {
    build(case, Relaxation::Moment(order), &RelaxOptions::default())
}

pub fn build_mixed(case: &NetworkCase, order: u32) -> Result<BuiltRelaxation> {
    build(case, Relaxation::Mixed(order), &RelaxOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::poly::VarLayout;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names5() -> Vec<String> {
        ["V_d1", "V_d2", "V_d3", "V_q2", "V_q3"].map(String::from).to_vec()
    }

    #[test]
    fn basis_order_three_bus() {
        let b = basis(5, 2);
        assert_eq!(b.len(), 21);
        let rendered: Vec<String> = b.iter().map(|e| e.render(&names5())).collect();
        let expected = [
            "1", "V_d1", "V_d2", "V_d3", "V_q2", "V_q3", "V_d1^2", "V_d1*V_d2", "V_d1*V_d3",
            "V_d1*V_q2", "V_d1*V_q3", "V_d2^2", "V_d2*V_d3", "V_d2*V_q2", "V_d2*V_q3", "V_d3^2",
            "V_d3*V_q2", "V_d3*V_q3", "V_q2^2", "V_q2*V_q3", "V_q3^2",
        ];
        assert_eq!(rendered, expected);
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(basis(19, 3).len(), 1540);
        assert_eq!(basis_size(19, 3), 1540);
        assert_eq!(basis(2, 0).len(), 1);
        assert!(basis(2, 0).get(0).is_zero());
        for (n, d) in [(1, 4), (3, 3), (5, 4)] {
            assert_eq!(basis(n, d).len() as u128, basis_size(n, d));
        }
        assert_eq!(LiftedIndex::new(5, 2).num_slots() as u128, basis_size(5, 4));
    }

    #[test]
    fn lifted_form_of_voltage_limit() {
        let idx = LiftedIndex::new(3, 1);
        let layout_names = ["V_d1", "V_d2", "V_q2"].map(String::from);
        let vmax2 = 1.21;
        let g = (&Polynomial::var(3, 1) * &Polynomial::var(3, 1)).scale(-1.0);
        let g = &g - &(&Polynomial::var(3, 2) * &Polynomial::var(3, 2));
        let g = g.add_constant(vmax2);
        let f = apply_ly(&g, &idx).unwrap();
        assert_eq!(f.terms.len(), 3);
        assert_eq!(f.coefficient(0), vmax2);
        let y020 = idx.slot(&Exponent::from_vec(vec![0, 2, 0])).unwrap();
        let y002 = idx.slot(&Exponent::from_vec(vec![0, 0, 2])).unwrap();
        assert_eq!(f.coefficient(y020), -1.0);
        assert_eq!(f.coefficient(y002), -1.0);
        let _ = layout_names;
        let one = apply_ly(&Polynomial::constant(3, 1.0), &idx).unwrap();
        assert_eq!(one, LinearForm::constant(1.0));
    }

    #[test]
    fn ly_rejects_high_degree() {
        let idx = LiftedIndex::new(2, 1);
        let cubic = Polynomial::monomial(Exponent::from_vec(vec![3, 0]), 1.0);
        assert!(matches!(apply_ly(&cubic, &idx), Err(Error::DegreeOverflow { .. })));
    }

    #[test]
    fn moment_matrix_structure() {
        let idx = LiftedIndex::new(5, 2);
        let m = moment_matrix(&idx, 2);
        assert_eq!(m.dim(), 21);
        let m1 = moment_matrix(&idx, 1);
        let lead = m.submatrix(&(0..6).collect::<Vec<_>>());
        assert_eq!(lead, m1);
        // Hankel: (V_d1, V_d2) entry equals (1, V_d1 V_d2) entry.
        assert_eq!(m.entry(1, 2), m.entry(0, 7));
        let m0 = moment_matrix(&LiftedIndex::new(5, 0), 0);
        assert_eq!(m0.dim(), 1);
        assert_eq!(m0.entry(0, 0), &LinearForm::slot(0));
    }

    #[test]
    fn localizing_identities() {
        let idx = LiftedIndex::new(3, 2);
        let g = Polynomial::constant(3, 1.0);
        assert_eq!(localizing_matrix(&g, &idx, 2).unwrap(), moment_matrix(&idx, 2));
        let h = (&Polynomial::var(3, 0) * &Polynomial::var(3, 0)).add_constant(-1.0);
        let l0 = localizing_matrix(&h, &idx, 0).unwrap();
        assert_eq!(l0.dim(), 1);
        assert_eq!(l0.entry(0, 0), &apply_ly(&h, &idx).unwrap());
    }

    #[test]
    fn relaxation_tags() {
        assert_eq!("sdp".parse::<Relaxation>().unwrap(), Relaxation::Sdp);
        assert_eq!("moment:2".parse::<Relaxation>().unwrap(), Relaxation::Moment(2));
        assert_eq!("mixed:3".parse::<Relaxation>().unwrap(), Relaxation::Mixed(3));
        assert!("mixed:1".parse::<Relaxation>().is_err());
        assert!("moment:0".parse::<Relaxation>().is_err());
        assert!("lasso".parse::<Relaxation>().is_err());
        assert_eq!(Relaxation::Mixed(2).to_string(), "mixed:2");
    }

    #[test]
    fn first_order_equals_moment_one() {
        for case in [cases::two_bus(), cases::three_bus()] {
            let a = build_first_order(&case).unwrap();
            let b = build_moment(&case, 1).unwrap();
            assert_eq!(a.program.equalities, b.program.equalities);
            assert_eq!(a.program.cones, b.program.cones);
            assert_eq!(a.program.objective, b.program.objective);
        }
    }

    #[test]
    fn first_order_shape() {
        let built = build_first_order(&cases::three_bus()).unwrap();
        assert!(built.reduced);
        let psd: Vec<_> = built
            .program
            .cones
            .iter()
            .filter(|c| matches!(c.kind, ConeKind::Psd { .. }))
            .collect();
        assert_eq!(psd.len(), 1);
        assert_eq!(psd[0].kind, ConeKind::Psd { dim: 5 });
        // Only degree-two moments are needed.
        for (s, v) in built.slot_var.iter().enumerate() {
            if v.is_some() {
                assert_eq!(built.index.exponent(s).degree(), 2);
            }
        }
    }

    #[test]
    fn second_order_blocks() {
        let mut opts = RelaxOptions::default();
        opts.facial_reduction = false;
        let built = build(&cases::three_bus(), Relaxation::Moment(2), &opts).unwrap();
        let dims: Vec<_> = built
            .program
            .cones
            .iter()
            .filter_map(|c| match c.kind {
                ConeKind::Psd { dim } => Some((c.label.clone(), dim)),
                _ => None,
            })
            .collect();
        assert!(dims.contains(&("M2.even".into(), 16)));
        assert!(dims.contains(&("M2.odd".into(), 5)));
        let faced = build_moment(&cases::three_bus(), 2).unwrap();
        let even = faced.program.cones.iter().find(|c| c.label == "M2.even").unwrap();
        // Five equality constraints each remove one direction.
        assert_eq!(even.kind, ConeKind::Psd { dim: 11 });
    }

    #[test]
    fn odd_polynomial_refuses_reduction() {
        let nv = 2;
        let odd = &Polynomial::var(nv, 0) + &(&Polynomial::var(nv, 1) * &Polynomial::var(nv, 1));
        let problem = PolyProblem {
            var_names: vec!["a".into(), "b".into()],
            constraints: vec![PolyConstraint {
                label: "odd".into(),
                poly: odd,
                sense: ConstraintSense::NonNegative,
            }],
            costs: vec![],
            flow_limits: vec![],
            targets: vec![],
            penalty: 1.0,
        };
        let built = build_problem(problem, Relaxation::Moment(1), &RelaxOptions::default()).unwrap();
        assert!(!built.reduced);
        let m = built.program.cones.iter().find(|c| c.label == "M1.full").unwrap();
        assert_eq!(m.kind, ConeKind::Psd { dim: 3 });
    }

    #[test]
    fn empty_problem_has_zero_objective() {
        let problem = PolyProblem {
            var_names: vec!["a".into()],
            constraints: vec![],
            costs: vec![],
            flow_limits: vec![],
            targets: vec![],
            penalty: 1.0,
        };
        let built = build_problem(problem, Relaxation::Sdp, &RelaxOptions::default()).unwrap();
        let sol = crate::conic::solve(&built.program, &Default::default()).unwrap();
        assert_eq!(sol.status, crate::conic::SolveStatus::Optimal);
        assert!(sol.objective.abs() < 1e-9);
    }

    #[test]
    fn mixed_requires_order_two() {
        assert!(build_mixed(&cases::three_bus(), 1).is_err());
        assert!(build_moment(&cases::three_bus(), 0).is_err());
    }

    fn random_case_point(case: &NetworkCase, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let layout = VarLayout::new(case);
        (0..layout.num_vars()).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    /// Random points of a case with every bound removed are feasible for the
    /// relaxations of that case, and the objective is preserved.
    #[test]
    fn lifting_soundness_on_relaxed_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for base in [cases::two_bus(), cases::three_bus()] {
            let mut case = base.clone();
            for b in &mut case.buses {
                b.v_min = None;
                b.v_max = None;
            }
            for g in &mut case.generators {
                g.p_min = None;
                g.p_max = None;
                g.q_min = None;
                g.q_max = None;
                g.cost_c2 = 0.5;
            }
            let gens: Vec<u32> = case.generators.iter().map(|g| g.bus).collect();
            for k in 0..case.buses.len() {
                if !gens.contains(&case.buses[k].id) {
                    let id = case.buses[k].id;
                    let mut g = crate::network::Generator::zero_injection(id);
                    g.p_min = None;
                    g.p_max = None;
                    g.q_min = None;
                    g.q_max = None;
                    case.generators.push(g);
                }
            }
            case.branches[0].s_max = Some(100.0);
            for rel in [Relaxation::Sdp, Relaxation::Moment(2), Relaxation::Mixed(2)] {
                let built = build(&case, rel, &RelaxOptions::default()).unwrap();
                for _ in 0..5 {
                    let pt = random_case_point(&case, &mut rng);
                    let x = built.lift_point(&pt).unwrap();
                    let check = built.program.check_point(&x);
                    assert!(check.max_violation() < 1e-8, "{rel}: {check:?}");
                    let obj = built.problem.objective_at(&pt).unwrap();
                    assert!((check.objective - obj).abs() < 1e-8 * (1.0 + obj.abs()));
                }
            }
        }
    }

    #[test]
    fn tracking_targets_release_injection_bounds() {
        let opts = RelaxOptions {
            targets: vec![InjectionTarget { bus: 2, p: 1.0 }, InjectionTarget { bus: 3, p: -0.5 }],
            ..RelaxOptions::default()
        };
        let built = build(&cases::three_bus(), Relaxation::Moment(2), &opts).unwrap();
        assert!(built.problem.constraints.iter().all(|c| c.label != "P2" && c.label != "P3"));
        assert!(built.tracking_var.is_some());
        let bad = RelaxOptions {
            targets: vec![InjectionTarget { bus: 9, p: 1.0 }],
            ..RelaxOptions::default()
        };
        assert!(build(&cases::three_bus(), Relaxation::Sdp, &bad).is_err());
    }

    proptest! {
        #[test]
        fn ly_is_linear(a in prop::collection::vec(-3i32..3, 6), b in prop::collection::vec(-3i32..3, 6)) {
            let idx = LiftedIndex::new(2, 1);
            let basis = basis(2, 2);
            let mk = |c: &[i32]| Polynomial::from_terms(2, basis.iter().cloned().zip(c.iter().map(|&v| v as f64))).unwrap();
            let (p, q) = (mk(&a), mk(&b));
            let lhs = apply_ly(&(&p.scale(2.0) + &q), &idx).unwrap();
            let mut rhs = apply_ly(&p, &idx).unwrap().scaled(2.0);
            rhs.add_scaled(&apply_ly(&q, &idx).unwrap(), 1.0);
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn lifted_moment_matrix_is_rank_one(pt in prop::collection::vec(-2.0f64..2.0, 3)) {
            let idx = LiftedIndex::new(3, 2);
            let y = idx.lift(&pt);
            let m = moment_matrix(&idx, 2).eval(&y);
            let b = basis(3, 2);
            let v: Vec<f64> = b.iter().map(|e| e.eval(&pt)).collect();
            let outer = nalgebra::DVector::from_vec(v.clone()) * nalgebra::DVector::from_vec(v).transpose();
            prop_assert!((m - outer).norm() < 1e-9);
        }
    }
}
