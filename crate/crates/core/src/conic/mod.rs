//! Conic program representation and the in-tree solver.
//!
//! A [`ConicProgram`] minimizes an affine objective over real variables subject
//! to affine equalities and memberships of affine expressions in nonnegative,
//! second-order, rotated second-order and PSD cones.

mod cones;
mod ipm;
mod text;

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::{Error, Result};

pub use ipm::InteriorPoint;
pub(crate) use ipm::RowSpace;
pub use text::{read_program, write_program};

/// Sparse affine expression `Σ coef·x[var] + constant`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn constant(value: f64) -> Self {
        AffineExpr {
            terms: Vec::new(),
            constant: value,
        }
    }

    pub fn var(index: usize) -> Self {
        AffineExpr {
            terms: vec![(index, 1.0)],
            constant: 0.0,
        }
    }

    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        AffineExpr { terms, constant }.canonical()
    }

    /// Merges duplicate variables and drops zero coefficients.
    pub fn canonical(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.terms = merged;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }

    pub fn scale(&self, factor: f64) -> AffineExpr {
        AffineExpr {
            terms: self.terms.iter().map(|&(v, c)| (v, c * factor)).collect(),
            constant: self.constant * factor,
        }
        .canonical()
    }

    pub fn plus(&self, other: &AffineExpr) -> AffineExpr {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        AffineExpr {
            terms,
            constant: self.constant + other.constant,
        }
        .canonical()
    }

    pub fn minus(&self, other: &AffineExpr) -> AffineExpr {
        self.plus(&other.scale(-1.0))
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConeKind {
    /// Every row is nonnegative.
    NonNeg,
    /// Rows `(t, w…)` with `t ≥ ‖w‖`.
    SecondOrder,
    /// Rows `(u, v, w…)` with `u, v ≥ 0` and `u·v ≥ ‖w‖²`.
    RotatedSecondOrder,
    /// Symmetric `dim × dim` matrix, rows are the lower triangle packed by columns.
    Psd { dim: usize },
}

impl ConeKind {
    pub fn expected_rows(&self, rows: usize) -> Option<usize> {
        match *self {
            ConeKind::Psd { dim } => Some(dim * (dim + 1) / 2),
            ConeKind::NonNeg => None,
            ConeKind::SecondOrder => (rows == 0).then_some(1),
            ConeKind::RotatedSecondOrder => (rows < 2).then_some(2),
        }
    }
}

/// Position of the `(i, j)` entry (`i ≥ j`) in a column-packed lower triangle.
pub fn packed_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * dim - j * (j + 1) / 2 + i
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeConstraint {
    pub kind: ConeKind,
    pub rows: Vec<AffineExpr>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProgram {
    pub var_names: Vec<String>,
    pub objective: AffineExpr,
    /// Each expression is constrained to equal zero.
    pub equalities: Vec<(AffineExpr, String)>,
    pub cones: Vec<ConeConstraint>,
}

impl ConicProgram {
    pub fn new(var_names: Vec<String>) -> Self {
        ConicProgram {
            var_names,
            ..Default::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>) -> usize {
        self.var_names.push(name.into());
        self.var_names.len() - 1
    }

    pub fn add_equality(&mut self, expr: AffineExpr, label: impl Into<String>) {
        self.equalities.push((expr, label.into()));
    }

    pub fn add_cone(&mut self, kind: ConeKind, rows: Vec<AffineExpr>, label: impl Into<String>) {
        self.cones.push(ConeConstraint {
            kind,
            rows,
            label: label.into(),
        });
    }

    /// Checks that every referenced variable exists and cone shapes match.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let check = |e: &AffineExpr, what: &str| -> Result<()> {
            if let Some(&(v, _)) = e.terms.iter().find(|t| t.0 >= n) {
                return Err(Error::Validation(format!(
                    "{what} references variable {v}, program has {n}"
                )));
            }
            if !e.constant.is_finite() || e.terms.iter().any(|t| !t.1.is_finite()) {
                return Err(Error::Validation(format!("{what} has a non-finite coefficient")));
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for (e, label) in &self.equalities {
            check(e, label)?;
        }
        for cone in &self.cones {
            for row in &cone.rows {
                check(row, &cone.label)?;
            }
            if let Some(expected) = cone.kind.expected_rows(cone.rows.len()) {
                if expected != cone.rows.len() {
                    return Err(Error::Validation(format!(
                        "cone {} has {} rows, expected {expected}",
                        cone.label,
                        cone.rows.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
    }

    /// Largest constraint violation of `x` over all rows.
    pub fn check_point(&self, x: &[f64]) -> PointCheck {
        let mut check = PointCheck {
            objective: self.objective.eval(x),
            ..Default::default()
        };
        for (e, label) in &self.equalities {
            let r = e.eval(x).abs();
            if r > check.max_equality_violation {
                check.max_equality_violation = r;
                check.worst_equality = Some(label.clone());
            }
        }
        for cone in &self.cones {
            let vals: Vec<f64> = cone.rows.iter().map(|r| r.eval(x)).collect();
            let v = cone_violation(cone.kind, &vals);
            if v > check.max_cone_violation {
                check.max_cone_violation = v;
                check.worst_cone = Some(cone.label.clone());
            }
        }
        check
    }
}

/// Distance-like violation measure of a point in one cone (0 when inside).
/// PSD blocks report the negative part of the smallest eigenvalue.
pub fn cone_violation(kind: ConeKind, vals: &[f64]) -> f64 {
    match kind {
        ConeKind::NonNeg => vals.iter().fold(0.0f64, |m, &v| m.max(-v)),
        ConeKind::SecondOrder => {
            let norm = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm - vals[0]).max(0.0)
        }
        ConeKind::RotatedSecondOrder => {
            let (u, v) = (vals[0], vals[1]);
            let w2: f64 = vals[2..].iter().map(|w| w * w).sum();
            let norm = ((u - v) * (u - v) + 4.0 * w2).sqrt();
            ((norm - (u + v)) / 2.0).max(0.0)
        }
        ConeKind::Psd { dim } => {
            let m = unpack_symmetric(dim, vals);
            let min = SymmetricEigen::new(m).eigenvalues.min();
            (-min).max(0.0)
        }
    }
}

pub fn unpack_symmetric(dim: usize, packed: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        for i in j..dim {
            let v = packed[packed_index(dim, i, j)];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn pack_symmetric(m: &DMatrix<f64>) -> Vec<f64> {
    let dim = m.nrows();
    let mut out = Vec::with_capacity(dim * (dim + 1) / 2);
    for j in 0..dim {
        for i in j..dim {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PointCheck {
    pub objective: f64,
    pub max_equality_violation: f64,
    pub max_cone_violation: f64,
    pub worst_equality: Option<String>,
    pub worst_cone: Option<String>,
}

impl PointCheck {
    pub fn max_violation(&self) -> f64 {
        self.max_equality_violation.max(self.max_cone_violation)
    }
}

/// Euclidean projection of a symmetric matrix onto the PSD cone.
pub fn project_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in PSD projection".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// Euclidean projection onto `{(t, x) : t ≥ ‖x‖}`.
pub fn project_soc(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension {
            expected: 1,
            got: 0,
        });
    }
    let t = v[0];
    let norm = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= t {
        Ok(v.to_vec())
    } else if norm <= -t {
        Ok(vec![0.0; v.len()])
    } else {
        let a = (t + norm) / 2.0;
        let mut out = Vec::with_capacity(v.len());
        out.push(a);
        out.extend(v[1..].iter().map(|x| a * x / norm));
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIterations => "max-iterations",
            SolveStatus::NumericalFailure => "numerical-failure",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Relative primal residual of the final iterate.
    pub primal_residual: f64,
    /// Relative dual residual of the final iterate.
    pub dual_residual: f64,
    /// Duality gap relative to `1 + |objective|`.
    pub gap: f64,
    pub iterations: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Equilibrate columns of the constraint matrix before iterating.
    pub scaling: bool,
    /// 0 silent, 1 summary, 2 per-iteration trace on stderr.
    pub verbosity: u8,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tolerance: 1e-8,
            max_iterations: 200,
            scaling: true,
            verbosity: 0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Validation("solver tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Boundary for alternative conic solvers.
pub trait ConicBackend {
    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution>;
}

/// Solves with the in-tree interior-point method.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution> {
    InteriorPoint.solve(program, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    #[test]
    fn nonneg_minimum() {
        let mut p = ConicProgram::new(vec!["x".into()]);
        p.objective = AffineExpr::var(0);
        p.add_cone(ConeKind::NonNeg, vec![AffineExpr::var(0)], "x>=0");
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective.abs() < 1e-7, "{}", sol.objective);
    }

    #[test]
    fn correlation_matrix_corner() {
        // W = [[a, w], [w, b]], a = b = 1, minimize w.
        let mut p = ConicProgram::new(vec!["a".into(), "w".into(), "b".into()]);
        p.objective = AffineExpr::var(1);
        p.add_equality(AffineExpr::new(vec![(0, 1.0)], -1.0), "a");
        p.add_equality(AffineExpr::new(vec![(2, 1.0)], -1.0), "b");
        p.add_cone(
            ConeKind::Psd { dim: 2 },
            vec![AffineExpr::var(0), AffineExpr::var(1), AffineExpr::var(2)],
            "W",
        );
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective + 1.0).abs() < 1e-6, "{}", sol.objective);
        assert!(p.check_point(&sol.x).max_violation() < 1e-6);
    }

    #[test]
    fn second_order_cones() {
        // min t s.t. t ≥ ‖(x − 3, y + 4)‖ → 0 at (3, −4); then add x + y = 0.
        let mut p = ConicProgram::new(vec!["t".into(), "x".into(), "y".into()]);
        p.objective = AffineExpr::var(0);
        p.add_cone(
            ConeKind::SecondOrder,
            vec![
                AffineExpr::var(0),
                AffineExpr::new(vec![(1, 1.0)], -3.0),
                AffineExpr::new(vec![(2, 1.0)], 4.0),
            ],
            "dist",
        );
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective.abs() < 1e-6);
        p.add_equality(AffineExpr::new(vec![(1, 1.0), (2, 1.0)], 0.0), "line");
        let sol = solve(&p, &settings()).unwrap();
        assert!((sol.objective - 0.5f64.sqrt()).abs() < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn rotated_cone_epigraph() {
        // min t s.t. t·1 ≥ (x − 2)², x ≤ 1 → t = 1.
        let mut p = ConicProgram::new(vec!["t".into(), "x".into()]);
        p.objective = AffineExpr::var(0);
        p.add_cone(
            ConeKind::RotatedSecondOrder,
            vec![
                AffineExpr::var(0),
                AffineExpr::constant(1.0),
                AffineExpr::new(vec![(1, 1.0)], -2.0),
            ],
            "epi",
        );
        p.add_cone(ConeKind::NonNeg, vec![AffineExpr::new(vec![(1, -1.0)], 1.0)], "x<=1");
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - 1.0).abs() < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn detects_infeasible() {
        let mut p = ConicProgram::new(vec!["x".into()]);
        p.objective = AffineExpr::var(0);
        p.add_cone(
            ConeKind::NonNeg,
            vec![
                AffineExpr::new(vec![(0, 1.0)], -1.0),
                AffineExpr::new(vec![(0, -1.0)], 0.0),
            ],
            "box",
        );
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_inconsistent_equalities() {
        let mut p = ConicProgram::new(vec!["x".into()]);
        p.add_equality(AffineExpr::new(vec![(0, 1.0)], -1.0), "x=1");
        p.add_equality(AffineExpr::new(vec![(0, 1.0)], -2.0), "x=2");
        p.add_cone(ConeKind::NonNeg, vec![AffineExpr::var(0)], "x>=0");
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut p = ConicProgram::new(vec!["x".into(), "y".into()]);
        p.objective = AffineExpr::new(vec![(0, -1.0)], 0.0);
        p.add_cone(ConeKind::NonNeg, vec![AffineExpr::var(0), AffineExpr::var(1)], "pos");
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn free_direction_without_cost_is_harmless() {
        // y appears nowhere except an equality with x; z appears nowhere.
        let mut p = ConicProgram::new(vec!["x".into(), "y".into(), "z".into()]);
        p.objective = AffineExpr::var(0);
        p.add_cone(ConeKind::NonNeg, vec![AffineExpr::new(vec![(0, 1.0)], -2.0)], "x>=2");
        p.add_equality(AffineExpr::new(vec![(0, 1.0), (1, -1.0)], 0.0), "x=y");
        let sol = solve(&p, &settings()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_iterates() {
        let mut p = ConicProgram::new(vec!["a".into(), "w".into(), "b".into()]);
        p.objective = AffineExpr::new(vec![(0, 1.0), (1, 0.3), (2, 2.0)], 0.0);
        p.add_equality(AffineExpr::new(vec![(0, 1.0), (2, 1.0)], -1.0), "trace");
        p.add_cone(
            ConeKind::Psd { dim: 2 },
            vec![AffineExpr::var(0), AffineExpr::var(1), AffineExpr::var(2)],
            "W",
        );
        let a = solve(&p, &settings()).unwrap();
        let b = solve(&p, &settings()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn psd_projection_clips() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -3.0]);
        let p = project_psd(&m).unwrap();
        assert!((p - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn soc_projection_polar() {
        assert_eq!(project_soc(&[-1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_soc(&[2.0, 1.0, 1.0]).unwrap(), vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn packed_layout() {
        assert_eq!(packed_index(3, 0, 0), 0);
        assert_eq!(packed_index(3, 2, 0), 2);
        assert_eq!(packed_index(3, 1, 1), 3);
        assert_eq!(packed_index(3, 1, 2), 4);
        assert_eq!(packed_index(3, 2, 2), 5);
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        assert_eq!(unpack_symmetric(3, &pack_symmetric(&m)), m);
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-3.0f64..3.0, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
    }

    proptest! {
        #[test]
        fn psd_projection_properties(a in arb_matrix(4), b in arb_matrix(4)) {
            let sa = (&a + a.transpose()) * 0.5;
            let sb = (&b + b.transpose()) * 0.5;
            let pa = project_psd(&sa).unwrap();
            prop_assert!((project_psd(&pa).unwrap() - &pa).norm() < 1e-9);
            let pb = project_psd(&sb).unwrap();
            prop_assert!((&pa - &pb).norm() <= (&sa - &sb).norm() + 1e-9);
            let gram = &a * a.transpose();
            prop_assert!((project_psd(&gram).unwrap() - &gram).norm() < 1e-9 * (1.0 + gram.norm()));
        }

        #[test]
        fn soc_projection_properties(v in prop::collection::vec(-3.0f64..3.0, 4), w in prop::collection::vec(-3.0f64..3.0, 4)) {
            let pv = project_soc(&v).unwrap();
            let again = project_soc(&pv).unwrap();
            for (a, b) in pv.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let pw = project_soc(&w).unwrap();
            let d_in: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let d_out: f64 = pv.iter().zip(&pw).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in + 1e-9);
        }
    }
}
