//! Rank certification, voltage extraction, feasibility checks and the Newton
//! power-flow oracle.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::hierarchy::BuiltRelaxation;
use crate::network::NetworkCase;
use crate::poly::VarLayout;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoverSettings {
    /// Eigenvalues below `rank_tol · λ_max` count as zero.
    pub rank_tol: f64,
    /// Largest constraint violation an extracted point may have and still be
    /// certified.
    pub feasibility_tol: f64,
}

impl Default for RecoverSettings {
    fn default() -> Self {
        RecoverSettings {
            rank_tol: 1e-5,
            feasibility_tol: 1e-4,
        }
    }
}

/// Number of eigenvalues above `ratio_tol · λ_max`. An all-zero spectrum has rank 0.
pub fn numerical_rank(eigenvalues: &[f64], ratio_tol: f64) -> usize {
    let max = eigenvalues.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eigenvalues.iter().filter(|&&l| l > ratio_tol * max).count()
}

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric matrix.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Voltages `√λ·η` from a rank-one second-moment matrix, with the reference
/// `V_q` reinserted as zero and the sign chosen so the reference `V_d ≥ 0`.
pub fn extract_voltages(w: &DMatrix<f64>, layout: &VarLayout, ratio_tol: f64) -> Result<Vec<Complex64>> {
    if w.nrows() != layout.num_vars() || w.ncols() != layout.num_vars() {
        return Err(Error::Dimension {
            expected: layout.num_vars(),
            got: w.nrows(),
        });
    }
    let (values, vectors) = sorted_eigen(w);
    let rank = numerical_rank(&values, ratio_tol);
    if rank != 1 {
        return Err(Error::Precondition(format!(
            "voltage extraction needs a rank-one moment matrix, found rank {rank}"
        )));
    }
    let mut point: Vec<f64> = vectors.column(0).iter().map(|v| v * values[0].sqrt()).collect();
    if point[layout.vd(layout.reference())] < 0.0 {
        point.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(layout.voltages_from_point(&point))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    ActiveBalance,
    ReactiveBalance,
    Voltage,
    Flow,
}

/// One constraint of the OPF problem evaluated at a candidate point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintCheck {
    pub label: String,
    pub kind: CheckKind,
    pub value: f64,
    /// Positive when violated, negative margin otherwise; zero on equality hits.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub checks: Vec<ConstraintCheck>,
    pub max_violation: f64,
    pub objective: f64,
    /// Active and reactive generation at each bus.
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
}

impl FeasibilityReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }

    pub fn worst(&self) -> Option<&ConstraintCheck> {
        self.checks.iter().max_by(|a, b| a.violation.total_cmp(&b.violation))
    }
}

fn bound_violation(value: f64, min: Option<f64>, max: Option<f64>) -> Option<f64> {
    match (min, max) {
        (None, None) => None,
        (Some(lo), Some(hi)) if lo == hi => Some((value - lo).abs()),
        _ => {
            let below = min.map_or(f64::NEG_INFINITY, |lo| lo - value);
            let above = max.map_or(f64::NEG_INFINITY, |hi| value - hi);
            Some(below.max(above))
        }
    }
}

/// Evaluates every OPF constraint and the generation cost at `voltages`.
pub fn verify(case: &NetworkCase, voltages: &[Complex64]) -> Result<FeasibilityReport> {
    let n = case.num_buses();
    if voltages.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: voltages.len(),
        });
    }
    let s = case.injections(voltages);
    let mut checks = Vec::new();
    let mut p_gen = Vec::with_capacity(n);
    let mut q_gen = Vec::with_capacity(n);
    for (k, bus) in case.buses.iter().enumerate() {
        let pg = s[k].re + bus.load_p;
        let qg = s[k].im + bus.load_q;
        p_gen.push(pg);
        q_gen.push(qg);
        let p = case.p_bounds(k);
        if let Some(v) = bound_violation(pg, p.min, p.max) {
            checks.push(ConstraintCheck {
                label: format!("P{}", bus.id),
                kind: CheckKind::ActiveBalance,
                value: pg,
                violation: v,
            });
        }
        let q = case.q_bounds(k);
        if let Some(v) = bound_violation(qg, q.min, q.max) {
            checks.push(ConstraintCheck {
                label: format!("Q{}", bus.id),
                kind: CheckKind::ReactiveBalance,
                value: qg,
                violation: v,
            });
        }
        let vb = case.vsq_bounds(k);
        let vsq = voltages[k].norm_sqr();
        if let Some(v) = bound_violation(vsq, vb.min, vb.max) {
            checks.push(ConstraintCheck {
                label: format!("V{}", bus.id),
                kind: CheckKind::Voltage,
                value: vsq,
                violation: v,
            });
        }
    }
    for br in &case.branches {
        let Some(s_max) = br.s_max else { continue };
        let (l, m) = case.branch_ends(br);
        let y = br.series_admittance();
        let half_sh = Complex64::new(0.0, br.b_sh / 2.0);
        let t = Complex64::from_polar(br.tau, br.shift);
        // Current into the branch at each end, transformer on the from side.
        let i_lm = (y + half_sh) / (br.tau * br.tau) * voltages[l] - y / t.conj() * voltages[m];
        let i_ml = (y + half_sh) * voltages[m] - y / t * voltages[l];
        for (label, flow) in [
            (format!("S{}-{}", br.from, br.to), voltages[l] * i_lm.conj()),
            (format!("S{}-{}", br.to, br.from), voltages[m] * i_ml.conj()),
        ] {
            checks.push(ConstraintCheck {
                label,
                kind: CheckKind::Flow,
                value: flow.norm(),
                violation: flow.norm() - s_max,
            });
        }
    }
    let mut objective = 0.0;
    for g in &case.generators {
        let k = case.bus_index(g.bus).expect("validated generator bus");
        let p = p_gen[k];
        objective += g.cost_c2 * p * p + g.cost_c1 * p + g.cost_c0;
    }
    let max_violation = checks.iter().map(|c| c.violation).fold(0.0, f64::max);
    Ok(FeasibilityReport {
        checks,
        max_violation,
        objective,
        p_gen,
        q_gen,
    })
}

/// Output of the rank test on a solved relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSolution {
    pub y: Vec<f64>,
    /// `L_y{x̂ x̂ᵀ}`
    pub moment_matrix: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub objective: f64,
    pub exact: bool,
    pub voltages: Option<Vec<Complex64>>,
    pub feasibility: Option<FeasibilityReport>,
}

/// Runs the rank test on a program solution and, when it passes, extracts and
/// verifies voltages against `case`.
pub fn certify(
    case: &NetworkCase,
    built: &BuiltRelaxation,
    x: &[f64],
    objective: f64,
    settings: &RecoverSettings,
) -> Result<RelaxationSolution> {
    let y = built.slot_values(x);
    let w = built.second_moments(&y);
    let (eigenvalues, _) = sorted_eigen(&w);
    let rank = numerical_rank(&eigenvalues, settings.rank_tol);
    let layout = VarLayout::new(case);
    let (voltages, feasibility) = if rank == 1 {
        let v = extract_voltages(&w, &layout, settings.rank_tol)?;
        let report = verify(case, &v)?;
        (Some(v), Some(report))
    } else {
        (None, None)
    };
    let exact = feasibility
        .as_ref()
        .is_some_and(|f| f.passes(settings.feasibility_tol));
    Ok(RelaxationSolution {
        y,
        moment_matrix: w,
        eigenvalues,
        rank,
        objective,
        exact,
        voltages,
        feasibility,
    })
}

/// Result of a Newton power-flow run.
#[derive(Debug, Clone, PartialEq)]
pub enum PowerFlow {
    Converged {
        voltages: Vec<Complex64>,
        iterations: usize,
        mismatch: f64,
    },
    Diverged {
        iterations: usize,
        mismatch: f64,
        reason: String,
    },
}

impl PowerFlow {
    pub fn voltages(&self) -> Option<&[Complex64]> {
        match self {
            PowerFlow::Converged { voltages, .. } => Some(voltages),
            PowerFlow::Diverged { .. } => None,
        }
    }

    pub fn is_converged(&self) -> bool {
        matches!(self, PowerFlow::Converged { .. })
    }
}

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Quantities pinned at each bus, which decide the Newton unknowns.
struct BusSpec {
    vm: Option<f64>,
    p: Option<f64>,
    q: Option<f64>,
}

fn bus_specs(case: &NetworkCase) -> Vec<BusSpec> {
    (0..case.num_buses())
        .map(|k| {
            let bus = &case.buses[k];
            BusSpec {
                vm: case.vsq_bounds(k).equal_value().map(f64::sqrt),
                p: case.p_bounds(k).equal_value().map(|p| p - bus.load_p),
                q: case.q_bounds(k).equal_value().map(|q| q - bus.load_q),
            }
        })
        .collect()
}

/// Flat start: unit magnitude (or the pinned magnitude) and zero angle.
pub fn flat_start(case: &NetworkCase) -> Vec<Complex64> {
    bus_specs(case)
        .iter()
        .map(|s| Complex64::new(s.vm.unwrap_or(1.0), 0.0))
        .collect()
}

/// Polar Newton-Raphson on the mismatch equations. The reference bus holds
/// its angle at zero; other buses solve for angle, and for magnitude unless
/// it is pinned. Active mismatch is enforced where `P` is pinned, reactive
/// where `Q` is pinned and `|V|` is free.
pub fn newton_power_flow(case: &NetworkCase, start: &[Complex64]) -> Result<PowerFlow> {
    let n = case.num_buses();
    if start.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: start.len(),
        });
    }
    let specs = bus_specs(case);
    let r = case.reference_index();
    if specs[r].vm.is_none() {
        return Err(Error::Precondition(
            "the reference bus needs a fixed voltage magnitude".into(),
        ));
    }
    let angle_vars: Vec<usize> = (0..n).filter(|&k| k != r).collect();
    let mag_vars: Vec<usize> = (0..n).filter(|&k| specs[k].vm.is_none()).collect();
    let p_eqs: Vec<usize> = (0..n).filter(|&k| k != r && specs[k].p.is_some()).collect();
    let q_eqs: Vec<usize> = (0..n)
        .filter(|&k| k != r && specs[k].vm.is_none() && specs[k].q.is_some())
        .collect();
    let nx = angle_vars.len() + mag_vars.len();
    if p_eqs.len() + q_eqs.len() != nx {
        return Err(Error::Precondition(format!(
            "pinned quantities give {} equations for {} unknowns",
            p_eqs.len() + q_eqs.len(),
            nx
        )));
    }

    let ybus = case.admittance_matrix();
    let rot = {
        let v = start[r];
        if v.norm() > 0.0 { v.conj() / v.norm() } else { Complex64::new(1.0, 0.0) }
    };
    let mut vm: Vec<f64> = (0..n).map(|k| specs[k].vm.unwrap_or((start[k] * rot).norm())).collect();
    let mut va: Vec<f64> = (0..n).map(|k| (start[k] * rot).arg()).collect();
    va[r] = 0.0;

    let voltages = |vm: &[f64], va: &[f64]| -> Vec<Complex64> {
        vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
    };
    let mismatch = |v: &[Complex64]| -> DVector<f64> {
        let s = case.injections(v);
        let mut f = DVector::zeros(nx);
        for (i, &k) in p_eqs.iter().enumerate() {
            f[i] = s[k].re - specs[k].p.unwrap();
        }
        for (i, &k) in q_eqs.iter().enumerate() {
            f[p_eqs.len() + i] = s[k].im - specs[k].q.unwrap();
        }
        f
    };

    let mut v = voltages(&vm, &va);
    let mut f = mismatch(&v);
    let mut norm = f.amax();
    for iter in 0..=NEWTON_MAX_ITER {
        if !norm.is_finite() {
            return Ok(PowerFlow::Diverged {
                iterations: iter,
                mismatch: norm,
                reason: "mismatch is not finite".into(),
            });
        }
        if norm < NEWTON_TOL {
            return Ok(PowerFlow::Converged {
                voltages: v,
                iterations: iter,
                mismatch: norm,
            });
        }
        if iter == NEWTON_MAX_ITER {
            break;
        }
        // dS/dθ = j·diag(V)·conj(I − Y·diag(V)), dS/d|V| = diag(V)·conj(Y·diag(V/|V|)) + diag(conj(I)·V/|V|)
        let vv = DVector::from_vec(v.clone());
        let current = &ybus * &vv;
        let jac = DMatrix::from_fn(nx, nx, |row, col| {
            let (k, reactive) = if row < p_eqs.len() {
                (p_eqs[row], false)
            } else {
                (q_eqs[row - p_eqs.len()], true)
            };
            let ds = if col < angle_vars.len() {
                let i = angle_vars[col];
                let mut d = -v[k] * (ybus[(k, i)] * v[i]).conj();
                if i == k {
                    d += v[k] * current[k].conj();
                }
                d * Complex64::i()
            } else {
                let i = mag_vars[col - angle_vars.len()];
                let unit = v[i] / vm[i];
                let mut d = v[k] * (ybus[(k, i)] * unit).conj();
                if i == k {
                    d += current[k].conj() * unit;
                }
                d
            };
            if reactive { ds.im } else { ds.re }
        });
        let Some(dx) = jac.lu().solve(&(-&f)) else {
            return Ok(PowerFlow::Diverged {
                iterations: iter,
                mismatch: norm,
                reason: "singular Jacobian".into(),
            });
        };
        for (c, &k) in angle_vars.iter().enumerate() {
            va[k] += dx[c];
        }
        for (c, &k) in mag_vars.iter().enumerate() {
            vm[k] += dx[angle_vars.len() + c];
        }
        v = voltages(&vm, &va);
        f = mismatch(&v);
        norm = f.amax();
    }
    Ok(PowerFlow::Diverged {
        iterations: NEWTON_MAX_ITER,
        mismatch: norm,
        reason: format!("no convergence in {NEWTON_MAX_ITER} iterations"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::network::{Branch, Bus, Generator};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn rank_counts() {
        assert_eq!(numerical_rank(&[5.0, 1e-9, 0.0], 1e-5), 1);
        assert_eq!(numerical_rank(&[5.0, 4.0, 0.0], 1e-5), 2);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-5), 0);
        assert_eq!(numerical_rank(&[], 1e-5), 0);
    }

    #[test]
    fn synthetic_extraction() {
        // Two buses, reference first: variables (V_d1, V_d2, V_q2).
        let layout = VarLayout::new(&cases::two_bus());
        let v = DVector::from_vec(vec![1.0, 0.5, -0.2]);
        let w = &v * v.transpose();
        let got = extract_voltages(&w, &layout, 1e-5).unwrap();
        assert!((got[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((got[1] - c(0.5, -0.2)).norm() < 1e-12);
        let w2 = &w + DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.5, 0.5]));
        assert!(matches!(extract_voltages(&w2, &layout, 1e-5), Err(Error::Precondition(_))));
    }

    #[test]
    fn flat_voltages_violate_magnitude() {
        let case = cases::two_bus();
        let report = verify(&case, &[c(1.0, 0.0), c(1.0, 0.0)]).unwrap();
        let v2 = report.checks.iter().find(|c| c.label == "V2").unwrap();
        assert!((v2.violation - (1.3f64.powi(2) - 1.0)).abs() < 1e-12);
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn table_voltages_two_bus() {
        let case = cases::two_bus();
        let report = verify(&case, &[c(1.0, 0.0), c(1.049, -0.767)]).unwrap();
        assert!(report.max_violation < 2e-2, "{report:?}");
        assert!((report.objective - 5.68).abs() < 2e-2);
    }

    #[test]
    fn newton_flat_start_matches_table() {
        for case in [cases::two_bus(), cases::three_bus()] {
            let pf = newton_power_flow(&case, &flat_start(&case)).unwrap();
            let PowerFlow::Converged { voltages, .. } = &pf else { panic!("{pf:?}") };
            assert!((voltages[1] - c(1.049, -0.767)).norm() < 2e-2);
            if voltages.len() == 3 {
                assert!((voltages[2] - c(0.849, -0.586)).norm() < 2e-2);
            }
            let report = verify(&case, voltages).unwrap();
            assert!(report.max_violation < 1e-8);
            assert!((report.objective - 5.68).abs() < 2e-2);
        }
    }

    #[test]
    fn newton_low_voltage_solution() {
        let case = cases::two_bus();
        let high = newton_power_flow(&case, &flat_start(&case)).unwrap();
        let low = newton_power_flow(&case, &[c(1.0, 0.0), Complex64::from_polar(1.3, -2.0)]).unwrap();
        let (h, l) = (high.voltages().unwrap(), low.voltages().unwrap());
        assert!((h[1] - l[1]).norm() > 0.1);
        let ph = verify(&case, h).unwrap().p_gen[0];
        let pl = verify(&case, l).unwrap().p_gen[0];
        assert!(pl > ph + 1e-3, "{pl} vs {ph}");
    }

    #[test]
    fn newton_trivial_network() {
        let case = NetworkCase {
            name: "flat".into(),
            buses: (1..=3)
                .map(|id| Bus {
                    id,
                    load_p: 0.0,
                    load_q: 0.0,
                    v_min: Some(1.0),
                    v_max: Some(1.0),
                    is_reference: id == 1,
                })
                .collect(),
            generators: vec![],
            branches: vec![Branch::new(1, 2, 0.1, 0.2), Branch::new(2, 3, 0.1, 0.2)],
        };
        // No generators: every bus is pinned at P = Q = 0 and |V| = 1.
        let pf = newton_power_flow(&case, &flat_start(&case)).unwrap();
        assert!(matches!(pf, PowerFlow::Converged { iterations: 0, .. }));
    }

    #[test]
    fn newton_reports_bad_structure() {
        let mut case = cases::two_bus();
        case.generators[1] = Generator {
            p_min: None,
            p_max: None,
            ..case.generators[1].clone()
        };
        assert!(matches!(
            newton_power_flow(&case, &flat_start(&case)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn newton_diverges_gracefully() {
        let mut case = cases::two_bus();
        case.generators[1].p_min = Some(-50.0);
        case.generators[1].p_max = Some(-50.0);
        let pf = newton_power_flow(&case, &flat_start(&case)).unwrap();
        assert!(!pf.is_converged());
    }

    #[test]
    fn flow_checks_use_branch_limits() {
        let mut case = cases::two_bus();
        case.branches[0].s_max = Some(1.0);
        let pf = newton_power_flow(&case, &flat_start(&case)).unwrap();
        let report = verify(&case, pf.voltages().unwrap()).unwrap();
        let flows: Vec<_> = report.checks.iter().filter(|c| c.kind == CheckKind::Flow).collect();
        assert_eq!(flows.len(), 2);
        let s = case.injections(pf.voltages().unwrap());
        assert!((flows[0].value - s[0].norm()).abs() < 1e-9);
        assert!((flows[1].value - s[1].norm()).abs() < 1e-9);
        assert!(report.max_violation > 1.0);
    }

    proptest! {
        #[test]
        fn lift_then_extract_round_trips(vd in prop::collection::vec(0.1f64..2.0, 1), rest in prop::collection::vec(-2.0f64..2.0, 4)) {
            let case = cases::three_bus();
            let layout = VarLayout::new(&case);
            let point: Vec<f64> = vd.iter().chain(&rest).copied().collect();
            let p = DVector::from_vec(point.clone());
            let w = &p * p.transpose();
            let v = extract_voltages(&w, &layout, 1e-5).unwrap();
            let expected = layout.voltages_from_point(&point);
            for (a, b) in v.iter().zip(&expected) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }
    }
}
