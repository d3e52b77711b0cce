//! Primal-dual interior-point method on the homogeneous self-dual embedding
//! with Nesterov–Todd scaling and Mehrotra correction.
//!
//! Equalities are eliminated up front through an orthonormal nullspace basis,
//! so the iteration itself works on
//!
//! ```text
//! minimize cᵀx  subject to  Gx + s = h,  s ∈ K
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};

use super::cones::{jacobi_svd, ConeSet, NtScaling};
use super::{ConeKind, ConicBackend, ConicProgram, ConicSolution, SolveStatus, SolverSettings};
use crate::Result;

const STEP_FRACTION: f64 = 0.99;

/// The in-tree conic solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct InteriorPoint;

impl ConicBackend for InteriorPoint {
    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution> {
        program.validate()?;
        settings.validate()?;
        Ok(solve_program(program, settings))
    }
}

struct Standard {
    c: DVector<f64>,
    c0: f64,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    cones: ConeSet,
}

fn standard_form(p: &ConicProgram) -> Standard {
    let n = p.num_vars();
    let mut c = DVector::zeros(n);
    for &(v, k) in &p.objective.terms {
        c[v] += k;
    }
    let m = p.equalities.len();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for (i, (e, _)) in p.equalities.iter().enumerate() {
        for &(v, k) in &e.terms {
            a[(i, v)] += k;
        }
        b[i] = -e.constant;
    }

    // Rows as (coefficients, constant) of s = h − Gx, i.e. G = −coef, h = constant.
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut cones = ConeSet::default();
    let nonneg: Vec<_> = p
        .cones
        .iter()
        .filter(|c| c.kind == ConeKind::NonNeg)
        .flat_map(|c| c.rows.iter())
        .collect();
    cones.push_lp(nonneg.len());
    for r in nonneg {
        rows.push((r.terms.clone(), r.constant));
    }
    for cone in &p.cones {
        match cone.kind {
            ConeKind::NonNeg => {}
            ConeKind::SecondOrder => {
                cones.push_soc(cone.rows.len());
                for r in &cone.rows {
                    rows.push((r.terms.clone(), r.constant));
                }
            }
            ConeKind::RotatedSecondOrder => {
                let (u, v) = (&cone.rows[0], &cone.rows[1]);
                cones.push_soc(cone.rows.len());
                let sum = u.plus(v);
                let diff = u.minus(v);
                rows.push((sum.terms, sum.constant));
                rows.push((diff.terms, diff.constant));
                for w in &cone.rows[2..] {
                    let w2 = w.scale(2.0);
                    rows.push((w2.terms, w2.constant));
                }
            }
            ConeKind::Psd { dim } => {
                if dim == 0 {
                    continue;
                }
                cones.push_psd(dim);
                for j in 0..dim {
                    for i in j..dim {
                        let r = &cone.rows[super::packed_index(dim, i, j)];
                        let f = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                        let r = r.scale(f);
                        rows.push((r.terms, r.constant));
                    }
                }
            }
        }
    }
    let mut g = DMatrix::zeros(rows.len(), n);
    let mut h = DVector::zeros(rows.len());
    for (i, (terms, k)) in rows.iter().enumerate() {
        for &(v, coef) in terms {
            g[(i, v)] -= coef;
        }
        h[i] = *k;
    }
    Standard {
        c,
        c0: p.objective.constant,
        a,
        b,
        g,
        h,
        cones,
    }
}

/// Orthonormal bases of the row space and the nullspace of a matrix, with a
/// minimum-norm solver for systems in it.
pub(crate) struct RowSpace {
    pub range: DMatrix<f64>,
    pub null: DMatrix<f64>,
    /// Left singular vectors and singular values matching `range`.
    left: DMatrix<f64>,
    sigma: Vec<f64>,
}

impl RowSpace {
    pub fn new(m: &DMatrix<f64>, rel_tol: f64) -> Self {
        let n = m.ncols();
        let (u, sv, v) = jacobi_svd(m);
        let smax = sv.max();
        let keep = |k: &usize| smax > 0.0 && sv[*k] > rel_tol * smax;
        let range = columns(n, (0..n).filter(keep).map(|k| v.column(k).into_owned()));
        let null = columns(n, (0..n).filter(|k| !keep(k)).map(|k| v.column(k).into_owned()));
        let left = columns(m.nrows(), (0..n).filter(keep).map(|k| u.column(k).into_owned()));
        let sigma = (0..n).filter(keep).map(|k| sv[k]).collect();
        RowSpace { range, null, left, sigma }
    }

    /// Minimum-norm least-squares solution of `m x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut coef = self.left.transpose() * b;
        for (c, s) in coef.iter_mut().zip(&self.sigma) {
            *c /= s;
        }
        &self.range * coef
    }
}

fn columns(rows: usize, cols: impl Iterator<Item = DVector<f64>>) -> DMatrix<f64> {
    let cols: Vec<_> = cols.collect();
    if cols.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn outcome(
    status: SolveStatus,
    x: Vec<f64>,
    objective: f64,
    iterations: usize,
    message: impl Into<String>,
) -> ConicSolution {
    ConicSolution {
        x,
        objective,
        status,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
        iterations,
        message: message.into(),
    }
}

fn solve_program(p: &ConicProgram, settings: &SolverSettings) -> ConicSolution {
    let st = standard_form(p);
    let n = p.num_vars();
    let tol = settings.tolerance;

    // Eliminate equalities: x = x0 + N z.
    let (x0, nmat) = if st.a.nrows() == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let rs = RowSpace::new(&st.a, 1e-10);
        let x0 = rs.solve(&st.b);
        let null = rs.null;
        let resid = (&st.a * &x0 - &st.b).norm();
        if resid > 1e-8 * (1.0 + st.b.norm()) {
            return outcome(
                SolveStatus::Infeasible,
                x0.as_slice().to_vec(),
                f64::NAN,
                0,
                format!("equality constraints inconsistent (residual {resid:.3e})"),
            );
        }
        (x0, null)
    };
    let c0 = st.c0 + st.c.dot(&x0);
    let gz = &st.g * &nmat;
    let hz = &st.h - &st.g * &x0;
    let cz = nmat.transpose() * &st.c;

    // Drop directions invisible to the cones.
    let (range, null) = if gz.nrows() > 0 && gz.ncols() > 0 {
        let rs = RowSpace::new(&gz, 1e-11);
        (rs.range, rs.null)
    } else {
        (DMatrix::zeros(gz.ncols(), 0), DMatrix::identity(gz.ncols(), gz.ncols()))
    };
    if null.ncols() > 0 {
        let leak = (null.transpose() * &cz).norm();
        if leak > 1e-9 * (1.0 + cz.norm()) {
            return outcome(
                SolveStatus::Unbounded,
                x0.as_slice().to_vec(),
                f64::NEG_INFINITY,
                0,
                "objective decreases along a direction free of cone constraints",
            );
        }
    }
    let lift = &nmat * &range;
    let mut g = &gz * &range;
    let mut c = range.transpose() * &cz;
    let h = hz;
    if g.ncols() == 0 {
        // Only the fixed point remains; check it against the cones.
        let x = x0.as_slice().to_vec();
        let check = p.check_point(&x);
        let status = if check.max_cone_violation <= tol {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        };
        let mut sol = outcome(status, x, c0, 0, "no free variables");
        sol.primal_residual = check.max_violation();
        sol.dual_residual = 0.0;
        sol.gap = 0.0;
        return sol;
    }

    let mut colscale = DVector::from_element(g.ncols(), 1.0);
    if settings.scaling {
        for j in 0..g.ncols() {
            let nj = g.column(j).norm();
            if nj > 0.0 {
                colscale[j] = 1.0 / nj;
            }
        }
        for j in 0..g.ncols() {
            let f = colscale[j];
            g.column_mut(j).scale_mut(f);
            c[j] *= f;
        }
    }

    // Large objective coefficients only inflate the dual; scale them down.
    let cscale = 1.0 / c.amax().max(1.0);
    c *= cscale;
    let result = hsd(&c, &g, &h, &st.cones, c0 * cscale, settings);
    let w = result.x.component_mul(&colscale);
    let x = &x0 + &lift * w;
    ConicSolution {
        objective: p.objective.eval(x.as_slice()),
        x: x.as_slice().to_vec(),
        status: result.status,
        primal_residual: result.pres,
        dual_residual: result.dres,
        gap: result.gap,
        iterations: result.iterations,
        message: result.message,
    }
}

struct HsdResult {
    x: DVector<f64>,
    status: SolveStatus,
    pres: f64,
    dres: f64,
    gap: f64,
    iterations: usize,
    message: String,
}

/// Factorization of `Gsᵀ Gs` for the current scaling.
struct Kkt<'a> {
    gs: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    scaling: &'a NtScaling,
}

impl<'a> Kkt<'a> {
    fn new(g: &DMatrix<f64>, scaling: &'a NtScaling) -> Option<Self> {
        let gs = scaling.winv_t_matrix(g);
        let mut m = gs.transpose() * &gs;
        let chol = match Cholesky::new(m.clone()) {
            Some(c) => c,
            None => {
                let reg = 1e-14 * m.diagonal().max().max(1.0);
                for i in 0..m.nrows() {
                    m[(i, i)] += reg;
                }
                Cholesky::new(m)?
            }
        };
        Some(Kkt { gs, chol, scaling })
    }

    /// Solves `Gᵀ dz = bx`, `G dx − WᵀW dz = bz`; returns `dx` and `W dz`.
    fn solve(&self, bx: &DVector<f64>, bz: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let wbz = self.scaling.winv_t(bz);
        let rhs = bx + self.gs.transpose() * &wbz;
        let mut dx = self.chol.solve(&rhs);
        // One round of iterative refinement.
        let resid = &rhs - self.gs.transpose() * (&self.gs * &dx);
        dx += self.chol.solve(&resid);
        let wdz = &self.gs * &dx - wbz;
        (dx, wdz)
    }
}

fn hsd(
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    cones: &ConeSet,
    c0: f64,
    settings: &SolverSettings,
) -> HsdResult {
    let tol = settings.tolerance;
    let nu = cones.degree() as f64;
    let e = cones.identity();
    let resx0 = c.norm().max(1.0);
    let resz0 = h.norm().max(1.0);

    let fail = |x: DVector<f64>, it: usize, msg: String| HsdResult {
        x,
        status: SolveStatus::NumericalFailure,
        pres: f64::NAN,
        dres: f64::NAN,
        gap: f64::NAN,
        iterations: it,
        message: msg,
    };

    // Starting point from least-squares problems with identity scaling.
    let gtg = g.transpose() * g;
    let Some(chol) = Cholesky::new(gtg) else {
        return fail(DVector::zeros(g.ncols()), 0, "constraint matrix rank deficient".into());
    };
    let mut x = chol.solve(&(g.transpose() * h));
    let mut s = h - g * &x;
    let mut z = -(g * chol.solve(c));
    for v in [&mut s, &mut z] {
        let shift = -cones.min_eig(v);
        if shift >= -1e-8 * v.norm().max(1.0) {
            *v += &e * (1.0 + shift);
        }
    }
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut last = (f64::NAN, f64::NAN, f64::NAN);
    for it in 0..=settings.max_iterations {
        let rx = g.transpose() * &z + c * tau;
        let rz = g * &x + &s - h * tau;
        let cx = c.dot(&x);
        let hz = h.dot(&z);
        let rt = kappa + cx + hz;
        let sz = s.dot(&z);
        let mu = (sz + tau * kappa) / (nu + 1.0);

        let pcost = cx / tau + c0;
        let pres = rz.norm() / tau / resz0;
        let dres = rx.norm() / tau / resx0;
        let gap = sz / (tau * tau) / (1.0 + pcost.abs());
        last = (pres, dres, gap);
        if settings.verbosity >= 2 {
            eprintln!(
                "{it:3} pcost {pcost:+.8e} pres {pres:.2e} dres {dres:.2e} gap {gap:.2e} tau {tau:.2e} kappa {kappa:.2e}"
            );
        }
        if pres <= tol && dres <= tol && gap <= tol {
            return HsdResult {
                x: &x / tau,
                status: SolveStatus::Optimal,
                pres,
                dres,
                gap,
                iterations: it,
                message: "converged".into(),
            };
        }
        if hz < 0.0 {
            let pinf = (g.transpose() * &z).norm() / resx0 / (-hz);
            if pinf <= tol {
                return HsdResult {
                    x: &x / tau,
                    status: SolveStatus::Infeasible,
                    pres,
                    dres,
                    gap,
                    iterations: it,
                    message: format!("primal infeasibility certificate (residual {pinf:.2e})"),
                };
            }
        }
        if cx < 0.0 {
            let dinf = (g * &x + &s).norm() / resz0 / (-cx);
            if dinf <= tol {
                return HsdResult {
                    x: &x / tau,
                    status: SolveStatus::Unbounded,
                    pres,
                    dres,
                    gap,
                    iterations: it,
                    message: format!("dual infeasibility certificate (residual {dinf:.2e})"),
                };
            }
        }
        if it == settings.max_iterations {
            break;
        }

        let scaling = match NtScaling::new(cones, &s, &z) {
            Ok(w) => w,
            Err(err) => return fail(&x / tau, it, err.to_string()),
        };
        let Some(kkt) = Kkt::new(g, &scaling) else {
            return fail(&x / tau, it, "reduced Newton system is singular".into());
        };
        let lambda = scaling.lambda.clone();
        let lambda_sq = cones.product(&lambda, &lambda);
        let (x1, wz1) = kkt.solve(&(-c), h);
        let z1 = scaling.winv(&wz1);
        let denom = c.dot(&x1) + h.dot(&z1) - kappa / tau;

        let mut affine: Option<(DVector<f64>, DVector<f64>, f64, f64)> = None;
        let mut sigma = 0.0;
        let mut step = None;
        for pass in 0..2 {
            let eta = if pass == 0 { 0.0 } else { sigma };
            let mut rs = -&lambda_sq;
            let mut rk = -tau * kappa;
            if let Some((dsa, dza, dta, dka)) = &affine {
                rs -= cones.product(dsa, dza);
                rs += &e * (sigma * mu);
                rk += -dta * dka + sigma * mu;
            }
            let bx = -&rx * (1.0 - eta);
            let bz = -&rz * (1.0 - eta);
            let bt = -rt * (1.0 - eta);
            let ls = scaling.lambda_solve(&rs);
            // G dx − WᵀW dz − h dτ = bz − Wᵀ(λ⧵rs)
            let bz2 = &bz - scaling.wt(&ls);
            let (x2, wz2) = kkt.solve(&bx, &bz2);
            let z2 = scaling.winv(&wz2);
            let dtau = (bt - c.dot(&x2) - h.dot(&z2) - rk / tau) / denom;
            let dx = &x2 + &x1 * dtau;
            let wdz = &wz2 + &wz1 * dtau;
            let dkappa = (rk - kappa * dtau) / tau;
            let dsl = &ls - &wdz;

            let mut alpha = scaling.max_step(&dsl, f64::INFINITY).min(scaling.max_step(&wdz, f64::INFINITY));
            if dtau < 0.0 {
                alpha = alpha.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                alpha = alpha.min(-kappa / dkappa);
            }
            if !alpha.is_finite() && alpha > 0.0 {
                alpha = f64::INFINITY;
            }
            if pass == 0 {
                let a = alpha.min(1.0);
                sigma = (1.0 - a).powi(3);
                affine = Some((dsl, wdz, dtau, dkappa));
            } else {
                step = Some((dx, dsl, wdz, dtau, dkappa, (STEP_FRACTION * alpha).min(1.0)));
            }
        }
        let (dx, dsl, wdz, dtau, dkappa, alpha) = step.expect("combined step");
        if !(alpha > 1e-14) || dx.iter().any(|v| !v.is_finite()) {
            return fail(&x / tau, it, format!("step length collapsed ({alpha:.2e})"));
        }
        let ds = scaling.wt(&dsl);
        let dz = scaling.winv(&wdz);
        x += &dx * alpha;
        s += ds * alpha;
        z += dz * alpha;
        tau += dtau * alpha;
        kappa += dkappa * alpha;
    }
    HsdResult {
        x: &x / tau,
        status: SolveStatus::MaxIterations,
        pres: last.0,
        dres: last.1,
        gap: last.2,
        iterations: settings.max_iterations,
        message: "iteration limit reached".into(),
    }
}
