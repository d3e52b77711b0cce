//! Build, solve, certify and compare against the power-flow oracle.

use std::time::Duration;

use num_complex::Complex64;
use serde_json::{json, Value};

use crate::conic::{self, ConicSolution, SolveStatus, SolverSettings};
use crate::hierarchy::{build, BuiltRelaxation, InjectionTarget, Relaxation, RelaxOptions};
use crate::network::{Generator, NetworkCase};
use crate::recover::{certify, flat_start, newton_power_flow, verify, FeasibilityReport, RecoverSettings, RelaxationSolution};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveOptions {
    pub solver: SolverSettings,
    pub recover: RecoverSettings,
    pub relax: RelaxOptions,
}

/// The Newton solution from a flat start and how the relaxation compares to it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComparison {
    pub voltages: Vec<Complex64>,
    pub report: FeasibilityReport,
    /// `(oracle objective − bound) / |oracle objective|`
    pub relative_gap: f64,
    /// `max_k |V_k(relaxation) − V_k(oracle)|`, when voltages were extracted.
    pub max_voltage_difference: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub case_name: String,
    pub relaxation: Relaxation,
    pub num_vars: usize,
    pub num_equalities: usize,
    pub num_cones: usize,
    pub conic: ConicSolution,
    pub solution: RelaxationSolution,
    pub oracle: Option<OracleComparison>,
    pub elapsed: Duration,
}

/// Copy of `case` with the active-power bounds of `buses` removed. Buses
/// without a generator get one with only the reactive bounds pinned to zero.
pub fn release_injections(case: &NetworkCase, buses: &[u32]) -> NetworkCase {
    let mut out = case.clone();
    for &id in buses {
        match out.generators.iter_mut().find(|g| g.bus == id) {
            Some(g) => {
                g.p_min = None;
                g.p_max = None;
            }
            None => {
                let mut g = Generator::zero_injection(id);
                g.p_min = None;
                g.p_max = None;
                out.generators.push(g);
            }
        }
    }
    out
}

/// Solves an already built relaxation and certifies the result against `case`.
pub fn solve_built(
    case: &NetworkCase,
    built: &BuiltRelaxation,
    options: &SolveOptions,
) -> Result<(ConicSolution, RelaxationSolution)> {
    let sol = conic::solve(&built.program, &options.solver)?;
    let mut cert = certify(case, built, &sol.x, sol.objective, &options.recover)?;
    if sol.status != SolveStatus::Optimal {
        cert.exact = false;
    }
    Ok((sol, cert))
}

fn targeted_buses(targets: &[InjectionTarget]) -> Vec<u32> {
    targets.iter().map(|t| t.bus).collect()
}

// The wasm32 target has no clock; reports show zero elapsed time there.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> Duration {
    let start = std::time::Instant::now();
    move || start.elapsed()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> Duration {
    || Duration::ZERO
}

/// Builds and solves `relaxation` for `case`, then compares with the Newton
/// oracle when the case has the structure the oracle needs.
pub fn solve_case(case: &NetworkCase, relaxation: Relaxation, options: &SolveOptions) -> Result<SolveReport> {
    case.validate()?;
    let elapsed = stopwatch();
    let built = build(case, relaxation, &options.relax)?;
    let check_case = release_injections(case, &targeted_buses(&options.relax.targets));
    let (conic, solution) = solve_built(&check_case, &built, options)?;

    let oracle = if options.relax.targets.is_empty() {
        match newton_power_flow(case, &flat_start(case)) {
            Ok(pf) => match pf.voltages() {
                Some(v) => {
                    let report = verify(case, v)?;
                    let relative_gap = (report.objective - conic.objective) / report.objective.abs().max(1e-12);
                    let max_voltage_difference = solution.voltages.as_ref().map(|ext| {
                        ext.iter().zip(v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
                    });
                    Some(OracleComparison {
                        voltages: v.to_vec(),
                        report,
                        relative_gap,
                        max_voltage_difference,
                    })
                }
                None => None,
            },
            Err(_) => None,
        }
    } else {
        None
    };

    Ok(SolveReport {
        case_name: case.name.clone(),
        relaxation,
        num_vars: built.program.num_vars(),
        num_equalities: built.program.equalities.len(),
        num_cones: built.program.cones.len(),
        conic,
        solution,
        oracle,
        elapsed: elapsed(),
    })
}

fn complex_json(v: &[Complex64]) -> Value {
    Value::Array(v.iter().map(|c| json!({ "re": c.re, "im": c.im })).collect())
}

impl SolveReport {
    pub fn to_json(&self) -> Value {
        let s = &self.solution;
        json!({
            "case": self.case_name,
            "relaxation": self.relaxation.to_string(),
            "program": {
                "variables": self.num_vars,
                "equalities": self.num_equalities,
                "cones": self.num_cones,
            },
            "solver": {
                "status": self.conic.status,
                "iterations": self.conic.iterations,
                "primal_residual": self.conic.primal_residual,
                "dual_residual": self.conic.dual_residual,
                "gap": self.conic.gap,
                "message": self.conic.message,
            },
            "objective_bound": s.objective,
            "eigenvalues": s.eigenvalues,
            "rank": s.rank,
            "exact": s.exact,
            "voltages": s.voltages.as_deref().map(complex_json),
            "feasibility": s.feasibility,
            "oracle": self.oracle.as_ref().map(|o| json!({
                "voltages": complex_json(&o.voltages),
                "objective": o.report.objective,
                "relative_gap": o.relative_gap,
                "max_voltage_difference": o.max_voltage_difference,
            })),
            "elapsed_seconds": self.elapsed.as_secs_f64(),
        })
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let s = &self.solution;
        let mut out = format!(
            "{} {}: {} after {} iterations\n  bound {:.6}  rank {}  exact {}\n",
            self.case_name, self.relaxation, self.conic.status, self.conic.iterations, s.objective, s.rank, s.exact
        );
        if let Some(v) = &s.voltages {
            for (k, c) in v.iter().enumerate() {
                out += &format!("  V{} = {:.4} {} j{:.4}\n", k + 1, c.re, if c.im < 0.0 { '-' } else { '+' }, c.im.abs());
            }
        }
        if let Some(f) = &s.feasibility {
            out += &format!("  max violation {:.3e}  objective {:.6}\n", f.max_violation, f.objective);
        }
        if let Some(o) = &self.oracle {
            out += &format!(
                "  oracle objective {:.6}  gap {:.2}%",
                o.report.objective,
                100.0 * o.relative_gap
            );
            if let Some(d) = o.max_voltage_difference {
                out += &format!("  |ΔV| {d:.2e}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn two_bus_first_order_is_exact() {
        let r = solve_case(&cases::two_bus(), Relaxation::Sdp, &Default::default()).unwrap();
        assert!(r.solution.exact);
        assert!((r.solution.objective - 5.68).abs() < 0.02);
        let o = r.oracle.unwrap();
        assert!(o.relative_gap.abs() < 1e-6);
        assert!(o.max_voltage_difference.unwrap() < 1e-4);
    }

    #[test]
    fn three_bus_first_order_has_gap() {
        let r = solve_case(&cases::three_bus(), Relaxation::Sdp, &Default::default()).unwrap();
        assert!(!r.solution.exact);
        assert!(r.solution.rank > 1);
        assert!(r.solution.voltages.is_none());
        let gap = r.oracle.unwrap().relative_gap;
        assert!((gap - 0.22).abs() < 0.02, "{gap}");
    }

    #[test]
    fn release_adds_generator() {
        let case = cases::two_bus();
        let mut no_gen = case.clone();
        no_gen.generators.pop();
        let r = release_injections(&no_gen, &[2]);
        let k = r.bus_index(2).unwrap();
        assert!(r.p_bounds(k).is_free());
        assert_eq!(r.q_bounds(k).equal_value(), Some(0.0));
        let r = release_injections(&case, &[2]);
        assert!(r.p_bounds(k).is_free());
        assert!(r.q_bounds(k).is_free());
    }

    #[test]
    fn report_json_has_fields() {
        let r = solve_case(&cases::two_bus(), Relaxation::Sdp, &Default::default()).unwrap();
        let j = r.to_json();
        assert_eq!(j["relaxation"], "sdp");
        assert_eq!(j["exact"], true);
        assert_eq!(j["voltages"].as_array().unwrap().len(), 2);
        assert!(r.summary().contains("exact true"));
    }
}
