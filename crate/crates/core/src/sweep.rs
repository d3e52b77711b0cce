//! Grids of active-power targets solved as tracking problems.
//!
//! At each grid point the swept buses lose their active-power bounds and the
//! objective gains `w·Σ (L_y{f_Pk} − target_k)²`. The achieved injections,
//! the rank and the exactness flag trace out the feasible space of the
//! relaxation.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::conic::{SolveStatus, SolverSettings};
use crate::hierarchy::{build, InjectionTarget, Relaxation, RelaxOptions};
use crate::network::NetworkCase;
use crate::pipeline::{release_injections, solve_built, SolveOptions};
use crate::poly::build_opf_polynomials;
use crate::recover::RecoverSettings;
use crate::{Error, Result};

/// Evenly spaced targets `lo, lo + step, …, hi` for the injection at `bus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub bus: u32,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl AxisRange {
    pub fn new(bus: u32, lo: f64, hi: f64, step: f64) -> Result<Self> {
        let r = AxisRange { bus, lo, hi, step };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.step.is_finite()) {
            return Err(Error::Validation("sweep range must be finite".into()));
        }
        if self.step <= 0.0 {
            return Err(Error::Validation("sweep step must be positive".into()));
        }
        if self.hi < self.lo {
            return Err(Error::Validation(format!("sweep range {}:{} is empty", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

impl FromStr for AxisRange {
    type Err = Error;

    /// `p<bus>=lo:hi:step`, or `p<bus>=value` for a single point.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Validation(format!("bad sweep axis `{s}`: {why}"));
        let (name, range) = s.trim().split_once('=').ok_or_else(|| bad("expected p<bus>=lo:hi:step"))?;
        let bus: u32 = name
            .strip_prefix(['p', 'P'])
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| bad("axis name must be p<bus id>"))?;
        let nums: Vec<f64> = range
            .split(':')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("numbers expected"))?;
        match nums[..] {
            [v] => AxisRange::new(bus, v, v, 1.0),
            [lo, hi, step] => AxisRange::new(bus, lo, hi, step),
            _ => Err(bad("expected lo:hi:step")),
        }
    }
}

/// Parses a comma-separated list of axes.
pub fn parse_axes(s: &str) -> Result<Vec<AxisRange>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axes: Vec<AxisRange>,
    pub relaxation: Relaxation,
    pub penalty: f64,
    pub solver: SolverSettings,
    pub recover: RecoverSettings,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl SweepSpec {
    /// The 49 × 33 grid over `P2 ∈ [−6, 6]`, `P3 ∈ [−4, 4]` with step 0.25.
    pub fn default_grid(relaxation: Relaxation) -> Self {
        SweepSpec {
            axes: vec![
                AxisRange { bus: 2, lo: -6.0, hi: 6.0, step: 0.25 },
                AxisRange { bus: 3, lo: -4.0, hi: 4.0, step: 0.25 },
            ],
            relaxation,
            penalty: 1e3,
            solver: SolverSettings::default(),
            recover: RecoverSettings::default(),
            jobs: 0,
        }
    }

    pub fn validate(&self, case: &NetworkCase) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Validation("sweep needs at least one axis".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            a.validate()?;
            if case.bus_index(a.bus).is_none() {
                return Err(Error::Validation(format!("sweep bus {} does not exist", a.bus)));
            }
            if self.axes[..i].iter().any(|b| b.bus == a.bus) {
                return Err(Error::Validation(format!("bus {} swept twice", a.bus)));
            }
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::Validation("penalty must be positive".into()));
        }
        self.relaxation.validate()?;
        self.solver.validate()
    }

    /// Grid points in row-major order, the last axis varying fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut points = vec![Vec::new()];
        for axis in &self.axes {
            let values = axis.values();
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub targets: Vec<f64>,
    /// `L_y{f_Pk}` at the optimum, one per bus.
    pub injections: Vec<f64>,
    pub objective: f64,
    pub rank: usize,
    pub exact: bool,
    pub status: SolveStatus,
}

impl SweepRecord {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Solves one grid point.
pub fn solve_point(case: &NetworkCase, spec: &SweepSpec, targets: &[f64]) -> Result<SweepRecord> {
    let targets_list: Vec<InjectionTarget> = spec
        .axes
        .iter()
        .zip(targets)
        .map(|(a, &p)| InjectionTarget { bus: a.bus, p })
        .collect();
    let relax = RelaxOptions {
        targets: targets_list,
        penalty: spec.penalty,
        ..RelaxOptions::default()
    };
    let built = build(case, spec.relaxation, &relax)?;
    let released = release_injections(case, &spec.axes.iter().map(|a| a.bus).collect::<Vec<_>>());
    let options = SolveOptions {
        solver: spec.solver.clone(),
        recover: spec.recover,
        relax,
    };
    let (sol, cert) = solve_built(&released, &built, &options)?;
    let polys = build_opf_polynomials(case)?;
    let injections = polys
        .f_p
        .iter()
        .map(|p| built.lifted_value(p, &sol.x))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepRecord {
        targets: targets.to_vec(),
        injections,
        objective: sol.objective,
        rank: cert.rank,
        exact: cert.exact,
        status: sol.status,
    })
}

fn solve_or_record(case: &NetworkCase, spec: &SweepSpec, targets: &[f64]) -> SweepRecord {
    solve_point(case, spec, targets).unwrap_or_else(|_| SweepRecord {
        targets: targets.to_vec(),
        injections: vec![f64::NAN; case.num_buses()],
        objective: f64::NAN,
        rank: 0,
        exact: false,
        status: SolveStatus::NumericalFailure,
    })
}

/// Solves every grid point. Failures are recorded per point; results come
/// back in grid order.
pub fn run_sweep(case: &NetworkCase, spec: &SweepSpec) -> Result<Vec<SweepRecord>> {
    case.validate()?;
    spec.validate(case)?;
    let points = spec.points();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let work = || -> Vec<SweepRecord> {
            points.par_iter().map(|p| solve_or_record(case, spec, p)).collect()
        };
        if spec.jobs == 0 {
            Ok(work())
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(spec.jobs)
                .build()
                .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(work))
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(points.iter().map(|p| solve_or_record(case, spec, p)).collect())
    }
}

fn num(v: f64) -> String {
    if v.is_finite() { format!("{v}") } else { "nan".into() }
}

/// CSV with one `p<bus>_target` column per axis, one `p<bus>` column per bus,
/// then objective, rank, exact and status.
pub fn to_csv(case: &NetworkCase, spec: &SweepSpec, records: &[SweepRecord]) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = spec.axes.iter().map(|a| format!("p{}_target", a.bus)).collect();
    header.extend(case.buses.iter().map(|b| format!("p{}", b.id)));
    header.extend(["objective", "rank", "exact", "status"].map(String::from));
    out += &header.join(",");
    out.push('\n');
    for r in records {
        let mut row: Vec<String> = r.targets.iter().map(|&v| num(v)).collect();
        row.extend(r.injections.iter().map(|&v| num(v)));
        row.push(num(r.objective));
        row.push(r.rank.to_string());
        row.push(r.exact.to_string());
        row.push(r.status.to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// JSON array of records keyed like the CSV columns.
pub fn to_json(case: &NetworkCase, spec: &SweepSpec, records: &[SweepRecord]) -> String {
    let rows: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let mut m = serde_json::Map::new();
            let fin = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
            for (a, &t) in spec.axes.iter().zip(&r.targets) {
                m.insert(format!("p{}_target", a.bus), fin(t));
            }
            for (b, &p) in case.buses.iter().zip(&r.injections) {
                m.insert(format!("p{}", b.id), fin(p));
            }
            m.insert("objective".into(), fin(r.objective));
            m.insert("rank".into(), r.rank.into());
            m.insert("exact".into(), r.exact.into());
            m.insert("status".into(), r.status.to_string().into());
            serde_json::Value::Object(m)
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("records serialize")
}
