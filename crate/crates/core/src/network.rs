//! OPF case data model, case-file parsing, admittance matrix and Kron reduction.
//!
//! All quantities are per-unit. Absent bounds are `None` and produce no
//! constraint; equal lower and upper bounds are kept as-is and later emitted as
//! equality constraints by the relaxation builders.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub load_p: f64,
    pub load_q: f64,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub is_reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: u32,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    /// Quadratic cost coefficient of active generation.
    pub cost_c2: f64,
    pub cost_c1: f64,
    pub cost_c0: f64,
}

impl Generator {
    /// A generator whose active and reactive output is fixed at zero.
    pub fn zero_injection(bus: u32) -> Self {
        Generator {
            bus,
            p_min: Some(0.0),
            p_max: Some(0.0),
            q_min: Some(0.0),
            q_max: Some(0.0),
            cost_c2: 0.0,
            cost_c1: 0.0,
            cost_c0: 0.0,
        }
    }

    pub fn has_cost(&self) -> bool {
        self.cost_c2 != 0.0 || self.cost_c1 != 0.0 || self.cost_c0 != 0.0
    }
}

/// Π-model line in series with an ideal transformer `tau·e^{j·shift} : 1` on the
/// from side.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub b_sh: f64,
    pub tau: f64,
    pub shift: f64,
    pub s_max: Option<f64>,
}

impl Branch {
    pub fn new(from: u32, to: u32, r: f64, x: f64) -> Self {
        Branch {
            from,
            to,
            r,
            x,
            b_sh: 0.0,
            tau: 1.0,
            shift: 0.0,
            s_max: None,
        }
    }

    /// Series admittance `g + jb = 1 / (r + jx)`.
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }

    /// No transformer, no shunt charging and no flow limit.
    pub fn is_plain(&self) -> bool {
        self.b_sh == 0.0 && self.tau == 1.0 && self.shift == 0.0 && self.s_max.is_none()
    }
}

/// Optional lower and upper limits on a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Bounds {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Bounds {
    pub fn fixed(value: f64) -> Self {
        Bounds {
            min: Some(value),
            max: Some(value),
        }
    }

    /// The pinned value when both limits coincide.
    pub fn equal_value(&self) -> Option<f64> {
        match (self.min, self.max) {
            (Some(lo), Some(hi)) if lo == hi => Some(lo),
            _ => None,
        }
    }

    pub fn is_free(&self) -> bool {
        self.min.is_none() && self.max.is_none()
    }

    /// Signed violation: positive when `value` lies outside the limits.
    pub fn violation(&self, value: f64) -> f64 {
        let below = self.min.map_or(f64::NEG_INFINITY, |lo| lo - value);
        let above = self.max.map_or(f64::NEG_INFINITY, |hi| value - hi);
        below.max(above)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
}

// ---------------------------------------------------------------------------
// Case documents

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseDoc {
    name: String,
    buses: Vec<BusDoc>,
    #[serde(default)]
    generators: Vec<GeneratorDoc>,
    branches: Vec<BranchDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: u32,
    load_p: f64,
    load_q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_max: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    reference: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorDoc {
    bus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_max: Option<f64>,
    cost: [f64; 3],
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    from: u32,
    to: u32,
    r: f64,
    x: f64,
    #[serde(default)]
    b_sh: f64,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default)]
    shift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_max: Option<f64>,
}

impl From<CaseDoc> for NetworkCase {
    fn from(doc: CaseDoc) -> Self {
        NetworkCase {
            name: doc.name,
            buses: doc
                .buses
                .into_iter()
                .map(|b| Bus {
                    id: b.id,
                    load_p: b.load_p,
                    load_q: b.load_q,
                    v_min: b.v_min,
                    v_max: b.v_max,
                    is_reference: b.reference,
                })
                .collect(),
            generators: doc
                .generators
                .into_iter()
                .map(|g| Generator {
                    bus: g.bus,
                    p_min: g.p_min,
                    p_max: g.p_max,
                    q_min: g.q_min,
                    q_max: g.q_max,
                    cost_c2: g.cost[0],
                    cost_c1: g.cost[1],
                    cost_c0: g.cost[2],
                })
                .collect(),
            branches: doc
                .branches
                .into_iter()
                .map(|b| Branch {
                    from: b.from,
                    to: b.to,
                    r: b.r,
                    x: b.x,
                    b_sh: b.b_sh,
                    tau: b.tau,
                    shift: b.shift,
                    s_max: b.s_max,
                })
                .collect(),
        }
    }
}

impl From<&NetworkCase> for CaseDoc {
    fn from(case: &NetworkCase) -> Self {
        CaseDoc {
            name: case.name.clone(),
            buses: case
                .buses
                .iter()
                .map(|b| BusDoc {
                    id: b.id,
                    load_p: b.load_p,
                    load_q: b.load_q,
                    v_min: b.v_min,
                    v_max: b.v_max,
                    reference: b.is_reference,
                })
                .collect(),
            generators: case
                .generators
                .iter()
                .map(|g| GeneratorDoc {
                    bus: g.bus,
                    p_min: g.p_min,
                    p_max: g.p_max,
                    q_min: g.q_min,
                    q_max: g.q_max,
                    cost: [g.cost_c2, g.cost_c1, g.cost_c0],
                })
                .collect(),
            branches: case
                .branches
                .iter()
                .map(|b| BranchDoc {
                    from: b.from,
                    to: b.to,
                    r: b.r,
                    x: b.x,
                    b_sh: b.b_sh,
                    tau: b.tau,
                    shift: b.shift,
                    s_max: b.s_max,
                })
                .collect(),
        }
    }
}

/// Encoding of a case document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseFormat {
    Toml,
    Json,
}

/// Parses and validates a case document.
pub fn load_case(document: &str, format: CaseFormat) -> Result<NetworkCase> {
    let doc: CaseDoc = match format {
        CaseFormat::Toml => toml::from_str(document).map_err(|e| Error::Parse(e.to_string()))?,
        CaseFormat::Json => {
            serde_json::from_str(document).map_err(|e| Error::Parse(e.to_string()))?
        }
    };
    let case = NetworkCase::from(doc);
    case.validate()?;
    Ok(case)
}

/// Reads a case file; `.json` files are parsed as JSON, everything else as TOML.
pub fn load_case_file(path: &Path) -> Result<NetworkCase> {
    let text = std::fs::read_to_string(path)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => CaseFormat::Json,
        _ => CaseFormat::Toml,
    };
    load_case(&text, format).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl NetworkCase {
    pub fn to_toml(&self) -> String {
        toml::to_string(&CaseDoc::from(self)).expect("case documents always serialize")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CaseDoc::from(self)).expect("case documents always serialize")
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of the bus with the given id.
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    fn require_bus(&self, id: u32) -> Result<usize> {
        self.bus_index(id)
            .ok_or_else(|| Error::Validation(format!("unknown bus id {id}")))
    }

    pub fn reference_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_reference)
            .expect("validated cases have a reference bus")
    }

    pub fn generator_at(&self, bus_index: usize) -> Option<&Generator> {
        let id = self.buses[bus_index].id;
        self.generators.iter().find(|g| g.bus == id)
    }

    /// Limits on active generation at a bus; generator-free buses are pinned to zero.
    pub fn p_bounds(&self, bus_index: usize) -> Bounds {
        match self.generator_at(bus_index) {
            Some(g) => Bounds {
                min: g.p_min,
                max: g.p_max,
            },
            None => Bounds::fixed(0.0),
        }
    }

    pub fn q_bounds(&self, bus_index: usize) -> Bounds {
        match self.generator_at(bus_index) {
            Some(g) => Bounds {
                min: g.q_min,
                max: g.q_max,
            },
            None => Bounds::fixed(0.0),
        }
    }

    /// Limits on the squared voltage magnitude.
    pub fn vsq_bounds(&self, bus_index: usize) -> Bounds {
        let bus = &self.buses[bus_index];
        Bounds {
            min: bus.v_min.map(|v| v * v),
            max: bus.v_max.map(|v| v * v),
        }
    }

    /// Branch endpoints as bus positions.
    pub fn branch_ends(&self, branch: &Branch) -> (usize, usize) {
        (
            self.bus_index(branch.from).expect("validated branch"),
            self.bus_index(branch.to).expect("validated branch"),
        )
    }

    /// Checks every structural and numerical invariant of the case.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.buses.is_empty() {
            return fail("case has no buses".into());
        }
        let mut ids = BTreeSet::new();
        for bus in &self.buses {
            if !ids.insert(bus.id) {
                return fail(format!("duplicate bus id {}", bus.id));
            }
            let finite = [Some(bus.load_p), Some(bus.load_q), bus.v_min, bus.v_max]
                .iter()
                .flatten()
                .all(|v| v.is_finite());
            if !finite {
                return fail(format!("bus {}: non-finite value", bus.id));
            }
            if let (Some(lo), Some(hi)) = (bus.v_min, bus.v_max) {
                if lo > hi {
                    return fail(format!("bus {}: v_min {lo} > v_max {hi}", bus.id));
                }
            }
            if bus.v_min.is_some_and(|v| v < 0.0) {
                return fail(format!("bus {}: negative v_min", bus.id));
            }
        }
        let refs = self.buses.iter().filter(|b| b.is_reference).count();
        if refs != 1 {
            return fail(format!("expected exactly one reference bus, found {refs}"));
        }

        let mut gen_buses = BTreeSet::new();
        for g in &self.generators {
            if !ids.contains(&g.bus) {
                return fail(format!("generator references unknown bus {}", g.bus));
            }
            if !gen_buses.insert(g.bus) {
                return fail(format!("bus {} has more than one generator", g.bus));
            }
            let values = [g.p_min, g.p_max, g.q_min, g.q_max];
            let costs = [g.cost_c2, g.cost_c1, g.cost_c0];
            if !values.iter().flatten().chain(costs.iter()).all(|v| v.is_finite()) {
                return fail(format!("generator at bus {}: non-finite value", g.bus));
            }
            if let (Some(lo), Some(hi)) = (g.p_min, g.p_max) {
                if lo > hi {
                    return fail(format!("generator at bus {}: p_min > p_max", g.bus));
                }
            }
            if let (Some(lo), Some(hi)) = (g.q_min, g.q_max) {
                if lo > hi {
                    return fail(format!("generator at bus {}: q_min > q_max", g.bus));
                }
            }
            if g.cost_c2 < 0.0 {
                return fail(format!("generator at bus {}: cost_c2 must be >= 0", g.bus));
            }
        }

        for (k, br) in self.branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !ids.contains(&end) {
                    return fail(format!("branch {k}: references unknown bus {end}"));
                }
            }
            if br.from == br.to {
                return fail(format!("branch {k}: from == to ({})", br.from));
            }
            let values = [br.r, br.x, br.b_sh, br.tau, br.shift];
            if !values.iter().chain(br.s_max.iter()).all(|v| v.is_finite()) {
                return fail(format!("branch {k}: non-finite value"));
            }
            if br.tau <= 0.0 {
                return fail(format!("branch {k}: tau must be > 0"));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return fail(format!("branch {k}: zero series impedance"));
            }
            if br.s_max.is_some_and(|s| s < 0.0) {
                return fail(format!("branch {k}: negative s_max"));
            }
        }

        if !self.is_connected() {
            return fail("branch graph is not connected".into());
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            if let (Some(a), Some(b)) = (self.bus_index(br.from), self.bus_index(br.to)) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Bus admittance matrix `Y = G + jB`, indexed by bus position.
    pub fn admittance_matrix(&self) -> DMatrix<Complex64> {
        let n = self.buses.len();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for br in &self.branches {
            let (l, m) = self.branch_ends(br);
            let ys = br.series_admittance();
            let half_sh = Complex64::new(0.0, br.b_sh / 2.0);
            let phase = Complex64::from_polar(1.0, br.shift);
            y[(l, l)] += (ys + half_sh) / (br.tau * br.tau);
            y[(m, m)] += ys + half_sh;
            y[(l, m)] -= ys * phase / br.tau;
            y[(m, l)] -= ys * phase.conj() / br.tau;
        }
        y
    }

    /// Eliminates a zero-injection bus by a Schur complement on the admittance
    /// matrix and re-expresses the result as equivalent branches.
    ///
    /// Equivalent branches that run parallel to an existing plain branch are
    /// merged into it.
    pub fn kron_reduce(&self, bus_id: u32) -> Result<NetworkCase> {
        self.validate()?;
        let b = self.require_bus(bus_id)?;
        let bus = &self.buses[b];
        let pre = |msg: String| Err(Error::Precondition(format!("bus {bus_id}: {msg}")));
        if bus.is_reference {
            return pre("cannot eliminate the reference bus".into());
        }
        if bus.load_p != 0.0 || bus.load_q != 0.0 {
            return pre("nonzero load".into());
        }
        if bus.v_min.is_some() || bus.v_max.is_some() {
            return pre("voltage bounds present".into());
        }
        if let Some(g) = self.generator_at(b) {
            let zero = Some(0.0);
            if g.p_min != zero || g.p_max != zero || g.q_min != zero || g.q_max != zero {
                return pre("generator injection is not fixed at zero".into());
            }
        }

        // Star of branches incident to the eliminated bus: neighbour -> summed admittance.
        let mut star: BTreeMap<usize, Complex64> = BTreeMap::new();
        let mut kept = Vec::new();
        for br in &self.branches {
            let (l, m) = self.branch_ends(br);
            if l != b && m != b {
                kept.push(br.clone());
                continue;
            }
            if !br.is_plain() {
                return pre("incident branch has a transformer, shunt or flow limit".into());
            }
            let other = if l == b { m } else { l };
            *star.entry(other).or_insert(Complex64::new(0.0, 0.0)) += br.series_admittance();
        }
        let y_bb: Complex64 = star.values().sum();
        if y_bb.norm() < 1e-12 {
            return Err(Error::Numerical(format!(
                "bus {bus_id}: singular self-admittance in Kron reduction"
            )));
        }

        let neighbours: Vec<(usize, Complex64)> = star.into_iter().collect();
        for (i, &(a, ya)) in neighbours.iter().enumerate() {
            for &(c, yc) in &neighbours[i + 1..] {
                // Y_red[a][c] = -ya*yc/y_bb, so the equivalent series admittance is ya*yc/y_bb.
                let y_eq = ya * yc / y_bb;
                if y_eq.norm() < 1e-14 {
                    continue;
                }
                let (from, to) = (self.buses[a].id, self.buses[c].id);
                let existing = kept.iter_mut().find(|br| {
                    br.is_plain()
                        && ((br.from == from && br.to == to) || (br.from == to && br.to == from))
                });
                let z = match existing {
                    Some(br) => {
                        let z = Complex64::new(1.0, 0.0) / (br.series_admittance() + y_eq);
                        br.r = z.re;
                        br.x = z.im;
                        continue;
                    }
                    None => Complex64::new(1.0, 0.0) / y_eq,
                };
                kept.push(Branch::new(from, to, z.re, z.im));
            }
        }

        let reduced = NetworkCase {
            name: format!("{}-kron-{}", self.name, bus_id),
            buses: self
                .buses
                .iter()
                .filter(|x| x.id != bus_id)
                .cloned()
                .collect(),
            generators: self
                .generators
                .iter()
                .filter(|g| g.bus != bus_id)
                .cloned()
                .collect(),
            branches: kept,
        };
        reduced.validate()?;
        Ok(reduced)
    }

    /// Voltage of an eliminated bus recovered from its neighbours:
    /// `V_b = -Y_bb^{-1} Σ Y_ba V_a`.
    pub fn eliminated_voltage(&self, bus_id: u32, voltages: &[Complex64]) -> Result<Complex64> {
        let b = self.require_bus(bus_id)?;
        let y = self.admittance_matrix();
        if y[(b, b)].norm() < 1e-12 {
            return Err(Error::Numerical("singular self-admittance".into()));
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, v) in voltages.iter().enumerate() {
            if a != b {
                acc += y[(b, a)] * v;
            }
        }
        Ok(-acc / y[(b, b)])
    }

    /// Complex power injection `S_k = V_k · conj(Σ_i Y_ki V_i)` at every bus.
    pub fn injections(&self, voltages: &[Complex64]) -> Vec<Complex64> {
        let y = self.admittance_matrix();
        let n = self.buses.len();
        (0..n)
            .map(|k| {
                let current: Complex64 = (0..n).map(|i| y[(k, i)] * voltages[i]).sum();
                voltages[k] * current.conj()
            })
            .collect()
    }
}

impl fmt::Display for NetworkCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case {} ({} buses, {} branches)", self.name, self.buses.len(), self.branches.len())?;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
        writeln!(f, "  buses:")?;
        for bus in &self.buses {
            writeln!(
                f,
                "    {:>3}  load {} + j{}  v_min {}  v_max {}{}",
                bus.id,
                bus.load_p,
                bus.load_q,
                opt(bus.v_min),
                opt(bus.v_max),
                if bus.is_reference { "  (reference)" } else { "" }
            )?;
        }
        writeln!(f, "  generators:")?;
        for g in &self.generators {
            writeln!(
                f,
                "    bus {:>3}  p [{}, {}]  q [{}, {}]  cost [{}, {}, {}]",
                g.bus,
                opt(g.p_min),
                opt(g.p_max),
                opt(g.q_min),
                opt(g.q_max),
                g.cost_c2,
                g.cost_c1,
                g.cost_c0
            )?;
        }
        writeln!(f, "  branches:")?;
        for br in &self.branches {
            write!(f, "    {} -> {}  z = {} + j{}", br.from, br.to, br.r, br.x)?;
            if br.b_sh != 0.0 {
                write!(f, "  b_sh {}", br.b_sh)?;
            }
            if br.tau != 1.0 || br.shift != 0.0 {
                write!(f, "  tap {}∠{}", br.tau, br.shift)?;
            }
            if let Some(s) = br.s_max {
                write!(f, "  s_max {s}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
