//! Sparse real polynomials over rectangular voltage components and the OPF
//! polynomial builders.
//!
//! Variables are ordered `(V_d1, …, V_dn, V_q2, …, V_qn)`: the imaginary part of
//! the reference bus voltage is the angle reference and is eliminated rather
//! than constrained, so a case with `n` buses has `2n − 1` variables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::network::NetworkCase;
use crate::{Error, Result};

/// Exponent vector α of a monomial `x^α`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Exponent(Vec<u8>);

impl Exponent {
    pub fn zero(nvars: usize) -> Self {
        Exponent(vec![0; nvars])
    }

    pub fn unit(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        Exponent(e)
    }

    pub fn from_vec(entries: Vec<u8>) -> Self {
        Exponent(entries)
    }

    pub fn entries(&self) -> &[u8] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    /// Exponent of the product `x^α · x^β`.
    pub fn checked_add(&self, other: &Exponent) -> Result<Exponent> {
        if self.nvars() != other.nvars() {
            return Err(Error::Dimension {
                expected: self.nvars(),
                got: other.nvars(),
            });
        }
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a.checked_add(b))
            .collect::<Option<Vec<u8>>>()
            .map(Exponent)
            .ok_or_else(|| Error::DegreeOverflow {
                term: format!("{self:?}·{other:?}"),
                limit: u8::MAX as u32,
            })
    }

    pub fn add(&self, other: &Exponent) -> Exponent {
        self.checked_add(other).expect("exponent overflow")
    }

    /// Graded lexicographic order: total degree first, then lexicographic with
    /// larger powers of earlier variables first (`x1² < x1x2 < x2²`).
    pub fn graded_cmp(&self, other: &Exponent) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }

    /// Renders the monomial with the given variable names, e.g. `V_d1^2*V_q2`.
    pub fn render(&self, names: &[String]) -> String {
        let factors: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, &e)| {
                if e == 1 {
                    names[i].clone()
                } else {
                    format!("{}^{}", names[i], e)
                }
            })
            .collect();
        if factors.is_empty() {
            "1".into()
        } else {
            factors.join("*")
        }
    }
}

/// Sparse polynomial in canonical form: no zero coefficients, unique exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Exponent, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, value: f64) -> Self {
        Self::monomial(Exponent::zero(nvars), value)
    }

    pub fn var(nvars: usize, index: usize) -> Self {
        Self::monomial(Exponent::unit(nvars, index), 1.0)
    }

    pub fn monomial(exponent: Exponent, coefficient: f64) -> Self {
        let mut p = Polynomial::zero(exponent.nvars());
        p.add_term(exponent, coefficient);
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Exponent, f64)>) -> Result<Self> {
        let mut p = Polynomial::zero(nvars);
        for (e, c) in terms {
            if e.nvars() != nvars {
                return Err(Error::Dimension {
                    expected: nvars,
                    got: e.nvars(),
                });
            }
            p.add_term(e, c);
        }
        Ok(p)
    }

    fn add_term(&mut self, exponent: Exponent, coefficient: f64) {
        if coefficient == 0.0 {
            return;
        }
        let entry = self.terms.entry(exponent);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(coefficient);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let sum = *o.get() + coefficient;
                if sum == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = sum;
                }
            }
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in storage order.
    pub fn terms(&self) -> impl Iterator<Item = (&Exponent, f64)> {
        self.terms.iter().map(|(e, &c)| (e, c))
    }

    pub fn coefficient(&self, exponent: &Exponent) -> f64 {
        self.terms.get(exponent).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Exponent::degree).max().unwrap_or(0)
    }

    /// True iff every term has even total degree.
    pub fn is_even(&self) -> bool {
        self.terms.keys().all(|e| e.degree() % 2 == 0)
    }

    fn check_dims(&self, other: &Polynomial) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::Dimension {
                expected: self.nvars,
                got: other.nvars,
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (e, &c) in &other.terms {
            out.add_term(e.clone(), c);
        }
        Ok(out)
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_dims(other)?;
        let mut out = Polynomial::zero(self.nvars);
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                out.add_term(ea.checked_add(eb)?, ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (e, &c) in &self.terms {
            out.add_term(e.clone(), c * factor);
        }
        out
    }

    pub fn add_constant(&self, value: f64) -> Polynomial {
        let mut out = self.clone();
        out.add_term(Exponent::zero(self.nvars), value);
        out
    }

    /// Multiplies by the monomial `x^α`.
    pub fn shift(&self, exponent: &Exponent) -> Result<Polynomial> {
        let mut out = Polynomial::zero(self.nvars);
        for (e, &c) in &self.terms {
            out.add_term(e.checked_add(exponent)?, c);
        }
        Ok(out)
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.nvars {
            return Err(Error::Dimension {
                expected: self.nvars,
                got: point.len(),
            });
        }
        Ok(self.terms.iter().map(|(e, &c)| c * e.eval(point)).sum())
    }

    /// Human-readable rendering with terms in graded order.
    pub fn render(&self, names: &[String]) -> String {
        if self.terms.is_empty() {
            return "0".into();
        }
        let mut terms: Vec<(&Exponent, f64)> = self.terms().collect();
        terms.sort_by(|a, b| a.0.graded_cmp(b.0));
        let mut out = String::new();
        for (i, (e, c)) in terms.into_iter().enumerate() {
            let sign = if c < 0.0 { "-" } else { "+" };
            if i == 0 {
                if c < 0.0 {
                    out.push('-');
                }
            } else {
                out.push_str(&format!(" {sign} "));
            }
            let mag = c.abs();
            if e.is_zero() {
                out.push_str(&format!("{mag}"));
            } else if mag == 1.0 {
                out.push_str(&e.render(names));
            } else {
                out.push_str(&format!("{mag}*{}", e.render(names)));
            }
        }
        out
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(rhs).expect("polynomial dimension mismatch")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(&rhs.scale(-1.0))
            .expect("polynomial dimension mismatch")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.try_mul(rhs).expect("polynomial dimension mismatch")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (0..self.nvars).map(|i| format!("x{}", i + 1)).collect();
        f.write_str(&self.render(&names))
    }
}

/// Maps buses to polynomial variables.
#[derive(Debug, Clone, PartialEq)]
pub struct VarLayout {
    num_buses: usize,
    reference: usize,
    bus_ids: Vec<u32>,
}

impl VarLayout {
    pub fn new(case: &NetworkCase) -> Self {
        VarLayout {
            num_buses: case.num_buses(),
            reference: case.reference_index(),
            bus_ids: case.buses.iter().map(|b| b.id).collect(),
        }
    }

    pub fn num_vars(&self) -> usize {
        2 * self.num_buses - 1
    }

    pub fn num_buses(&self) -> usize {
        self.num_buses
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Variable index of `V_dk`.
    pub fn vd(&self, bus: usize) -> usize {
        bus
    }

    /// Variable index of `V_qk`; `None` for the reference bus.
    pub fn vq(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.reference) {
            Ordering::Less => Some(self.num_buses + bus),
            Ordering::Equal => None,
            Ordering::Greater => Some(self.num_buses + bus - 1),
        }
    }

    pub fn vd_poly(&self, bus: usize) -> Polynomial {
        Polynomial::var(self.num_vars(), self.vd(bus))
    }

    pub fn vq_poly(&self, bus: usize) -> Polynomial {
        match self.vq(bus) {
            Some(i) => Polynomial::var(self.num_vars(), i),
            None => Polynomial::zero(self.num_vars()),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bus_ids.iter().map(|id| format!("V_d{id}")).collect();
        for (k, id) in self.bus_ids.iter().enumerate() {
            if k != self.reference {
                names.push(format!("V_q{id}"));
            }
        }
        names
    }

    /// Real point from bus voltages. The voltages are first rotated so the
    /// reference bus has zero angle.
    pub fn point_from_voltages(&self, voltages: &[Complex64]) -> Vec<f64> {
        let rot = {
            let r = voltages[self.reference];
            if r.norm() > 0.0 {
                r.conj() / r.norm()
            } else {
                Complex64::new(1.0, 0.0)
            }
        };
        let mut point = vec![0.0; self.num_vars()];
        for (k, v) in voltages.iter().enumerate() {
            let v = v * rot;
            point[self.vd(k)] = v.re;
            if let Some(q) = self.vq(k) {
                point[q] = v.im;
            }
        }
        point
    }

    pub fn voltages_from_point(&self, point: &[f64]) -> Vec<Complex64> {
        (0..self.num_buses)
            .map(|k| Complex64::new(point[self.vd(k)], self.vq(k).map_or(0.0, |q| point[q])))
            .collect()
    }
}

/// Flow polynomials of one branch, both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlows {
    pub p_lm: Polynomial,
    pub q_lm: Polynomial,
    pub p_ml: Polynomial,
    pub q_ml: Polynomial,
}

impl BranchFlows {
    /// Squared apparent power at the from end, `P_lm² + Q_lm²` (degree 4).
    pub fn s_lm(&self) -> Polynomial {
        &(&self.p_lm * &self.p_lm) + &(&self.q_lm * &self.q_lm)
    }

    pub fn s_ml(&self) -> Polynomial {
        &(&self.p_ml * &self.p_ml) + &(&self.q_ml * &self.q_ml)
    }
}

/// Every polynomial of the OPF problem for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct OpfPolynomials {
    pub layout: VarLayout,
    /// Squared voltage magnitude per bus.
    pub f_v: Vec<Polynomial>,
    /// Active generation per bus (injection plus load).
    pub f_p: Vec<Polynomial>,
    pub f_q: Vec<Polynomial>,
    /// Generation cost per bus; zero at buses without a generator.
    pub f_c: Vec<Polynomial>,
    pub flows: Vec<BranchFlows>,
}

impl OpfPolynomials {
    pub fn all(&self) -> impl Iterator<Item = &Polynomial> {
        self.f_v
            .iter()
            .chain(&self.f_p)
            .chain(&self.f_q)
            .chain(&self.f_c)
            .chain(self.flows.iter().flat_map(|f| [&f.p_lm, &f.q_lm, &f.p_ml, &f.q_ml]))
    }

    /// Renders every polynomial with named variables, one per line.
    pub fn dump(&self, case: &NetworkCase) -> String {
        let names = self.layout.names();
        let mut out = String::new();
        for (k, bus) in case.buses.iter().enumerate() {
            let id = bus.id;
            out.push_str(&format!("f_V{id} = {}\n", self.f_v[k].render(&names)));
            out.push_str(&format!("f_P{id} = {}\n", self.f_p[k].render(&names)));
            out.push_str(&format!("f_Q{id} = {}\n", self.f_q[k].render(&names)));
            if !self.f_c[k].is_zero() {
                out.push_str(&format!("f_C{id} = {}\n", self.f_c[k].render(&names)));
            }
        }
        for (br, fl) in case.branches.iter().zip(&self.flows) {
            let (l, m) = (br.from, br.to);
            out.push_str(&format!("f_P{l}{m} = {}\n", fl.p_lm.render(&names)));
            out.push_str(&format!("f_Q{l}{m} = {}\n", fl.q_lm.render(&names)));
            out.push_str(&format!("f_P{m}{l} = {}\n", fl.p_ml.render(&names)));
            out.push_str(&format!("f_Q{m}{l} = {}\n", fl.q_ml.render(&names)));
        }
        out
    }
}

/// Builds the voltage, power-balance, cost and line-flow polynomials.
pub fn build_opf_polynomials(case: &NetworkCase) -> Result<OpfPolynomials> {
    case.validate()?;
    let layout = VarLayout::new(case);
    let nv = layout.num_vars();
    let n = case.num_buses();
    let y = case.admittance_matrix();
    let vd: Vec<Polynomial> = (0..n).map(|k| layout.vd_poly(k)).collect();
    let vq: Vec<Polynomial> = (0..n).map(|k| layout.vq_poly(k)).collect();

    let mut f_v = Vec::with_capacity(n);
    let mut f_p = Vec::with_capacity(n);
    let mut f_q = Vec::with_capacity(n);
    let mut f_c = Vec::with_capacity(n);
    for k in 0..n {
        f_v.push(&(&vd[k] * &vd[k]) + &(&vq[k] * &vq[k]));

        // Σ_i (G_ki V_di − B_ki V_qi) and Σ_i (B_ki V_di + G_ki V_qi)
        let mut re_sum = Polynomial::zero(nv);
        let mut im_sum = Polynomial::zero(nv);
        for i in 0..n {
            let (g, b) = (y[(k, i)].re, y[(k, i)].im);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            re_sum = &(&re_sum + &vd[i].scale(g)) - &vq[i].scale(b);
            im_sum = &(&im_sum + &vd[i].scale(b)) + &vq[i].scale(g);
        }
        let bus = &case.buses[k];
        let p = (&(&vd[k] * &re_sum) + &(&vq[k] * &im_sum)).add_constant(bus.load_p);
        // V_dk Σ(−B V_d − G V_q) + V_qk Σ(G V_d − B V_q) = −V_dk·im_sum + V_qk·re_sum
        let q = (&(&vq[k] * &re_sum) - &(&vd[k] * &im_sum)).add_constant(bus.load_q);

        let cost = match case.generator_at(k) {
            Some(g) => (&(&p * &p).scale(g.cost_c2) + &p.scale(g.cost_c1)).add_constant(g.cost_c0),
            None => Polynomial::zero(nv),
        };
        f_p.push(p);
        f_q.push(q);
        f_c.push(cost);
    }

    let mut flows = Vec::with_capacity(case.branches.len());
    for br in &case.branches {
        let (l, m) = case.branch_ends(br);
        let ys = br.series_admittance();
        let (g, b) = (ys.re, ys.im);
        let (s, c) = br.shift.sin_cos();
        let tau = br.tau;
        let mag_l = &f_v[l];
        let mag_m = &f_v[m];
        // V_dl V_dm + V_ql V_qm and V_dl V_qm − V_ql V_dm
        let cross_re = &(&vd[l] * &vd[m]) + &(&vq[l] * &vq[m]);
        let cross_im = &(&vd[l] * &vq[m]) - &(&vq[l] * &vd[m]);

        let p_lm = &(&mag_l.scale(g / (tau * tau)) + &cross_re.scale((b * s - g * c) / tau))
            + &cross_im.scale((g * s + b * c) / tau);
        let q_lm = &(&mag_l.scale(-(b + br.b_sh / 2.0) / (tau * tau))
            + &cross_re.scale((b * c + g * s) / tau))
            + &cross_im.scale((g * c - b * s) / tau);
        let p_ml = &(&mag_m.scale(g) - &cross_re.scale((g * c + b * s) / tau))
            + &cross_im.scale((g * s - b * c) / tau);
        let q_ml = &(&mag_m.scale(-(b + br.b_sh / 2.0)) + &cross_re.scale((b * c - g * s) / tau))
            - &cross_im.scale((g * c + b * s) / tau);
        flows.push(BranchFlows {
            p_lm,
            q_lm,
            p_ml,
            q_ml,
        });
    }

    Ok(OpfPolynomials {
        layout,
        f_v,
        f_p,
        f_q,
        f_c,
        flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x(i: usize) -> Polynomial {
        Polynomial::var(3, i)
    }

    #[test]
    fn basic_algebra() {
        let sq = &x(0) * &x(0);
        assert_eq!(sq, Polynomial::monomial(Exponent::from_vec(vec![2, 0, 0]), 1.0));
        let sum = &x(0).add_constant(1.0) + &(-&x(0));
        assert_eq!(sum, Polynomial::constant(3, 1.0));
        assert_eq!(sum.num_terms(), 1);
        assert_eq!(Polynomial::constant(3, 1.0).eval(&[0.3, -2.0, 7.0]).unwrap(), 1.0);
    }

    #[test]
    fn dimension_errors() {
        let a = Polynomial::var(2, 0);
        let b = Polynomial::var(3, 0);
        assert!(matches!(a.try_add(&b), Err(Error::Dimension { .. })));
        assert!(matches!(a.try_mul(&b), Err(Error::Dimension { .. })));
        assert!(matches!(a.eval(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn exponent_overflow() {
        let big = Polynomial::monomial(Exponent::from_vec(vec![200]), 1.0);
        assert!(matches!(big.try_mul(&big), Err(Error::DegreeOverflow { .. })));
    }

    #[test]
    fn evenness() {
        let p = cases::two_bus();
        let polys = build_opf_polynomials(&p).unwrap();
        assert!(polys.f_p[0].is_even());
        let odd = &x(0) + &(&x(1) * &x(1));
        assert!(!odd.is_even());
        for case in [cases::two_bus(), cases::three_bus()] {
            let polys = build_opf_polynomials(&case).unwrap();
            assert!(polys.all().all(Polynomial::is_even));
            assert!(polys.flows.iter().all(|f| f.s_lm().is_even() && f.s_ml().is_even()));
        }
    }

    #[test]
    fn squared_injection_has_degree_four() {
        let polys = build_opf_polynomials(&cases::two_bus()).unwrap();
        let sq = &polys.f_p[1] * &polys.f_p[1];
        assert_eq!(sq.degree(), 4);
        // Brute-force expansion oracle: the product evaluates as the square everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pt: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v = polys.f_p[1].eval(&pt).unwrap();
            assert!((sq.eval(&pt).unwrap() - v * v).abs() < 1e-9 * (1.0 + v * v));
        }
    }

    #[test]
    fn three_bus_voltage_polynomial() {
        let polys = build_opf_polynomials(&cases::three_bus()).unwrap();
        let names = polys.layout.names();
        assert_eq!(names, ["V_d1", "V_d2", "V_d3", "V_q2", "V_q3"]);
        assert_eq!(polys.f_v[1].render(&names), "V_d2^2 + V_q2^2");
        assert_eq!(polys.f_v[0].render(&names), "V_d1^2");
    }

    #[test]
    fn table_values_two_bus() {
        let polys = build_opf_polynomials(&cases::two_bus()).unwrap();
        let pt = [1.0, 1.049, -0.767];
        let v2 = polys.f_v[1].eval(&pt).unwrap();
        assert!((v2 - 1.6888).abs() < 1e-3);
        let p1 = polys.f_p[0].eval(&pt).unwrap();
        assert!((p1 - 5.68).abs() < 0.02, "P1 = {p1}");
    }

    #[test]
    fn table_values_three_bus() {
        let polys = build_opf_polynomials(&cases::three_bus()).unwrap();
        let pt = [1.0, 1.049, 0.849, -0.767, -0.586];
        let p2 = polys.f_p[1].eval(&pt).unwrap();
        let q3 = polys.f_q[2].eval(&pt).unwrap();
        let p3 = polys.f_p[2].eval(&pt).unwrap();
        assert!(p2.abs() < 0.02, "P2 = {p2}");
        assert!(q3.abs() < 0.02, "Q3 = {q3}");
        assert!(p3.abs() < 0.02, "P3 = {p3}");
    }

    fn random_voltages(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
            .collect()
    }

    /// Injections computed from Y equal the branch-flow sums at every point,
    /// including transformer taps, phase shifts and line charging.
    #[test]
    fn admittance_matches_flow_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut shifted = cases::three_bus();
        shifted.branches[0].tau = 1.07;
        shifted.branches[0].shift = 0.12;
        shifted.branches[1].b_sh = 0.4;
        shifted.branches[2].tau = 0.93;
        shifted.branches[2].shift = -0.3;
        for case in [cases::three_bus(), shifted] {
            let polys = build_opf_polynomials(&case).unwrap();
            for _ in 0..100 {
                let mut v = random_voltages(&mut rng, 3);
                v[0] = Complex64::new(v[0].re, 0.0);
                let pt = polys.layout.point_from_voltages(&v);
                let s = case.injections(&polys.layout.voltages_from_point(&pt));
                for k in 0..3 {
                    let mut p_sum = 0.0;
                    let mut q_sum = 0.0;
                    for (br, fl) in case.branches.iter().zip(&polys.flows) {
                        let (l, m) = case.branch_ends(br);
                        if l == k {
                            p_sum += fl.p_lm.eval(&pt).unwrap();
                            q_sum += fl.q_lm.eval(&pt).unwrap();
                        }
                        if m == k {
                            p_sum += fl.p_ml.eval(&pt).unwrap();
                            q_sum += fl.q_ml.eval(&pt).unwrap();
                        }
                    }
                    assert!((s[k].re - p_sum).abs() < 1e-10, "P mismatch at bus {k}");
                    assert!((s[k].im - q_sum).abs() < 1e-10, "Q mismatch at bus {k}");
                    let fp = polys.f_p[k].eval(&pt).unwrap();
                    let fq = polys.f_q[k].eval(&pt).unwrap();
                    assert!((fp - s[k].re).abs() < 1e-10);
                    assert!((fq - s[k].im).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sign_symmetry_and_nonnegative_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in [cases::two_bus(), cases::three_bus()] {
            let polys = build_opf_polynomials(&case).unwrap();
            let nv = polys.layout.num_vars();
            for _ in 0..100 {
                let pt: Vec<f64> = (0..nv).map(|_| rng.random_range(-2.0..2.0)).collect();
                let neg: Vec<f64> = pt.iter().map(|v| -v).collect();
                for p in polys.all() {
                    assert_eq!(p.eval(&pt).unwrap(), p.eval(&neg).unwrap());
                }
                for fl in &polys.flows {
                    let loss = fl.p_lm.eval(&pt).unwrap() + fl.p_ml.eval(&pt).unwrap();
                    assert!(loss >= -1e-12);
                }
            }
        }
    }

    fn arb_poly() -> impl Strategy<Value = Polynomial> {
        prop::collection::vec((prop::collection::vec(0u8..3, 3), -5i32..5), 0..5).prop_map(|terms| {
            Polynomial::from_terms(
                3,
                terms
                    .into_iter()
                    .map(|(e, c)| (Exponent::from_vec(e), c as f64)),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn algebra_laws(a in arb_poly(), b in arb_poly(), c in arb_poly()) {
            prop_assert_eq!(&a + &b, &b + &a);
            prop_assert_eq!(&a * &b, &b * &a);
            prop_assert_eq!(&a * &(&b + &c), &(&a * &b) + &(&a * &c));
            if !a.is_zero() && !b.is_zero() {
                prop_assert_eq!((&a * &b).degree(), a.degree() + b.degree());
            }
        }
    }
}
