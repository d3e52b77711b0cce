//! Cone algebra in the solver's standard form: nonnegative orthant blocks,
//! second-order cones and PSD cones stored as scaled packed lower triangles
//! (off-diagonal entries multiplied by √2 so the dot product is the trace
//! inner product).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Block {
    Lp { off: usize, dim: usize },
    Soc { off: usize, dim: usize },
    Psd { off: usize, n: usize },
}

impl Block {
    fn range(&self) -> std::ops::Range<usize> {
        match *self {
            Block::Lp { off, dim } | Block::Soc { off, dim } => off..off + dim,
            Block::Psd { off, n } => off..off + n * (n + 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ConeSet {
    pub blocks: Vec<Block>,
    pub dim: usize,
}

impl ConeSet {
    pub fn push_lp(&mut self, dim: usize) {
        if dim > 0 {
            self.blocks.push(Block::Lp { off: self.dim, dim });
            self.dim += dim;
        }
    }

    pub fn push_soc(&mut self, dim: usize) {
        self.blocks.push(Block::Soc { off: self.dim, dim });
        self.dim += dim;
    }

    pub fn push_psd(&mut self, n: usize) {
        self.blocks.push(Block::Psd { off: self.dim, n });
        self.dim += n * (n + 1) / 2;
    }

    /// Barrier degree: the number of "eigenvalues" of the cone product.
    pub fn degree(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match *b {
                Block::Lp { dim, .. } => dim,
                Block::Soc { .. } => 1,
                Block::Psd { n, .. } => n,
            })
            .sum()
    }

    pub fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.dim);
        for b in &self.blocks {
            match *b {
                Block::Lp { off, dim } => e.rows_mut(off, dim).fill(1.0),
                Block::Soc { off, .. } => e[off] = 1.0,
                Block::Psd { off, n } => {
                    for j in 0..n {
                        e[off + packed(n, j, j)] = 1.0;
                    }
                }
            }
        }
        e
    }

    /// Smallest "eigenvalue" of `x` over the product cone.
    pub fn min_eig(&self, x: &DVector<f64>) -> f64 {
        let mut m = f64::INFINITY;
        for b in &self.blocks {
            let xb = x.rows_range(b.range());
            let v = match *b {
                Block::Lp { .. } => xb.min(),
                Block::Soc { .. } => xb[0] - xb.rows_range(1..).norm(),
                Block::Psd { n, .. } => {
                    SymmetricEigen::new(smat(n, xb.as_slice())).eigenvalues.min()
                }
            };
            m = m.min(v);
        }
        m
    }

    /// Jordan product `u ∘ v`.
    pub fn product(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for b in &self.blocks {
            let r = b.range();
            let ub = u.rows_range(r.clone());
            let vb = v.rows_range(r.clone());
            match *b {
                Block::Lp { off, dim } => {
                    for i in 0..dim {
                        out[off + i] = ub[i] * vb[i];
                    }
                }
                Block::Soc { off, dim } => {
                    out[off] = ub.dot(&vb);
                    for i in 1..dim {
                        out[off + i] = ub[0] * vb[i] + vb[0] * ub[i];
                    }
                }
                Block::Psd { off, n } => {
                    let um = smat(n, ub.as_slice());
                    let vm = smat(n, vb.as_slice());
                    let p = (&um * &vm + &vm * &um) * 0.5;
                    out.rows_mut(off, r.len()).copy_from_slice(&svec(&p));
                }
            }
        }
        out
    }
}

/// Position of `(i, j)` in a column-packed lower triangle of order `n`.
pub(crate) fn packed(n: usize, i: usize, j: usize) -> usize {
    super::packed_index(n, i, j)
}

/// Symmetric matrix from its scaled packed form.
pub(crate) fn smat(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = v[packed(n, j, j)];
        for i in j + 1..n {
            let x = v[packed(n, i, j)] / SQRT2;
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    m
}

pub(crate) fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        out.push(m[(j, j)]);
        for i in j + 1..n {
            out.push(SQRT2 * 0.5 * (m[(i, j)] + m[(j, i)]));
        }
    }
    out
}

#[derive(Debug, Clone)]
enum BlockScaling {
    Lp { w: DVector<f64> },
    Soc { beta: f64, v: DVector<f64> },
    Psd { r: DMatrix<f64>, rti: DMatrix<f64> },
}

/// Nesterov–Todd scaling `W` with `W z = W⁻ᵀ s = λ`.
#[derive(Debug, Clone)]
pub(crate) struct NtScaling {
    blocks: Vec<(Block, BlockScaling)>,
    pub lambda: DVector<f64>,
    /// Eigenvalues of λ for PSD blocks (λ is diagonal there), in block order.
    psd_eigs: Vec<DVector<f64>>,
}

fn soc_j(x: &mut DVector<f64>) {
    for i in 1..x.len() {
        x[i] = -x[i];
    }
}

/// One-sided Jacobi SVD: `m·V = U·diag(σ)` with `V` square orthogonal.
/// Columns of `U` belonging to zero singular values are left at zero.
pub(crate) fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut v = DMatrix::identity(cols, cols);
    let mut norms: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
    // Columns this small relative to the matrix are numerically zero.
    let floor = (f64::EPSILON * f64::EPSILON) * norms.iter().sum::<f64>();
    let tol = f64::EPSILON * (rows.max(1) as f64).sqrt();
    for _sweep in 0..60 {
        let mut rotated = false;
        for (n, c) in norms.iter_mut().zip(a.column_iter()) {
            *n = c.norm_squared();
        }
        for i in 0..cols {
            for j in i + 1..cols {
                let (alpha, beta) = (norms[i], norms[j]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let gamma = a.column(i).dot(&a.column(j));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (a[(k, i)], a[(k, j)]);
                    a[(k, i)] = c * x - s * y;
                    a[(k, j)] = s * x + c * y;
                }
                for k in 0..cols {
                    let (x, y) = (v[(k, i)], v[(k, j)]);
                    v[(k, i)] = c * x - s * y;
                    v[(k, j)] = s * x + c * y;
                }
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = DVector::from_iterator(cols, a.column_iter().map(|c| c.norm()));
    for (j, &sj) in sigma.iter().enumerate() {
        if sj > 0.0 {
            a.column_mut(j).unscale_mut(sj);
        }
    }
    (a, sigma, v)
}

impl NtScaling {
    pub fn new(cones: &ConeSet, s: &DVector<f64>, z: &DVector<f64>) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cones.blocks.len());
        let mut lambda = DVector::zeros(cones.dim);
        let mut psd_eigs = Vec::new();
        for b in &cones.blocks {
            let r = b.range();
            let sb = s.rows_range(r.clone()).into_owned();
            let zb = z.rows_range(r.clone()).into_owned();
            let sc = match *b {
                Block::Lp { off, dim } => {
                    let mut w = DVector::zeros(dim);
                    for i in 0..dim {
                        if !(sb[i] > 0.0 && zb[i] > 0.0) {
                            return Err(Error::Numerical("iterate left the orthant".into()));
                        }
                        w[i] = (sb[i] / zb[i]).sqrt();
                        lambda[off + i] = (sb[i] * zb[i]).sqrt();
                    }
                    BlockScaling::Lp { w }
                }
                Block::Soc { off, dim } => {
                    let (sr, zr) = (sb.rows_range(1..).norm(), zb.rows_range(1..).norm());
                    let sjs = (sb[0] - sr) * (sb[0] + sr);
                    let zjz = (zb[0] - zr) * (zb[0] + zr);
                    if !(sjs > 0.0 && zjz > 0.0 && sb[0] > 0.0 && zb[0] > 0.0) {
                        return Err(Error::Numerical("iterate left a second-order cone".into()));
                    }
                    let sn = sjs.sqrt();
                    let zn = zjz.sqrt();
                    let sbar = &sb / sn;
                    let zbar = &zb / zn;
                    let gamma = ((1.0 + zbar.dot(&sbar)) / 2.0).sqrt();
                    let mut jz = zbar.clone();
                    soc_j(&mut jz);
                    let wbar = (&sbar + &jz) / (2.0 * gamma);
                    let beta = (sn / zn).sqrt();
                    let mut v = wbar.clone();
                    v[0] += 1.0;
                    let v = v / (2.0 * (wbar[0] + 1.0)).sqrt();
                    let sc = BlockScaling::Soc { beta, v };
                    let wz = apply_soc(&sc, &zb, false);
                    lambda.rows_mut(off, dim).copy_from(&wz);
                    sc
                }
                Block::Psd { off, n } => {
                    let sm = smat(n, sb.as_slice());
                    let zm = smat(n, zb.as_slice());
                    let ls = Cholesky::new(sm)
                        .ok_or_else(|| Error::Numerical("slack block lost definiteness".into()))?
                        .l();
                    let lz = Cholesky::new(zm)
                        .ok_or_else(|| Error::Numerical("dual block lost definiteness".into()))?
                        .l();
                    let (u, lam, v) = jacobi_svd(&(lz.transpose() * &ls));
                    if lam.iter().any(|&l| !(l > 0.0)) {
                        return Err(Error::Numerical("singular PSD scaling".into()));
                    }
                    let inv_sqrt = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
                    let r = &ls * &v * &inv_sqrt;
                    let rti = &lz * &u * &inv_sqrt;
                    for j in 0..n {
                        lambda[off + packed(n, j, j)] = lam[j];
                    }
                    psd_eigs.push(lam);
                    BlockScaling::Psd { r, rti }
                }
            };
            blocks.push((*b, sc));
        }
        Ok(NtScaling {
            blocks,
            lambda,
            psd_eigs,
        })
    }

    fn apply(&self, x: &DVector<f64>, op: Op) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (b, sc) in &self.blocks {
            let r = b.range();
            let xb = x.rows_range(r.clone()).into_owned();
            let yb: DVector<f64> = match sc {
                BlockScaling::Lp { w } => match op {
                    Op::W | Op::Wt => xb.component_mul(w),
                    Op::WinvT | Op::Winv => xb.component_div(w),
                },
                BlockScaling::Soc { .. } => apply_soc(sc, &xb, matches!(op, Op::WinvT | Op::Winv)),
                BlockScaling::Psd { r: rm, rti } => {
                    let n = rm.nrows();
                    let xm = smat(n, xb.as_slice());
                    let ym = match op {
                        Op::W => rm.transpose() * xm * rm,
                        Op::Wt => rm * xm * rm.transpose(),
                        Op::WinvT => rti.transpose() * xm * rti,
                        Op::Winv => rti * xm * rti.transpose(),
                    };
                    DVector::from_vec(svec(&ym))
                }
            };
            out.rows_mut(r.start, r.len()).copy_from(&yb);
        }
        out
    }

    #[cfg(test)]
    pub fn w(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x, Op::W)
    }

    pub fn wt(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x, Op::Wt)
    }

    pub fn winv_t(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x, Op::WinvT)
    }

    pub fn winv(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x, Op::Winv)
    }

    /// `W⁻ᵀ G` column by column.
    pub fn winv_t_matrix(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
        for j in 0..g.ncols() {
            let col = g.column(j).into_owned();
            out.set_column(j, &self.winv_t(&col));
        }
        out
    }

    /// Solves `λ ∘ x = r` for `x`.
    pub fn lambda_solve(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(r.len());
        let mut psd = self.psd_eigs.iter();
        for (b, _) in &self.blocks {
            match *b {
                Block::Lp { off, dim } => {
                    for i in off..off + dim {
                        out[i] = r[i] / self.lambda[i];
                    }
                }
                Block::Soc { off, dim } => {
                    let l = self.lambda.rows(off, dim);
                    let rb = r.rows(off, dim);
                    let l1 = l.rows_range(1..);
                    let r1 = rb.rows_range(1..);
                    let det = l[0] * l[0] - l1.norm_squared();
                    let u0 = (l[0] * rb[0] - l1.dot(&r1)) / det;
                    out[off] = u0;
                    for i in 1..dim {
                        out[off + i] = (rb[i] - u0 * l[i]) / l[0];
                    }
                }
                Block::Psd { off, n } => {
                    let eig = psd.next().expect("psd eigenvalues");
                    for j in 0..n {
                        for i in j..n {
                            let k = off + packed(n, i, j);
                            out[k] = 2.0 * r[k] / (eig[i] + eig[j]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Largest `α ≤ cap` with `λ + α d` in the cone.
    pub fn max_step(&self, d: &DVector<f64>, cap: f64) -> f64 {
        let mut alpha = cap;
        let mut psd = self.psd_eigs.iter();
        for (b, _) in &self.blocks {
            match *b {
                Block::Lp { off, dim } => {
                    for i in off..off + dim {
                        if d[i] < 0.0 {
                            alpha = alpha.min(-self.lambda[i] / d[i]);
                        }
                    }
                }
                Block::Soc { off, dim } => {
                    let l = self.lambda.rows(off, dim);
                    let db = d.rows(off, dim);
                    alpha = alpha.min(soc_step(l.as_slice(), db.as_slice()));
                }
                Block::Psd { off, n } => {
                    let eig = psd.next().expect("psd eigenvalues");
                    let dm = smat(n, d.rows(off, n * (n + 1) / 2).as_slice());
                    let scale = eig.map(|l| 1.0 / l.sqrt());
                    let mut m = dm;
                    for i in 0..n {
                        for j in 0..n {
                            m[(i, j)] *= scale[i] * scale[j];
                        }
                    }
                    let min = SymmetricEigen::new(m).eigenvalues.min();
                    if min < 0.0 {
                        alpha = alpha.min(-1.0 / min);
                    }
                }
            }
        }
        alpha
    }
}

#[derive(Clone, Copy)]
enum Op {
    #[cfg_attr(not(test), allow(dead_code))]
    W,
    Wt,
    WinvT,
    Winv,
}

fn apply_soc(sc: &BlockScaling, x: &DVector<f64>, inverse: bool) -> DVector<f64> {
    let BlockScaling::Soc { beta, v } = sc else {
        unreachable!()
    };
    let mut jx = x.clone();
    if inverse {
        // (1/β)(2 J v vᵀ J − J) x
        let mut jv = v.clone();
        soc_j(&mut jv);
        soc_j(&mut jx);
        let coef = 2.0 * jv.dot(x);
        (jv * coef - jx) / *beta
    } else {
        // β(2 v vᵀ − J) x
        soc_j(&mut jx);
        (v * (2.0 * v.dot(x)) - jx) * *beta
    }
}

/// Largest α with `l + α d` in the second-order cone, given `l` interior.
fn soc_step(l: &[f64], d: &[f64]) -> f64 {
    let a = d[0] * d[0] - d[1..].iter().map(|x| x * x).sum::<f64>();
    let b = l[0] * d[0] - l[1..].iter().zip(&d[1..]).map(|(x, y)| x * y).sum::<f64>();
    let c = l[0] * l[0] - l[1..].iter().map(|x| x * x).sum::<f64>();
    // q(α) = aα² + 2bα + c, q(0) = c > 0
    let mut best = f64::INFINITY;
    let mut consider = |r: f64| {
        if r > 0.0 && r < best {
            best = r;
        }
    };
    if a.abs() <= 1e-300 {
        if b < 0.0 {
            consider(-c / (2.0 * b));
        }
    } else {
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let q = -(b + b.signum() * disc.sqrt());
            if q != 0.0 {
                consider(q / a);
                consider(c / q);
            } else {
                consider((c / a).abs().sqrt());
            }
        }
    }
    // The line may also leave through the apex region when d0 < 0.
    if d[0] < 0.0 {
        best = best.min(-l[0] / d[0]);
    }
    best
}
