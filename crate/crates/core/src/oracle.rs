//! Independent reference solver on the circle and an exact semisimplicity test.
//!
//! The oracle treats `A_j` as nodal values of a smooth connection matrix and
//! discretizes
//!
//! ```text
//! G(H) = −(ψ' + [A, ψ]) − ε log(K⁻¹H),   ψ = ½(A + H⁻¹A^†H − H⁻¹H')
//! ```
//!
//! with `ψ'` expanded so that only `H'` and `H''` appear, both by second-order
//! central differences. Equations are the `H`-normalized Hermitian parts
//! `herm(L^† G L^{-†})`, `H = L L^†`; the unknowns are the entries of `H`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bundle::{ConnectionField, MetricField};
use crate::error::{Error, Result};
use crate::linalg::{c, eigenvalues, hermitian_part, hermitian_to_vec, identity, inverse, logm, singular_values, svd, vec_to_hermitian, CMat, C64};

/// Discretized circle problem.
#[derive(Clone, Debug)]
pub struct OracleProblem {
    pub n: usize,
    pub length: f64,
    /// Nodal connection matrices `A_j`.
    pub a: Vec<CMat>,
    pub eps: f64,
}

impl OracleProblem {
    pub fn new(length: f64, a: Vec<CMat>, eps: f64) -> Result<Self> {
        let n = a.len();
        if n < 8 {
            return Err(Error::InvalidGrid(format!("oracle needs at least 8 points, got {n}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidGrid(format!("length {length} must be positive and finite")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Invalid(format!("eps {eps} must be non-negative")));
        }
        let r = a[0].nrows();
        if a.iter().any(|m| m.nrows() != r || m.ncols() != r || !crate::linalg::is_finite(m)) {
            return Err(Error::Shape("connection matrices must be finite and of equal size".into()));
        }
        Ok(Self { n, length, a, eps })
    }

    /// Nodal values taken from the coefficients of an untwisted circle connection.
    pub fn from_connection(conn: &ConnectionField, eps: f64) -> Result<Self> {
        if conn.dim() != 1 {
            return Err(Error::Precondition("the oracle works on the circle only".into()));
        }
        if conn.has_twist() {
            return Err(Error::Precondition("the oracle does not support twisted seams".into()));
        }
        Self::new(conn.grid().lengths()[0], conn.coeffs()[0].clone(), eps)
    }

    pub fn rank(&self) -> usize {
        self.a[0].nrows()
    }

    fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleConfig {
    /// Absolute tolerance on `√h ‖equations‖₂`.
    pub tol: f64,
    pub max_iter: usize,
    /// Central-difference step of the Jacobian.
    pub fd_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 60, fd_step: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub enum OracleOutcome {
    Solved { h: MetricField, residual: f64, iterations: usize },
    /// Newton stalled; the residual after every iteration.
    Diverged { trace: Vec<f64> },
}

fn wrap(j: isize, n: usize) -> usize {
    j.rem_euclid(n as isize) as usize
}

struct Discretization<'a> {
    p: &'a OracleProblem,
    k: &'a MetricField,
    /// Central differences of the nodal `A^†`.
    da_adj: Vec<CMat>,
}

impl<'a> Discretization<'a> {
    fn new(p: &'a OracleProblem, k: &'a MetricField) -> Self {
        let n = p.n;
        let h = p.spacing();
        let da_adj = (0..n)
            .map(|j| {
                let next = &p.a[wrap(j as isize + 1, n)];
                let prev = &p.a[wrap(j as isize - 1, n)];
                (next.adjoint() - prev.adjoint()) * c(1.0 / (2.0 * h), 0.0)
            })
            .collect();
        Self { p, k, da_adj }
    }

    /// `G_j` from the three nodal metrics around `j`.
    fn residual_at(&self, j: usize, hm: &CMat, h0: &CMat, hp: &CMat) -> Result<CMat> {
        let step = self.p.spacing();
        let a = &self.p.a[j];
        let a_adj = a.adjoint();
        let h_inv = inverse(h0).ok_or_else(|| Error::Singular(format!("oracle metric at node {j}")))?;
        let d1 = (hp - hm) * c(1.0 / (2.0 * step), 0.0);
        let d2 = (hp - h0 * c(2.0, 0.0) + hm) * c(1.0 / (step * step), 0.0);
        let hinv_d1 = &h_inv * &d1;
        let psi = (a + &h_inv * &a_adj * h0 - &hinv_d1) * c(0.5, 0.0);
        // (H⁻¹A^†H)' = −H⁻¹H'H⁻¹A^†H + H⁻¹(A^†)'H + H⁻¹A^†H'
        let da_conj = -(&hinv_d1 * &h_inv * &a_adj * h0) + &h_inv * &self.da_adj[j] * h0 + &h_inv * &a_adj * &d1;
        // (H⁻¹H')' = H⁻¹H'' − H⁻¹H'H⁻¹H'
        let d_hinv_d1 = &h_inv * &d2 - &hinv_d1 * &hinv_d1;
        let next = &self.p.a[wrap(j as isize + 1, self.p.n)];
        let prev = &self.p.a[wrap(j as isize - 1, self.p.n)];
        let da = (next - prev) * c(1.0 / (2.0 * step), 0.0);
        let dpsi = (da + da_conj - d_hinv_d1) * c(0.5, 0.0);
        let mut g = -(dpsi + a * &psi - &psi * a);
        if self.p.eps > 0.0 {
            let f = self.k.inverse_at(j) * h0;
            g -= logm(&f)? * c(self.p.eps, 0.0);
        }
        Ok(g)
    }

    fn equations_at(&self, j: usize, hs: &[CMat], out: &mut [f64]) -> Result<()> {
        let n = self.p.n;
        let h0 = &hs[j];
        let g = self.residual_at(j, &hs[wrap(j as isize - 1, n)], h0, &hs[wrap(j as isize + 1, n)])?;
        let l = hermitian_part(h0).cholesky().ok_or_else(|| Error::Singular(format!("oracle metric at node {j}")))?.l();
        let l_inv = l.clone().try_inverse().ok_or_else(|| Error::Singular(format!("oracle metric at node {j}")))?;
        let w = hermitian_part(&(l.adjoint() * g * l_inv.adjoint()));
        hermitian_to_vec(&w, out);
        Ok(())
    }

    fn equations(&self, hs: &[CMat]) -> Result<Vec<f64>> {
        let m = self.p.rank().pow(2);
        let mut out = vec![0.0; self.p.n * m];
        for j in 0..self.p.n {
            self.equations_at(j, hs, &mut out[j * m..(j + 1) * m])?;
        }
        Ok(out)
    }

    /// Dense Jacobian by central differences; column `(j, k)` touches nodes `j − 1..=j + 1`.
    fn jacobian(&self, hs: &[CMat], tau: f64) -> Result<DMatrix<f64>> {
        let n = self.p.n;
        let r = self.p.rank();
        let m = r * r;
        let mut jac = DMatrix::zeros(n * m, n * m);
        let mut work = hs.to_vec();
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        for j in 0..n {
            for k in 0..m {
                let mut e = vec![0.0; m];
                e[k] = 1.0;
                let dir = vec_to_hermitian(&e, r);
                for d in [-1isize, 0, 1] {
                    let row = wrap(j as isize + d, n);
                    work[j] = &hs[j] + &dir * c(tau, 0.0);
                    self.equations_at(row, &work, &mut plus)?;
                    work[j] = &hs[j] - &dir * c(tau, 0.0);
                    self.equations_at(row, &work, &mut minus)?;
                    work[j] = hs[j].clone();
                    for l in 0..m {
                        jac[(row * m + l, j * m + k)] = (plus[l] - minus[l]) / (2.0 * tau);
                    }
                }
            }
        }
        Ok(jac)
    }
}

fn weighted_norm(v: &[f64], h: f64) -> f64 {
    h.sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dense Newton solve of the oracle equations from `H = K`. At `ε = 0` a
/// normalization row fixes `Σ tr log H_j`, and steps are SVD least-squares
/// solutions.
pub fn oracle_solve(p: &OracleProblem, k: &MetricField, cfg: &OracleConfig) -> Result<OracleOutcome> {
    let n = p.n;
    let r = p.rank();
    let m = r * r;
    if k.len() != n || k.rank() != r {
        return Err(Error::Shape("reference metric does not match the oracle problem".into()));
    }
    let disc = Discretization::new(p, k);
    let step = p.spacing();
    let mut hs: Vec<CMat> = k.values().to_vec();
    let normalization = |hs: &[CMat]| -> Result<f64> {
        let mut s = 0.0;
        for (j, hj) in hs.iter().enumerate() {
            let f = k.inverse_at(j) * hj;
            s += crate::linalg::trace(&logm(&f)?).re;
        }
        Ok(s * step)
    };
    let target = if p.eps == 0.0 { normalization(&hs)? } else { 0.0 };
    let full = |hs: &[CMat]| -> Result<Vec<f64>> {
        let mut v = disc.equations(hs)?;
        if p.eps == 0.0 {
            v.push(normalization(hs)? - target);
        }
        Ok(v)
    };
    let mut res = full(&hs)?;
    let mut norm = weighted_norm(&res, step);
    let mut trace = vec![norm];
    for it in 0..cfg.max_iter {
        if norm < cfg.tol {
            return Ok(OracleOutcome::Solved { h: MetricField::new(hs)?, residual: norm, iterations: it });
        }
        let mut jac = disc.jacobian(&hs, cfg.fd_step)?;
        let rhs = DVector::from_vec(res.iter().map(|v| -v).collect());
        let delta = if p.eps == 0.0 {
            // normalization row: derivative of Σ tr log(K⁻¹H) h is Σ h tr(H⁻¹ δH)
            let mut row = DMatrix::zeros(1, n * m);
            let mut probe = hs.clone();
            let base = normalization(&hs)?;
            for j in 0..n {
                for kk in 0..m {
                    let mut e = vec![0.0; m];
                    e[kk] = 1.0;
                    probe[j] = &hs[j] + vec_to_hermitian(&e, r) * c(cfg.fd_step, 0.0);
                    row[(0, j * m + kk)] = (normalization(&probe)? - base) / cfg.fd_step;
                    probe[j] = hs[j].clone();
                }
            }
            let rows = jac.nrows();
            jac = jac.insert_row(rows, 0.0);
            jac.row_mut(rows).copy_from(&row.row(0));
            let svd = jac.svd(true, true);
            let smax = svd.singular_values.max();
            svd.solve(&rhs, 1e-12 * smax).map_err(|e| Error::Singular(format!("oracle Jacobian: {e}")))?
        } else {
            jac.lu().solve(&rhs).ok_or_else(|| Error::Singular("oracle Jacobian".into()))?
        };
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("oracle Jacobian".into()));
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let trial: Vec<CMat> = (0..n)
                .map(|j| hermitian_part(&(&hs[j] + vec_to_hermitian(&delta.as_slice()[j * m..(j + 1) * m], r) * c(alpha, 0.0))))
                .collect();
            if trial.iter().all(|t| t.clone().cholesky().is_some()) {
                if let Ok(tres) = full(&trial) {
                    let tnorm = weighted_norm(&tres, step);
                    if tnorm <= (1.0 - 1e-4 * alpha) * norm {
                        hs = trial;
                        res = tres;
                        norm = tnorm;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        trace.push(norm);
        if !accepted {
            return Ok(OracleOutcome::Diverged { trace });
        }
    }
    if norm < cfg.tol {
        Ok(OracleOutcome::Solved { h: MetricField::new(hs)?, residual: norm, iterations: cfg.max_iter })
    } else {
        Ok(OracleOutcome::Diverged { trace })
    }
}

/// Eigenvalue cluster of a monodromy.
#[derive(Clone, Debug, Serialize)]
pub struct Cluster {
    pub center: [f64; 2],
    pub algebraic: usize,
    pub geometric: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Classification {
    pub semisimple: bool,
    pub clusters: Vec<Cluster>,
}

/// Relative tolerance for merging eigenvalues into one cluster.
pub const CLUSTER_TOL: f64 = 1e-8;
/// Relative backward error below which two computed eigenvalues are taken to
/// be one defective eigenvalue split by roundoff.
pub const COALESCE_TOL: f64 = 1e-14;

/// `|y^† x|` for unit right and left null vectors of `M − λ`: the reciprocal
/// condition number of a simple eigenvalue.
fn eigen_alignment(m: &CMat, z: C64) -> f64 {
    let d = svd(&(m - identity(m.nrows()) * z));
    let last = d.s.len() - 1;
    (d.u.column(last).adjoint() * d.v.column(last))[(0, 0)].norm()
}

/// Semisimplicity of an invertible matrix: for every eigenvalue cluster the
/// kernel of `M − λ̄` must have the full algebraic dimension.
///
/// A Jordan block of a conjugated matrix comes out of the eigensolver as
/// eigenvalues split by about `√u`, well above [`CLUSTER_TOL`]. Two eigenvalues
/// at distance `d` with reciprocal condition numbers `s_a, s_b` are a
/// perturbation of about `d / (1/s_a + 1/s_b)` away from coalescing; they are
/// merged when that is below `COALESCE_TOL·‖M‖`.
pub fn oracle_classify(m: &CMat) -> Result<Classification> {
    let r = m.nrows();
    if m.ncols() != r || r == 0 {
        return Err(Error::Shape("monodromy must be square".into()));
    }
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let svd_min = singular_values(m).last().copied().unwrap_or(0.0);
    if !(svd_min > 1e-14 * scale) {
        return Err(Error::Singular("monodromy".into()));
    }
    let mut eig: Vec<C64> = eigenvalues(m);
    eig.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let align: Vec<f64> = eig.iter().map(|&z| eigen_alignment(m, z)).collect();
    let mut label: Vec<usize> = (0..r).collect();
    for i in 0..r {
        for j in i + 1..r {
            let d = (eig[i] - eig[j]).norm();
            let close = d <= CLUSTER_TOL * eig[i].norm().max(eig[j].norm()).max(1.0)
                || d * align[i] * align[j] <= COALESCE_TOL * scale * (align[i] + align[j]);
            if close && label[i] != label[j] {
                let (from, to) = (label[j], label[i]);
                label.iter_mut().filter(|l| **l == from).for_each(|l| *l = to);
            }
        }
    }
    let mut clusters: Vec<Vec<C64>> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for (i, &l) in label.iter().enumerate() {
        match seen.iter().position(|&s| s == l) {
            Some(k) => clusters[k].push(eig[i]),
            None => {
                seen.push(l);
                clusters.push(vec![eig[i]]);
            }
        }
    }
    let mut out = Vec::new();
    let mut semisimple = true;
    for cl in clusters {
        let center = cl.iter().fold(c(0.0, 0.0), |a, b| a + b) / c(cl.len() as f64, 0.0);
        let shifted = m - identity(r) * center;
        let sv = singular_values(&shifted);
        let tol = CLUSTER_TOL * scale.max(1.0);
        let geometric = sv.iter().filter(|&&s| s <= tol).count();
        if geometric < cl.len() {
            semisimple = false;
        }
        out.push(Cluster { center: [center.re, center.im], algebraic: cl.len(), geometric });
    }
    Ok(Classification { semisimple, clusters: out })
}
