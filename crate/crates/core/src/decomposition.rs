//! Metric decomposition `∇ = ∇_K + ψ_K`, the energy and its gradient.
//!
//! On a link `x → x + e_μ` with transport `U`, the pulled-back metric is
//! `Y = U^† K(x + e) U` and
//!
//! ```text
//! ψ_μ(x) = −(1/2h) log(K(x)⁻¹ Y)
//! ```
//!
//! which is `K(x)`-self-adjoint, vanishes for `K`-unitary transports and equals
//! `A` for a constant Hermitian `A` with `K = I`. The `K`-unitary part has
//! links `U e^{hψ}` and `δ_K = ∇ − 2ψ` has links `U e^{2hψ}`.
//!
//! The energy is `E = ½ Σ_x w Σ_μ tr ψ_μ²`. The residual is its exact
//! gradient: for `H_t = H e^{ts}` with `s` `H`-self-adjoint,
//! `dE/dt = GRADIENT_CONSTANT · Σ_x w tr(R s)` where
//!
//! ```text
//! R(x) = −Σ_μ (1/h_μ) [ψ_μ(x) − Z_μ(x − e_μ) H(x)],   Z = U ψ Y⁻¹ U^†.
//! ```
//!
//! `R` is a consistent discretization of `∇*_H ψ_H = −tr_g ∇_H ψ_H`, satisfies
//! `Σ_x w tr R = 0` exactly, and shifts by `½ Δu · id` under `H ↦ e^u H`.

use rayon::prelude::*;

use crate::bundle::{herm_fn_at, ConnectionField, EndoField, FormEndoField, HermFn, MetricField};
use crate::error::{Error, Result};
use crate::linalg::{eigh, expm, frob, hermitian_part, identity, inverse, max_abs, scale, CMat};
use crate::sparse::tree_sum;

/// `dE(H e^{ts})/dt|₀ = GRADIENT_CONSTANT · Σ_x w tr(R s)`.
pub const GRADIENT_CONSTANT: f64 = -0.5;

/// Spectral data of `K(x)⁻¹ Y` on one link.
#[derive(Clone, Debug)]
struct LinkSpectrum {
    /// `P = L^{-†} V`, eigenvectors of `K⁻¹Y`.
    frame: CMat,
    /// `P⁻¹ = V^† L^†`.
    frame_inv: CMat,
    /// `V`, eigenvectors of `M M^†`.
    vecs: CMat,
    /// `M = L(x)⁻¹ U^† L(x + e)`, so that `L⁻¹ Y L^{-†} = M M^†`.
    m: CMat,
    vals: Vec<f64>,
}

impl LinkSpectrum {
    fn new(u: &CMat, k: &MetricField, x: usize, next: usize) -> Result<Self> {
        let f = k.factor(x);
        // never form Y: the product of factors keeps roundoff at √cond(K)
        let m = &f.l_inv * u.adjoint() * &k.factor(next).l;
        let w = &m * m.adjoint();
        let (vals, v) = eigh(&w);
        if !(vals[0] > 0.0) {
            return Err(Error::Singular(format!("pulled-back metric at point {x} is not positive")));
        }
        Ok(Self { frame: f.l_inv.adjoint() * &v, frame_inv: v.adjoint() * f.l.adjoint(), vecs: v, m, vals })
    }

    fn diag_fn(&self, g: impl Fn(f64) -> f64) -> CMat {
        let mut left = self.frame.clone();
        for (j, &l) in self.vals.iter().enumerate() {
            let gj = g(l);
            left.column_mut(j).iter_mut().for_each(|z| *z *= gj);
        }
        left * &self.frame_inv
    }

    /// `V diag(g(λ)) V^†`.
    fn hermitian_fn(&self, g: impl Fn(f64) -> f64) -> CMat {
        let mut left = self.vecs.clone();
        for (j, &l) in self.vals.iter().enumerate() {
            let gj = g(l);
            left.column_mut(j).iter_mut().for_each(|z| *z *= gj);
        }
        left * self.vecs.adjoint()
    }

    fn psi(&self, h: f64) -> CMat {
        self.diag_fn(|l| -l.ln() / (2.0 * h))
    }

    /// `e^{t h ψ} = P diag(λ^{−t/2}) P⁻¹`.
    fn exp_psi(&self, t: f64) -> CMat {
        self.diag_fn(|l| l.powf(-t / 2.0))
    }

    /// `ψ(x)` in the frame `L(x)`: `V diag(−ln λ / 2h) V^†`.
    fn psi_frame(&self, h: f64) -> CMat {
        self.hermitian_fn(|l| -l.ln() / (2.0 * h))
    }

    /// `Z H(x + e)` with `Z = U ψ Y⁻¹ U^†`, in the frame `L(x + e)`:
    /// `M^† V diag(−ln λ / 2hλ) V^† M`.
    fn z_frame(&self, h: f64) -> CMat {
        self.m.adjoint() * self.hermitian_fn(|l| -l.ln() / (l * 2.0 * h)) * &self.m
    }

    /// `tr ψ² = (1/4h²) Σ (ln λ)²`.
    fn psi_sq_trace(&self, h: f64) -> f64 {
        self.vals.iter().map(|l| l.ln() * l.ln()).sum::<f64>() / (4.0 * h * h)
    }
}

fn check_compatible(conn: &ConnectionField, k: &MetricField) -> Result<()> {
    if k.len() != conn.npoints() || k.rank() != conn.rank() {
        return Err(Error::Shape(format!(
            "metric has {} points of rank {}, connection has {} points of rank {}",
            k.len(),
            k.rank(),
            conn.npoints(),
            conn.rank()
        )));
    }
    Ok(())
}

fn spectra(conn: &ConnectionField, k: &MetricField) -> Result<Vec<Vec<LinkSpectrum>>> {
    check_compatible(conn, k)?;
    let grid = conn.grid();
    (0..conn.dim())
        .map(|axis| {
            (0..conn.npoints())
                .into_par_iter()
                .map(|x| LinkSpectrum::new(conn.link(axis, x), k, x, grid.shift(x, axis, true)))
                .collect()
        })
        .collect()
}

/// `ψ_K` alone.
pub fn psi(conn: &ConnectionField, k: &MetricField) -> Result<FormEndoField> {
    let sp = spectra(conn, k)?;
    Ok(sp
        .iter()
        .enumerate()
        .map(|(axis, row)| {
            let h = conn.grid().spacing(axis);
            row.par_iter().map(|s| s.psi(h)).collect()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub psi: FormEndoField,
    /// `∇_K = ∇ − ψ_K`, links `U e^{hψ}`.
    pub metric_conn: ConnectionField,
    /// `δ_K = ∇ − 2ψ_K`, links `U e^{2hψ}`.
    pub delta_conn: ConnectionField,
}

pub fn decompose(conn: &ConnectionField, k: &MetricField) -> Result<Decomposition> {
    let sp = spectra(conn, k)?;
    let mut psi = Vec::new();
    let mut metric_links = Vec::new();
    let mut delta_links = Vec::new();
    for (axis, row) in sp.iter().enumerate() {
        let h = conn.grid().spacing(axis);
        psi.push(row.par_iter().map(|s| s.psi(h)).collect());
        metric_links.push(row.par_iter().enumerate().map(|(x, s)| conn.link(axis, x) * s.exp_psi(1.0)).collect());
        delta_links.push(row.par_iter().enumerate().map(|(x, s)| conn.link(axis, x) * s.exp_psi(2.0)).collect());
    }
    let twist = Some(conn.twist().to_vec());
    let grid = conn.grid().clone();
    let metric_conn = ConnectionField::from_links(grid.clone(), conn.rank(), metric_links, twist.clone())?;
    let delta_conn = ConnectionField::from_links(grid, conn.rank(), delta_links, twist)?;
    Ok(Decomposition { psi, metric_conn, delta_conn })
}

fn energy_from(conn: &ConnectionField, sp: &[Vec<LinkSpectrum>]) -> f64 {
    let grid = conn.grid();
    let per_point: Vec<f64> = (0..conn.npoints())
        .map(|x| (0..conn.dim()).map(|a| sp[a][x].psi_sq_trace(grid.spacing(a))).sum())
        .collect();
    0.5 * grid.integrate(&per_point)
}

pub fn energy(conn: &ConnectionField, k: &MetricField) -> Result<f64> {
    let sp = spectra(conn, k)?;
    Ok(energy_from(conn, &sp))
}

/// Hermitian representatives `L^† R L^{-†}` of the residual in the frames of
/// `h_metric`.
fn residual_frames(conn: &ConnectionField, sp: &[Vec<LinkSpectrum>]) -> Vec<CMat> {
    let grid = conn.grid();
    let r = conn.rank();
    (0..conn.npoints())
        .into_par_iter()
        .map(|x| {
            let mut acc = CMat::zeros(r, r);
            for axis in 0..conn.dim() {
                let h = grid.spacing(axis);
                let prev = grid.shift(x, axis, false);
                let term = sp[axis][x].psi_frame(h) - sp[axis][prev].z_frame(h);
                acc -= scale(&term, 1.0 / h);
            }
            hermitian_part(&acc)
        })
        .collect()
}

/// Discrete `∇*_H ψ_H`, the exact gradient of [`energy`].
pub fn residual(conn: &ConnectionField, h: &MetricField) -> Result<EndoField> {
    let sp = spectra(conn, h)?;
    Ok(from_frames(&residual_frames(conn, &sp), h))
}

fn from_frames(w: &[CMat], h: &MetricField) -> EndoField {
    w.par_iter().enumerate().map(|(x, w)| h.factor(x).from_hermitian(w)).collect()
}

/// Residual and energy from one pass over the links.
pub fn residual_and_energy(conn: &ConnectionField, h: &MetricField) -> Result<(EndoField, f64)> {
    let sp = spectra(conn, h)?;
    Ok((from_frames(&residual_frames(conn, &sp), h), energy_from(conn, &sp)))
}

/// Residual as Hermitian representatives in the frames of `h`, with the energy.
/// This avoids the conditioning loss of converting back to endomorphisms.
pub fn residual_frames_and_energy(conn: &ConnectionField, h: &MetricField) -> Result<(Vec<CMat>, f64)> {
    let sp = spectra(conn, h)?;
    Ok((residual_frames(conn, &sp), energy_from(conn, &sp)))
}

/// `L²` norm `(Σ_x w ‖s(x)‖²_H)^{1/2}` of an `H`-self-adjoint field, using the
/// Hermitian representative at each point.
pub fn l2_norm_in(field: &[CMat], h: &MetricField, weight: f64) -> f64 {
    let sq: Vec<f64> = field
        .iter()
        .enumerate()
        .map(|(x, s)| {
            let w = h.factor(x).to_hermitian(s);
            frob(&w).powi(2)
        })
        .collect();
    (weight * tree_sum(&sq)).sqrt()
}

/// Largest relative defect of the lattice defining relation
///
/// ```text
/// K(φ_h(ψ)u, v) = ½ (Ŷ(∇u, v) + Ŷ(u, ∇v) + h Ŷ(∇u, ∇v) − dK(u, v))
/// ```
///
/// over pairs of constant basis sections, with `φ_h(ψ) = (I − e^{−2hψ})/(2h)`,
/// `Ŷ(a, b) = b^† U^† K(x+e) U a`. As `h → 0` this is the continuum relation
/// `K(ψu, v) = ½(K(∇u, v) + K(u, ∇v) − dK(u, v))`.
pub fn defining_relation_defect(conn: &ConnectionField, k: &MetricField, psi: &FormEndoField) -> f64 {
    let grid = conn.grid();
    let r = conn.rank();
    let basis: Vec<CMat> = (0..r).map(|a| identity(r).columns(a, 1).into_owned()).collect();
    let mut worst: f64 = 0.0;
    for axis in 0..conn.dim() {
        let h = grid.spacing(axis);
        let defects: Vec<f64> = (0..conn.npoints())
            .into_par_iter()
            .map(|x| {
                let next = grid.shift(x, axis, true);
                let u_link = conn.link(axis, x);
                let u_inv = conn.link_inv(axis, x);
                let y = u_link.adjoint() * k.get(next) * u_link;
                let phi_psi = scale(&(identity(r) - expm(&scale(&psi[axis][x], -2.0 * h))), 1.0 / (2.0 * h));
                let mut local: f64 = 0.0;
                let mut size: f64 = 1e-300;
                for a in &basis {
                    let da = scale(&(u_inv * a - a), 1.0 / h);
                    for b in &basis {
                        let db = scale(&(u_inv * b - b), 1.0 / h);
                        let pair = |p: &CMat, q: &CMat, m: &CMat| (q.adjoint() * m * p)[(0, 0)];
                        let lhs = pair(&(&phi_psi * a), b, k.get(x));
                        let dk = (pair(a, b, k.get(next)) - pair(a, b, k.get(x))) / h;
                        let terms = [pair(&da, b, &y), pair(a, &db, &y), pair(&da, &db, &y) * h, dk];
                        let rhs = (terms[0] + terms[1] + terms[2] - terms[3]) * 0.5;
                        size = terms.iter().fold(size, |m, t| m.max(t.norm())).max(lhs.norm());
                        local = local.max((lhs - rhs).norm());
                    }
                }
                local / size
            })
            .collect();
        worst = defects.into_iter().fold(worst, f64::max);
    }
    worst
}

/// Largest relative defect of the discrete Leibniz rule of `∇_K`,
/// `dK(u, v) = K(∇_K u, v) + K(u, ∇_K v) + h K(∇_K u, ∇_K v)`, on constant
/// basis sections.
pub fn metric_compatibility_defect(metric_conn: &ConnectionField, k: &MetricField) -> f64 {
    let grid = metric_conn.grid();
    let r = metric_conn.rank();
    let basis: Vec<CMat> = (0..r).map(|a| identity(r).columns(a, 1).into_owned()).collect();
    let mut worst: f64 = 0.0;
    for axis in 0..metric_conn.dim() {
        let h = grid.spacing(axis);
        for x in 0..metric_conn.npoints() {
            let next = grid.shift(x, axis, true);
            let u_inv = metric_conn.link_inv(axis, x);
            let kx = k.get(x);
            for a in &basis {
                let da = scale(&(u_inv * a - a), 1.0 / h);
                for b in &basis {
                    let db = scale(&(u_inv * b - b), 1.0 / h);
                    let pair = |p: &CMat, q: &CMat, m: &CMat| (q.adjoint() * m * p)[(0, 0)];
                    let dk = (pair(a, b, k.get(next)) - pair(a, b, kx)) / h;
                    let rhs = pair(&da, b, kx) + pair(a, &db, kx) + pair(&da, &db, kx) * h;
                    worst = worst.max((dk - rhs).norm() / dk.norm().max(rhs.norm()).max(1.0));
                }
            }
        }
    }
    worst
}

/// Defects of the metric-change laws between `K` and `H`, `f = K⁻¹H`,
/// `θ = f⁻¹ δ_K f`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricChangeReport {
    /// Lattice form of `ψ_H = ψ_K − ½θ`: `e^{−2hψ_H} = (I + hθ) e^{−2hψ_K}` (max abs).
    pub psi_exact: f64,
    /// Lattice form of `∇_H = ∇_K + ½θ`: links `U_K e^{−hψ_K} ((I + hθ)e^{−2hψ_K})^{−1/2}` (max abs).
    pub conn_exact: f64,
    /// `ψ_H − ψ_K + ½θ`, first order in `h` (max abs).
    pub psi_additive: f64,
    /// `A_{∇_H} − A_{∇_K} − ½θ`, first order in `h` (max abs).
    pub conn_additive: f64,
    /// `L²` norm of `R_H − R_K − ½ tr_g ∇θ`, first order in `h`.
    pub residual_l2: f64,
}

pub fn check_metric_change(conn: &ConnectionField, k: &MetricField, h: &MetricField) -> Result<MetricChangeReport> {
    let grid = conn.grid();
    let r = conn.rank();
    let dk = decompose(conn, k)?;
    let dh = decompose(conn, h)?;
    let f = k.relative(h);
    let f_inv: Vec<CMat> = f
        .iter()
        .map(|m| inverse(m).ok_or_else(|| Error::Singular("metric ratio".into())))
        .collect::<Result<_>>()?;
    let mut theta = Vec::new();
    let mut report = MetricChangeReport {
        psi_exact: 0.0,
        conn_exact: 0.0,
        psi_additive: 0.0,
        conn_additive: 0.0,
        residual_l2: 0.0,
    };
    for axis in 0..conn.dim() {
        let step = grid.spacing(axis);
        let delta_f = dk.delta_conn.endo_diff(&f, axis)?;
        let th: Vec<CMat> = (0..conn.npoints()).map(|x| &f_inv[x] * &delta_f[x]).collect();
        for x in 0..conn.npoints() {
            let e_k = expm(&scale(&dk.psi[axis][x], -2.0 * step));
            let e_h = expm(&scale(&dh.psi[axis][x], -2.0 * step));
            let predicted = (identity(r) + scale(&th[x], step)) * &e_k;
            report.psi_exact = report.psi_exact.max(max_abs(&(&predicted - &e_h)));
            let root = herm_fn_at(&predicted, h.factor(x), HermFn::Power(-0.5))?;
            let link = dk.metric_conn.link(axis, x) * expm(&scale(&dk.psi[axis][x], -step)) * root;
            report.conn_exact = report.conn_exact.max(max_abs(&(link - dh.metric_conn.link(axis, x))));
            let half = scale(&th[x], 0.5);
            report.psi_additive =
                report.psi_additive.max(max_abs(&(&dh.psi[axis][x] - &dk.psi[axis][x] + &half)));
            let da = dh.metric_conn.coeff(axis, x) - dk.metric_conn.coeff(axis, x) - &half;
            report.conn_additive = report.conn_additive.max(max_abs(&da));
        }
        theta.push(th);
    }
    let rk = residual(conn, k)?;
    let rh = residual(conn, h)?;
    let div = conn.endo_backward_div(&theta)?;
    let sq: Vec<f64> = (0..conn.npoints())
        .map(|x| frob(&(&rh[x] - &rk[x] - scale(&div[x], 0.5))).powi(2))
        .collect();
    report.residual_l2 = grid.integrate(&sq).sqrt();
    Ok(report)
}

/// Defects of `ψ_{g(∇),K} = g ψ_{∇,H} g⁻¹` and `R_K(g(∇)) = g R_H(∇) g⁻¹`
/// with `H = g^† K g` (max abs).
#[derive(Clone, Debug, serde::Serialize)]
pub struct GaugeReport {
    pub psi_defect: f64,
    pub residual_defect: f64,
}

pub fn check_gauge_equivariance(conn: &ConnectionField, k: &MetricField, g: &[CMat]) -> Result<GaugeReport> {
    let moved = conn.gauge_act(g)?;
    let h = k.pullback(g)?;
    let g_inv = crate::bundle::gauge_inverse(g)?;
    let psi_moved = psi(&moved, k)?;
    let psi_h = psi(conn, &h)?;
    let mut psi_defect: f64 = 0.0;
    for axis in 0..conn.dim() {
        for x in 0..conn.npoints() {
            let conj = &g[x] * &psi_h[axis][x] * &g_inv[x];
            psi_defect = psi_defect.max(max_abs(&(conj - &psi_moved[axis][x])));
        }
    }
    let r_moved = residual(&moved, k)?;
    let r_h = residual(conn, &h)?;
    let residual_defect = (0..conn.npoints())
        .map(|x| max_abs(&(&g[x] * &r_h[x] * &g_inv[x] - &r_moved[x])))
        .fold(0.0, f64::max);
    Ok(GaugeReport { psi_defect, residual_defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridManifold;
    use crate::linalg::{c, trace};
    use crate::random::{self, Symmetry};
    use rand::Rng;

    fn random_problem(seed: u64, grid: &GridManifold, r: usize) -> (ConnectionField, MetricField) {
        let mut rng = random::rng(seed);
        let coeffs = (0..grid.dim())
            .map(|_| random::smooth_field(&mut rng, grid, r, 2, 1.0, Symmetry::General))
            .collect();
        let conn = ConnectionField::new(grid.clone(), r, coeffs, None).unwrap();
        let k = MetricField::new(random::smooth_metric(&mut rng, grid, r, 2, 0.6)).unwrap();
        (conn, k)
    }

    #[test]
    fn unitary_connection_has_zero_psi_and_energy() {
        let grid = GridManifold::torus(8, 6, 1.0, 1.0).unwrap();
        let mut rng = random::rng(1);
        let coeffs = (0..2).map(|_| random::smooth_field(&mut rng, &grid, 3, 2, 1.0, Symmetry::AntiHermitian)).collect();
        let conn = ConnectionField::new(grid.clone(), 3, coeffs, None).unwrap();
        let k = MetricField::identity(grid.npoints(), 3);
        let p = psi(&conn, &k).unwrap();
        assert!(p.iter().flatten().all(|m| max_abs(m) < 1e-12));
        assert!(energy(&conn, &k).unwrap() < 1e-20);
        assert!(residual(&conn, &k).unwrap().iter().all(|m| max_abs(m) < 1e-10));
    }

    #[test]
    fn constant_hermitian_coefficients_are_their_own_psi() {
        let grid = GridManifold::torus(6, 8, 1.0, 2.0).unwrap();
        let mut rng = random::rng(2);
        let a1 = random::hermitian(&mut rng, 2, 1.0);
        let a2 = random::hermitian(&mut rng, 2, 1.0);
        let conn = ConnectionField::constant(grid.clone(), &[a1.clone(), a2.clone()], None).unwrap();
        let k = MetricField::identity(grid.npoints(), 2);
        let dec = decompose(&conn, &k).unwrap();
        for x in 0..grid.npoints() {
            assert!(max_abs(&(&dec.psi[0][x] - &a1)) < 1e-12);
            assert!(max_abs(&(&dec.psi[1][x] - &a2)) < 1e-12);
            assert!(max_abs(dec.metric_conn.coeff(0, x)) < 1e-12);
        }
        assert!(residual(&conn, &k).unwrap().iter().all(|m| max_abs(m) < 1e-9));
    }

    #[test]
    fn energy_of_constant_diagonal_connection() {
        let l = 2.5;
        let a = 0.7;
        let grid = GridManifold::circle(32, l).unwrap();
        let d = CMat::from_diagonal(&nalgebra::dvector![c(a, 0.0), c(-a, 0.0)]);
        let conn = ConnectionField::constant(grid.clone(), &[d], None).unwrap();
        let e = energy(&conn, &MetricField::identity(32, 2)).unwrap();
        assert!((e - 0.5 * 2.0 * a * a * l).abs() < 1e-12);
    }

    #[test]
    fn psi_is_self_adjoint_and_satisfies_the_defining_relation() {
        for seed in 0..5 {
            let grid = GridManifold::circle(24, 1.0).unwrap();
            let (conn, k) = random_problem(seed, &grid, 3);
            let dec = decompose(&conn, &k).unwrap();
            for x in 0..grid.npoints() {
                let s = &dec.psi[0][x];
                assert!(crate::bundle::self_adjoint_defect(s, k.get(x)) < 1e-10);
            }
            assert!(defining_relation_defect(&conn, &k, &dec.psi) < 1e-10);
            assert!(metric_compatibility_defect(&dec.metric_conn, &k) < 1e-10);
        }
    }

    #[test]
    fn psi_approaches_the_continuum_formula() {
        // ψ ≈ ½(A + K⁻¹A^†K − K⁻¹D⁺K) to first order
        let mut prev = f64::INFINITY;
        for n in [32, 64, 128] {
            let grid = GridManifold::circle(n, 1.0).unwrap();
            let (conn, k) = random_problem(7, &grid, 2);
            let p = psi(&conn, &k).unwrap();
            let dk = grid.forward_diff(k.values(), 0).unwrap();
            let mut err: f64 = 0.0;
            for x in 0..n {
                let a = conn.coeff(0, x);
                let kinv = k.inverse_at(x);
                let formula = scale(&(a + &kinv * a.adjoint() * k.get(x) - &kinv * &dk[x]), 0.5);
                err = err.max(max_abs(&(formula - &p[0][x])));
            }
            assert!(err < 0.6 * prev, "{err} vs {prev}");
            prev = err;
        }
    }

    #[test]
    fn residual_is_the_exact_gradient() {
        let grid = GridManifold::torus(6, 5, 1.0, 1.3).unwrap();
        for seed in 0..4 {
            let (conn, h) = random_problem(seed, &grid, 2);
            let mut rng = random::rng(100 + seed);
            let s: Vec<CMat> = (0..grid.npoints())
                .map(|x| h.inverse_at(x) * random::hermitian(&mut rng, 2, 1.0))
                .collect();
            let r = residual(&conn, &h).unwrap();
            let pairing: Vec<f64> = (0..grid.npoints()).map(|x| trace(&(&r[x] * &s[x])).re).collect();
            let predicted = GRADIENT_CONSTANT * grid.integrate(&pairing);
            let moved = |t: f64| {
                let e = crate::bundle::herm_fn(&s.iter().map(|m| scale(m, t)).collect::<Vec<_>>(), &h, HermFn::Exp).unwrap();
                energy(&conn, &h.compose(&e).unwrap()).unwrap()
            };
            let t = 1e-5;
            let fd = (moved(t) - moved(-t)) / (2.0 * t);
            assert!((fd - predicted).abs() < 1e-6 * predicted.abs().max(1e-3), "{fd} vs {predicted}");
        }
    }

    #[test]
    fn residual_integrates_to_zero_trace_and_is_self_adjoint() {
        let grid = GridManifold::torus(7, 6, 1.0, 1.0).unwrap();
        let (conn, h) = random_problem(3, &grid, 3);
        let r = residual(&conn, &h).unwrap();
        let tr: Vec<f64> = r.iter().map(|m| trace(m).re).collect();
        let scale_r = r.iter().map(max_abs).fold(0.0, f64::max);
        assert!(grid.integrate(&tr).abs() < 1e-12 * scale_r * grid.volume());
        for x in 0..grid.npoints() {
            assert!(crate::bundle::self_adjoint_defect(&r[x], h.get(x)) < 1e-10);
        }
    }

    #[test]
    fn conformal_change_shifts_the_residual_by_half_the_laplacian() {
        let grid = GridManifold::torus(8, 8, 1.0, 1.0).unwrap();
        let (conn, h) = random_problem(4, &grid, 2);
        let mut rng = random::rng(44);
        let u: Vec<f64> = (0..grid.npoints()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let h2 = MetricField::new(h.values().iter().zip(&u).map(|(m, v)| scale(m, v.exp())).collect()).unwrap();
        let r1 = residual(&conn, &h).unwrap();
        let r2 = residual(&conn, &h2).unwrap();
        let lap = grid.laplacian(&u).unwrap();
        for x in 0..grid.npoints() {
            let expected = &r1[x] + scale(&identity(2), 0.5 * lap[x]);
            assert!(max_abs(&(expected - &r2[x])) < 1e-9);
        }
    }

    #[test]
    fn metric_change_laws() {
        let grid = GridManifold::circle(32, 1.0).unwrap();
        let (conn, k) = random_problem(5, &grid, 2);
        let same = check_metric_change(&conn, &k, &k).unwrap();
        assert!(same.psi_exact < 1e-12 && same.psi_additive < 1e-12 && same.residual_l2 < 1e-10);
        let scaled = check_metric_change(&conn, &k, &k.scaled(3.0).unwrap()).unwrap();
        assert!(scaled.psi_additive < 1e-10 && scaled.residual_l2 < 1e-9);
        let mut prev = f64::INFINITY;
        for n in [32, 64, 128] {
            let grid = GridManifold::circle(n, 1.0).unwrap();
            let (conn, k) = random_problem(5, &grid, 2);
            let mut rng = random::rng(55);
            let h = MetricField::new(random::smooth_metric(&mut rng, &grid, 2, 2, 0.5)).unwrap();
            let rep = check_metric_change(&conn, &k, &h).unwrap();
            assert!(rep.psi_exact < 1e-10, "{rep:?}");
            assert!(rep.conn_exact < 1e-10, "{rep:?}");
            assert!(rep.residual_l2 < 0.55 * prev, "{rep:?}");
            prev = rep.residual_l2;
        }
    }

    #[test]
    fn gauge_equivariance_is_exact() {
        let grid = GridManifold::circle(64, 1.0).unwrap();
        let (conn, k) = random_problem(6, &grid, 3);
        let mut rng = random::rng(66);
        let g = random::smooth_gauge(&mut rng, &grid, 3, 2, 0.5);
        let rep = check_gauge_equivariance(&conn, &k, &g).unwrap();
        assert!(rep.psi_defect < 1e-9 && rep.residual_defect < 1e-9, "{rep:?}");
        let id = check_gauge_equivariance(&conn, &k, &vec![identity(3); 64]).unwrap();
        assert!(id.psi_defect < 1e-12);
    }
}
