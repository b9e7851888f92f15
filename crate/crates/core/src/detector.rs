//! Blow-up post-processing: spectral projections of the blow-up direction,
//! invariance certificates, harmonic splitting, parallel endomorphisms and
//! gauge fixing of simple connections.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{herm_fn, self_adjoint_defect, ConnectionField, EndoField, HermFn, MetricField};
use crate::decomposition::{decompose, l2_norm_in, residual};
use crate::error::{Error, Result};
use crate::linalg::{
    c, eigenvalues, eigh, frob, gram_schmidt_complete, hermitian_part, identity, inverse, orthonormal_range, polar_unitary,
    principal_angle, svd, trace, CMat, C64,
};
use crate::random;
use crate::sparse::{conjugate_gradient, rcm_ordering, tree_sum, ProfileMatrix};

/// Default relative gap for eigenvalue clustering.
pub const DEFAULT_GAP_TOL: f64 = 0.05;
/// Default singular-value threshold for parallel endomorphisms.
pub const DEFAULT_KERNEL_TOL: f64 = 1e-6;
/// Residual and defect bound required before splitting or gauge fixing.
pub const HARMONIC_GUARD: f64 = 1e-6;
/// Required accuracy of the `L²` normalization of `u_∞`.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// `‖L^† m L^{-†}‖_F`, the `K`-Frobenius norm of a general endomorphism.
fn k_frob(m: &CMat, k: &MetricField, x: usize) -> f64 {
    let f = k.factor(x);
    frob(&(f.l.adjoint() * m * f.l_inv.adjoint()))
}

fn weighted_l2(sq: &[f64], weight: f64) -> f64 {
    (weight * tree_sum(sq)).sqrt()
}

/// Field of projections of constant rank onto a sub-bundle.
#[derive(Clone, Debug)]
pub struct ProjectionField {
    pi: EndoField,
    rank: usize,
}

impl ProjectionField {
    pub fn new(pi: EndoField, rank: usize) -> Result<Self> {
        let r = pi.first().map(|m| m.nrows()).ok_or_else(|| Error::Shape("empty projection field".into()))?;
        if rank == 0 || rank >= r {
            return Err(Error::Invalid(format!("projection rank {rank} must lie strictly between 0 and {r}")));
        }
        if pi.iter().any(|m| m.nrows() != r || m.ncols() != r) {
            return Err(Error::Shape("projection matrices must all be square of the same size".into()));
        }
        Ok(Self { pi, rank })
    }

    /// Projection onto the first `k` coordinates at every point.
    pub fn coordinate(npoints: usize, r: usize, k: usize) -> Result<Self> {
        let p = CMat::from_fn(r, r, |i, j| if i == j && i < k { c(1.0, 0.0) } else { c(0.0, 0.0) });
        Self::new(vec![p; npoints], k)
    }

    pub fn values(&self) -> &[CMat] {
        &self.pi
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn bundle_rank(&self) -> usize {
        self.pi[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn complement(&self) -> EndoField {
        let id = identity(self.bundle_rank());
        self.pi.iter().map(|p| &id - p).collect()
    }

    /// `max_x ‖Π² − Π‖_F`.
    pub fn idempotency_defect(&self) -> f64 {
        self.pi.iter().map(|p| frob(&(p * p - p))).fold(0.0, f64::max)
    }

    /// `max_x ‖Π^{*K} − Π‖_F / ‖Π‖_F`.
    pub fn adjoint_defect(&self, k: &MetricField) -> f64 {
        self.pi.iter().enumerate().map(|(x, p)| self_adjoint_defect(p, k.get(x))).fold(0.0, f64::max)
    }

    /// `max_x |tr Π − k|`.
    pub fn rank_defect(&self) -> f64 {
        self.pi.iter().map(|p| (trace(p) - c(self.rank as f64, 0.0)).norm()).fold(0.0, f64::max)
    }

    /// Orthonormal (Euclidean) basis of the range of `Π(x)`.
    pub fn range_at(&self, x: usize) -> CMat {
        let q = orthonormal_range(&self.pi[x], 1e-8);
        if q.ncols() == self.rank {
            q
        } else {
            // fall back to the leading singular directions
            svd(&self.pi[x]).u.columns(0, self.rank).into_owned()
        }
    }

    /// Largest principal angle between the range and the fixed subspace
    /// spanned by the orthonormal columns of `q`, over all points.
    pub fn max_principal_angle(&self, q: &CMat) -> f64 {
        (0..self.len()).map(|x| principal_angle(&self.range_at(x), q)).fold(0.0, f64::max)
    }

    /// `H`-orthogonal projection onto the same range.
    pub fn orthogonalize(&self, h: &MetricField) -> Result<Self> {
        let pi = (0..self.len())
            .map(|x| {
                let v = self.range_at(x);
                let g = v.adjoint() * h.get(x) * &v;
                let g_inv = inverse(&g).ok_or_else(|| Error::Singular(format!("projection range at point {x}")))?;
                Ok(&v * g_inv * v.adjoint() * h.get(x))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pi, self.rank)
    }
}

/// Result of clustering the spectrum of a blow-up direction.
#[derive(Clone, Debug)]
pub struct Extraction {
    /// Volume-averaged eigenvalues in ascending order.
    pub mean_eigenvalues: Vec<f64>,
    /// Spatial variance of each sorted eigenvalue.
    pub variances: Vec<f64>,
    /// `∫ tr u_∞`.
    pub trace_integral: f64,
    /// Spread `λ̄_max − λ̄_min` of the averaged eigenvalues.
    pub spread: f64,
    pub projections: Vec<ProjectionField>,
}

impl Extraction {
    pub fn is_inconclusive(&self) -> bool {
        self.projections.is_empty()
    }
}

/// Spectral projections `Π_s` of a normalized `K`-self-adjoint `u_∞` onto the
/// eigenvalues at or below each gap of the averaged spectrum.
pub fn extract_projections(
    grid: &crate::grid::GridManifold,
    u_infty: &[CMat],
    k: &MetricField,
    gap_tol: f64,
) -> Result<Extraction> {
    grid.check_len(u_infty.len())?;
    if u_infty.len() != k.len() {
        return Err(Error::Shape("blow-up direction and metric differ in length".into()));
    }
    if !(gap_tol > 0.0 && gap_tol < 1.0) {
        return Err(Error::Invalid(format!("gap tolerance {gap_tol} must lie in (0, 1)")));
    }
    let worst = u_infty.iter().enumerate().map(|(x, u)| self_adjoint_defect(u, k.get(x))).fold(0.0, f64::max);
    if worst > crate::bundle::SELF_ADJOINT_TOL {
        return Err(Error::NotSelfAdjoint(worst));
    }
    let norm = l2_norm_in(u_infty, k, grid.weight());
    if (norm - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Precondition(format!("blow-up direction has L2 norm {norm}, expected 1")));
    }
    let r = k.rank();
    let n = u_infty.len();
    let spectra: Vec<(Vec<f64>, CMat)> =
        u_infty.par_iter().enumerate().map(|(x, u)| eigh(&k.factor(x).to_hermitian(u))).collect();
    let trace_integral = grid.integrate(&spectra.iter().map(|(v, _)| v.iter().sum()).collect::<Vec<f64>>());
    let mut mean_eigenvalues = Vec::with_capacity(r);
    let mut variances = Vec::with_capacity(r);
    for a in 0..r {
        let column: Vec<f64> = spectra.iter().map(|(v, _)| v[a]).collect();
        let mean = grid.mean(&column);
        let dev: Vec<f64> = column.iter().map(|v| (v - mean).powi(2)).collect();
        mean_eigenvalues.push(mean);
        variances.push(grid.mean(&dev));
    }
    let spread = mean_eigenvalues[r - 1] - mean_eigenvalues[0];
    let mut projections = Vec::new();
    if spread > gap_tol {
        for s in 1..r {
            if mean_eigenvalues[s] - mean_eigenvalues[s - 1] > gap_tol * spread {
                let pi = (0..n)
                    .map(|x| {
                        let (_, vecs) = &spectra[x];
                        let low = vecs.columns(0, s);
                        k.factor(x).from_hermitian(&(low * low.adjoint()))
                    })
                    .collect();
                projections.push(ProjectionField::new(pi, s)?);
            }
        }
    }
    Ok(Extraction { mean_eigenvalues, variances, trace_integral, spread, projections })
}

/// Invariance certificate for a projection field. All norms are `L²` in the
/// reference metric.
#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    /// `‖(id − Π) ∇Π‖` with the covariant forward difference.
    pub invariance_defect: f64,
    /// `‖(id − Π(x+e)) U Π(x)‖ / h`, the transport form.
    pub link_defect: f64,
    /// `‖Π δ_K (id − Π)‖`.
    pub delta_defect: f64,
    /// Defect of the closed form of `∇Π` in terms of `ψ_K`.
    pub closed_form_defect: f64,
    /// `‖∇Π‖`, for scale.
    pub derivative_norm: f64,
}

/// Measures how far `Π` is from spanning a `∇`-invariant sub-bundle.
///
/// The closed form is the lattice version of `∇Π = 2Π∘[ψ_K, Π]`: with
/// `E = e^{2hψ} = Y⁻¹K` it reads
/// `h ∇Π = −Π E (id − Π) [(id − Π) E (id − Π) + Π]⁻¹ (id − Π)`,
/// exact whenever the transports preserve the range of `Π`.
pub fn verify_invariance(conn: &ConnectionField, pi: &ProjectionField, k: &MetricField) -> Result<InvarianceReport> {
    let grid = conn.grid();
    grid.check_len(pi.len())?;
    if pi.bundle_rank() != conn.rank() {
        return Err(Error::Shape("projection rank differs from bundle rank".into()));
    }
    let dec = decompose(conn, k)?;
    let id = identity(conn.rank());
    let comp = pi.complement();
    let p = pi.values();
    let mut sq = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for axis in 0..conn.dim() {
        let h = grid.spacing(axis);
        let d_pi = conn.endo_diff(p, axis)?;
        let d_comp = dec.delta_conn.endo_diff(&comp, axis)?;
        let rows: Vec<[f64; 5]> = (0..conn.npoints())
            .into_par_iter()
            .map(|x| {
                let next = grid.shift(x, axis, true);
                let u = conn.link(axis, x);
                let inv = &comp[x] * &d_pi[x];
                let link = (&id - &p[next]) * u * &p[x] * c(1.0 / h, 0.0);
                let delta = &p[x] * &d_comp[x];
                let y = u.adjoint() * k.get(next) * u;
                let e = inverse(&y).expect("pulled-back metric is invertible") * k.get(x);
                let block = &comp[x] * &e * &comp[x] + &p[x];
                let closed = match inverse(&block) {
                    Some(b_inv) => (&p[x] * &e * &comp[x] * b_inv * &comp[x]) * c(-1.0 / h, 0.0),
                    None => CMat::from_element(conn.rank(), conn.rank(), c(f64::NAN, 0.0)),
                };
                [
                    k_frob(&inv, k, x).powi(2),
                    k_frob(&link, k, x).powi(2),
                    k_frob(&delta, k, x).powi(2),
                    k_frob(&(&d_pi[x] - closed), k, x).powi(2),
                    k_frob(&d_pi[x], k, x).powi(2),
                ]
            })
            .collect();
        for row in rows {
            for (acc, v) in sq.iter_mut().zip(row) {
                acc.push(v);
            }
        }
    }
    let w = grid.weight();
    Ok(InvarianceReport {
        invariance_defect: weighted_l2(&sq[0], w),
        link_defect: weighted_l2(&sq[1], w),
        delta_defect: weighted_l2(&sq[2], w),
        closed_form_defect: weighted_l2(&sq[3], w),
        derivative_norm: weighted_l2(&sq[4], w),
    })
}

/// `m^{-1/2}` of a Hermitian positive-definite matrix.
fn inv_sqrt(m: &CMat) -> Result<CMat> {
    let (vals, vecs) = eigh(&hermitian_part(m));
    if !(vals[0] > 0.0) {
        return Err(Error::Singular("Gram matrix of a sub-bundle frame".into()));
    }
    Ok(crate::linalg::compose_eig(&vals, &vecs, |v| 1.0 / v.sqrt()))
}

/// `H`-orthonormal frames `g(x) = [F | F^⊥]` adapted to `Π`, aligned with the
/// transport along a spanning tree so that the frame field is smooth.
fn adapted_frames(conn: &ConnectionField, pi: &ProjectionField, h: &MetricField) -> Result<Vec<CMat>> {
    let grid = conn.grid();
    let r = conn.rank();
    let k = pi.rank();
    let raw: Vec<(CMat, CMat)> = (0..pi.len())
        .map(|x| {
            let v = pi.range_at(x);
            let vf = &v * inv_sqrt(&(v.adjoint() * h.get(x) * &v))?;
            // Euclidean complement of H·F is the H-orthogonal complement of F
            let hv = h.get(x) * &vf;
            let q = gram_schmidt_complete(&svd(&hv).u.columns(0, k).into_owned());
            let w = q.columns(k, r - k).into_owned();
            let wp = &w * inv_sqrt(&(w.adjoint() * h.get(x) * &w))?;
            Ok((vf, wp))
        })
        .collect::<Result<_>>()?;
    let mut frames: Vec<Option<CMat>> = vec![None; pi.len()];
    let assemble = |vf: &CMat, wp: &CMat| {
        let mut g = CMat::zeros(r, r);
        g.columns_mut(0, k).copy_from(vf);
        g.columns_mut(k, r - k).copy_from(wp);
        g
    };
    frames[0] = Some(assemble(&raw[0].0, &raw[0].1));
    let align = |from: usize, to: usize, axis: usize, frames: &[Option<CMat>]| {
        let prev = frames[from].as_ref().expect("tree parent has a frame");
        let t = conn.link(axis, from) * prev;
        let (vf, wp) = &raw[to];
        let qf = polar_unitary(&(vf.adjoint() * h.get(to) * t.columns(0, k)));
        let qp = polar_unitary(&(wp.adjoint() * h.get(to) * t.columns(k, r - k)));
        assemble(&(vf * qf), &(wp * qp))
    };
    let sizes = grid.sizes().to_vec();
    if grid.dim() == 1 {
        for x in 1..sizes[0] {
            frames[x] = Some(align(x - 1, x, 0, &frames));
        }
    } else {
        for j in 1..sizes[1] {
            let (from, to) = (grid.index(&[0, j - 1]), grid.index(&[0, j]));
            frames[to] = Some(align(from, to, 1, &frames));
        }
        for j in 0..sizes[1] {
            for i in 1..sizes[0] {
                let (from, to) = (grid.index(&[i - 1, j]), grid.index(&[i, j]));
                frames[to] = Some(align(from, to, 0, &frames));
            }
        }
    }
    Ok(frames.into_iter().map(|g| g.expect("every point is reached by the tree")).collect())
}

/// Outcome of splitting along an invariant sub-bundle.
#[derive(Clone, Debug, Serialize)]
pub struct SplitReport {
    pub rank_f: usize,
    pub rank_perp: usize,
    /// `‖R(∇, H)‖_{L²}` of the input metric.
    pub residual_l2: f64,
    /// Transport-form invariance defect of `Π`.
    pub invariance_defect: f64,
    /// `H`-self-adjointness defect of the supplied `Π` before re-orthogonalization.
    pub orthogonality_defect: f64,
    pub preconditions_met: bool,
    /// `‖β_F‖_{L²}`, the `Hom(F^⊥, F)` block of the connection.
    pub beta_l2: f64,
    /// `L²` norm of the `Hom(F, F^⊥)` block, zero for an exactly invariant `F`.
    pub lower_l2: f64,
    /// Harmonic residuals of the restricted connections on `F` and `F^⊥`.
    pub block_residuals: [f64; 2],
    pub passed: bool,
}

/// Split result: report plus the restricted connections in `H`-unitary frames,
/// where the restricted metrics are the identity.
#[derive(Clone, Debug)]
pub struct Split {
    pub report: SplitReport,
    pub blocks: Option<(ConnectionField, ConnectionField)>,
    /// Adapted frames `g(x)`; the split connection is `g⁻¹ ∇ g`.
    pub frames: Option<Vec<CMat>>,
}

/// Splits `(E, ∇, H)` along the `∇`-invariant sub-bundle `Π` with `H` harmonic.
pub fn split_harmonic(conn: &ConnectionField, h: &MetricField, pi: &ProjectionField) -> Result<Split> {
    let grid = conn.grid();
    grid.check_len(pi.len())?;
    let r = conn.rank();
    let k = pi.rank();
    let w = grid.weight();
    let residual_l2 = l2_norm_in(&residual(conn, h)?, h, w);
    let orthogonality_defect = pi.adjoint_defect(h);
    let pi_h = pi.orthogonalize(h)?;
    let invariance_defect = verify_invariance(conn, &pi_h, h)?.link_defect;
    let preconditions_met = residual_l2 < HARMONIC_GUARD && invariance_defect < HARMONIC_GUARD;
    let mut report = SplitReport {
        rank_f: k,
        rank_perp: r - k,
        residual_l2,
        invariance_defect,
        orthogonality_defect,
        preconditions_met,
        beta_l2: f64::NAN,
        lower_l2: f64::NAN,
        block_residuals: [f64::NAN; 2],
        passed: false,
    };
    if !preconditions_met {
        return Ok(Split { report, blocks: None, frames: None });
    }
    let frames = adapted_frames(conn, &pi_h, h)?;
    let frames_inv: Vec<CMat> = frames
        .iter()
        .map(|g| inverse(g).ok_or_else(|| Error::Singular("adapted frame".into())))
        .collect::<Result<_>>()?;
    let mut beta_sq = Vec::new();
    let mut lower_sq = Vec::new();
    let mut links_f = Vec::new();
    let mut links_p = Vec::new();
    for axis in 0..conn.dim() {
        let hs = grid.spacing(axis);
        let mut row_f = Vec::with_capacity(conn.npoints());
        let mut row_p = Vec::with_capacity(conn.npoints());
        for x in 0..conn.npoints() {
            let next = grid.shift(x, axis, true);
            let u = &frames_inv[next] * conn.link(axis, x) * &frames[x];
            beta_sq.push((frob(&u.view((0, k), (k, r - k)).into_owned()) / hs).powi(2));
            lower_sq.push((frob(&u.view((k, 0), (r - k, k)).into_owned()) / hs).powi(2));
            row_f.push(u.view((0, 0), (k, k)).into_owned());
            row_p.push(u.view((k, k), (r - k, r - k)).into_owned());
        }
        links_f.push(row_f);
        links_p.push(row_p);
    }
    report.beta_l2 = weighted_l2(&beta_sq, w);
    report.lower_l2 = weighted_l2(&lower_sq, w);
    let block_f = block_connection(conn, links_f)?;
    let block_p = block_connection(conn, links_p)?;
    let res_f = l2_norm_in(&residual(&block_f, &MetricField::identity(conn.npoints(), k))?, &MetricField::identity(conn.npoints(), k), w);
    let res_p = l2_norm_in(
        &residual(&block_p, &MetricField::identity(conn.npoints(), r - k))?,
        &MetricField::identity(conn.npoints(), r - k),
        w,
    );
    report.block_residuals = [res_f, res_p];
    report.passed = report.beta_l2 < HARMONIC_GUARD && res_f < HARMONIC_GUARD && res_p < HARMONIC_GUARD;
    Ok(Split { report, blocks: Some((block_f, block_p)), frames: Some(frames) })
}

/// Restricted connection from block links. Each axis gets the twist of its
/// reference seam link so the remaining seam coefficients stay small.
fn block_connection(conn: &ConnectionField, links: crate::bundle::FormEndoField) -> Result<ConnectionField> {
    let grid = conn.grid().clone();
    let rank = links[0][0].nrows();
    let twist: Vec<CMat> = (0..grid.dim())
        .map(|axis| {
            let mut coords = vec![0; grid.dim()];
            coords[axis] = grid.sizes()[axis] - 1;
            links[axis][grid.index(&coords)].clone()
        })
        .collect();
    let has_twist = twist.iter().any(|b| frob(&(b - identity(rank))) > 1e-12);
    ConnectionField::from_links(grid, rank, links, if has_twist { Some(twist) } else { None })
}

/// Ritz residual, relative to the largest diagonal entry, required of kernel vectors.
const KERNEL_RESIDUAL: f64 = 1e-12;

/// Largest number of stored profile entries before switching to CG solves.
const PROFILE_LIMIT: usize = 60_000_000;

/// Near-kernel of `f ↦ ∇f` on endomorphism fields.
#[derive(Clone, Debug)]
pub struct ParallelEndomorphisms {
    /// Number of singular values below the tolerance.
    pub dimension: usize,
    /// Smallest singular values of `∇` relative to the `L²` norm, ascending,
    /// one per complex dimension.
    pub singular_values: Vec<f64>,
    /// `L²`-orthonormal basis of the near-kernel.
    pub basis: Vec<EndoField>,
    /// `max |tr fᵏ(x) − mean|` over basis elements, points and `k ≤ r`.
    pub trace_power_defect: f64,
}

impl ParallelEndomorphisms {
    pub fn is_simple(&self) -> bool {
        self.dimension == 1
    }
}

/// Real index of the real or imaginary part of entry `(a, b)` at point `x`.
#[inline]
fn real_index(x: usize, a: usize, b: usize, r: usize, imag: bool) -> usize {
    ((x * r + a) * r + b) * 2 + imag as usize
}

/// Real form of `L = Σ_μ (1/h²) Σ_x |U⁻¹f(x+e)U − f(x)|²`, scaled so that
/// its eigenvalues are squared `L²` singular values of `∇`. Returns per-point
/// dense blocks keyed by neighbour.
fn endo_laplacian_blocks(conn: &ConnectionField) -> (Vec<Vec<usize>>, Vec<Vec<DMatrix<crate::linalg::C64>>>) {
    let grid = conn.grid();
    let n = conn.npoints();
    let r = conn.rank();
    let m = r * r;
    let mut neighbours: Vec<Vec<usize>> = (0..n).map(|x| vec![x]).collect();
    for x in 0..n {
        for axis in 0..conn.dim() {
            for fwd in [true, false] {
                let y = grid.shift(x, axis, fwd);
                if !neighbours[x].contains(&y) {
                    neighbours[x].push(y);
                }
            }
        }
    }
    let mut blocks: Vec<Vec<DMatrix<crate::linalg::C64>>> =
        neighbours.iter().map(|nb| vec![DMatrix::zeros(m, m); nb.len()]).collect();
    let slot = |nb: &[usize], y: usize| nb.iter().position(|&s| s == y).unwrap();
    for axis in 0..conn.dim() {
        let cw = 1.0 / grid.spacing(axis).powi(2);
        for x in 0..n {
            let y = grid.shift(x, axis, true);
            let u = conn.link(axis, x);
            let ui = conn.link_inv(axis, x);
            // (U⁻¹ F U)_{ab} = Σ_{cd} U⁻¹_{ac} F_{cd} U_{db}
            let t = DMatrix::from_fn(m, m, |row, col| {
                let (a, b) = (row / r, row % r);
                let (cc, d) = (col / r, col % r);
                ui[(a, cc)] * u[(d, b)]
            });
            let th = t.adjoint();
            let sx = slot(&neighbours[x], x);
            for i in 0..m {
                blocks[x][sx][(i, i)] += c(cw, 0.0);
            }
            let sy = slot(&neighbours[y], y);
            blocks[y][sy] += (&th * &t) * c(cw, 0.0);
            let sxy = slot(&neighbours[x], y);
            blocks[x][sxy] -= &t * c(cw, 0.0);
            let syx = slot(&neighbours[y], x);
            blocks[y][syx] -= th * c(cw, 0.0);
        }
    }
    (neighbours, blocks)
}

/// Applies the real form of the block operator.
fn apply_blocks(neighbours: &[Vec<usize>], blocks: &[Vec<DMatrix<crate::linalg::C64>>], r: usize, v: &[f64]) -> Vec<f64> {
    let m = r * r;
    let n = neighbours.len();
    let parts: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|x| {
            let mut out = vec![0.0; 2 * m];
            for (s, &y) in neighbours[x].iter().enumerate() {
                let blk = &blocks[x][s];
                for i in 0..m {
                    let mut acc = c(0.0, 0.0);
                    for j in 0..m {
                        let z = c(v[(y * m + j) * 2], v[(y * m + j) * 2 + 1]);
                        acc += blk[(i, j)] * z;
                    }
                    out[2 * i] += acc.re;
                    out[2 * i + 1] += acc.im;
                }
            }
            out
        })
        .collect();
    parts.concat()
}

/// Shift-inverted solver `(L + σ)⁻¹`, direct when the envelope fits.
enum ShiftedSolver<'a> {
    Direct { mat: ProfileMatrix, pos: Vec<usize> },
    Iterative { neighbours: &'a [Vec<usize>], blocks: &'a [Vec<DMatrix<crate::linalg::C64>>], r: usize, sigma: f64, diag: Vec<f64> },
}

impl ShiftedSolver<'_> {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            ShiftedSolver::Direct { mat, pos } => {
                let mut permuted = vec![0.0; b.len()];
                for (i, &p) in pos.iter().enumerate() {
                    permuted[p] = b[i];
                }
                let sol = mat.solve(&permuted);
                Ok(pos.iter().map(|&p| sol[p]).collect())
            }
            ShiftedSolver::Iterative { neighbours, blocks, r, sigma, diag } => {
                let apply = |v: &[f64]| {
                    let mut out = apply_blocks(neighbours, blocks, *r, v);
                    for (o, vi) in out.iter_mut().zip(v) {
                        *o += sigma * vi;
                    }
                    out
                };
                conjugate_gradient(apply, diag, b, 1e-12, 20 * b.len().max(100)).map(|(x, _)| x)
            }
        }
    }
}

fn build_solver<'a>(
    neighbours: &'a [Vec<usize>],
    blocks: &'a [Vec<DMatrix<crate::linalg::C64>>],
    r: usize,
    max_diag: f64,
) -> Result<ShiftedSolver<'a>> {
    let m = r * r;
    let n = neighbours.len();
    let dofs = 2 * n * m;
    let order = rcm_ordering(neighbours);
    let mut order_pos = vec![0; n];
    for (k, &p) in order.iter().enumerate() {
        order_pos[p] = k;
    }
    let mut pos = vec![0; dofs];
    let mut first = vec![0; dofs];
    for x in 0..n {
        let lo = neighbours[x].iter().map(|&y| order_pos[y]).min().unwrap() * 2 * m;
        for i in 0..2 * m {
            let p = order_pos[x] * 2 * m + i;
            pos[x * 2 * m + i] = p;
            first[p] = lo.min(p);
        }
    }
    let stored: usize = first.iter().enumerate().map(|(i, &f)| i - f + 1).sum();
    if stored <= PROFILE_LIMIT {
        let mut sigma = 1e-11 * max_diag;
        for _ in 0..6 {
            let mut mat = ProfileMatrix::new(first.clone());
            for x in 0..n {
                for (s, &y) in neighbours[x].iter().enumerate() {
                    let blk = &blocks[x][s];
                    for i in 0..m {
                        for j in 0..m {
                            let z = blk[(i, j)];
                            // real form [[re, −im], [im, re]]
                            let entries = [(false, false, z.re), (false, true, -z.im), (true, false, z.im), (true, true, z.re)];
                            for (ri, ci, v) in entries {
                                let row = pos[real_index(x, i / r, i % r, r, ri)];
                                let col = pos[real_index(y, j / r, j % r, r, ci)];
                                if row >= col {
                                    mat.add(row, col, v);
                                }
                            }
                        }
                    }
                }
            }
            for i in 0..dofs {
                mat.add(i, i, sigma);
            }
            if mat.factor().is_ok() {
                return Ok(ShiftedSolver::Direct { mat, pos });
            }
            sigma *= 100.0;
        }
        Err(Error::Singular("shifted endomorphism Laplacian".into()))
    } else {
        let sigma = 1e-8 * max_diag;
        let mut diag = vec![0.0; dofs];
        for x in 0..n {
            for i in 0..m {
                let v = blocks[x][0][(i, i)].re + sigma;
                diag[(x * m + i) * 2] = v;
                diag[(x * m + i) * 2 + 1] = v;
            }
        }
        Ok(ShiftedSolver::Iterative { neighbours, blocks, r, sigma, diag })
    }
}

fn orthonormalize_columns(x: &mut DMatrix<f64>) {
    let qr = x.clone().qr();
    *x = qr.q();
}

/// Near-kernel of the covariant derivative on endomorphisms, by shift-invert
/// subspace iteration on `∇*∇` with Rayleigh–Ritz extraction.
pub fn parallel_endomorphisms(conn: &ConnectionField, tol: f64) -> Result<ParallelEndomorphisms> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("kernel tolerance {tol} must be positive")));
    }
    let grid = conn.grid();
    let r = conn.rank();
    let m = r * r;
    let n = conn.npoints();
    let dofs = 2 * n * m;
    let (neighbours, blocks) = endo_laplacian_blocks(conn);
    let max_diag = blocks.iter().map(|b| (0..m).map(|i| b[0][(i, i)].re).fold(0.0, f64::max)).fold(0.0, f64::max);
    let solver = build_solver(&neighbours, &blocks, r, max_diag)?;
    let p = (2 * (m + 2)).min(dofs);
    let mut rng = random::rng(0x5eed_0f_ba5e);
    let mut x = DMatrix::<f64>::from_fn(dofs, p, |_, _| rng.random_range(-1.0..1.0));
    orthonormalize_columns(&mut x);
    let mut ritz: Vec<f64> = vec![f64::INFINITY; p];
    let mut vecs = x.clone();
    for _ in 0..60 {
        let cols: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|j| solver.solve(x.column(j).as_slice()))
            .collect::<Result<_>>()?;
        x = DMatrix::from_fn(dofs, p, |i, j| cols[j][i]);
        orthonormalize_columns(&mut x);
        let lx_cols: Vec<Vec<f64>> =
            (0..p).into_par_iter().map(|j| apply_blocks(&neighbours, &blocks, r, x.column(j).as_slice())).collect();
        let lx = DMatrix::from_fn(dofs, p, |i, j| lx_cols[j][i]);
        let small = x.transpose() * &lx;
        let small = (&small + small.transpose()) * 0.5;
        let eig = small.symmetric_eigen();
        let mut idx: Vec<usize> = (0..p).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let new_ritz: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let rot = DMatrix::from_fn(p, p, |i, j| eig.eigenvectors[(i, idx[j])]);
        vecs = &x * &rot;
        // Ritz values converge with the square of the vector error, so kernel
        // candidates must also have small residuals
        let lvecs = &lx * &rot;
        let half = p / 2;
        let stable = (0..half).all(|i| {
            let settled = (new_ritz[i] - ritz[i]).abs() <= 1e-9 * max_diag.max(1.0) * 1e-3 + 1e-8 * new_ritz[i];
            let accurate = new_ritz[i] >= tol * tol
                || (lvecs.column(i) - vecs.column(i) * new_ritz[i]).norm() <= KERNEL_RESIDUAL * max_diag.max(1.0);
            settled && accurate
        });
        ritz = new_ritz;
        x = vecs.clone();
        if stable {
            break;
        }
    }
    // complex singular values: real eigenvalues come in pairs
    let singular_values: Vec<f64> = ritz.iter().step_by(2).map(|l| l.sqrt()).take(m).collect();
    let dimension = singular_values.iter().filter(|&&s| s < tol).count();
    let candidates: Vec<Vec<crate::linalg::C64>> = (0..2 * dimension)
        .map(|j| (0..n * m).map(|i| c(vecs[(2 * i, j)], vecs[(2 * i + 1, j)])).collect())
        .collect();
    let complex_basis = complex_gram_schmidt(candidates, dimension);
    let w = grid.weight();
    let basis: Vec<EndoField> = complex_basis
        .iter()
        .map(|v| {
            let scale = 1.0 / w.sqrt();
            (0..n).map(|x| CMat::from_fn(r, r, |a, b| v[x * m + a * r + b] * scale)).collect()
        })
        .collect();
    let mut trace_power_defect: f64 = 0.0;
    for f in &basis {
        let mut power: Vec<CMat> = f.clone();
        for _ in 1..=r {
            let traces: Vec<crate::linalg::C64> = power.iter().map(trace).collect();
            let mean = traces.iter().fold(c(0.0, 0.0), |a, t| a + t) / c(n as f64, 0.0);
            let scale_ref = traces.iter().map(|t| t.norm()).fold(0.0, f64::max).max(1.0);
            let dev = traces.iter().map(|t| (t - mean).norm()).fold(0.0, f64::max) / scale_ref;
            trace_power_defect = trace_power_defect.max(dev);
            power = power.iter().zip(f).map(|(a, b)| a * b).collect();
        }
    }
    Ok(ParallelEndomorphisms { dimension, singular_values, basis, trace_power_defect })
}

/// Modified Gram–Schmidt in `ℂⁿ`, keeping at most `keep` vectors.
fn complex_gram_schmidt(vectors: Vec<Vec<crate::linalg::C64>>, keep: usize) -> Vec<Vec<crate::linalg::C64>> {
    let mut out: Vec<Vec<crate::linalg::C64>> = Vec::new();
    for mut v in vectors {
        if out.len() == keep {
            break;
        }
        for _ in 0..2 {
            for u in &out {
                let proj: crate::linalg::C64 = u.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let nv = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nv > 1e-6 {
            out.push(v.into_iter().map(|z| z / nv).collect());
        }
    }
    out
}

/// Dimension of the commutant of the lattice holonomy group at point 0,
/// computed by brute force: transports along a spanning tree give `P_x`, every
/// non-tree link `x → y` gives the loop `P_y⁻¹ U P_x`. Eigenvalues of the
/// stacked commutator system below `rel_tol` times the largest count.
pub fn holonomy_commutant_dimension(conn: &ConnectionField, rel_tol: f64) -> usize {
    let loops = holonomy_generators(conn);
    let r = conn.rank();
    let m = r * r;
    let mut normal = DMatrix::<crate::linalg::C64>::zeros(m, m);
    for g in &loops {
        let g = g / c(frob(g), 0.0);
        // vec(G F − F G) with row-major vec index a·r + b
        let op = DMatrix::from_fn(m, m, |row, col| {
            let (a, b) = (row / r, row % r);
            let (cc, d) = (col / r, col % r);
            let mut z = c(0.0, 0.0);
            if d == b {
                z += g[(a, cc)];
            }
            if cc == a {
                z -= g[(d, b)];
            }
            z
        });
        normal += op.adjoint() * op;
    }
    let (vals, _) = eigh(&hermitian_part(&normal));
    let top = vals.last().cloned().unwrap_or(0.0).max(1e-300);
    vals.iter().filter(|&&v| v < rel_tol * top).count()
}

/// Loop holonomies at point 0 from a spanning tree of the lattice graph.
pub fn holonomy_generators(conn: &ConnectionField) -> Vec<CMat> {
    let grid = conn.grid();
    let n = conn.npoints();
    let mut path: Vec<Option<CMat>> = vec![None; n];
    let mut tree_edge = vec![vec![false; n]; conn.dim()];
    path[0] = Some(identity(conn.rank()));
    let sizes = grid.sizes().to_vec();
    let walk = |from: usize, axis: usize, path: &mut Vec<Option<CMat>>, tree_edge: &mut Vec<Vec<bool>>| {
        let to = grid.shift(from, axis, true);
        path[to] = Some(conn.link(axis, from) * path[from].as_ref().unwrap());
        tree_edge[axis][from] = true;
    };
    if conn.dim() == 1 {
        for x in 0..sizes[0] - 1 {
            walk(x, 0, &mut path, &mut tree_edge);
        }
    } else {
        for j in 0..sizes[1] - 1 {
            walk(grid.index(&[0, j]), 1, &mut path, &mut tree_edge);
        }
        for j in 0..sizes[1] {
            for i in 0..sizes[0] - 1 {
                walk(grid.index(&[i, j]), 0, &mut path, &mut tree_edge);
            }
        }
    }
    let path: Vec<CMat> = path.into_iter().map(|p| p.unwrap()).collect();
    let mut loops = Vec::new();
    for axis in 0..conn.dim() {
        for x in 0..n {
            if !tree_edge[axis][x] {
                let y = grid.shift(x, axis, true);
                let py_inv = inverse(&path[y]).expect("tree transport is invertible");
                loops.push(py_inv * conn.link(axis, x) * &path[x]);
            }
        }
    }
    loops
}

/// `H`-orthogonal projection onto an eigen-subbundle of a parallel
/// endomorphism. The Riesz projector `∏_{j≠0} (φ − c_j)/(c_0 − c_j)` onto the
/// lowest eigenvalue cluster is itself parallel, so its range is invariant.
/// `None` when every basis element is scalar.
pub fn parallel_projection(
    conn: &ConnectionField,
    par: &ParallelEndomorphisms,
    h: &MetricField,
) -> Result<Option<ProjectionField>> {
    let r = conn.rank();
    let n = conn.npoints();
    for phi in &par.basis {
        // eigenvalues are constant for a parallel field; average them
        let mut mean = vec![C64::new(0.0, 0.0); r];
        for f in phi {
            let mut ev = eigenvalues(f);
            ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
            for (m, e) in mean.iter_mut().zip(ev) {
                *m += e / n as f64;
            }
        }
        let spread = mean.iter().flat_map(|a| mean.iter().map(move |b| (a - b).norm())).fold(0.0, f64::max);
        if !(spread > 1e-6) {
            continue;
        }
        let mut centres: Vec<(C64, usize)> = Vec::new();
        for e in mean {
            match centres.iter_mut().find(|(c, _)| (c - e).norm() <= 1e-3 * spread) {
                Some((_, k)) => *k += 1,
                None => centres.push((e, 1)),
            }
        }
        let (c0, rank) = centres[0];
        let id = identity(r);
        let pi: EndoField = phi
            .iter()
            .map(|f| {
                centres[1..].iter().fold(id.clone(), |acc, &(cj, _)| acc * ((f - &id * cj) / (c0 - cj)))
            })
            .collect();
        return Ok(Some(ProjectionField::new(pi, rank)?.orthogonalize(h)?));
    }
    Ok(None)
}

/// Gauge-fixed connection realizing a harmonic metric as the reference one.
#[derive(Clone, Debug)]
pub struct GaugeFix {
    /// `h = (K⁻¹H)^{1/2}`, `K`-self-adjoint with `h^{*K} h = K⁻¹H`.
    pub gauge: EndoField,
    pub connection: ConnectionField,
    /// `‖R(h(∇), K)‖_{L²}`.
    pub residual_l2: f64,
}

/// Applies `h = (K⁻¹H)^{1/2}` so that `K` becomes harmonic for `h(∇)`.
/// Refuses connections whose parallel endomorphisms are not just scalars.
pub fn gauge_fix(conn: &ConnectionField, k: &MetricField, h: &MetricField, kernel_tol: f64) -> Result<GaugeFix> {
    let w = conn.grid().weight();
    let res = l2_norm_in(&residual(conn, h)?, h, w);
    if !(res < HARMONIC_GUARD) {
        return Err(Error::Precondition(format!("metric is not harmonic (residual {res:e})")));
    }
    let par = parallel_endomorphisms(conn, kernel_tol)?;
    if !par.is_simple() {
        return Err(Error::Precondition(format!("connection is not simple ({} parallel endomorphisms)", par.dimension)));
    }
    let f = k.relative(h);
    let gauge = herm_fn(&f, k, HermFn::Sqrt)?;
    let connection = conn.gauge_act(&gauge)?;
    let residual_l2 = l2_norm_in(&residual(&connection, k)?, k, w);
    Ok(GaugeFix { gauge, connection, residual_l2 })
}

/// Scalar relating two harmonic metrics of a simple connection.
#[derive(Clone, Debug, Serialize)]
pub struct Uniqueness {
    /// Best-fit `c` in `H₁⁻¹H₂ ≈ c·id`.
    pub scale: f64,
    /// `max_x ‖H₁⁻¹H₂ − c·id‖_F`.
    pub defect: f64,
}

/// Checks that two harmonic metrics of a simple connection differ by a
/// constant scalar.
pub fn uniqueness_check(conn: &ConnectionField, h1: &MetricField, h2: &MetricField, kernel_tol: f64) -> Result<Uniqueness> {
    let grid = conn.grid();
    let w = grid.weight();
    for (name, h) in [("first", h1), ("second", h2)] {
        let res = l2_norm_in(&residual(conn, h)?, h, w);
        if !(res < HARMONIC_GUARD) {
            return Err(Error::Precondition(format!("{name} metric is not harmonic (residual {res:e})")));
        }
    }
    let par = parallel_endomorphisms(conn, kernel_tol)?;
    if !par.is_simple() {
        return Err(Error::Precondition(format!("connection is not simple ({} parallel endomorphisms)", par.dimension)));
    }
    let rel = h1.relative(h2);
    let r = conn.rank() as f64;
    let traces: Vec<f64> = rel.iter().map(|m| trace(m).re / r).collect();
    let scale = grid.mean(&traces);
    let id = identity(conn.rank());
    let defect = rel.iter().map(|m| frob(&(m - &id * c(scale, 0.0)))).fold(0.0, f64::max);
    Ok(Uniqueness { scale, defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuity::{continuity_solve, SolveOutcome, SolverConfig};
    use crate::grid::GridManifold;
    use crate::problem::{generate, Family};
    use crate::random;

    fn constant_conn(n: usize, a: CMat) -> ConnectionField {
        ConnectionField::constant(GridManifold::circle(n, 2.0).unwrap(), &[a], None).unwrap()
    }

    fn harmonic(p: &crate::problem::Problem) -> MetricField {
        match continuity_solve(&p.connection, &p.metric, &SolverConfig::default()).unwrap().outcome {
            SolveOutcome::Harmonic { h, .. } => h,
            SolveOutcome::BlowUp { .. } => panic!("expected a harmonic metric"),
        }
    }

    #[test]
    fn coordinate_flag_of_triangular_connection_is_invariant() {
        let mut rng = random::rng(1);
        let mut a = random::matrix(&mut rng, 3, 1.0);
        a[(1, 0)] = c(0.0, 0.0);
        a[(2, 0)] = c(0.0, 0.0);
        let conn = constant_conn(32, a.clone());
        let k = MetricField::identity(32, 3);
        let pi = ProjectionField::coordinate(32, 3, 1).unwrap();
        let rep = verify_invariance(&conn, &pi, &k).unwrap();
        assert!(rep.invariance_defect < 1e-10 && rep.link_defect < 1e-10, "{rep:?}");
        // the second coordinate flag is not invariant for a full upper block
        let generic = verify_invariance(&conn, &ProjectionField::coordinate(32, 3, 2).unwrap(), &k).unwrap();
        assert!(generic.link_defect > 1e-2, "{generic:?}");
    }

    #[test]
    fn extraction_from_a_constant_traceless_direction() {
        let grid = GridManifold::circle(16, 2.0).unwrap();
        let k = MetricField::identity(16, 2);
        let u = CMat::from_diagonal(&nalgebra::dvector![c(0.5, 0.0), c(-0.5, 0.0)]);
        let ex = extract_projections(&grid, &vec![u; 16], &k, DEFAULT_GAP_TOL).unwrap();
        assert_eq!(ex.projections.len(), 1);
        assert!((ex.spread - 1.0).abs() < 1e-14);
        assert!(ex.trace_integral.abs() < 1e-14);
        let e2 = CMat::from_column_slice(2, 1, &[c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(ex.projections[0].max_principal_angle(&e2) < 1e-12);
        // a scalar direction carries no flag
        let s = identity(2) * c(0.5, 0.0);
        let scalar = extract_projections(&grid, &vec![s; 16], &k, DEFAULT_GAP_TOL).unwrap();
        assert!(scalar.is_inconclusive());
    }

    #[test]
    fn extraction_guards() {
        let grid = GridManifold::circle(16, 2.0).unwrap();
        let k = MetricField::identity(16, 2);
        let u = CMat::from_diagonal(&nalgebra::dvector![c(1.0, 0.0), c(-1.0, 0.0)]);
        assert!(matches!(extract_projections(&grid, &vec![u.clone(); 16], &k, 0.05), Err(Error::Precondition(_))));
        assert!(matches!(extract_projections(&grid, &vec![u; 16], &k, 1.5), Err(Error::Invalid(_))));
        let skew = CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        assert!(matches!(extract_projections(&grid, &vec![skew; 16], &k, 0.05), Err(Error::NotSelfAdjoint(_))));
    }

    #[test]
    fn harmonic_metrics_of_a_simple_connection_differ_by_a_constant() {
        let p = generate(Family::RandomSimple, 2, &[6, 6], 2).unwrap();
        let h = harmonic(&p);
        let u = uniqueness_check(&p.connection, &h, &h.scaled(3.0).unwrap(), DEFAULT_KERNEL_TOL).unwrap();
        assert!((u.scale - 3.0).abs() < 1e-12 && u.defect < 1e-10, "{u:?}");
        let fixed = gauge_fix(&p.connection, &p.metric, &h, DEFAULT_KERNEL_TOL).unwrap();
        assert!(fixed.residual_l2 < 1e-6);
    }

    #[test]
    fn non_harmonic_and_decomposable_inputs_are_refused() {
        let p = generate(Family::RandomSimple, 2, &[6, 6], 3).unwrap();
        let mut rng = random::rng(9);
        let bumpy = MetricField::new(random::smooth_metric(&mut rng, p.grid(), 2, 2, 0.5)).unwrap();
        let h = harmonic(&p);
        assert!(matches!(uniqueness_check(&p.connection, &h, &bumpy, 1e-6), Err(Error::Precondition(_))));
        assert!(matches!(gauge_fix(&p.connection, &p.metric, &bumpy, 1e-6), Err(Error::Precondition(_))));
        let d = generate(Family::BlockDiag, 2, &[32], 1).unwrap();
        let hd = harmonic(&d);
        assert!(matches!(gauge_fix(&d.connection, &d.metric, &hd, 1e-6), Err(Error::Precondition(_))));
    }

    #[test]
    fn parallel_endomorphisms_match_the_holonomy_commutant() {
        for (family, r, sizes) in [(Family::RandomSimple, 2, vec![6, 6]), (Family::BlockDiag, 2, vec![32]), (Family::Unitary, 2, vec![16])] {
            let p = generate(family, r, &sizes, 0).unwrap();
            let par = parallel_endomorphisms(&p.connection, DEFAULT_KERNEL_TOL).unwrap();
            assert_eq!(par.dimension, holonomy_commutant_dimension(&p.connection, 1e-10), "{family}");
            for phi in &par.basis {
                for axis in 0..p.connection.dim() {
                    let d = p.connection.endo_diff(phi, axis).unwrap();
                    assert!(d.iter().all(|m| frob(m) < 1e-8));
                }
            }
        }
    }

    #[test]
    fn block_diagonal_connection_splits_into_harmonic_blocks() {
        let p = generate(Family::BlockDiag, 3, &[32], 4).unwrap();
        let h = harmonic(&p);
        let par = parallel_endomorphisms(&p.connection, DEFAULT_KERNEL_TOL).unwrap();
        let pi = parallel_projection(&p.connection, &par, &h).unwrap().expect("a nontrivial projection");
        assert!(pi.idempotency_defect() < 1e-10 && pi.adjoint_defect(&h) < 1e-10);
        let split = split_harmonic(&p.connection, &h, &pi).unwrap();
        assert!(split.report.passed, "{:?}", split.report);
        assert!(split.report.beta_l2 < 1e-6);
        assert!(split.report.block_residuals.iter().all(|&r| r < 1e-6));
    }
}
