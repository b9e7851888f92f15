//! Small dense complex matrix kernels used pointwise on the grid.
//!
//! Everything here works on `r x r` matrices with `r` at most a handful, so the
//! routines favour clarity over blocking. Hermitian functions go through the
//! eigendecomposition; functions of a matrix that is self-adjoint with respect
//! to a metric `K` go through the Cholesky similarity `W = L^† s L^{-†}`
//! (with `K = L L^†`), which is Hermitian whenever `K s` is.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;

pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn identity(r: usize) -> CMat {
    CMat::identity(r, r)
}

pub fn zeros(r: usize) -> CMat {
    CMat::zeros(r, r)
}

pub fn scale(m: &CMat, s: f64) -> CMat {
    m.map(|z| z * s)
}

pub fn frob(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).map(|z| z * 0.5)
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn trace(m: &CMat) -> C64 {
    m.trace()
}

pub fn inverse(m: &CMat) -> Option<CMat> {
    m.clone().try_inverse()
}

/// Thin singular value decomposition `M = U diag(s) V†` with `s` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub v: CMat,
}

/// One-sided Jacobi SVD. nalgebra's complex SVD returns inaccurate singular
/// vectors for some rank-deficient inputs, so the complex kernels use this one.
pub fn svd(m: &CMat) -> Svd {
    let (rows, cols) = m.shape();
    if rows < cols {
        let t = svd(&m.adjoint());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let mut a = m.clone();
    let mut v = identity(cols);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dotc(&a.column(q));
                let g = gamma.norm();
                if g == 0.0 || g <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for mat in [&mut a, &mut v] {
                    let cp = mat.column(p).into_owned();
                    let cq = mat.column(q).map(|z| z * phase.conj());
                    mat.set_column(p, &(&cp * c(cs, 0.0) - &cq * c(sn, 0.0)));
                    mat.set_column(q, &(&cp * c(sn, 0.0) + &cq * c(cs, 0.0)));
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = CMat::zeros(rows, cols);
    let mut vs = CMat::zeros(cols, cols);
    let mut s = Vec::with_capacity(cols);
    let mut filled = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        vs.set_column(k, &v.column(j));
        if norms[j] > f64::EPSILON * smax * rows as f64 && norms[j] > 0.0 {
            u.set_column(k, &(a.column(j) / c(norms[j], 0.0)));
            filled.push(k);
        }
    }
    if filled.len() < cols {
        // complete the null directions to an orthonormal set
        let mut basis = CMat::zeros(rows, filled.len());
        for (i, &k) in filled.iter().enumerate() {
            basis.set_column(i, &u.column(k));
        }
        let full = gram_schmidt_complete(&basis);
        let mut next = filled.len();
        for k in 0..cols {
            if !filled.contains(&k) {
                u.set_column(k, &full.column(next));
                next += 1;
            }
        }
    }
    Svd { u, s, v: vs }
}

pub fn singular_values(m: &CMat) -> Vec<f64> {
    svd(m).s
}

/// Unitary polar factor `U V†` of a square matrix.
pub fn polar_unitary(m: &CMat) -> CMat {
    let d = svd(m);
    &d.u * d.v.adjoint()
}

/// 2-norm condition number via singular values.
pub fn condition_number(m: &CMat) -> f64 {
    let sv = singular_values(m);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(m: &CMat) -> (Vec<f64>, CMat) {
    let h = hermitian_part(m);
    let eig = h.symmetric_eigen();
    let r = m.nrows();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(r, r);
    for (j, &i) in order.iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// `V diag(g(λ)) V^†`.
pub fn compose_eig(vals: &[f64], vecs: &CMat, g: impl Fn(f64) -> f64) -> CMat {
    let r = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..r {
        let gj = g(vals[j]);
        for i in 0..r {
            scaled[(i, j)] *= gj;
        }
    }
    scaled * vecs.adjoint()
}

pub fn herm_apply(m: &CMat, g: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(m);
    compose_eig(&vals, &vecs, g)
}

/// Square-root factor `L` of a Hermitian positive-definite `K = L L^†` plus its
/// inverse. `L` is the Cholesky factor unless built from an explicit factor.
#[derive(Clone, Debug)]
pub struct MetricFactor {
    pub l: CMat,
    pub l_inv: CMat,
}

impl MetricFactor {
    pub fn new(k: &CMat) -> Option<Self> {
        let chol = hermitian_part(k).cholesky()?;
        let l = chol.l();
        let l_inv = l.clone().try_inverse()?;
        Some(Self { l, l_inv })
    }

    /// Any invertible `g` with `K = g g^†`.
    pub fn from_factor(g: CMat) -> Option<Self> {
        let l_inv = g.clone().try_inverse()?;
        Some(Self { l: g, l_inv })
    }

    /// Hermitian representative `L^† s L^{-†}` of a `K`-self-adjoint `s`.
    pub fn to_hermitian(&self, s: &CMat) -> CMat {
        hermitian_part(&(self.l.adjoint() * s * self.l_inv.adjoint()))
    }

    /// Inverse of [`to_hermitian`](Self::to_hermitian).
    pub fn from_hermitian(&self, w: &CMat) -> CMat {
        self.l_inv.adjoint() * w * self.l.adjoint()
    }

    pub fn metric(&self) -> CMat {
        &self.l * self.l.adjoint()
    }

    pub fn metric_inverse(&self) -> CMat {
        self.l_inv.adjoint() * &self.l_inv
    }
}

/// Matrix exponential of a general complex matrix.
pub fn expm(m: &CMat) -> CMat {
    m.exp()
}

/// Principal square root by the Denman–Beavers iteration.
pub fn sqrtm(m: &CMat) -> Result<CMat> {
    let r = m.nrows();
    let mut y = m.clone();
    let mut z = identity(r);
    for _ in 0..100 {
        let y_inv = inverse(&y).ok_or_else(|| Error::Singular("square-root iterate".into()))?;
        let z_inv = inverse(&z).ok_or_else(|| Error::Singular("square-root iterate".into()))?;
        let y_next = (&y + z_inv).map(|v| v * 0.5);
        let z_next = (&z + y_inv).map(|v| v * 0.5);
        let delta = frob(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * frob(&y).max(1e-300) {
            return Ok(y);
        }
    }
    Err(Error::NoConvergence("matrix square root".into()))
}

/// Principal logarithm of a general complex matrix by inverse scaling and squaring.
pub fn logm(m: &CMat) -> Result<CMat> {
    let r = m.nrows();
    let id = identity(r);
    let mut x = m.clone();
    let mut squarings = 0u32;
    while frob(&(&x - &id)) > 0.25 {
        x = sqrtm(&x)?;
        squarings += 1;
        if squarings > 64 {
            return Err(Error::NoConvergence("matrix logarithm".into()));
        }
    }
    // log x = 2 atanh(z), z = (x - I)(x + I)^{-1}
    let denom = inverse(&(&x + &id)).ok_or_else(|| Error::Singular("logarithm".into()))?;
    let z = (&x - &id) * denom;
    let z2 = &z * &z;
    let mut term = z.clone();
    let mut sum = z.clone();
    for k in 1..60 {
        term = &term * &z2;
        let add = scale(&term, 1.0 / (2 * k + 1) as f64);
        sum += &add;
        if frob(&add) < 1e-18 {
            break;
        }
    }
    Ok(scale(&sum, 2.0 * f64::powi(2.0, squarings as i32)))
}

/// Eigenvalues of a general complex matrix (diagonal of the complex Schur form).
pub fn eigenvalues(m: &CMat) -> Vec<C64> {
    let schur = nalgebra::linalg::Schur::new(m.clone());
    let (_, t) = schur.unpack();
    (0..m.nrows()).map(|i| t[(i, i)]).collect()
}

/// `Φ(x, y) = (e^{y-x} - 1) / (y - x)`, `Φ(x, x) = 1`.
pub fn phi(x: f64, y: f64) -> f64 {
    let d = y - x;
    if d.abs() < 1e-5 {
        // 1 + d/2 + d^2/6 + d^3/24
        1.0 + d * (0.5 + d * (1.0 / 6.0 + d / 24.0))
    } else {
        d.exp_m1() / d
    }
}

/// Isometric coordinates of a Hermitian matrix: diagonal, then `√2 Re`, `√2 Im` of the strict upper part.
pub fn hermitian_to_vec(m: &CMat, out: &mut [f64]) {
    let r = m.nrows();
    let s2 = std::f64::consts::SQRT_2;
    let mut k = 0;
    for i in 0..r {
        out[k] = m[(i, i)].re;
        k += 1;
    }
    for i in 0..r {
        for j in (i + 1)..r {
            let z = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            out[k] = s2 * z.re;
            out[k + 1] = s2 * z.im;
            k += 2;
        }
    }
}

pub fn vec_to_hermitian(v: &[f64], r: usize) -> CMat {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = zeros(r);
    let mut k = 0;
    for i in 0..r {
        m[(i, i)] = c(v[k], 0.0);
        k += 1;
    }
    for i in 0..r {
        for j in (i + 1)..r {
            let z = c(v[k] * s2, v[k + 1] * s2);
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
            k += 2;
        }
    }
    m
}

/// Unit basis element `k` of the Hermitian coordinate system.
pub fn hermitian_basis(k: usize, r: usize) -> CMat {
    let mut v = vec![0.0; r * r];
    v[k] = 1.0;
    vec_to_hermitian(&v, r)
}

/// Completes orthonormal columns `q` (r x k) to a unitary r x r matrix.
pub fn gram_schmidt_complete(q: &CMat) -> CMat {
    let r = q.nrows();
    let mut cols: Vec<DVector<C64>> = q.column_iter().map(|c| c.into_owned()).collect();
    for e in 0..r {
        if cols.len() == r {
            break;
        }
        let mut v = DVector::from_fn(r, |i, _| if i == e { c(1.0, 0.0) } else { c(0.0, 0.0) });
        for _ in 0..2 {
            for u in &cols {
                let proj = u.dotc(&v);
                v -= u * proj;
            }
        }
        let nv = v.norm();
        if nv > 1e-6 {
            cols.push(v / c(nv, 0.0));
        }
    }
    CMat::from_columns(&cols)
}

/// Orthonormal basis (Euclidean) of the column span of `m` using the SVD, keeping
/// singular values above `rel_tol * σ_max`.
pub fn orthonormal_range(m: &CMat, rel_tol: f64) -> CMat {
    let d = svd(m);
    let smax = d.s.first().copied().unwrap_or(0.0);
    let keep = d.s.iter().filter(|&&v| smax > 0.0 && v > rel_tol * smax).count();
    d.u.columns(0, keep).into_owned()
}

/// Largest principal angle between the column spans of two orthonormal bases.
pub fn principal_angle(q1: &CMat, q2: &CMat) -> f64 {
    if q1.ncols() != q2.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    let sv = singular_values(&(q1.adjoint() * q2));
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
    smin.acos()
}
