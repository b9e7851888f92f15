//! Periodic structured grids on the flat circle and 2-torus.
//!
//! Points are stored row-major (`idx = i0 * N1 + i1` on the torus). The
//! forward difference `D⁺` and the backward divergence are exact adjoints
//! with respect to the uniform volume weight `w = Π h_μ`, so
//! `Σ w ⟨D⁺F, θ⟩ = Σ w ⟨F, backward_div θ⟩` holds up to roundoff.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::sparse::{conjugate_gradient, rcm_ordering, tree_sum, ProfileMatrix};

/// Largest grid handled by the direct Poisson solver.
pub const DIRECT_POISSON_LIMIT: usize = 4096;

/// Absolute tolerance on the weighted mean of a Poisson right-hand side,
/// relative to `1 + rms(rhs)`.
pub const POISSON_MEAN_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GridManifold {
    sizes: Vec<usize>,
    lengths: Vec<f64>,
}

impl GridManifold {
    pub fn new(sizes: Vec<usize>, lengths: Vec<f64>) -> Result<Self> {
        if sizes.is_empty() || sizes.len() > 2 {
            return Err(Error::InvalidGrid(format!("dimension {} is not 1 or 2", sizes.len())));
        }
        if sizes.len() != lengths.len() {
            return Err(Error::InvalidGrid("sizes and lengths differ in length".into()));
        }
        for (&n, &l) in sizes.iter().zip(&lengths) {
            if n < 4 {
                return Err(Error::InvalidGrid(format!("axis size {n} is below 4")));
            }
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidGrid(format!("axis length {l} is not positive")));
            }
        }
        Ok(Self { sizes, lengths })
    }

    pub fn circle(n: usize, length: f64) -> Result<Self> {
        Self::new(vec![n], vec![length])
    }

    pub fn torus(n0: usize, n1: usize, l0: f64, l1: f64) -> Result<Self> {
        Self::new(vec![n0, n1], vec![l0, l1])
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn npoints(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.sizes[axis] as f64
    }

    /// Volume weight of a single point.
    pub fn weight(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![self.weight(); self.npoints()]
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim() {
            Err(Error::AxisOutOfRange { axis, dim: self.dim() })
        } else {
            Ok(())
        }
    }

    fn stride(&self, axis: usize) -> usize {
        self.sizes[axis + 1..].iter().product()
    }

    pub fn coords(&self, idx: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| (idx / self.stride(a)) % self.sizes[a]).collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().enumerate().map(|(a, &i)| (i % self.sizes[a]) * self.stride(a)).sum()
    }

    /// Periodic neighbour `idx ± e_axis`.
    pub fn shift(&self, idx: usize, axis: usize, forward: bool) -> usize {
        let n = self.sizes[axis];
        let s = self.stride(axis);
        let i = (idx / s) % n;
        let j = if forward { (i + 1) % n } else { (i + n - 1) % n };
        idx - i * s + j * s
    }

    /// Whether the forward link from `idx` along `axis` crosses the seam.
    pub fn on_seam(&self, idx: usize, axis: usize) -> bool {
        (idx / self.stride(axis)) % self.sizes[axis] == self.sizes[axis] - 1
    }

    /// Physical coordinate of point `idx` along `axis`.
    pub fn position(&self, idx: usize, axis: usize) -> f64 {
        ((idx / self.stride(axis)) % self.sizes[axis]) as f64 * self.spacing(axis)
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.npoints() {
            return Err(Error::Shape(format!("field has {len} values, grid has {}", self.npoints())));
        }
        Ok(())
    }

    /// `∫ f dvol`, summed in a fixed binary-tree order.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weight() * tree_sum(values)
    }

    pub fn mean(&self, values: &[f64]) -> f64 {
        self.integrate(values) / self.volume()
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        self.integrate(&prods)
    }

    pub fn l2_norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }

    /// `(D⁺_μ F)(x) = (F(x + e_μ) − F(x)) / h_μ`.
    pub fn forward_diff<T: FieldValue>(&self, field: &[T], axis: usize) -> Result<Vec<T>> {
        self.check_axis(axis)?;
        self.check_len(field.len())?;
        let inv_h = 1.0 / self.spacing(axis);
        Ok((0..field.len())
            .into_par_iter()
            .map(|i| T::lin(inv_h, &field[self.shift(i, axis, true)], -inv_h, &field[i]))
            .collect())
    }

    /// `(D⁻_μ F)(x) = (F(x) − F(x − e_μ)) / h_μ`.
    pub fn backward_diff<T: FieldValue>(&self, field: &[T], axis: usize) -> Result<Vec<T>> {
        self.check_axis(axis)?;
        self.check_len(field.len())?;
        let inv_h = 1.0 / self.spacing(axis);
        Ok((0..field.len())
            .into_par_iter()
            .map(|i| T::lin(inv_h, &field[i], -inv_h, &field[self.shift(i, axis, false)]))
            .collect())
    }

    /// `−Σ_μ D⁻_μ θ_μ`, the adjoint of [`forward_diff`](Self::forward_diff).
    pub fn backward_div<T: FieldValue>(&self, oneform: &[Vec<T>]) -> Result<Vec<T>> {
        if oneform.len() != self.dim() {
            return Err(Error::Shape(format!(
                "one-form has {} components on a {}-dimensional grid",
                oneform.len(),
                self.dim()
            )));
        }
        let mut out: Option<Vec<T>> = None;
        for (axis, comp) in oneform.iter().enumerate() {
            let d = self.backward_diff(comp, axis)?;
            out = Some(match out {
                None => d.iter().map(|v| T::lin(-1.0, v, 0.0, v)).collect(),
                Some(acc) => acc.iter().zip(&d).map(|(a, v)| T::lin(1.0, a, -1.0, v)).collect(),
            });
        }
        Ok(out.unwrap())
    }

    /// `Δf = −backward_div(D⁺f) = Σ_μ D⁻_μ D⁺_μ f` (non-positive spectrum).
    pub fn laplacian(&self, f: &[f64]) -> Result<Vec<f64>> {
        let grad: Vec<Vec<f64>> = (0..self.dim()).map(|a| self.forward_diff(f, a)).collect::<Result<_>>()?;
        let div = self.backward_div(&grad)?;
        Ok(div.into_iter().map(|v| -v).collect())
    }

    /// Mean-zero `u` with `Δu = rhs`. A weighted mean of `rhs` within
    /// [`POISSON_MEAN_TOL`] is projected out and returned alongside `u`.
    pub fn poisson_solve(&self, rhs: &[f64]) -> Result<PoissonSolution> {
        self.check_len(rhs.len())?;
        let mean = self.mean(rhs);
        let rms = self.l2_norm(rhs) / self.volume().sqrt();
        if mean.abs() > POISSON_MEAN_TOL * (1.0 + rms) {
            return Err(Error::NotMeanZero { mean });
        }
        let b: Vec<f64> = rhs.iter().map(|v| -(v - mean)).collect();
        let mut u = if self.npoints() <= DIRECT_POISSON_LIMIT {
            self.poisson_direct(&b)?
        } else {
            self.poisson_cg(&b)?
        };
        let um = self.mean(&u);
        u.iter_mut().for_each(|v| *v -= um);
        Ok(PoissonSolution { u, projected_mean: mean })
    }

    fn neg_laplacian_stencil(&self) -> (f64, Vec<(usize, f64)>) {
        let mut diag = 0.0;
        let mut off = Vec::new();
        for a in 0..self.dim() {
            let c = 1.0 / (self.spacing(a) * self.spacing(a));
            diag += 2.0 * c;
            off.push((a, c));
        }
        (diag, off)
    }

    /// Pins `u(0) = 0` and factors the remaining SPD block of `−Δ`.
    fn poisson_direct(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.npoints();
        let (diag, off) = self.neg_laplacian_stencil();
        let adjacency: Vec<Vec<usize>> = (1..n)
            .map(|i| {
                let mut nb = Vec::new();
                for &(a, _) in &off {
                    for fw in [true, false] {
                        let j = self.shift(i, a, fw);
                        if j != 0 && j != i {
                            nb.push(j - 1);
                        }
                    }
                }
                nb
            })
            .collect();
        let order = rcm_ordering(&adjacency);
        let mut pos = vec![0usize; n - 1];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let mut first: Vec<usize> = (0..n - 1).collect();
        for v in 0..n - 1 {
            for &u in &adjacency[v] {
                let (hi, lo) = (pos[v].max(pos[u]), pos[v].min(pos[u]));
                first[hi] = first[hi].min(lo);
            }
        }
        let mut m = ProfileMatrix::new(first);
        for i in 1..n {
            m.add(pos[i - 1], pos[i - 1], diag);
            for &(a, c) in &off {
                // each undirected edge once, from its forward end
                let j = self.shift(i, a, true);
                if j != 0 && j != i {
                    m.add(pos[i - 1], pos[j - 1], -c);
                }
            }
        }
        m.factor()?;
        let mut pb = vec![0.0; n - 1];
        for i in 1..n {
            pb[pos[i - 1]] = b[i];
        }
        let px = m.solve(&pb);
        let mut u = vec![0.0; n];
        for i in 1..n {
            u[i] = px[pos[i - 1]];
        }
        Ok(u)
    }

    fn poisson_cg(&self, b: &[f64]) -> Result<Vec<f64>> {
        let (diag, _) = self.neg_laplacian_stencil();
        let apply = |x: &[f64]| -> Vec<f64> { self.laplacian(x).unwrap().into_iter().map(|v| -v).collect() };
        let (u, _) = conjugate_gradient(apply, &vec![diag; b.len()], b, 1e-14, 20 * b.len())?;
        Ok(u)
    }
}

#[derive(Clone, Debug)]
pub struct PoissonSolution {
    pub u: Vec<f64>,
    /// Weighted mean removed from the right-hand side before solving.
    pub projected_mean: f64,
}

/// Values that can be differenced on the grid.
pub trait FieldValue: Clone + Send + Sync {
    /// `a x + b y`.
    fn lin(a: f64, x: &Self, b: f64, y: &Self) -> Self;
}

impl FieldValue for f64 {
    fn lin(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        a * x + b * y
    }
}

impl FieldValue for CMat {
    fn lin(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        x.zip_map(y, |p, q| p * a + q * b)
    }
}
