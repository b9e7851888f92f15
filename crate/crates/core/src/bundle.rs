//! Connections, metrics and endomorphism fields on a trivialized bundle.
//!
//! A connection is stored both by its coefficients `A_μ(x)` and by its link
//! transports `U_μ(x) = exp(−h_μ A_μ(x))` from `x` to `x + e_μ`; on the seam
//! link the clutching matrix enters as `U = B_μ exp(−h_μ A_μ)`. Covariant
//! derivatives are defined through the links,
//!
//! ```text
//! ∇_μ s(x) = (U_μ(x)⁻¹ s(x + e_μ) − s(x)) / h_μ
//! ∇_μ f(x) = (U_μ(x)⁻¹ f(x + e_μ) U_μ(x) − f(x)) / h_μ
//! ```
//!
//! so the gauge action `U ↦ h(x + e) U h(x)⁻¹` is an exact group action.
//! Metrics use the pairing `K(u, v) = v^† K u`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridManifold;
use crate::linalg::{commutator, compose_eig, condition_number, eigh, expm, frob, hermitian_part, identity, inverse,
    is_finite, logm, phi, CMat, MetricFactor};

/// Endomorphism-valued 0-form, one matrix per grid point.
pub type EndoField = Vec<CMat>;
/// Endomorphism-valued 1-form, indexed `[axis][point]`.
pub type FormEndoField = Vec<Vec<CMat>>;

/// Largest condition number accepted for gauge transformations and twists.
pub const MAX_CONDITION: f64 = 1e12;
/// Eigenvalue floor below which `log`, `sqrt` and powers are refused.
pub const POSITIVITY_FLOOR: f64 = 1e-14;
/// Relative self-adjointness tolerance for inputs of [`herm_fn`].
pub const SELF_ADJOINT_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ConnectionField {
    grid: GridManifold,
    rank: usize,
    coeffs: FormEndoField,
    links: FormEndoField,
    links_inv: FormEndoField,
    twist: Vec<CMat>,
}

impl ConnectionField {
    /// Builds a connection from coefficients; `twist` defaults to the identity.
    pub fn new(grid: GridManifold, rank: usize, coeffs: FormEndoField, twist: Option<Vec<CMat>>) -> Result<Self> {
        let twist = Self::check_twist(&grid, rank, twist)?;
        Self::check_shape(&grid, rank, &coeffs, "coefficient")?;
        let mut links = Vec::with_capacity(grid.dim());
        for (axis, comp) in coeffs.iter().enumerate() {
            let h = grid.spacing(axis);
            let row: Vec<CMat> = comp
                .par_iter()
                .enumerate()
                .map(|(i, a)| {
                    let e = expm(&a.map(|z| z * -h));
                    if grid.on_seam(i, axis) {
                        &twist[axis] * e
                    } else {
                        e
                    }
                })
                .collect();
            links.push(row);
        }
        let links_inv = Self::invert_links(&links)?;
        Ok(Self { grid, rank, coeffs, links, links_inv, twist })
    }

    /// Builds a connection from link transports; coefficients come from the
    /// principal logarithm `A = −log(B⁻¹U)/h` (twist removed on the seam).
    pub fn from_links(grid: GridManifold, rank: usize, links: FormEndoField, twist: Option<Vec<CMat>>) -> Result<Self> {
        let twist = Self::check_twist(&grid, rank, twist)?;
        Self::check_shape(&grid, rank, &links, "link")?;
        let twist_inv: Vec<CMat> = twist.iter().map(|b| inverse(b).unwrap()).collect();
        let mut coeffs = Vec::with_capacity(grid.dim());
        for (axis, comp) in links.iter().enumerate() {
            let h = grid.spacing(axis);
            let row: Vec<CMat> = comp
                .par_iter()
                .enumerate()
                .map(|(i, u)| {
                    let base = if grid.on_seam(i, axis) { &twist_inv[axis] * u } else { u.clone() };
                    logm(&base).map(|l| l.map(|z| z * (-1.0 / h)))
                })
                .collect::<Result<_>>()?;
            coeffs.push(row);
        }
        let links_inv = Self::invert_links(&links)?;
        Ok(Self { grid, rank, coeffs, links, links_inv, twist })
    }

    /// `A = 0` with identity twist.
    pub fn trivial(grid: GridManifold, rank: usize) -> Self {
        let n = grid.npoints();
        let zero = vec![vec![CMat::zeros(rank, rank); n]; grid.dim()];
        Self::new(grid, rank, zero, None).expect("trivial connection")
    }

    /// Spatially constant coefficients, one matrix per axis.
    pub fn constant(grid: GridManifold, mats: &[CMat], twist: Option<Vec<CMat>>) -> Result<Self> {
        if mats.len() != grid.dim() {
            return Err(Error::Shape(format!("{} constant coefficients for {} axes", mats.len(), grid.dim())));
        }
        let rank = mats[0].nrows();
        let n = grid.npoints();
        let coeffs = mats.iter().map(|m| vec![m.clone(); n]).collect();
        Self::new(grid, rank, coeffs, twist)
    }

    fn check_twist(grid: &GridManifold, rank: usize, twist: Option<Vec<CMat>>) -> Result<Vec<CMat>> {
        let twist = twist.unwrap_or_else(|| vec![identity(rank); grid.dim()]);
        if twist.len() != grid.dim() {
            return Err(Error::Shape(format!("{} twist matrices for {} axes", twist.len(), grid.dim())));
        }
        for b in &twist {
            if b.nrows() != rank || b.ncols() != rank || !is_finite(b) {
                return Err(Error::Shape("twist matrix has wrong shape or non-finite entries".into()));
            }
            if condition_number(b) > MAX_CONDITION {
                return Err(Error::Singular("twist matrix".into()));
            }
        }
        Ok(twist)
    }

    fn check_shape(grid: &GridManifold, rank: usize, field: &FormEndoField, what: &str) -> Result<()> {
        if rank == 0 {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        if field.len() != grid.dim() {
            return Err(Error::Shape(format!("{what} field has {} axes, grid has {}", field.len(), grid.dim())));
        }
        for comp in field {
            grid.check_len(comp.len())?;
            for m in comp {
                if m.nrows() != rank || m.ncols() != rank {
                    return Err(Error::Shape(format!("{what} matrix is {}x{}, rank is {rank}", m.nrows(), m.ncols())));
                }
                if !is_finite(m) {
                    return Err(Error::Invalid(format!("non-finite {what} entry")));
                }
            }
        }
        Ok(())
    }

    fn invert_links(links: &FormEndoField) -> Result<FormEndoField> {
        links
            .iter()
            .map(|comp| {
                comp.par_iter()
                    .map(|u| inverse(u).ok_or_else(|| Error::Singular("link transport".into())))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    pub fn grid(&self) -> &GridManifold {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn npoints(&self) -> usize {
        self.grid.npoints()
    }

    pub fn coeffs(&self) -> &FormEndoField {
        &self.coeffs
    }

    pub fn coeff(&self, axis: usize, idx: usize) -> &CMat {
        &self.coeffs[axis][idx]
    }

    pub fn links(&self) -> &FormEndoField {
        &self.links
    }

    pub fn link(&self, axis: usize, idx: usize) -> &CMat {
        &self.links[axis][idx]
    }

    pub fn link_inv(&self, axis: usize, idx: usize) -> &CMat {
        &self.links_inv[axis][idx]
    }

    pub fn twist(&self) -> &[CMat] {
        &self.twist
    }

    pub fn has_twist(&self) -> bool {
        let id = identity(self.rank);
        self.twist.iter().any(|b| b != &id)
    }

    /// Forward covariant derivative of a section, `(U⁻¹ s(x+e) − s(x))/h`.
    /// Sections are stored as `r x 1` matrices.
    pub fn section_diff(&self, s: &[CMat], axis: usize) -> Result<Vec<CMat>> {
        self.grid.check_axis(axis)?;
        self.grid.check_len(s.len())?;
        let inv_h = 1.0 / self.grid.spacing(axis);
        Ok((0..s.len())
            .map(|i| {
                let j = self.grid.shift(i, axis, true);
                (&self.links_inv[axis][i] * &s[j] - &s[i]).map(|z| z * inv_h)
            })
            .collect())
    }

    /// Forward covariant derivative on endomorphisms, `(U⁻¹ f(x+e) U − f(x))/h`.
    pub fn endo_diff(&self, f: &[CMat], axis: usize) -> Result<EndoField> {
        self.grid.check_axis(axis)?;
        self.grid.check_len(f.len())?;
        let inv_h = 1.0 / self.grid.spacing(axis);
        Ok((0..f.len())
            .into_par_iter()
            .map(|i| {
                let j = self.grid.shift(i, axis, true);
                (&self.links_inv[axis][i] * &f[j] * &self.links[axis][i] - &f[i]).map(|z| z * inv_h)
            })
            .collect())
    }

    /// Backward covariant divergence `Σ_μ (θ_μ(x) − U θ_μ(x−e) U⁻¹)/h_μ`
    /// with `U = U_μ(x − e_μ)`; the discrete `tr_g ∇θ`.
    pub fn endo_backward_div(&self, theta: &FormEndoField) -> Result<EndoField> {
        if theta.len() != self.dim() {
            return Err(Error::Shape("one-form axis count".into()));
        }
        let n = self.npoints();
        Ok((0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = CMat::zeros(self.rank, self.rank);
                for (axis, comp) in theta.iter().enumerate() {
                    let j = self.grid.shift(i, axis, false);
                    let moved = &self.links[axis][j] * &comp[j] * &self.links_inv[axis][j];
                    acc += (&comp[i] - moved).map(|z| z / self.grid.spacing(axis));
                }
                acc
            })
            .collect())
    }

    /// Transport around the closed loop along `axis` through point `start`:
    /// `U(x_{N-1}) ⋯ U(x_0)` with `x_0 = start`.
    pub fn loop_transport(&self, axis: usize, start: usize) -> CMat {
        let mut t = identity(self.rank);
        let mut i = start;
        for _ in 0..self.grid.sizes()[axis] {
            t = &self.links[axis][i] * t;
            i = self.grid.shift(i, axis, true);
        }
        t
    }

    /// Monodromy of a circle connection based at point 0.
    pub fn monodromy(&self) -> CMat {
        self.loop_transport(0, 0)
    }

    /// Transport around the elementary plaquette with lower corner `idx`
    /// (dim 2): `U₂(x+e₁)⁻¹… ` arranged as `U₂(x)⁻¹ U₁(x+e₂)⁻¹ U₂(x+e₁) U₁(x)`.
    pub fn plaquette(&self, idx: usize) -> CMat {
        let g = &self.grid;
        let x1 = g.shift(idx, 0, true);
        let x2 = g.shift(idx, 1, true);
        &self.links_inv[1][idx] * &self.links_inv[0][x2] * &self.links[1][x1] * &self.links[0][idx]
    }

    /// `F₁₂ = D⁺₁A₂ − D⁺₂A₁ + [A₁, A₂]` at the nodes (zero on the circle).
    pub fn curvature(&self) -> EndoField {
        let n = self.npoints();
        if self.dim() == 1 {
            return vec![CMat::zeros(self.rank, self.rank); n];
        }
        let d1a2 = self.grid.forward_diff(&self.coeffs[1], 0).unwrap();
        let d2a1 = self.grid.forward_diff(&self.coeffs[0], 1).unwrap();
        (0..n)
            .map(|i| &d1a2[i] - &d2a1[i] + commutator(&self.coeffs[0][i], &self.coeffs[1][i]))
            .collect()
    }

    /// Gauge action `U'(x) = h(x + e) U(x) h(x)⁻¹`, coefficients re-derived
    /// from the new links. To first order in `h_μ` this is
    /// `A' = h A h⁻¹ − (D⁺h) h⁻¹`. A nontrivial twist becomes `h(0) B h(0)⁻¹`
    /// so that seam coefficients stay small for smooth `h`.
    pub fn gauge_act(&self, h: &[CMat]) -> Result<Self> {
        self.grid.check_len(h.len())?;
        let h_inv = gauge_inverse(h)?;
        let links = (0..self.dim())
            .map(|axis| {
                (0..self.npoints())
                    .map(|i| {
                        let j = self.grid.shift(i, axis, true);
                        &h[j] * &self.links[axis][i] * &h_inv[i]
                    })
                    .collect()
            })
            .collect();
        let twist = if self.has_twist() {
            self.twist.iter().map(|b| &h[0] * b * &h_inv[0]).collect()
        } else {
            self.twist.clone()
        };
        Self::from_links(self.grid.clone(), self.rank, links, Some(twist))
    }
}

/// Pointwise inverse of a gauge transformation, refusing ill-conditioned points.
pub fn gauge_inverse(h: &[CMat]) -> Result<EndoField> {
    h.par_iter()
        .enumerate()
        .map(|(i, m)| {
            let cond = condition_number(m);
            if !(cond < MAX_CONDITION) {
                return Err(Error::Singular(format!("gauge transformation at point {i} (condition {cond:e})")));
            }
            inverse(m).ok_or_else(|| Error::Singular(format!("gauge transformation at point {i}")))
        })
        .collect()
}

/// Largest pointwise 2-norm condition number of a gauge field.
pub fn max_condition(h: &[CMat]) -> f64 {
    h.iter().map(condition_number).fold(1.0, f64::max)
}

/// Hermitian positive-definite metric with cached Cholesky factors.
#[derive(Clone, Debug)]
pub struct MetricField {
    values: Vec<CMat>,
    factors: Vec<MetricFactor>,
}

impl MetricField {
    pub fn new(values: Vec<CMat>) -> Result<Self> {
        let checked: Vec<(CMat, MetricFactor)> = values
            .into_par_iter()
            .enumerate()
            .map(|(i, k)| {
                if !is_finite(&k) {
                    return Err(Error::InvalidMetric { point: i, reason: "non-finite entry".into() });
                }
                let asym = frob(&(&k - k.adjoint()));
                if asym > 1e-12 * frob(&k).max(1.0) {
                    return Err(Error::InvalidMetric { point: i, reason: format!("not Hermitian (defect {asym:e})") });
                }
                let k = hermitian_part(&k);
                let (vals, _) = eigh(&k);
                if !(vals[0] > 0.0) {
                    return Err(Error::InvalidMetric {
                        point: i,
                        reason: format!("smallest eigenvalue {:e} is not positive", vals[0]),
                    });
                }
                let factor = MetricFactor::new(&k)
                    .ok_or_else(|| Error::InvalidMetric { point: i, reason: "Cholesky failed".into() })?;
                Ok((k, factor))
            })
            .collect::<Result<_>>()?;
        let (values, factors) = checked.into_iter().unzip();
        Ok(Self { values, factors })
    }

    /// Metric `H = g g^†` that keeps the given square-root factors, so that
    /// frame computations avoid forming `H` explicitly.
    pub fn from_factors(gs: Vec<CMat>) -> Result<Self> {
        let checked: Vec<(CMat, MetricFactor)> = gs
            .into_par_iter()
            .enumerate()
            .map(|(i, g)| {
                if !is_finite(&g) {
                    return Err(Error::InvalidMetric { point: i, reason: "non-finite factor".into() });
                }
                let k = hermitian_part(&(&g * g.adjoint()));
                let factor = MetricFactor::from_factor(g)
                    .ok_or_else(|| Error::InvalidMetric { point: i, reason: "singular factor".into() })?;
                Ok((k, factor))
            })
            .collect::<Result<_>>()?;
        let (values, factors) = checked.into_iter().unzip();
        Ok(Self { values, factors })
    }

    pub fn identity(npoints: usize, rank: usize) -> Self {
        Self::new(vec![identity(rank); npoints]).expect("identity metric")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn values(&self) -> &[CMat] {
        &self.values
    }

    pub fn get(&self, idx: usize) -> &CMat {
        &self.values[idx]
    }

    pub fn factor(&self, idx: usize) -> &MetricFactor {
        &self.factors[idx]
    }

    pub fn inverse_at(&self, idx: usize) -> CMat {
        self.factors[idx].metric_inverse()
    }

    /// `H = K f` for a `K`-self-adjoint positive `f`.
    pub fn compose(&self, f: &[CMat]) -> Result<Self> {
        // K f = L (L^† f L^{-†}) L^†, positive whenever the middle factor is
        Self::new(
            self.factors
                .iter()
                .zip(f)
                .map(|(fac, f)| hermitian_part(&(&fac.l * fac.to_hermitian(f) * fac.l.adjoint())))
                .collect(),
        )
    }

    /// `f = K⁻¹H`.
    pub fn relative(&self, other: &Self) -> EndoField {
        (0..self.len()).map(|i| self.inverse_at(i) * other.get(i)).collect()
    }

    /// `H(u, v) = K(h u, h v)`, i.e. `H = h^† K h`.
    pub fn pullback(&self, h: &[CMat]) -> Result<Self> {
        Self::new(self.values.iter().zip(h).map(|(k, h)| hermitian_part(&(h.adjoint() * k * h))).collect())
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|k| k.map(|z| z * c)).collect())
    }
}

/// Relative defect `‖K⁻¹s^†K − s‖ / ‖s‖` of `K`-self-adjointness.
pub fn self_adjoint_defect(s: &CMat, k: &CMat) -> f64 {
    let k_inv = inverse(k).expect("metric is invertible");
    frob(&(k_inv * s.adjoint() * k - s)) / frob(s).max(1e-300)
}

/// `K`-adjoint `K⁻¹ s^† K`.
pub fn k_adjoint(s: &CMat, factor: &MetricFactor) -> CMat {
    factor.metric_inverse() * s.adjoint() * factor.metric()
}

/// Projection of `s` onto the `K`-self-adjoint endomorphisms.
pub fn k_symmetrize(s: &CMat, factor: &MetricFactor) -> CMat {
    (s + k_adjoint(s, factor)).map(|z| z * 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HermFn {
    Exp,
    Log,
    Sqrt,
    Power(f64),
}

impl HermFn {
    fn needs_positive(self) -> bool {
        !matches!(self, HermFn::Exp)
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            HermFn::Exp => x.exp(),
            HermFn::Log => x.ln(),
            HermFn::Sqrt => x.sqrt(),
            HermFn::Power(p) => x.powf(p),
        }
    }
}

/// Applies a scalar function to a `K`-self-adjoint field through the
/// eigendecomposition of its Hermitian representative `L^† s L^{-†}`.
pub fn herm_fn(s: &[CMat], k: &MetricField, func: HermFn) -> Result<EndoField> {
    if s.len() != k.len() {
        return Err(Error::Shape(format!("{} endomorphisms for {} metric points", s.len(), k.len())));
    }
    s.par_iter()
        .enumerate()
        .map(|(i, m)| herm_fn_at(m, k.factor(i), func).map_err(|e| match e {
            Error::NonPositive { value, .. } => Error::NonPositive { point: i, value },
            other => other,
        }))
        .collect()
}

/// Single-point version of [`herm_fn`]; errors report point 0.
pub fn herm_fn_at(s: &CMat, factor: &MetricFactor, func: HermFn) -> Result<CMat> {
    let w_raw = factor.l.adjoint() * s * factor.l_inv.adjoint();
    let defect = frob(&(&w_raw - w_raw.adjoint())) / frob(&w_raw).max(1e-300);
    if defect > SELF_ADJOINT_TOL {
        return Err(Error::NotSelfAdjoint(defect));
    }
    let (vals, vecs) = eigh(&w_raw);
    if func.needs_positive() && vals[0] < POSITIVITY_FLOOR {
        return Err(Error::NonPositive { point: 0, value: vals[0] });
    }
    Ok(factor.from_hermitian(&compose_eig(&vals, &vecs, |x| func.apply(x))))
}

/// Entrywise `Φ(λ_β, λ_α) w^α_β` in the eigenbasis of the `K`-self-adjoint `u`.
/// With this ordering `d/dt exp(u + t w)|₀ = phi_apply(u, w) exp(u)`.
pub fn phi_apply(u: &[CMat], k: &MetricField, w: &FormEndoField) -> Result<FormEndoField> {
    let n = u.len();
    let parts: Vec<(CMat, CMat, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let f = k.factor(i);
            let w_h = f.to_hermitian(&u[i]);
            let (vals, vecs) = eigh(&w_h);
            // eigenbasis of u: columns of P = L^{-†} V, P⁻¹ = V^† L^†
            let p = f.l_inv.adjoint() * &vecs;
            let p_inv = vecs.adjoint() * f.l.adjoint();
            (p, p_inv, vals)
        })
        .collect();
    Ok(w
        .iter()
        .map(|comp| {
            comp.par_iter()
                .enumerate()
                .map(|(i, wi)| {
                    let (p, p_inv, vals) = &parts[i];
                    phi_apply_at(p, p_inv, vals, wi)
                })
                .collect()
        })
        .collect())
}

fn phi_apply_at(p: &CMat, p_inv: &CMat, vals: &[f64], w: &CMat) -> CMat {
    let mut t = p_inv * w * p;
    let r = vals.len();
    for a in 0..r {
        for b in 0..r {
            t[(a, b)] *= phi(vals[b], vals[a]);
        }
    }
    p * t * p_inv
}
