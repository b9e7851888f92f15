//! Continuity method for harmonic metrics.
//!
//! With a reference metric `K` the path is `R(H_ε) = ε log(K⁻¹H_ε)`, where `R`
//! is the discrete residual of [`crate::decomposition`]. Solutions are the
//! critical points of the geodesically convex functional
//!
//! ```text
//! 𝓕_ε(H) = E(H) + (ε/4) Σ_x w tr log²(K⁻¹H)
//! ```
//!
//! whose gradient along `H e^{ts}` is `−½ Σ_x w tr((R − ε log f) s)`. Each
//! stage is solved in exponential coordinates `H = L₀ e^S L₀^†` about the
//! current iterate; the Jacobian of the `H`-Hermitian representative of
//! `R − ε log f` is formed by central differences on a distance-2 colouring
//! of the grid, symmetrized, and factored by envelope Cholesky.

use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{herm_fn, ConnectionField, EndoField, HermFn, MetricField};
use crate::decomposition::{residual, residual_frames_and_energy};
use crate::error::{Error, Result};
use crate::grid::GridManifold;
use crate::linalg::{eigh, expm, hermitian_to_vec, scale, trace, vec_to_hermitian, CMat};
use crate::sparse::{dot, norm, rcm_ordering, ProfileMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Newton,
    Flow,
    Hybrid,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton" => Ok(Mode::Newton),
            "flow" => Ok(Mode::Flow),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::Invalid(format!("unknown mode '{other}' (expected newton, flow or hybrid)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolverConfig {
    /// Geometric ratio of the ε-schedule.
    pub eps_ratio: f64,
    /// Smallest ratio reached by squaring after fast stages; equal to
    /// `eps_ratio` for a fixed schedule.
    pub min_eps_ratio: f64,
    /// A stage is fast when it converges within this many Newton iterations
    /// beyond the warm-up.
    pub fast_stage_iters: usize,
    pub eps_min: f64,
    /// Stage tolerance relative to `1 + ‖R(∇, K)‖_{L²}`.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Backtracking factor of the line search.
    pub damping: f64,
    pub blowup_l2: f64,
    /// Consecutive failed refinements (and extra ε-halvings) before blow-up is declared.
    pub blowup_stall: usize,
    pub mode: Mode,
    /// Newton convergence also requires the last step to be below this size.
    pub step_tol: f64,
    /// Central-difference step of the Jacobian.
    pub fd_step: f64,
    /// Flow steps before Newton in hybrid mode.
    pub warmup_steps: usize,
    /// Flow steps per fallback in hybrid mode.
    pub fallback_steps: usize,
    /// Step budget of a stage in flow mode.
    pub flow_max_steps: usize,
    /// Newton iterations of each ε = 0 attempt.
    pub endgame_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_ratio: 0.5,
            min_eps_ratio: 0.01,
            fast_stage_iters: 10,
            eps_min: 1e-6,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            damping: 0.5,
            blowup_l2: 1e3,
            blowup_stall: 8,
            mode: Mode::Hybrid,
            step_tol: 1e-6,
            fd_step: 1e-5,
            warmup_steps: 5,
            fallback_steps: 200,
            flow_max_steps: 20_000,
            endgame_max_iter: 30,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("newton_tol", self.newton_tol),
            ("eps_min", self.eps_min),
            ("blowup_l2", self.blowup_l2),
            ("step_tol", self.step_tol),
            ("fd_step", self.fd_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.eps_ratio > 0.0 && self.eps_ratio < 1.0) {
            return Err(Error::Invalid(format!("eps_ratio must lie in (0, 1), got {}", self.eps_ratio)));
        }
        if !(self.min_eps_ratio > 0.0 && self.min_eps_ratio <= self.eps_ratio) {
            return Err(Error::Invalid(format!(
                "min_eps_ratio must lie in (0, eps_ratio], got {}",
                self.min_eps_ratio
            )));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::Invalid(format!("damping must lie in (0, 1), got {}", self.damping)));
        }
        if self.eps_min >= 1.0 {
            return Err(Error::Invalid("eps_min must be below 1".into()));
        }
        Ok(())
    }
}

/// Result of [`initial_metric`].
#[derive(Clone, Debug)]
pub struct InitialMetric {
    /// Reference metric `K = K̂ exp(−R(K̂))`.
    pub k: MetricField,
    /// `H₁ = K̂ = e^u K₀`, the exact ε = 1 solution.
    pub h1: MetricField,
    /// Conformal factor `u` with `Δu = −(2/r) tr R(K₀)`.
    pub u: Vec<f64>,
    pub projected_mean: f64,
}

/// `K̂ = e^u K₀` with `tr R(K̂) = 0`, then `K = K̂ exp(−R(K̂))` so that
/// `H₁ = K̂` solves the ε = 1 equation.
pub fn initial_metric(conn: &ConnectionField, k0: &MetricField) -> Result<InitialMetric> {
    let grid = conn.grid();
    let r = conn.rank() as f64;
    let r0 = residual(conn, k0)?;
    let rhs: Vec<f64> = r0.iter().map(|m| -2.0 / r * trace(m).re).collect();
    let sol = grid.poisson_solve(&rhs)?;
    let khat = MetricField::new(k0.values().iter().zip(&sol.u).map(|(k, u)| scale(k, u.exp())).collect())?;
    let rhat = residual(conn, &khat)?;
    let neg: Vec<CMat> = rhat.iter().map(|m| scale(m, -1.0)).collect();
    let e = herm_fn(&neg, &khat, HermFn::Exp)?;
    let k = khat.compose(&e)?;
    Ok(InitialMetric { k, h1: khat, u: sol.u, projected_mean: sol.projected_mean })
}

/// Per-point quantities of one evaluation of the stage equation.
struct Evaluation {
    /// `√w` times the isometric coordinates of `L_H^† (R − ε log f) L_H^{-†}`.
    vec: Vec<f64>,
    norm: f64,
    /// `𝓕_ε(H)`.
    merit: f64,
}

/// Solves one ε-stage; owns the colouring and the Jacobian pattern.
struct StageSolver<'a> {
    conn: &'a ConnectionField,
    k: &'a MetricField,
    eps: f64,
    cfg: &'a SolverConfig,
    tol: f64,
    m: usize,
    sqrt_w: f64,
    /// `neighbours[p]` = points whose residual depends on `H(p)`, `p` first.
    neighbours: Vec<Vec<usize>>,
    colours: Vec<Vec<usize>>,
    order_pos: Vec<usize>,
    /// Factored Jacobian carried between iterations and stages.
    cache: &'a Mutex<Option<JacobianCache>>,
}

/// Jacobian blocks and their regularized factorization.
struct JacobianCache {
    blocks: Vec<Vec<Vec<f64>>>,
    factor: ProfileMatrix,
    /// Whether `blocks` were evaluated at the current iterate.
    fresh: bool,
}

/// Outcome of a single stage.
#[derive(Clone, Debug)]
pub struct StageSolution {
    pub h: MetricField,
    pub iterations: usize,
    /// `‖R − ε log f‖_{L²}`.
    pub residual_l2: f64,
    pub converged: bool,
    /// Merit `𝓕_ε` after every accepted step (flow) or Newton iterate.
    pub merits: Vec<f64>,
}

impl StageSolution {
    pub fn f(&self, k: &MetricField) -> EndoField {
        k.relative(&self.h)
    }
}

fn neighbour_sets(grid: &GridManifold) -> Vec<Vec<usize>> {
    (0..grid.npoints())
        .map(|p| {
            let mut v = vec![p];
            for a in 0..grid.dim() {
                v.push(grid.shift(p, a, true));
                v.push(grid.shift(p, a, false));
            }
            v
        })
        .collect()
}

/// Greedy distance-2 colouring: points of one colour have disjoint neighbour sets.
fn distance2_colouring(neighbours: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = neighbours.len();
    let mut colour = vec![usize::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for p in 0..n {
        let mut used = Vec::new();
        for &q in &neighbours[p] {
            for &s in &neighbours[q] {
                if colour[s] != usize::MAX {
                    used.push(colour[s]);
                }
            }
        }
        let c = (0..).find(|c| !used.contains(c)).unwrap();
        colour[p] = c;
        if c == groups.len() {
            groups.push(Vec::new());
        }
        groups[c].push(p);
    }
    groups
}

impl<'a> StageSolver<'a> {
    fn new(
        conn: &'a ConnectionField,
        k: &'a MetricField,
        eps: f64,
        cfg: &'a SolverConfig,
        tol: f64,
        cache: &'a Mutex<Option<JacobianCache>>,
    ) -> Self {
        let grid = conn.grid();
        let neighbours = neighbour_sets(grid);
        let colours = distance2_colouring(&neighbours);
        let adjacency: Vec<Vec<usize>> = neighbours.iter().map(|v| v[1..].to_vec()).collect();
        let order = rcm_ordering(&adjacency);
        let mut order_pos = vec![0; order.len()];
        for (i, &p) in order.iter().enumerate() {
            order_pos[p] = i;
        }
        let r = conn.rank();
        Self {
            conn,
            k,
            eps,
            cfg,
            tol,
            m: r * r,
            sqrt_w: grid.weight().sqrt(),
            neighbours,
            colours,
            order_pos,
            cache,
        }
    }

    fn evaluate(&self, h: &MetricField) -> Result<Evaluation> {
        let grid = self.conn.grid();
        let (res, energy) = residual_frames_and_energy(self.conn, h)?;
        let m = self.m;
        let mut vec = vec![0.0; grid.npoints() * m];
        let sq: Vec<f64> = vec
            .par_chunks_mut(m)
            .enumerate()
            .map(|(x, out)| {
                let log_f = log_relative_frame(self.k, h, x)?;
                hermitian_to_vec(&(&res[x] - scale(&log_f, self.eps)), out);
                out.iter_mut().for_each(|v| *v *= self.sqrt_w);
                Ok(trace(&(&log_f * &log_f)).re)
            })
            .collect::<Result<_>>()?;
        let merit = energy + 0.25 * self.eps * grid.integrate(&sq);
        let norm = norm(&vec);
        Ok(Evaluation { vec, norm, merit })
    }

    /// `H' = G e^{S} G^†` at every point, kept as the factor `G e^{S/2}`.
    fn retract(&self, h: &MetricField, s: &[f64], alpha: f64) -> Result<MetricField> {
        let r = self.conn.rank();
        let m = self.m;
        let factors: Vec<CMat> = (0..h.len())
            .into_par_iter()
            .map(|x| {
                let sx = vec_to_hermitian(&s[x * m..(x + 1) * m], r);
                &h.factor(x).l * expm(&scale(&sx, 0.5 * alpha))
            })
            .collect();
        MetricField::from_factors(factors)
    }

    /// Jacobian blocks `J[(q,l),(p,k)]` stored as `blocks[p][slot][l * m + k]`
    /// with `q = neighbours[p][slot]`.
    fn jacobian(&self, h: &MetricField) -> Result<Vec<Vec<Vec<f64>>>> {
        let m = self.m;
        let tau = self.cfg.fd_step;
        let jobs: Vec<(usize, usize)> =
            (0..self.colours.len()).flat_map(|c| (0..m).map(move |k| (c, k))).collect();
        let columns: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = jobs
            .par_iter()
            .map(|&(c, k)| {
                let mut s = vec![0.0; h.len() * m];
                for &p in &self.colours[c] {
                    s[p * m + k] = 1.0;
                }
                let plus = self.evaluate(&self.retract(h, &s, tau)?)?;
                let minus = self.evaluate(&self.retract(h, &s, -tau)?)?;
                Ok((c, k, plus.vec, minus.vec))
            })
            .collect::<Result<_>>()?;
        let mut blocks: Vec<Vec<Vec<f64>>> =
            self.neighbours.iter().map(|nb| vec![vec![0.0; m * m]; nb.len()]).collect();
        for (c, k, plus, minus) in columns {
            for &p in &self.colours[c] {
                for (slot, &q) in self.neighbours[p].iter().enumerate() {
                    for l in 0..m {
                        blocks[p][slot][l * m + k] = (plus[q * m + l] - minus[q * m + l]) / (2.0 * tau);
                    }
                }
            }
        }
        Ok(blocks)
    }

    /// Solves `(−sym J + μ I) δ = F` by envelope Cholesky, raising `μ` until
    /// the factorization succeeds.
    fn factorize(&self, blocks: &[Vec<Vec<f64>>], mu_floor: f64) -> Result<ProfileMatrix> {
        let m = self.m;
        let n = self.neighbours.len();
        let dofs = n * m;
        let pos = |p: usize, k: usize| self.order_pos[p] * m + k;
        let mut first = vec![0usize; dofs];
        for p in 0..n {
            let lo = self.neighbours[p].iter().map(|&q| self.order_pos[q]).min().unwrap() * m;
            for k in 0..m {
                first[pos(p, k)] = lo.min(pos(p, k));
            }
        }
        let slot_of = |q: usize, p: usize| self.neighbours[q].iter().position(|&s| s == p).unwrap();
        let mut max_diag: f64 = 0.0;
        for p in 0..n {
            for k in 0..m {
                max_diag = max_diag.max(blocks[p][0][k * m + k].abs());
            }
        }
        let mut mu = mu_floor.max(1e-13 * max_diag);
        for _ in 0..12 {
            let mut mat = ProfileMatrix::new(first.clone());
            for p in 0..n {
                for (slot, &q) in self.neighbours[p].iter().enumerate() {
                    let back = slot_of(q, p);
                    for k in 0..m {
                        for l in 0..m {
                            let (i, j) = (pos(q, l), pos(p, k));
                            if i < j {
                                continue;
                            }
                            let a = blocks[p][slot][l * m + k];
                            let b = blocks[q][back][k * m + l];
                            mat.add(i, j, -0.5 * (a + b));
                        }
                    }
                }
            }
            for i in 0..dofs {
                mat.add(i, i, mu);
            }
            if mat.factor().is_ok() {
                return Ok(mat);
            }
            mu = (mu * 100.0).max(1e-10 * max_diag.max(1.0));
        }
        Err(Error::Singular("stage Jacobian could not be regularized".into()))
    }

    /// Solves `(−sym J + μ I) δ = F` with a factored matrix.
    fn apply_factor(&self, mat: &ProfileMatrix, rhs: &[f64]) -> Vec<f64> {
        let m = self.m;
        let n = self.neighbours.len();
        let mut permuted = vec![0.0; n * m];
        for p in 0..n {
            for k in 0..m {
                permuted[self.order_pos[p] * m + k] = rhs[p * m + k];
            }
        }
        let sol = mat.solve(&permuted);
        let mut delta = vec![0.0; n * m];
        for p in 0..n {
            for k in 0..m {
                delta[p * m + k] = sol[self.order_pos[p] * m + k];
            }
        }
        delta
    }

    fn refresh(&self, h: &MetricField, mu_floor: f64) -> Result<()> {
        let blocks = self.jacobian(h)?;
        let factor = self.factorize(&blocks, mu_floor)?;
        *self.cache.lock().unwrap() = Some(JacobianCache { blocks, factor, fresh: true });
        Ok(())
    }

    fn step_size(&self, delta: &[f64]) -> f64 {
        self.sqrt_w * norm(delta)
    }

    /// Newton iteration on the stage equation. The factored Jacobian is kept
    /// while the residual contracts by at least half per step and recomputed
    /// otherwise (chord steps between refreshes).
    fn newton(&self, h_init: MetricField, max_iter: usize, allow_fallback: bool) -> Result<StageSolution> {
        let mut h = h_init;
        let mut ev = self.evaluate(&h)?;
        let mut merits = vec![ev.merit];
        let mut rejections = 0;
        let mut mu_floor = 0.0;
        let mut iterations = 0;
        if let Some(c) = self.cache.lock().unwrap().as_mut() {
            c.fresh = false;
        }
        while iterations < max_iter {
            if ev.norm < 1e-3 * self.tol {
                return Ok(StageSolution { h, iterations, residual_l2: ev.norm, converged: true, merits });
            }
            if self.cache.lock().unwrap().is_none() {
                self.refresh(&h, mu_floor)?;
            }
            let (delta, fresh) = {
                let cache = self.cache.lock().unwrap();
                let c = cache.as_ref().expect("factor present");
                (self.apply_factor(&c.factor, &ev.vec), c.fresh)
            };
            let step = self.step_size(&delta);
            // a tiny residual with a large step signals a drifting, nearly flat direction
            if ev.norm < self.tol && step < self.cfg.step_tol {
                return Ok(StageSolution { h, iterations, residual_l2: ev.norm, converged: true, merits });
            }
            // directional derivative of 𝓕 along δ
            let slope = -0.5 * self.sqrt_w * dot(&ev.vec, &delta);
            let mut alpha = 1.0;
            let mut accepted = None;
            let tries = if fresh { 40 } else { 4 };
            for _ in 0..tries {
                if let Ok(trial) = self.retract(&h, &delta, alpha) {
                    if let Ok(tev) = self.evaluate(&trial) {
                        let armijo = tev.merit <= ev.merit + 1e-4 * alpha * slope.min(0.0);
                        let shrinks = tev.norm <= (1.0 - 1e-4 * alpha) * ev.norm;
                        if armijo || shrinks {
                            accepted = Some((trial, tev));
                            break;
                        }
                    }
                }
                alpha *= self.cfg.damping;
            }
            iterations += 1;
            match accepted {
                Some((trial, tev)) => {
                    let contraction = tev.norm / ev.norm.max(1e-300);
                    h = trial;
                    ev = tev;
                    merits.push(ev.merit);
                    if fresh && contraction > 0.5 && ev.norm < ROUNDOFF_FACTOR * self.tol {
                        return Ok(StageSolution { h, iterations, residual_l2: ev.norm, converged: true, merits });
                    }
                    rejections = 0;
                    mu_floor *= 0.1;
                    let mut cache = self.cache.lock().unwrap();
                    if contraction > 0.5 && !fresh {
                        *cache = None;
                    } else if let Some(c) = cache.as_mut() {
                        c.fresh = false;
                    }
                }
                None if !fresh => {
                    // a stale factor failed: retry with a current Jacobian
                    *self.cache.lock().unwrap() = None;
                }
                None if ev.norm < ROUNDOFF_FACTOR * self.tol => {
                    return Ok(StageSolution { h, iterations, residual_l2: ev.norm, converged: true, merits });
                }
                None => {
                    rejections += 1;
                    mu_floor = (mu_floor * 100.0).max(1e-8 * ev.norm.max(1e-12));
                    {
                        let mut cache = self.cache.lock().unwrap();
                        let c = cache.as_mut().expect("factor present");
                        c.factor = self.factorize(&c.blocks, mu_floor)?;
                    }
                    if rejections >= 3 {
                        if !allow_fallback {
                            break;
                        }
                        let flowed = self.flow(h.clone(), self.cfg.fallback_steps)?;
                        h = flowed.h;
                        ev = self.evaluate(&h)?;
                        merits.push(ev.merit);
                        rejections = 0;
                        *self.cache.lock().unwrap() = None;
                    }
                }
            }
        }
        Err(Error::NoConvergence(format!(
            "stage eps = {:e} after {iterations} iterations (residual {:e})",
            self.eps, ev.norm
        )))
    }

    /// Gradient descent on `𝓕_ε` with exponential retraction and Armijo steps.
    fn flow(&self, h_init: MetricField, steps: usize) -> Result<StageSolution> {
        let grid = self.conn.grid();
        let hmin = (0..grid.dim()).map(|a| grid.spacing(a)).fold(f64::INFINITY, f64::min);
        let floor = 1e-14 * hmin * hmin;
        let mut tau = 0.25 * hmin * hmin;
        let mut h = h_init;
        let mut ev = self.evaluate(&h)?;
        let mut merits = vec![ev.merit];
        let mut accepted_steps = 0;
        let mut stalled = false;
        while accepted_steps < steps && ev.norm >= self.tol {
            // S = τ F_hat; F_hat = vec / √w
            let dir: Vec<f64> = ev.vec.iter().map(|v| v / self.sqrt_w).collect();
            let slope = -0.5 * self.sqrt_w * dot(&ev.vec, &dir);
            let trial = self.retract(&h, &dir, tau).and_then(|t| self.evaluate(&t).map(|e| (t, e)));
            match trial {
                Ok((t, tev))
                    if (tev.merit <= ev.merit + 1e-4 * tau * slope && tev.merit < ev.merit)
                        || (tev.merit <= ev.merit + MERIT_ROUNDOFF * ev.merit.abs() && tev.norm < ev.norm) =>
                {
                    h = t;
                    ev = tev;
                    merits.push(ev.merit);
                    accepted_steps += 1;
                    tau *= 1.5;
                }
                _ => {
                    tau *= self.cfg.damping;
                    if tau < floor {
                        // the merit no longer decreases in floating point
                        stalled = true;
                        break;
                    }
                }
            }
        }
        let converged = ev.norm < self.tol || (stalled && ev.norm < ROUNDOFF_FACTOR * self.tol);
        Ok(StageSolution { h, iterations: accepted_steps, residual_l2: ev.norm, converged, merits })
    }

    fn solve(&self, h_init: MetricField, max_iter: usize) -> Result<StageSolution> {
        match self.cfg.mode {
            Mode::Newton => self.newton(h_init, max_iter, false),
            Mode::Hybrid => {
                let warm = self.flow(h_init, self.cfg.warmup_steps)?;
                let mut sol = self.newton(warm.h, max_iter, true)?;
                sol.iterations += warm.iterations;
                Ok(sol)
            }
            Mode::Flow => {
                let sol = self.flow(h_init, self.cfg.flow_max_steps)?;
                if sol.converged {
                    Ok(sol)
                } else {
                    Err(Error::NoConvergence(format!(
                        "flow at eps = {:e} (residual {:e})",
                        self.eps, sol.residual_l2
                    )))
                }
            }
        }
    }
}

/// `log(K⁻¹H)` at `x` in the frame of `h`: with `B = L_K⁻¹ G_H` it is
/// `log(B^† B)`, computed without forming `K⁻¹H`.
pub fn log_relative_frame(k: &MetricField, h: &MetricField, x: usize) -> Result<CMat> {
    let b = &k.factor(x).l_inv * &h.factor(x).l;
    let (vals, vecs) = eigh(&(b.adjoint() * b));
    if !(vals[0] > 0.0) {
        return Err(Error::NonPositive { point: x, value: vals[0] });
    }
    Ok(crate::linalg::compose_eig(&vals, &vecs, f64::ln))
}

/// `log(K⁻¹H)` as a `K`-self-adjoint field, from `log(B B^†)` in the frame of `k`.
pub fn log_relative(k: &MetricField, h: &MetricField) -> Result<EndoField> {
    (0..k.len())
        .into_par_iter()
        .map(|x| {
            let fac = k.factor(x);
            let b = &fac.l_inv * &h.factor(x).l;
            let (vals, vecs) = eigh(&(&b * b.adjoint()));
            if !(vals[0] > 0.0) {
                return Err(Error::NonPositive { point: x, value: vals[0] });
            }
            Ok(fac.from_hermitian(&crate::linalg::compose_eig(&vals, &vecs, f64::ln)))
        })
        .collect()
}

/// Relative merit change treated as roundoff; below it a step is judged by `‖F‖`.
const MERIT_ROUNDOFF: f64 = 1e-13;

/// Largest `‖log(H_ε⁻¹ H_0)‖_{L²}` between the last ε-stage and an accepted
/// ε = 0 solution.
pub const ENDGAME_MAX_JUMP: f64 = 1.0;

/// A stage whose fresh Newton step stagnates within this factor of the
/// tolerance is at the roundoff floor of the residual and is accepted.
pub const ROUNDOFF_FACTOR: f64 = 100.0;

/// Absolute stage tolerance `newton_tol · (1 + ‖R(∇, K)‖_{L²})` for the metric `k`.
pub fn stage_tolerance(conn: &ConnectionField, k: &MetricField, cfg: &SolverConfig) -> Result<f64> {
    let rk = residual(conn, k)?;
    let scale = crate::decomposition::l2_norm_in(&rk, k, conn.grid().weight());
    Ok(cfg.newton_tol * (1.0 + scale))
}

fn metric_from_f(k: &MetricField, f: &[CMat]) -> Result<MetricField> {
    if f.len() != k.len() {
        return Err(Error::Shape(format!("{} endomorphisms for {} points", f.len(), k.len())));
    }
    k.compose(f)
}

/// Newton solve of `R(Kf) = ε log f` from `f_init`.
pub fn newton_stage(
    conn: &ConnectionField,
    k: &MetricField,
    f_init: &[CMat],
    eps: f64,
    cfg: &SolverConfig,
) -> Result<StageSolution> {
    cfg.validate()?;
    let tol = stage_tolerance(conn, k, cfg)?;
    let cache = Mutex::new(None);
    let stage = StageSolver::new(conn, k, eps, cfg, tol, &cache);
    stage.newton(metric_from_f(k, f_init)?, cfg.newton_max_iter, cfg.mode == Mode::Hybrid)
}

/// Up to `steps` accepted gradient steps on `𝓕_ε` from `f_init`.
pub fn flow_stage(
    conn: &ConnectionField,
    k: &MetricField,
    f_init: &[CMat],
    eps: f64,
    steps: usize,
    cfg: &SolverConfig,
) -> Result<StageSolution> {
    cfg.validate()?;
    let tol = stage_tolerance(conn, k, cfg)?;
    let cache = Mutex::new(None);
    let stage = StageSolver::new(conn, k, eps, cfg, tol, &cache);
    stage.flow(metric_from_f(k, f_init)?, steps)
}

/// Diagnostics of one converged ε-stage.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StageRecord {
    pub eps: f64,
    pub iters: usize,
    /// `‖R(H_ε) − ε log f_ε‖_{L²}`.
    pub residual_l2: f64,
    pub logf_l2: f64,
    pub logf_linf: f64,
    pub energy: f64,
    /// Extreme eigenvalues of `f_ε = K⁻¹H_ε` over the grid.
    pub fmin: f64,
    pub fmax: f64,
    /// `∫ tr log f_ε dvol`.
    pub trace_integral: f64,
    /// `ε ‖log f_ε‖_{L^∞} / max|R(∇, K)|`; the continuum maximum principle bounds it by 1.
    pub c0_ratio: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FailedStage {
    pub eps: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct ContinuationTrace {
    pub stages: Vec<StageRecord>,
    pub failures: Vec<FailedStage>,
}

pub const TRACE_COLUMNS: &str = "eps,iters,residual_l2,logf_l2,logf_linf,energy,fmin,fmax";

impl ContinuationTrace {
    /// CSV with the columns of [`TRACE_COLUMNS`]; floats in `{:.17e}` so the
    /// text round-trips bit-exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_COLUMNS);
        out.push('\n');
        for s in &self.stages {
            out.push_str(&format!(
                "{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                s.eps, s.iters, s.residual_l2, s.logf_l2, s.logf_linf, s.energy, s.fmin, s.fmax
            ));
        }
        out
    }

    pub fn max_logf_l2(&self) -> f64 {
        self.stages.iter().map(|s| s.logf_l2).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlowUpReason {
    /// `‖log f_ε‖_{L²}` exceeded `blowup_l2`.
    Threshold,
    /// Stage refinement or the ε = 0 endgame made no progress.
    Stall,
}

#[derive(Clone, Debug)]
pub enum SolveOutcome {
    Harmonic { h: MetricField, final_residual: f64 },
    BlowUp { u_infty: EndoField, reason: BlowUpReason },
}

impl SolveOutcome {
    pub fn is_harmonic(&self) -> bool {
        matches!(self, SolveOutcome::Harmonic { .. })
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub outcome: SolveOutcome,
    pub trace: ContinuationTrace,
    /// Reference metric `K` of the path.
    pub k: MetricField,
    /// Exact ε = 1 solution.
    pub h1: MetricField,
    /// Absolute stage tolerance.
    pub tol: f64,
    /// `‖log f‖_{L²}` at the smallest completed ε exceeded `blowup_l2 / 2`.
    pub marginal: bool,
    /// Metric at the last completed stage.
    pub last_h: MetricField,
}

/// Largest pointwise spectral radius of a `K`-self-adjoint field.
pub fn sup_norm(field: &[CMat], k: &MetricField) -> f64 {
    field
        .iter()
        .enumerate()
        .map(|(x, s)| {
            let (vals, _) = eigh(&k.factor(x).to_hermitian(s));
            vals.iter().map(|v| v.abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Floor on `max|R(∇, K)|` in [`StageRecord::c0_ratio`], below which the
/// residual is roundoff.
pub const C0_FLOOR: f64 = 1e-8;

fn stage_record(
    conn: &ConnectionField,
    k: &MetricField,
    h: &MetricField,
    eps: f64,
    iters: usize,
    residual_l2: f64,
    rk_sup: f64,
) -> Result<StageRecord> {
    let grid = conn.grid();
    let log_f = log_relative(k, h)?;
    let (_, energy) = residual_frames_and_energy(conn, h)?;
    let mut fmin = f64::INFINITY;
    let mut fmax: f64 = 0.0;
    let mut linf: f64 = 0.0;
    for (x, l) in log_f.iter().enumerate() {
        let (vals, _) = eigh(&k.factor(x).to_hermitian(l));
        fmin = fmin.min(vals[0].exp());
        fmax = fmax.max(vals[vals.len() - 1].exp());
        linf = linf.max(vals[0].abs()).max(vals[vals.len() - 1].abs());
    }
    let traces: Vec<f64> = log_f.iter().map(|l| trace(l).re).collect();
    Ok(StageRecord {
        eps,
        iters,
        residual_l2,
        logf_l2: crate::decomposition::l2_norm_in(&log_f, k, grid.weight()),
        logf_linf: linf,
        energy,
        fmin,
        fmax,
        trace_integral: grid.integrate(&traces),
        c0_ratio: eps * linf / rk_sup.max(C0_FLOOR),
    })
}

fn blow_up_direction(conn: &ConnectionField, k: &MetricField, h: &MetricField) -> Result<EndoField> {
    let log_f = log_relative(k, h)?;
    let nrm = crate::decomposition::l2_norm_in(&log_f, k, conn.grid().weight());
    if !(nrm > 0.0) {
        return Err(Error::Invalid("blow-up direction is zero".into()));
    }
    Ok(log_f.iter().map(|l| scale(l, 1.0 / nrm)).collect())
}

/// Runs the continuity path from ε = 1 to `eps_min`, then ε = 0.
pub fn continuity_solve(conn: &ConnectionField, k0: &MetricField, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let init = initial_metric(conn, k0)?;
    let k = init.k.clone();
    // scaled by the residual of the ε = 1 solution, which is the initial log f
    let tol = stage_tolerance(conn, &init.h1, cfg)?;
    let rk_sup = sup_norm(&residual(conn, &k)?, &k);
    let mut trace = ContinuationTrace::default();

    let cache = Mutex::new(None);
    let run = |eps: f64, h: &MetricField, max_iter: usize| -> Result<StageSolution> {
        let stage = StageSolver::new(conn, &k, eps, cfg, tol, &cache);
        let sol = stage.solve(h.clone(), max_iter)?;
        if sol.converged {
            Ok(sol)
        } else {
            Err(Error::NoConvergence(format!("stage eps = {eps:e}")))
        }
    };

    let first = run(1.0, &init.h1, cfg.newton_max_iter)?;
    let mut h = first.h.clone();
    trace.stages.push(stage_record(conn, &k, &h, 1.0, first.iterations, first.residual_l2, rk_sup)?);

    let finish = |trace: ContinuationTrace, outcome: SolveOutcome, last_h: MetricField| -> SolveResult {
        let marginal = trace
            .stages
            .iter()
            .filter(|s| s.eps > 0.0)
            .last()
            .map(|s| s.logf_l2 > 0.5 * cfg.blowup_l2)
            .unwrap_or(false);
        SolveResult { outcome, trace, k: k.clone(), h1: init.h1.clone(), tol, marginal, last_h }
    };
    let blow_up = |trace: ContinuationTrace, h: MetricField, reason: BlowUpReason| -> Result<SolveResult> {
        let u_infty = blow_up_direction(conn, &k, &h)?;
        Ok(finish(trace, SolveOutcome::BlowUp { u_infty, reason }, h))
    };

    let harmonic_already = |h: &MetricField| -> Result<bool> {
        let r = residual(conn, h)?;
        Ok(crate::decomposition::l2_norm_in(&r, h, conn.grid().weight()) < tol)
    };

    let mut eps = 1.0;
    let mut ratio = cfg.eps_ratio;
    let mut stall = 0;
    while eps > cfg.eps_min && !harmonic_already(&h)? {
        let target = (eps * ratio).max(cfg.eps_min);
        match run(target, &h, cfg.newton_max_iter) {
            Ok(sol) => {
                let sol_iters = sol.iterations;
                h = sol.h;
                eps = target;
                let rec = stage_record(conn, &k, &h, eps, sol.iterations, sol.residual_l2, rk_sup)?;
                let over = rec.logf_l2 > cfg.blowup_l2;
                trace.stages.push(rec);
                if over {
                    return blow_up(trace, h, BlowUpReason::Threshold);
                }
                stall = 0;
                ratio = if sol_iters <= cfg.warmup_steps + cfg.fast_stage_iters {
                    (ratio * ratio).max(cfg.min_eps_ratio)
                } else {
                    cfg.eps_ratio
                };
            }
            Err(e) => {
                trace.failures.push(FailedStage { eps: target, reason: e.to_string() });
                stall += 1;
                if stall > cfg.blowup_stall {
                    return blow_up(trace, h, BlowUpReason::Stall);
                }
                ratio = ratio.sqrt();
            }
        }
    }

    let endgame = |trace: &mut ContinuationTrace, h: &MetricField| -> Result<Option<StageSolution>> {
        match run(0.0, h, cfg.endgame_max_iter) {
            Ok(sol) => {
                // without a harmonic metric the ε = 0 iteration can still drive
                // the residual down by escaping to infinity
                let jump = crate::decomposition::l2_norm_in(&log_relative(h, &sol.h)?, h, conn.grid().weight());
                if jump > ENDGAME_MAX_JUMP {
                    trace.failures.push(FailedStage {
                        eps: 0.0,
                        reason: format!("endgame moved {jump:e} away from the last stage"),
                    });
                    Ok(None)
                } else {
                    Ok(Some(sol))
                }
            }
            Err(e) => {
                trace.failures.push(FailedStage { eps: 0.0, reason: e.to_string() });
                Ok(None)
            }
        }
    };

    let mut attempt = endgame(&mut trace, &h)?;
    let mut extra = 0;
    while attempt.is_none() && extra < cfg.blowup_stall {
        extra += 1;
        let target = eps * 0.5;
        match run(target, &h, cfg.newton_max_iter) {
            Ok(sol) => {
                h = sol.h;
                eps = target;
                let rec = stage_record(conn, &k, &h, eps, sol.iterations, sol.residual_l2, rk_sup)?;
                let over = rec.logf_l2 > cfg.blowup_l2;
                trace.stages.push(rec);
                if over {
                    return blow_up(trace, h, BlowUpReason::Threshold);
                }
            }
            Err(e) => {
                trace.failures.push(FailedStage { eps: target, reason: e.to_string() });
                break;
            }
        }
        attempt = endgame(&mut trace, &h)?;
    }

    match attempt {
        Some(sol) => {
            let rec = stage_record(conn, &k, &sol.h, 0.0, sol.iterations, sol.residual_l2, rk_sup)?;
            trace.stages.push(rec);
            let final_residual = sol.residual_l2;
            let h_final = sol.h;
            Ok(finish(trace, SolveOutcome::Harmonic { h: h_final.clone(), final_residual }, h_final))
        }
        None => blow_up(trace, h, BlowUpReason::Stall),
    }
}
