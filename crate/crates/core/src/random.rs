//! Seeded random matrices and smooth random fields.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::grid::GridManifold;
use crate::linalg::{c, expm, hermitian_part, CMat};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in the square `[-scale, scale]²` of the complex plane.
pub fn matrix(rng: &mut impl Rng, r: usize, scale: f64) -> CMat {
    CMat::from_fn(r, r, |_, _| c(rng.random_range(-scale..=scale), rng.random_range(-scale..=scale)))
}

pub fn hermitian(rng: &mut impl Rng, r: usize, scale: f64) -> CMat {
    hermitian_part(&matrix(rng, r, scale))
}

pub fn anti_hermitian(rng: &mut impl Rng, r: usize, scale: f64) -> CMat {
    let m = matrix(rng, r, scale);
    (&m - m.adjoint()).map(|z| z * 0.5)
}

/// Positive-definite `exp(X)` with `X` Hermitian of entry size `scale`.
pub fn spd(rng: &mut impl Rng, r: usize, scale: f64) -> CMat {
    hermitian_part(&expm(&hermitian(rng, r, scale)))
}

/// Unitary `exp(X)` with `X` anti-Hermitian.
pub fn unitary(rng: &mut impl Rng, r: usize, scale: f64) -> CMat {
    expm(&anti_hermitian(rng, r, scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symmetry {
    General,
    Hermitian,
    AntiHermitian,
}

/// A trigonometric polynomial field `Σ_k C_k cos(2π k·x/L + φ_k)` with at
/// most `modes` Fourier modes per axis and random matrix coefficients.
pub fn smooth_field(
    rng: &mut impl Rng,
    grid: &GridManifold,
    r: usize,
    modes: usize,
    scale: f64,
    symmetry: Symmetry,
) -> Vec<CMat> {
    let dim = grid.dim();
    let mut terms = Vec::new();
    let wave_numbers: Vec<Vec<i64>> = if dim == 1 {
        (0..=modes as i64).map(|k| vec![k]).collect()
    } else {
        let m = modes as i64;
        let mut v = Vec::new();
        for k0 in -m..=m {
            for k1 in -m..=m {
                if (k0, k1) >= (0, 0) && k0.abs() + k1.abs() <= m {
                    v.push(vec![k0, k1]);
                }
            }
        }
        v
    };
    for k in wave_numbers {
        let norm: i64 = k.iter().map(|v| v.abs()).sum();
        let amp = scale / (1.0 + norm as f64);
        let coeff = match symmetry {
            Symmetry::General => matrix(rng, r, amp),
            Symmetry::Hermitian => hermitian(rng, r, amp),
            Symmetry::AntiHermitian => anti_hermitian(rng, r, amp),
        };
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        terms.push((k, coeff, phase));
    }
    (0..grid.npoints())
        .map(|i| {
            let mut m = CMat::zeros(r, r);
            for (k, coeff, phase) in &terms {
                let arg: f64 = (0..dim)
                    .map(|a| std::f64::consts::TAU * k[a] as f64 * grid.position(i, a) / grid.lengths()[a])
                    .sum::<f64>()
                    + phase;
                m += coeff.map(|z| z * arg.cos());
            }
            m
        })
        .collect()
}

/// Smooth positive-definite metric `exp(X(x))`.
pub fn smooth_metric(rng: &mut impl Rng, grid: &GridManifold, r: usize, modes: usize, scale: f64) -> Vec<CMat> {
    smooth_field(rng, grid, r, modes, scale, Symmetry::Hermitian)
        .iter()
        .map(|x| hermitian_part(&expm(x)))
        .collect()
}

/// Smooth invertible gauge `exp(X(x))` with general `X`.
pub fn smooth_gauge(rng: &mut impl Rng, grid: &GridManifold, r: usize, modes: usize, scale: f64) -> Vec<CMat> {
    smooth_field(rng, grid, r, modes, scale, Symmetry::General).iter().map(expm).collect()
}
