//! Problem files and seeded problem families.
//!
//! A problem is a grid, a rank, a connection (coefficients or links, with an
//! optional seam twist), a reference metric `K₀` and free-form metadata. Files
//! are JSON; complex matrices are row-major lists of rows, each entry a
//! `[re, im]` pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{ConnectionField, MetricField};
use crate::error::{Error, Result};
use crate::grid::GridManifold;
use crate::linalg::{c, identity, CMat};
use crate::random::{self, Symmetry};

pub const FORMAT: &str = "harmet-problem";
pub const FIELD_FORMAT: &str = "harmet-field";
pub const VERSION: u32 = 1;

/// Largest rank accepted by the generators.
pub const MAX_GEN_RANK: usize = 6;
/// Largest points per axis accepted by the generators.
pub const MAX_GEN_SIZE: usize = 512;

type MatrixJson = Vec<Vec<[f64; 2]>>;

fn to_json(m: &CMat) -> MatrixJson {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
}

fn from_json(m: &MatrixJson, rows: usize, cols: usize, what: &str) -> Result<CMat> {
    if m.len() != rows || m.iter().any(|row| row.len() != cols) {
        return Err(Error::Shape(format!("{what}: expected a {rows}x{cols} matrix")));
    }
    if m.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("{what}: non-finite entry")));
    }
    Ok(CMat::from_fn(rows, cols, |i, j| c(m[i][j][0], m[i][j][1])))
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridJson {
    pub sizes: Vec<usize>,
    pub lengths: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ConnectionJson {
    Coefficients(Vec<Vec<MatrixJson>>),
    Links(Vec<Vec<MatrixJson>>),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ProblemMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Expected classification: `true` when a harmonic metric exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semisimple: Option<bool>,
    /// Known invariant flag: for each `k`, the first `k` columns of the frame
    /// at `x` span a `∇`-invariant sub-bundle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant_frame: Option<Vec<MatrixJson>>,
    /// Ranks of the direct summands for block-diagonal families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
struct ProblemJson {
    format: String,
    version: u32,
    grid: GridJson,
    rank: usize,
    connection: ConnectionJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    twist: Option<Vec<MatrixJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metric: Option<Vec<MatrixJson>>,
    #[serde(default)]
    meta: ProblemMeta,
}

/// A loaded or generated problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub connection: ConnectionField,
    /// Reference metric `K₀`.
    pub metric: MetricField,
    pub meta: ProblemMeta,
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse { line: e.line(), column: e.column(), msg: e.to_string() }
}

impl Problem {
    pub fn new(connection: ConnectionField, metric: Option<MetricField>, meta: ProblemMeta) -> Result<Self> {
        let n = connection.npoints();
        let metric = metric.unwrap_or_else(|| MetricField::identity(n, connection.rank()));
        if metric.len() != n || metric.rank() != connection.rank() {
            return Err(Error::Shape("reference metric does not match the connection".into()));
        }
        Ok(Self { connection, metric, meta })
    }

    pub fn grid(&self) -> &GridManifold {
        self.connection.grid()
    }

    pub fn rank(&self) -> usize {
        self.connection.rank()
    }

    /// Invariant frame from the metadata, if any.
    pub fn invariant_frame(&self) -> Result<Option<Vec<CMat>>> {
        let r = self.rank();
        match &self.meta.invariant_frame {
            None => Ok(None),
            Some(frames) => {
                self.grid().check_len(frames.len())?;
                frames.iter().map(|m| from_json(m, r, r, "invariant frame")).collect::<Result<_>>().map(Some)
            }
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: ProblemJson = serde_json::from_str(text).map_err(parse_error)?;
        if raw.format != FORMAT {
            return Err(Error::Invalid(format!("format tag {:?}, expected {FORMAT:?}", raw.format)));
        }
        if raw.version != VERSION {
            return Err(Error::Invalid(format!("unsupported version {}", raw.version)));
        }
        if raw.grid.lengths.iter().any(|l| !l.is_finite()) {
            return Err(Error::Invalid("non-finite grid length".into()));
        }
        let grid = GridManifold::new(raw.grid.sizes.clone(), raw.grid.lengths.clone())?;
        let r = raw.rank;
        if r == 0 {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        let field = |values: &Vec<Vec<MatrixJson>>, what: &str| -> Result<Vec<Vec<CMat>>> {
            if values.len() != grid.dim() {
                return Err(Error::Shape(format!("{what}: {} axes for a {}-dimensional grid", values.len(), grid.dim())));
            }
            values
                .iter()
                .map(|comp| {
                    grid.check_len(comp.len())?;
                    comp.iter().map(|m| from_json(m, r, r, what)).collect()
                })
                .collect()
        };
        let twist = match &raw.twist {
            None => None,
            Some(t) => Some(t.iter().map(|m| from_json(m, r, r, "twist")).collect::<Result<Vec<_>>>()?),
        };
        let connection = match &raw.connection {
            ConnectionJson::Coefficients(v) => ConnectionField::new(grid.clone(), r, field(v, "coefficients")?, twist)?,
            ConnectionJson::Links(v) => ConnectionField::from_links(grid.clone(), r, field(v, "links")?, twist)?,
        };
        let metric = match &raw.metric {
            None => None,
            Some(values) => {
                grid.check_len(values.len())?;
                Some(MetricField::new(values.iter().map(|m| from_json(m, r, r, "metric")).collect::<Result<_>>()?)?)
            }
        };
        let problem = Self::new(connection, metric, raw.meta)?;
        problem.invariant_frame()?;
        Ok(problem)
    }

    pub fn to_json_string(&self) -> String {
        let conn = &self.connection;
        let id = identity(conn.rank());
        let metric_is_identity = self.metric.values().iter().all(|k| k == &id);
        let raw = ProblemJson {
            format: FORMAT.into(),
            version: VERSION,
            grid: GridJson { sizes: conn.grid().sizes().to_vec(), lengths: conn.grid().lengths().to_vec() },
            rank: conn.rank(),
            connection: ConnectionJson::Coefficients(
                conn.coeffs().iter().map(|comp| comp.iter().map(to_json).collect()).collect(),
            ),
            twist: if conn.has_twist() { Some(conn.twist().iter().map(to_json).collect()) } else { None },
            metric: if metric_is_identity { None } else { Some(self.metric.values().iter().map(to_json).collect()) },
            meta: self.meta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&raw).expect("problem serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

/// Endomorphism field file, used for projections and blow-up directions.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct FieldFile {
    pub format: String,
    pub version: u32,
    pub grid: GridJson,
    pub rank: usize,
    pub name: String,
    pub values: Vec<MatrixJson>,
}

impl FieldFile {
    pub fn new(grid: &GridManifold, name: &str, values: &[CMat]) -> Self {
        Self {
            format: FIELD_FORMAT.into(),
            version: VERSION,
            grid: GridJson { sizes: grid.sizes().to_vec(), lengths: grid.lengths().to_vec() },
            rank: values.first().map(|m| m.nrows()).unwrap_or(0),
            name: name.into(),
            values: values.iter().map(to_json).collect(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<(GridManifold, String, Vec<CMat>)> {
        let raw: FieldFile = serde_json::from_str(text).map_err(parse_error)?;
        if raw.format != FIELD_FORMAT || raw.version != VERSION {
            return Err(Error::Invalid(format!("format tag {:?} version {}", raw.format, raw.version)));
        }
        let grid = GridManifold::new(raw.grid.sizes, raw.grid.lengths)?;
        grid.check_len(raw.values.len())?;
        let values = raw.values.iter().map(|m| from_json(m, raw.rank, raw.rank, &raw.name)).collect::<Result<_>>()?;
        Ok((grid, raw.name, values))
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("field serializes");
        s.push('\n');
        s
    }
}

/// Generated problem families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Smooth anti-Hermitian `A`: `K₀ = I` is already harmonic with `E = 0`.
    Unitary,
    /// Constant Hermitian `A`: `I` is harmonic, `ψ_I = A`.
    ConstHermitian,
    /// Constant `A = N` (nilpotent Jordan block, commuting multiples on a
    /// torus): not semisimple, invariant flag `span(e₁) ⊂ span(e₁, e₂) ⊂ …`.
    Jordan,
    /// Direct sum of smooth blocks conjugated by a smooth gauge. On a circle
    /// the blocks have rank one, on a torus there are two generic blocks.
    BlockDiag,
    /// `A = a(x)·id + C(x)` with `C` strictly upper triangular and nonzero
    /// mean, conjugated by a smooth gauge: invariant flag `g e₁ ⊂ g(e₁, e₂) ⊂ …`,
    /// no invariant complement.
    BlockTriangular,
    /// Smooth generic `A`: simple on a torus, semisimple with distinct
    /// monodromy eigenvalues on a circle.
    RandomSimple,
}

pub const FAMILIES: [Family; 6] = [
    Family::Unitary,
    Family::ConstHermitian,
    Family::Jordan,
    Family::BlockDiag,
    Family::BlockTriangular,
    Family::RandomSimple,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Unitary => "unitary",
            Family::ConstHermitian => "const_hermitian",
            Family::Jordan => "jordan",
            Family::BlockDiag => "block_diag",
            Family::BlockTriangular => "block_triangular",
            Family::RandomSimple => "random_simple",
        }
    }

    pub fn is_semisimple(self) -> bool {
        !matches!(self, Family::Jordan | Family::BlockTriangular)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FAMILIES
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown family {s:?}")))
    }
}

/// Amplitude of generated smooth fields on `2π`-periodic domains.
const FIELD_SCALE: f64 = 0.5;
/// Amplitude of the logarithm of generated gauge scrambles.
const GAUGE_SCALE: f64 = 0.3;
const MODES: usize = 2;

/// Grid with `2π`-periodic axes.
pub fn periodic_grid(sizes: &[usize]) -> Result<GridManifold> {
    GridManifold::new(sizes.to_vec(), vec![std::f64::consts::TAU; sizes.len()])
}

fn nilpotent(r: usize) -> CMat {
    CMat::from_fn(r, r, |i, j| if j == i + 1 { c(1.0, 0.0) } else { c(0.0, 0.0) })
}

fn embed_blocks(blocks: &[&CMat], r: usize) -> CMat {
    let mut m = CMat::zeros(r, r);
    let mut at = 0;
    for b in blocks {
        let k = b.nrows();
        m.view_mut((at, at), (k, k)).copy_from(*b);
        at += k;
    }
    m
}

/// Deterministic problem of the given family.
pub fn generate(family: Family, rank: usize, sizes: &[usize], seed: u64) -> Result<Problem> {
    if rank == 0 || rank > MAX_GEN_RANK {
        return Err(Error::Invalid(format!("rank {rank} must lie in 1..={MAX_GEN_RANK}")));
    }
    if sizes.iter().any(|&n| n > MAX_GEN_SIZE) {
        return Err(Error::Invalid(format!("grid sizes must not exceed {MAX_GEN_SIZE}")));
    }
    let grid = periodic_grid(sizes)?;
    let dim = grid.dim();
    let n = grid.npoints();
    let mut rng = random::rng(seed);
    let smooth = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, sym: Symmetry| {
        random::smooth_field(rng, &grid, r, MODES, FIELD_SCALE, sym)
    };
    let mut meta = ProblemMeta {
        family: Some(family.name().into()),
        seed: Some(seed),
        semisimple: Some(family.is_semisimple()),
        ..Default::default()
    };
    let connection = match family {
        Family::Unitary => {
            meta.description = "smooth anti-Hermitian connection; the identity metric is harmonic".into();
            let coeffs = (0..dim).map(|_| smooth(&mut rng, rank, Symmetry::AntiHermitian)).collect();
            ConnectionField::new(grid.clone(), rank, coeffs, None)?
        }
        Family::ConstHermitian => {
            meta.description = "constant Hermitian connection; the identity metric is harmonic".into();
            let mats: Vec<CMat> = (0..dim).map(|_| random::hermitian(&mut rng, rank, FIELD_SCALE)).collect();
            ConnectionField::constant(grid.clone(), &mats, None)?
        }
        Family::Jordan => {
            if rank < 2 {
                return Err(Error::Invalid("jordan family needs rank at least 2".into()));
            }
            meta.description = "constant nilpotent Jordan block; invariant flag of coordinate subspaces".into();
            let scales = [1.0, 0.5];
            let mats: Vec<CMat> = (0..dim).map(|a| nilpotent(rank) * c(scales[a], 0.0)).collect();
            meta.invariant_frame = Some(vec![to_json(&identity(rank)); n]);
            ConnectionField::constant(grid.clone(), &mats, None)?
        }
        Family::BlockDiag => {
            if rank < 2 {
                return Err(Error::Invalid("block_diag family needs rank at least 2".into()));
            }
            let ranks: Vec<usize> = if dim == 1 { vec![1; rank] } else { vec![rank - rank / 2, rank / 2] };
            meta.description = format!("direct sum of blocks of ranks {ranks:?} conjugated by a smooth gauge");
            meta.blocks = Some(ranks.clone());
            let coeffs: Vec<Vec<CMat>> = (0..dim)
                .map(|_| {
                    let parts: Vec<Vec<CMat>> = ranks.iter().map(|&k| smooth(&mut rng, k, Symmetry::General)).collect();
                    (0..n).map(|x| embed_blocks(&parts.iter().map(|p| &p[x]).collect::<Vec<_>>(), rank)).collect()
                })
                .collect();
            let base = ConnectionField::new(grid.clone(), rank, coeffs, None)?;
            let g = random::smooth_gauge(&mut rng, &grid, rank, 1, GAUGE_SCALE);
            base.gauge_act(&g)?
        }
        Family::BlockTriangular => {
            if rank < 2 {
                return Err(Error::Invalid("block_triangular family needs rank at least 2".into()));
            }
            meta.description = "scalar diagonal plus strictly upper-triangular part, conjugated by a smooth gauge".into();
            let coeffs: Vec<Vec<CMat>> = (0..dim)
                .map(|_| {
                    let diag = smooth(&mut rng, 1, Symmetry::General);
                    let upper = smooth(&mut rng, rank, Symmetry::General);
                    // nonzero mean keeps the extension class away from zero
                    let mean: Vec<f64> = (0..rank * rank).map(|_| rng.random_range(0.5..1.0)).collect();
                    (0..n)
                        .map(|x| {
                            CMat::from_fn(rank, rank, |i, j| {
                                if i == j {
                                    diag[x][(0, 0)]
                                } else if j > i {
                                    upper[x][(i, j)] + c(mean[i * rank + j], 0.0)
                                } else {
                                    c(0.0, 0.0)
                                }
                            })
                        })
                        .collect()
                })
                .collect();
            let base = ConnectionField::new(grid.clone(), rank, coeffs, None)?;
            let g = random::smooth_gauge(&mut rng, &grid, rank, 1, GAUGE_SCALE);
            // U' = g(x+e) U g(x)⁻¹ maps the flag at x to g(x)·flag
            meta.invariant_frame = Some(g.iter().map(to_json).collect());
            base.gauge_act(&g)?
        }
        Family::RandomSimple => {
            meta.description = "smooth generic connection".into();
            meta.semisimple = Some(true);
            let coeffs = (0..dim).map(|_| smooth(&mut rng, rank, Symmetry::General)).collect();
            ConnectionField::new(grid.clone(), rank, coeffs, None)?
        }
    };
    // links are rebuilt from the stored coefficients on load; reparse so the
    // in-memory problem is exactly what its file reproduces
    Problem::from_json_str(&Problem::new(connection, None, meta)?.to_json_string())
}

/// Problems shipped with the crate, by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "unitary_s1" => Some(include_str!("../problems/unitary_s1.json")),
        "jordan_s1" => Some(include_str!("../problems/jordan_s1.json")),
        "blockdiag_t2" => Some(include_str!("../problems/blockdiag_t2.json")),
        _ => None,
    }
}

/// Generator arguments that reproduce each bundled problem.
pub const BUNDLED: [(&str, Family, usize, &[usize], u64); 3] = [
    ("unitary_s1", Family::Unitary, 2, &[64], 1),
    ("jordan_s1", Family::Jordan, 2, &[128], 2),
    ("blockdiag_t2", Family::BlockDiag, 4, &[16, 16], 3),
];

/// Parses `"64"` or `"32x32"`.
pub fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    spec.split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("grid {spec:?}: expected N or NxM"))))
        .collect()
}
