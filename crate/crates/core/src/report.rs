//! Pipelines behind the command-line front-end and the structured reports
//! they emit.

use serde::Serialize;

use crate::bundle::{ConnectionField, MetricField};
use crate::continuity::{continuity_solve, BlowUpReason, FailedStage, SolveOutcome, SolveResult, SolverConfig, StageRecord};
use crate::detector::{
    extract_projections, gauge_fix, parallel_endomorphisms, parallel_projection, split_harmonic, verify_invariance,
    InvarianceReport, ParallelEndomorphisms, ProjectionField, SplitReport,
};
use crate::error::{Error, Result};
use crate::linalg::{principal_angle, CMat};
use crate::oracle::{oracle_classify, Classification};
use crate::problem::Problem;

pub const REPORT_VERSION: u32 = 1;
pub const SOLVE_FORMAT: &str = "harmet-solve-report";
pub const DETECT_FORMAT: &str = "harmet-detect-report";
pub const SPLIT_FORMAT: &str = "harmet-split-report";
pub const GAUGE_FIX_FORMAT: &str = "harmet-gauge-fix-report";
pub const ORACLE_FORMAT: &str = "harmet-oracle-report";

/// Invariance defect below which an extracted projection is certified.
pub const CERTIFY_TOL: f64 = 1e-3;
/// Idempotency and self-adjointness defects tolerated in a certificate.
pub const PROJECTION_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub format: &'static str,
    pub version: u32,
    pub problem: String,
    /// `"harmonic"` or `"blow_up"`.
    pub outcome: &'static str,
    pub blowup_reason: Option<BlowUpReason>,
    pub final_residual: Option<f64>,
    pub marginal: bool,
    pub stage_tolerance: f64,
    pub stages: usize,
    pub max_logf_l2: f64,
    pub max_c0_ratio: f64,
    pub failures: Vec<FailedStage>,
    pub trace: Vec<StageRecord>,
    pub config: SolverConfig,
}

impl SolveReport {
    pub fn new(problem: &str, res: &SolveResult, cfg: &SolverConfig) -> Self {
        let (outcome, blowup_reason, final_residual) = match &res.outcome {
            SolveOutcome::Harmonic { final_residual, .. } => ("harmonic", None, Some(*final_residual)),
            SolveOutcome::BlowUp { reason, .. } => ("blow_up", Some(*reason), None),
        };
        Self {
            format: SOLVE_FORMAT,
            version: REPORT_VERSION,
            problem: problem.into(),
            outcome,
            blowup_reason,
            final_residual,
            marginal: res.marginal,
            stage_tolerance: res.tol,
            stages: res.trace.stages.len(),
            max_logf_l2: res.trace.max_logf_l2(),
            max_c0_ratio: res.trace.stages.iter().map(|s| s.c0_ratio).fold(0.0, f64::max),
            failures: res.trace.failures.clone(),
            trace: res.trace.stages.clone(),
            config: cfg.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtractionSummary {
    pub mean_eigenvalues: Vec<f64>,
    pub variances: Vec<f64>,
    pub trace_integral: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParallelSummary {
    pub dimension: usize,
    pub singular_values: Vec<f64>,
    pub trace_power_defect: f64,
}

impl From<&ParallelEndomorphisms> for ParallelSummary {
    fn from(p: &ParallelEndomorphisms) -> Self {
        Self { dimension: p.dimension, singular_values: p.singular_values.clone(), trace_power_defect: p.trace_power_defect }
    }
}

/// Defect numbers of one projection field.
#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub rank: usize,
    pub idempotency_defect: f64,
    pub adjoint_defect: f64,
    pub rank_defect: f64,
    pub invariance: InvarianceReport,
    /// Largest principal angle to the problem's known invariant subspace.
    pub principal_angle: Option<f64>,
    pub certified: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Blow-up with a certified invariant sub-bundle.
    InvariantSubBundle,
    /// Harmonic metric and only scalar parallel endomorphisms.
    Irreducible,
    /// Harmonic metric and nontrivial parallel endomorphisms.
    Decomposable,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectReport {
    pub format: &'static str,
    pub version: u32,
    pub problem: String,
    pub verdict: Verdict,
    pub solve_outcome: &'static str,
    pub extraction: Option<ExtractionSummary>,
    pub parallel: Option<ParallelSummary>,
    pub certificates: Vec<Certificate>,
}

/// Detection result with the projection fields behind each certificate.
pub struct Detection {
    pub report: DetectReport,
    pub projections: Vec<ProjectionField>,
    pub solve: SolveResult,
}

/// Largest principal angle between `Π(x)` and the first `rank` columns of the
/// frame at each point.
pub fn frame_angle(pi: &ProjectionField, frame: &[CMat]) -> f64 {
    (0..pi.len())
        .map(|x| {
            let cols = frame[x].columns(0, pi.rank()).into_owned();
            let q = cols.clone().qr().q().columns(0, pi.rank()).into_owned();
            principal_angle(&pi.range_at(x), &q)
        })
        .fold(0.0, f64::max)
}

pub fn certificate(
    conn: &ConnectionField,
    pi: &ProjectionField,
    k: &MetricField,
    frame: Option<&[CMat]>,
) -> Result<Certificate> {
    let invariance = verify_invariance(conn, pi, k)?;
    let idempotency_defect = pi.idempotency_defect();
    let adjoint_defect = pi.adjoint_defect(k);
    let certified = idempotency_defect < PROJECTION_TOL
        && adjoint_defect < PROJECTION_TOL
        && invariance.invariance_defect < CERTIFY_TOL;
    Ok(Certificate {
        rank: pi.rank(),
        idempotency_defect,
        adjoint_defect,
        rank_defect: pi.rank_defect(),
        invariance,
        principal_angle: frame.map(|f| frame_angle(pi, f)),
        certified,
    })
}

fn outcome_name(res: &SolveResult) -> &'static str {
    if res.outcome.is_harmonic() {
        "harmonic"
    } else {
        "blow_up"
    }
}

/// Solve, then certify either a sub-bundle (blow-up) or the structure of the
/// parallel endomorphisms (harmonic).
pub fn run_detect(name: &str, problem: &Problem, cfg: &SolverConfig, gap_tol: f64, kernel_tol: f64) -> Result<Detection> {
    let conn = &problem.connection;
    let solve = continuity_solve(conn, &problem.metric, cfg)?;
    let frame = problem.invariant_frame()?;
    let mut certificates = Vec::new();
    let mut projections = Vec::new();
    let mut extraction = None;
    let mut parallel = None;
    let verdict = match &solve.outcome {
        SolveOutcome::BlowUp { u_infty, .. } => {
            let ex = extract_projections(conn.grid(), u_infty, &solve.k, gap_tol)?;
            for pi in &ex.projections {
                certificates.push(certificate(conn, pi, &solve.k, frame.as_deref())?);
            }
            extraction = Some(ExtractionSummary {
                mean_eigenvalues: ex.mean_eigenvalues,
                variances: ex.variances,
                trace_integral: ex.trace_integral,
                spread: ex.spread,
            });
            projections = ex.projections;
            if certificates.iter().any(|c| c.certified) {
                Verdict::InvariantSubBundle
            } else {
                Verdict::Inconclusive
            }
        }
        SolveOutcome::Harmonic { h, .. } => {
            let par = parallel_endomorphisms(conn, kernel_tol)?;
            parallel = Some(ParallelSummary::from(&par));
            if par.is_simple() {
                Verdict::Irreducible
            } else {
                if let Some(pi) = parallel_projection(conn, &par, h)? {
                    certificates.push(certificate(conn, &pi, h, frame.as_deref())?);
                    projections.push(pi);
                }
                Verdict::Decomposable
            }
        }
    };
    let report = DetectReport {
        format: DETECT_FORMAT,
        version: REPORT_VERSION,
        problem: name.into(),
        verdict,
        solve_outcome: outcome_name(&solve),
        extraction,
        parallel,
        certificates,
    };
    Ok(Detection { report, projections, solve })
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitFileReport {
    pub format: &'static str,
    pub version: u32,
    pub problem: String,
    pub parallel: ParallelSummary,
    pub split: Option<SplitReport>,
}

/// Splits a harmonic, decomposable problem along a parallel projection.
/// Returns `None` for the split when the connection is simple.
pub fn run_split(name: &str, problem: &Problem, cfg: &SolverConfig, kernel_tol: f64) -> Result<SplitFileReport> {
    let conn = &problem.connection;
    let solve = continuity_solve(conn, &problem.metric, cfg)?;
    let h = match &solve.outcome {
        SolveOutcome::Harmonic { h, .. } => h,
        SolveOutcome::BlowUp { .. } => {
            return Err(Error::Precondition("no harmonic metric: the solve blew up".into()));
        }
    };
    let par = parallel_endomorphisms(conn, kernel_tol)?;
    let split = match parallel_projection(conn, &par, h)? {
        Some(pi) => Some(split_harmonic(conn, h, &pi)?.report),
        None => None,
    };
    Ok(SplitFileReport { format: SPLIT_FORMAT, version: REPORT_VERSION, problem: name.into(), parallel: (&par).into(), split })
}

#[derive(Clone, Debug, Serialize)]
pub struct GaugeFixReport {
    pub format: &'static str,
    pub version: u32,
    pub problem: String,
    pub solve_residual: f64,
    pub residual_l2: f64,
}

/// Solve and move the harmonic metric to the reference one by a gauge
/// transformation. The transformed problem is returned alongside.
pub fn run_gauge_fix(name: &str, problem: &Problem, cfg: &SolverConfig, kernel_tol: f64) -> Result<(GaugeFixReport, Problem)> {
    let conn = &problem.connection;
    let solve = continuity_solve(conn, &problem.metric, cfg)?;
    let (h, solve_residual) = match &solve.outcome {
        SolveOutcome::Harmonic { h, final_residual } => (h, *final_residual),
        SolveOutcome::BlowUp { .. } => {
            return Err(Error::Precondition("no harmonic metric: the solve blew up".into()));
        }
    };
    let fixed = gauge_fix(conn, &problem.metric, h, kernel_tol)?;
    let mut meta = problem.meta.clone();
    meta.description = format!("gauge-fixed: {}", meta.description);
    meta.invariant_frame = None;
    let out = Problem::new(fixed.connection, Some(problem.metric.clone()), meta)?;
    let report = GaugeFixReport {
        format: GAUGE_FIX_FORMAT,
        version: REPORT_VERSION,
        problem: name.into(),
        solve_residual,
        residual_l2: fixed.residual_l2,
    };
    Ok((report, out))
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub format: &'static str,
    pub version: u32,
    pub problem: String,
    /// Monodromy around the circle as rows of `[re, im]` pairs.
    pub monodromy: Vec<Vec<[f64; 2]>>,
    pub classification: Classification,
    pub solve_outcome: &'static str,
    pub marginal: bool,
    pub agree: bool,
}

/// Compares the continuity-method outcome with the exact semisimplicity test
/// of the monodromy of a circle connection.
pub fn run_oracle(name: &str, problem: &Problem, cfg: &SolverConfig) -> Result<OracleReport> {
    let conn = &problem.connection;
    if conn.dim() != 1 {
        return Err(Error::Precondition("the oracle comparison needs a circle problem".into()));
    }
    let m = conn.monodromy();
    let classification = oracle_classify(&m)?;
    let solve = continuity_solve(conn, &problem.metric, cfg)?;
    let agree = classification.semisimple == solve.outcome.is_harmonic();
    Ok(OracleReport {
        format: ORACLE_FORMAT,
        version: REPORT_VERSION,
        problem: name.into(),
        monodromy: (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect(),
        classification,
        solve_outcome: outcome_name(&solve),
        marginal: solve.marginal,
        agree,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Python script plotting a trace CSV written next to it.
pub fn plot_script(csv_name: &str, png_name: &str) -> String {
    format!(
        r#"import csv
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

rows = [r for r in csv.DictReader(open("{csv_name}")) if float(r["eps"]) > 0]
eps = [float(r["eps"]) for r in rows]
fig, ax = plt.subplots()
ax.loglog(eps, [float(r["residual_l2"]) for r in rows], "o-", label="residual_l2")
ax.loglog(eps, [float(r["logf_l2"]) for r in rows], "s-", label="logf_l2")
ax.set_xlabel("eps")
ax.invert_xaxis()
ax.legend()
fig.savefig("{png_name}", dpi=120)
"#
    )
}
