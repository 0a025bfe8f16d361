//! Row-wise hypercube barrier values, stability certification of a Koopman
//! matrix, and inward-pointing checks for general bounded polytopes.
//!
//! For the unit hypercube `[-1, 1]^d` the linear map `x -> K x` points inward
//! exactly when every row satisfies
//!
//! ```text
//! h+_i = 1 + K_ii - sum_{j != i} |K_ij| >= 0
//! h-_i = 1 - K_ii - sum_{j != i} |K_ij| >= 0
//! ```
//!
//! which is the same as `||K||_inf <= 1`. An inward-pointing field makes every
//! scaled copy of the set forward invariant, so the origin is stable.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Membership tolerance for polytope checks.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Iteration cap handed to the eigensolver.
pub const EIGEN_MAX_ITER: usize = 100_000;

/// Barrier pair of one row: `(h_plus, h_minus)`.
#[inline]
pub fn row_barrier(row: &[f64], i: usize) -> (f64, f64) {
    let off: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| v.abs())
        .sum();
    (1.0 + row[i] - off, 1.0 - row[i] - off)
}

/// Per-row barrier values of a square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierReport {
    pub h_plus: Vec<f64>,
    pub h_minus: Vec<f64>,
}

impl BarrierReport {
    pub fn dim(&self) -> usize {
        self.h_plus.len()
    }

    /// `h_i = min(h+_i, h-_i)`.
    pub fn h(&self, i: usize) -> f64 {
        self.h_plus[i].min(self.h_minus[i])
    }

    pub fn h_values(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.h(i)).collect()
    }

    /// Smallest `h_i`; `+inf` for an empty matrix.
    pub fn margin(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.h(i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest `h+_i` alone (the constraint kept in asymmetric mode).
    pub fn margin_plus(&self) -> f64 {
        self.h_plus.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row attaining the margin.
    pub fn worst_row(&self) -> Option<usize> {
        (0..self.dim()).min_by(|&a, &b| self.h(a).total_cmp(&self.h(b)))
    }
}

pub fn barrier_values(k: &DenseMatrix) -> Result<BarrierReport> {
    if !k.is_square() {
        return Err(Error::dim(
            "barrier_values",
            format!("{}x{} is not square", k.rows(), k.cols()),
        ));
    }
    let (h_plus, h_minus) = (0..k.rows()).map(|i| row_barrier(k.row(i), i)).unzip();
    Ok(BarrierReport { h_plus, h_minus })
}

/// Outcome of [`certify_stable`].
#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Certified(BarrierReport),
    Refused { report: BarrierReport, row: usize },
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified(_))
    }

    pub fn report(&self) -> &BarrierReport {
        match self {
            Verdict::Certified(r) => r,
            Verdict::Refused { report, .. } => report,
        }
    }
}

/// Certifies `K` when every barrier value is at least `-margin_tol`. A
/// certificate implies `||K||_inf <= 1 + margin_tol`, hence a spectral radius
/// no larger than that.
pub fn certify_stable(k: &DenseMatrix, margin_tol: f64) -> Result<Verdict> {
    let report = barrier_values(k)?;
    match report.worst_row() {
        Some(row) if report.h(row) < -margin_tol => Ok(Verdict::Refused { report, row }),
        _ => Ok(Verdict::Certified(report)),
    }
}

/// Largest eigenvalue modulus, from a real Schur decomposition.
pub fn spectral_radius(k: &DenseMatrix) -> Result<f64> {
    if !k.is_square() {
        return Err(Error::dim(
            "spectral_radius",
            format!("{}x{} is not square", k.rows(), k.cols()),
        ));
    }
    if k.rows() == 0 {
        return Ok(0.0);
    }
    let schur = nalgebra::linalg::Schur::try_new(k.to_nalgebra(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| {
            Error::Numeric(format!(
                "eigensolver did not converge within {EIGEN_MAX_ITER} iterations"
            ))
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// All eigenvalues as `(re, im)` pairs sorted lexicographically.
pub fn eigenvalues(k: &DenseMatrix) -> Result<Vec<(f64, f64)>> {
    if !k.is_square() {
        return Err(Error::dim(
            "eigenvalues",
            format!("{}x{} is not square", k.rows(), k.cols()),
        ));
    }
    let schur = nalgebra::linalg::Schur::try_new(k.to_nalgebra(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("eigensolver did not converge".into()))?;
    let mut ev: Vec<(f64, f64)> = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(ev)
}

/// Plain-text report used by the command-line `verify` and `project` tools.
pub fn format_report(k: &DenseMatrix, margin_tol: f64) -> Result<String> {
    let verdict = certify_stable(k, margin_tol)?;
    let rho = spectral_radius(k)?;
    let report = verdict.report();
    let mut out = String::new();
    let _ = writeln!(out, "dimension: {}", report.dim());
    let _ = writeln!(out, "row,h_plus,h_minus,h");
    for i in 0..report.dim() {
        let _ = writeln!(
            out,
            "{i},{:?},{:?},{:?}",
            report.h_plus[i],
            report.h_minus[i],
            report.h(i)
        );
    }
    let _ = writeln!(out, "margin: {:?}", report.margin());
    let _ = writeln!(out, "margin_tol: {margin_tol:?}");
    let _ = writeln!(out, "inf_norm: {:?}", k.norm_inf());
    let _ = writeln!(out, "spectral_radius: {rho:?}");
    match &verdict {
        Verdict::Certified(_) => {
            let _ = writeln!(out, "verdict: certified");
        }
        Verdict::Refused { row, .. } => {
            let _ = writeln!(out, "verdict: refused (row {row})");
        }
    }
    Ok(out)
}

/// Polyhedron `{x | A x <= b}` containing the origin, with an optional
/// vertex list.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyhedron {
    a: DenseMatrix,
    b: Vec<f64>,
    vertices: Option<Vec<Vec<f64>>>,
}

impl Polyhedron {
    /// Requires `b >= 0`, i.e. the origin belongs to the set.
    pub fn new(a: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != a.rows() {
            return Err(Error::dim(
                "Polyhedron::new",
                format!("{} offsets for {} constraints", b.len(), a.rows()),
            ));
        }
        if let Some(j) = b.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Contract(format!(
                "offset b[{j}] = {} is negative; the origin must be inside",
                b[j]
            )));
        }
        Ok(Self {
            a,
            b,
            vertices: None,
        })
    }

    /// Attaches a V-representation; every vertex must satisfy the
    /// inequalities within [`MEMBERSHIP_TOL`].
    pub fn with_vertices(mut self, vertices: Vec<Vec<f64>>) -> Result<Self> {
        for (k, v) in vertices.iter().enumerate() {
            if v.len() != self.dim() {
                return Err(Error::dim(
                    "Polyhedron::with_vertices",
                    format!("vertex {k} has length {}, expected {}", v.len(), self.dim()),
                ));
            }
            if let Some((j, excess)) = self.violation(v) {
                if excess > MEMBERSHIP_TOL {
                    return Err(Error::Contract(format!(
                        "vertex {k} violates constraint {j} by {excess:e}"
                    )));
                }
            }
        }
        self.vertices = Some(vertices);
        Ok(self)
    }

    /// `[-1, 1]^d` in H-representation (`[I; -I] x <= 1`), no vertices.
    pub fn unit_hypercube(d: usize) -> Self {
        let mut a = DenseMatrix::zeros(2 * d, d);
        for i in 0..d {
            a.set(i, i, 1.0);
            a.set(d + i, i, -1.0);
        }
        Self {
            a,
            b: vec![1.0; 2 * d],
            vertices: None,
        }
    }

    /// Unit hypercube with all `2^d` corners listed.
    pub fn unit_hypercube_with_vertices(d: usize) -> Result<Self> {
        if d > 20 {
            return Err(Error::Contract(format!(
                "refusing to enumerate 2^{d} hypercube corners"
            )));
        }
        let vertices = (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 })
                    .collect()
            })
            .collect();
        Self::unit_hypercube(d).with_vertices(vertices)
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn constraints(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn offsets(&self) -> &[f64] {
        &self.b
    }

    pub fn vertices(&self) -> Option<&[Vec<f64>]> {
        self.vertices.as_deref()
    }

    /// Most violated constraint and its excess `a_j x - b_j`, if positive.
    pub fn violation(&self, x: &[f64]) -> Option<(usize, f64)> {
        (0..self.a.rows())
            .map(|j| {
                let ax: f64 = self.a.row(j).iter().zip(x).map(|(a, v)| a * v).sum();
                (j, ax - self.b[j])
            })
            .filter(|(_, e)| *e > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.violation(x).is_none_or(|(_, e)| e <= tol)
    }
}

/// The scaled set `sC = {x | A x <= s b}`; vertices scale by `s`.
pub fn scale_set(c: &Polyhedron, s: f64) -> Result<Polyhedron> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Contract(format!(
            "scale must be finite and non-negative, got {s}"
        )));
    }
    Ok(Polyhedron {
        a: c.a.clone(),
        b: c.b.iter().map(|v| v * s).collect(),
        vertices: c.vertices.as_ref().map(|vs| {
            vs.iter()
                .map(|v| v.iter().map(|x| x * s).collect())
                .collect()
        }),
    })
}

/// Result of [`inward_pointing_check`].
#[derive(Clone, Debug, PartialEq)]
pub enum InwardCheck {
    Inward,
    Violated {
        vertex_index: usize,
        vertex: Vec<f64>,
        constraint: usize,
        excess: f64,
    },
}

impl InwardCheck {
    pub fn holds(&self) -> bool {
        matches!(self, InwardCheck::Inward)
    }
}

/// Checks that `A v` stays in `C` for every listed vertex `v`. For a bounded
/// polytope this is equivalent to `A C ⊆ C`, i.e. the field points inward
/// and `C` is forward invariant.
///
/// The set must be non-degenerate: every offset strictly positive, so the
/// origin is an interior point.
pub fn inward_pointing_check(c: &Polyhedron, a: &DenseMatrix) -> Result<InwardCheck> {
    let vertices = c.vertices().ok_or_else(|| {
        Error::Contract("inward-pointing check needs the vertex list of the set".into())
    })?;
    if !a.is_square() || a.rows() != c.dim() {
        return Err(Error::dim(
            "inward_pointing_check",
            format!(
                "{}x{} field for a set in dimension {}",
                a.rows(),
                a.cols(),
                c.dim()
            ),
        ));
    }
    if let Some(j) = c.b.iter().position(|v| *v <= 0.0) {
        return Err(Error::Contract(format!(
            "degenerate set: offset b[{j}] = {} is not positive",
            c.b[j]
        )));
    }
    for (idx, v) in vertices.iter().enumerate() {
        let image = a.mul_vec(v)?;
        if let Some((constraint, excess)) = c.violation(&image) {
            if excess > MEMBERSHIP_TOL {
                return Ok(InwardCheck::Violated {
                    vertex_index: idx,
                    vertex: v.clone(),
                    constraint,
                    excess,
                });
            }
        }
    }
    Ok(InwardCheck::Inward)
}
