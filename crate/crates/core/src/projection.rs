//! Exact per-row projections for the barrier-relaxed projected gradient step.
//!
//! Row `i` of the Koopman matrix is feasible at level `tau` when
//! `h_i >= tau`. In symmetric mode both hypercube barriers are enforced, and
//! together they read `|K_ii| + sum_{j != i} |K_ij| <= 1 - tau`: the feasible
//! row set is an L1 ball, projected onto by sorting and soft thresholding. In
//! asymmetric mode only `h+_i` is kept, a single constraint
//! `sum_{j != i} |K_ij| - K_ii <= 1 - tau` whose projection is parameterized
//! by one multiplier `lambda >= 0`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::stability::row_barrier;

/// Which hypercube barriers a row must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// Both `h+` and `h-`.
    #[default]
    Symmetric,
    /// `h+` only; the `-K_ii` branch is dropped.
    Asymmetric,
}

impl ProjectionMode {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionMode::Symmetric => "symmetric",
            ProjectionMode::Asymmetric => "asymmetric",
        }
    }

    /// Barrier value of `row` (at index `i`) under this mode.
    pub fn barrier(self, row: &[f64], i: usize) -> f64 {
        let (hp, hm) = row_barrier(row, i);
        match self {
            ProjectionMode::Symmetric => hp.min(hm),
            ProjectionMode::Asymmetric => hp,
        }
    }
}

impl std::fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(ProjectionMode::Symmetric),
            "asymmetric" => Ok(ProjectionMode::Asymmetric),
            other => Err(Error::Contract(format!(
                "unknown projection mode {other:?} (expected symmetric or asymmetric)"
            ))),
        }
    }
}

/// `min(0, alpha * h_prev)` for `alpha` in `(0, 1]`.
pub fn barrier_threshold(h_prev: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Contract(format!(
            "barrier constant alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok((alpha * h_prev).min(0.0))
}

/// One row's projection problem.
#[derive(Clone, Debug, PartialEq)]
pub struct RowProjectionSpec {
    pub row_index: usize,
    pub target: Vec<f64>,
    /// Required barrier level `tau`.
    pub threshold: f64,
    pub mode: ProjectionMode,
}

impl RowProjectionSpec {
    pub fn project(&self) -> Result<Vec<f64>> {
        match self.mode {
            ProjectionMode::Symmetric => {
                project_row_symmetric(&self.target, self.row_index, self.threshold)
            }
            ProjectionMode::Asymmetric => {
                project_row_asymmetric(&self.target, self.row_index, self.threshold)
            }
        }
    }

    pub fn is_feasible(&self, row: &[f64]) -> bool {
        self.mode.barrier(row, self.row_index) >= self.threshold
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Euclidean projection of `target` onto `{x : ||x||_1 <= 1 - tau}`.
///
/// Rows already inside are returned unchanged. The result satisfies the
/// barrier `min(h+_i, h-_i) >= tau` as evaluated in floating point.
pub fn project_row_symmetric(target: &[f64], i: usize, tau: f64) -> Result<Vec<f64>> {
    check_index(target, i)?;
    let radius = 1.0 - tau;
    if !(radius > 0.0) {
        return Err(Error::Contract(format!(
            "L1 radius 1 - tau must be positive, got {radius}"
        )));
    }
    let mode = ProjectionMode::Symmetric;
    if mode.barrier(target, i) >= tau {
        return Ok(target.to_vec());
    }

    let mut mags: Vec<f64> = target.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    let mut active = 0;
    for (k, u) in mags.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - radius) / (k + 1) as f64;
        if *u > candidate {
            theta = candidate;
            active = k + 1;
        } else {
            break;
        }
    }

    let mut x: Vec<f64> = target.iter().map(|v| soft_threshold(*v, theta)).collect();
    // Rounding can leave the barrier a few ulps short of tau; raise the
    // threshold until the floating-point barrier agrees.
    for _ in 0..64 {
        let h = mode.barrier(&x, i);
        if h >= tau {
            return Ok(x);
        }
        let bump =
            ((tau - h) / active.max(1) as f64).max(theta.abs().max(1e-300) * 4.0 * f64::EPSILON);
        theta += bump;
        x = target.iter().map(|v| soft_threshold(*v, theta)).collect();
    }
    Err(Error::Numeric(format!(
        "L1 projection of row {i} did not reach barrier level {tau}"
    )))
}

/// Euclidean projection of `target` onto
/// `{x : sum_{j != i} |x_j| - x_i <= 1 - tau}`.
///
/// The solution is `x_i = y_i + lambda`, `x_j = soft(y_j, lambda)`, where
/// `lambda >= 0` is the root of the decreasing, piecewise-linear constraint
/// residual, located exactly between consecutive breakpoints `|y_j|`.
pub fn project_row_asymmetric(target: &[f64], i: usize, tau: f64) -> Result<Vec<f64>> {
    check_index(target, i)?;
    let mode = ProjectionMode::Asymmetric;
    if mode.barrier(target, i) >= tau {
        return Ok(target.to_vec());
    }
    let radius = 1.0 - tau;
    let yi = target[i];
    let mut mags: Vec<f64> = target
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| v.abs())
        .collect();
    mags.sort_by(|a, b| b.total_cmp(a));

    // With the m largest magnitudes active the residual is
    // S_m - m*lambda - y_i - lambda - r; its root must sit in [u_{m+1}, u_m].
    let mut cumulative = 0.0;
    let mut found = None;
    for m in 0..=mags.len() {
        if m > 0 {
            cumulative += mags[m - 1];
        }
        let lambda = (cumulative - yi - radius) / (m + 1) as f64;
        let upper = if m == 0 { f64::INFINITY } else { mags[m - 1] };
        let lower = mags.get(m).copied().unwrap_or(0.0);
        if lambda >= lower && lambda <= upper {
            found = Some((lambda.max(0.0), m));
            break;
        }
    }
    let (mut lambda, active) = found
        .ok_or_else(|| Error::Numeric(format!("could not bracket the multiplier for row {i}")))?;

    let build = |lambda: f64| -> Vec<f64> {
        target
            .iter()
            .enumerate()
            .map(|(j, v)| {
                if j == i {
                    v + lambda
                } else {
                    soft_threshold(*v, lambda)
                }
            })
            .collect()
    };
    let mut x = build(lambda);
    for _ in 0..64 {
        let h = mode.barrier(&x, i);
        if h >= tau {
            return Ok(x);
        }
        let bump = ((tau - h) / (active + 1) as f64)
            .max(lambda.abs().max(yi.abs()).max(1e-300) * 4.0 * f64::EPSILON);
        lambda += bump;
        x = build(lambda);
    }
    Err(Error::Numeric(format!(
        "asymmetric projection of row {i} did not reach barrier level {tau}"
    )))
}

fn check_index(target: &[f64], i: usize) -> Result<()> {
    if i >= target.len() {
        return Err(Error::dim(
            "row projection",
            format!("diagonal index {i} for a row of length {}", target.len()),
        ));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite entry in row {i}")));
    }
    Ok(())
}

/// Result of one projected step with its per-row bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdProjection {
    pub matrix: DenseMatrix,
    /// `tau_i` required of each row (including the extra margin).
    pub thresholds: Vec<f64>,
    /// Rows that had to move.
    pub moved_rows: Vec<usize>,
}

impl PgdProjection {
    /// Frobenius distance between reference and projected matrices.
    pub fn displacement(&self, reference: &DenseMatrix) -> f64 {
        self.matrix
            .sub(reference)
            .map(|d| d.frobenius())
            .unwrap_or(f64::NAN)
    }
}

/// Projects the post-update reference `k_ref` row by row so that
/// `h_i(K+) >= min(0, alpha * h_i(k_prev)) + margin`.
///
/// Thresholds come from `k_prev` before any row moves, so rows are
/// independent of each other and of processing order.
pub fn pgd_project_detailed(
    k_ref: &DenseMatrix,
    k_prev: &DenseMatrix,
    alpha: f64,
    mode: ProjectionMode,
    margin: f64,
) -> Result<PgdProjection> {
    if !k_ref.is_square() || k_ref.shape() != k_prev.shape() {
        return Err(Error::dim(
            "pgd_project",
            format!(
                "reference {}x{} vs previous {}x{}",
                k_ref.rows(),
                k_ref.cols(),
                k_prev.rows(),
                k_prev.cols()
            ),
        ));
    }
    if !(margin >= 0.0) {
        return Err(Error::Contract(format!(
            "stability margin must be non-negative, got {margin}"
        )));
    }
    let d = k_ref.rows();
    let thresholds = (0..d)
        .map(|i| barrier_threshold(mode.barrier(k_prev.row(i), i), alpha).map(|t| t + margin))
        .collect::<Result<Vec<f64>>>()?;

    let mut matrix = k_ref.clone();
    let mut moved_rows = Vec::new();
    for (i, &tau) in thresholds.iter().enumerate() {
        let spec = RowProjectionSpec {
            row_index: i,
            target: k_ref.row(i).to_vec(),
            threshold: tau,
            mode,
        };
        if spec.is_feasible(&spec.target) {
            continue;
        }
        let projected = spec.project()?;
        matrix.row_mut(i).copy_from_slice(&projected);
        moved_rows.push(i);
    }
    Ok(PgdProjection {
        matrix,
        thresholds,
        moved_rows,
    })
}

pub fn pgd_project(
    k_ref: &DenseMatrix,
    k_prev: &DenseMatrix,
    alpha: f64,
    mode: ProjectionMode,
    margin: f64,
) -> Result<DenseMatrix> {
    pgd_project_detailed(k_ref, k_prev, alpha, mode, margin).map(|p| p.matrix)
}

pub mod oracle {
    //! Brute-force reference solver for the per-row projection problem.
    //!
    //! Every sign pattern in `{-1, 0, +1}` over the coordinates fixes the
    //! absolute values to a linear form; the candidate for a pattern is the
    //! projection onto that pattern's hyperplane with the zero coordinates
    //! pinned. The true minimizer is among the candidates, so the nearest
    //! feasible candidate is the answer. Cost is `3^d`; keep `d <= 8`.

    use super::ProjectionMode;

    fn constraint(x: &[f64], i: usize, mode: ProjectionMode) -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, v)| match (mode, j == i) {
                (ProjectionMode::Asymmetric, true) => -v,
                _ => v.abs(),
            })
            .sum()
    }

    pub fn brute_force_row_qp(
        target: &[f64],
        i: usize,
        tau: f64,
        mode: ProjectionMode,
    ) -> Vec<f64> {
        let d = target.len();
        let radius = 1.0 - tau;
        let tol = 1e-10 * radius.abs().max(1.0);
        if constraint(target, i, mode) <= radius {
            return target.to_vec();
        }

        let dist = |x: &[f64]| -> f64 { x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum() };
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut pattern = vec![0i8; d];
        let total = 3usize.pow(d as u32);
        for code in 0..total {
            let mut c = code;
            for p in pattern.iter_mut() {
                *p = (c % 3) as i8 - 1;
                c /= 3;
            }
            if mode == ProjectionMode::Asymmetric {
                // x_i enters linearly with coefficient -1 and is never pinned
                if pattern[i] != -1 {
                    continue;
                }
            }
            let coeff: Vec<f64> = pattern.iter().map(|p| *p as f64).collect();
            let norm_sq: f64 = coeff.iter().map(|c| c * c).sum();
            let x: Vec<f64> = if norm_sq == 0.0 {
                vec![0.0; d]
            } else {
                let cy: f64 = coeff.iter().zip(target).map(|(c, y)| c * y).sum();
                let t = (cy - radius) / norm_sq;
                coeff
                    .iter()
                    .zip(target)
                    .map(|(c, y)| if *c == 0.0 { 0.0 } else { y - t * c })
                    .collect()
            };
            if constraint(&x, i, mode) > radius + tol {
                continue;
            }
            let f = dist(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
        best.map(|(_, x)| x)
            .expect("the origin pattern is always feasible")
    }
}
