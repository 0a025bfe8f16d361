//! Prediction-quality metrics over held-out trajectories.
//!
//! For one trajectory with truth `x_k` and prediction `p_k` (`k = 0..T`):
//!
//! * `nmse = mean_k ||p_k - x_k||^2 / mean_k ||x_k - mean(x)||^2`
//! * `norm_std = std_k(p_k - x_k) / std_k(x_k)`, where `std` of a vector
//!   sequence is `sqrt(mean_k ||v_k - mean(v)||^2)`.
//!
//! Dataset-level values average the per-trajectory numbers.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

fn check(pred: &DenseMatrix, truth: &DenseMatrix) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(
            "metrics",
            format!(
                "prediction {}x{} vs truth {}x{}",
                pred.rows(),
                pred.cols(),
                truth.rows(),
                truth.cols()
            ),
        ));
    }
    if truth.cols() == 0 {
        return Err(Error::Data("empty trajectory".into()));
    }
    Ok(())
}

/// Mean squared distance of the columns from their mean.
fn spread(m: &DenseMatrix) -> f64 {
    let t = m.cols() as f64;
    let mut total = 0.0;
    for i in 0..m.rows() {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / t;
        total += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    total / t
}

pub fn nmse(pred: &DenseMatrix, truth: &DenseMatrix) -> Result<f64> {
    check(pred, truth)?;
    let var = spread(truth);
    if var == 0.0 {
        return Err(Error::Data("truth trajectory has zero variance".into()));
    }
    let err = pred.sub(truth)?;
    let mse = err.data().iter().map(|v| v * v).sum::<f64>() / truth.cols() as f64;
    Ok(mse / var)
}

pub fn norm_std(pred: &DenseMatrix, truth: &DenseMatrix) -> Result<f64> {
    check(pred, truth)?;
    let amp = spread(truth).sqrt();
    if amp == 0.0 {
        return Err(Error::Data("truth trajectory has zero amplitude".into()));
    }
    Ok(spread(&pred.sub(truth)?).sqrt() / amp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    pub index: usize,
    pub nmse: f64,
    pub norm_std: f64,
}

/// Dataset-level metrics plus stability diagnostics of the evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub nmse: f64,
    pub norm_std: f64,
    pub per_trajectory: Vec<TrajectoryMetrics>,
    /// Spectral radius of the effective matrix `S^-1 K S`.
    pub spectral_radius: f64,
    /// Hypercube barrier margin of `K`.
    pub barrier_margin: f64,
}

impl MetricsReport {
    /// Averages per-trajectory metrics over `(prediction, truth)` pairs.
    pub fn from_pairs(
        pairs: &[(DenseMatrix, DenseMatrix)],
        spectral_radius: f64,
        barrier_margin: f64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no trajectories to evaluate".into()));
        }
        let per_trajectory = pairs
            .iter()
            .enumerate()
            .map(|(index, (p, t))| {
                Ok(TrajectoryMetrics {
                    index,
                    nmse: nmse(p, t)?,
                    norm_std: norm_std(p, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let count = per_trajectory.len() as f64;
        Ok(Self {
            nmse: per_trajectory.iter().map(|m| m.nmse).sum::<f64>() / count,
            norm_std: per_trajectory.iter().map(|m| m.norm_std).sum::<f64>() / count,
            per_trajectory,
            spectral_radius,
            barrier_margin,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory,nmse,norm_std\n");
        for m in &self.per_trajectory {
            let _ = writeln!(s, "{},{:?},{:?}", m.index, m.nmse, m.norm_std);
        }
        let _ = writeln!(s, "mean,{:?},{:?}", self.nmse, self.norm_std);
        let _ = writeln!(s, "spectral_radius,{:?},", self.spectral_radius);
        let _ = writeln!(s, "barrier_margin,{:?},", self.barrier_margin);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>12} {:>12}", "trajectory", "NMSE", "NormSTD");
        for m in &self.per_trajectory {
            let _ = writeln!(s, "{:<12} {:>12.4e} {:>12.4e}", m.index, m.nmse, m.norm_std);
        }
        let _ = writeln!(
            s,
            "{:<12} {:>12.4e} {:>12.4e}",
            "mean", self.nmse, self.norm_std
        );
        let _ = writeln!(
            s,
            "spectral radius of S^-1 K S: {:.6}",
            self.spectral_radius
        );
        let _ = writeln!(s, "barrier margin of K:         {:.6}", self.barrier_margin);
        s
    }
}
