use serde::{Deserialize, Serialize};

use super::{Boundary, PdeError, Result};

/// Uniform tensor-product grid plus the snapshot schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Points per spatial dimension (length 1 or 2).
    pub points: Vec<usize>,
    /// `(lo, hi)` per spatial dimension.
    pub bounds: Vec<(f64, f64)>,
    pub snapshot_dt: f64,
    pub horizon: f64,
    /// Solver steps per stored snapshot.
    pub internal_substeps: usize,
}

impl GridSpec {
    pub fn new_1d(points: usize, bounds: (f64, f64), snapshot_dt: f64, horizon: f64, internal_substeps: usize) -> Self {
        Self {
            points: vec![points],
            bounds: vec![bounds],
            snapshot_dt,
            horizon,
            internal_substeps,
        }
    }

    pub fn spatial_dims(&self) -> usize {
        self.points.len()
    }

    pub fn spatial_size(&self) -> usize {
        self.points.iter().product()
    }

    pub fn length(&self, dim: usize) -> f64 {
        self.bounds[dim].1 - self.bounds[dim].0
    }

    pub fn dx(&self, dim: usize) -> f64 {
        self.length(dim) / self.points[dim] as f64
    }

    /// Number of stored time steps (snapshots minus one).
    pub fn steps(&self) -> usize {
        (self.horizon / self.snapshot_dt).round() as usize
    }

    pub fn snapshots(&self) -> usize {
        self.steps() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PdeError::InvalidGrid(m));
        if !(1..=2).contains(&self.points.len()) {
            return bad(format!("expected 1 or 2 spatial dims, got {}", self.points.len()));
        }
        if self.bounds.len() != self.points.len() {
            return bad("bounds and points disagree on dimension count".into());
        }
        if let Some(p) = self.points.iter().find(|&&p| p < 4) {
            return bad(format!("need at least 4 points per dimension, got {p}"));
        }
        if self.bounds.iter().any(|(lo, hi)| !(hi > lo)) {
            return bad(format!("degenerate bounds {:?}", self.bounds));
        }
        if !(self.snapshot_dt > 0.0) || !(self.horizon > 0.0) {
            return bad(format!(
                "snapshot_dt {} and horizon {} must be positive",
                self.snapshot_dt, self.horizon
            ));
        }
        let ratio = self.horizon / self.snapshot_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return bad(format!(
                "horizon {} is not a multiple of snapshot_dt {}",
                self.horizon, self.snapshot_dt
            ));
        }
        if self.internal_substeps == 0 {
            return bad("internal_substeps must be at least 1".into());
        }
        Ok(())
    }

    /// Point coordinates along `dim`: node-based for periodic domains,
    /// cell-centred for no-flow domains.
    pub fn coords(&self, dim: usize, boundary: Boundary) -> Vec<f64> {
        let (lo, _) = self.bounds[dim];
        let dx = self.dx(dim);
        let off = match boundary {
            Boundary::Periodic => 0.0,
            Boundary::NeumannNoFlow => 0.5,
        };
        (0..self.points[dim]).map(|j| lo + (j as f64 + off) * dx).collect()
    }
}
