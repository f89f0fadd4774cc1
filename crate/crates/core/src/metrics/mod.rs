//! Scores for edit trajectories: continuity, extrapolation and leakage.

mod continuity;
mod sweep;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::world::EditWorld;

pub use continuity::{
    continuity, continuity_from_counts, continuity_grid, continuity_with_range, Continuity, ContinuityStatus,
    GridSweep, CHI2_EPS,
};
pub use sweep::{
    explicit_cfg_sweep, intervention_trajectory, slider_lattice, slider_sweep, CrossTalk, EditRequest,
    LatticePoint, SliderLattice, SweepMethod, Trajectory,
};

/// Largest score reached along a trajectory.
pub fn extrapolation(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig("extrapolation of an empty trajectory".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "extrapolation" });
    }
    Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// How much a trajectory disturbs what the target edit should leave alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Disentanglement {
    /// Mean L2 distance to `X_orig` over cells the target atom never writes.
    pub background_l2: f64,
    /// Mean over the trajectory of `Σ_b |probe_b − probe_b(X_orig)|` for non-target atoms `b`.
    pub probe_drift: f64,
    pub total: f64,
}

pub fn disentanglement(world: &EditWorld, x_orig: &Tensor, grids: &[Tensor], target_atom: usize) -> Result<Disentanglement> {
    if grids.is_empty() {
        return Err(Error::InvalidConfig("disentanglement of an empty trajectory".into()));
    }
    let atom = world.atom(target_atom)?;
    world.grid().check(x_orig)?;
    let reference = world.scores(x_orig)?;
    let mut background = 0.0;
    let mut drift = 0.0;
    for g in grids {
        if g.shape() != x_orig.shape() {
            return Err(shape_err(
                "disentanglement",
                format!("{:?} against {:?}", g.shape(), x_orig.shape()),
            ));
        }
        let sq: f64 = g
            .data()
            .iter()
            .zip(x_orig.data())
            .enumerate()
            .filter(|(at, _)| !atom.touches(*at))
            .map(|(_, (a, b))| (a - b) * (a - b))
            .sum();
        background += sq.sqrt();
        let scores = world.scores(g)?;
        drift += scores
            .iter()
            .zip(&reference)
            .enumerate()
            .filter(|(b, _)| *b != target_atom)
            .map(|(_, (s, r))| (s - r).abs())
            .sum::<f64>();
    }
    let n = grids.len() as f64;
    let (background_l2, probe_drift) = (background / n, drift / n);
    Ok(Disentanglement {
        background_l2,
        probe_drift,
        total: background_l2 + probe_drift,
    })
}
