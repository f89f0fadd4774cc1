use serde::Serialize;

use crate::error::{Error, Result};

/// Regularizer in `dof / (χ² + ε)`, so a perfect histogram stays finite.
pub const CHI2_EPS: f64 = 1e-9;
/// Score spreads below this are treated as constant.
const FLAT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuityStatus {
    Regular,
    /// χ² = 0: every bin holds exactly its expected count.
    Saturated,
    /// All scores equal, so normalization is undefined and no value is reported.
    #[serde(rename = "saturated-degenerate")]
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Continuity {
    /// `dof / (χ² + ε)`; absent for degenerate inputs.
    pub value: Option<f64>,
    pub chi2: Option<f64>,
    pub dof: usize,
    pub bins: usize,
    pub status: ContinuityStatus,
}

impl Continuity {
    pub fn degenerate(bins: usize) -> Self {
        Self {
            value: None,
            chi2: None,
            dof: bins.saturating_sub(1),
            bins,
            status: ContinuityStatus::Degenerate,
        }
    }

    /// Orders degenerate results below every reported value.
    pub fn rank_value(&self) -> f64 {
        self.value.unwrap_or(f64::NEG_INFINITY)
    }
}

/// χ² against a uniform expectation over the given bin counts.
pub fn continuity_from_counts(counts: &[usize]) -> Result<Continuity> {
    let bins = counts.len();
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("continuity needs at least 2 bins, got {bins}")));
    }
    let samples: usize = counts.iter().sum();
    let expected = samples as f64 / bins as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = bins - 1;
    Ok(Continuity {
        value: Some(dof as f64 / (chi2 + CHI2_EPS)),
        chi2: Some(chi2),
        dof,
        bins,
        status: if chi2 == 0.0 {
            ContinuityStatus::Saturated
        } else {
            ContinuityStatus::Regular
        },
    })
}

fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let u = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((u * bins as f64).floor() as usize).min(bins - 1)
}

fn check_len(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("continuity needs at least 2 scores, got {n}")));
    }
    Ok(())
}

/// Min-max normalizes, bins into `δ = scores.len()` equal bins, and reports `dof/(χ² + ε)`.
pub fn continuity(scores: &[f64]) -> Result<Continuity> {
    check_len(scores.len())?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    continuity_with_range(scores, lo, hi)
}

/// Like [`continuity`] but normalizes with a shared `[lo, hi]`, for
/// comparing several sweeps on one scale. Scores outside are clamped.
pub fn continuity_with_range(scores: &[f64], lo: f64, hi: f64) -> Result<Continuity> {
    check_len(scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite { op: "continuity" });
    }
    let bins = scores.len();
    if hi - lo <= FLAT_TOL {
        return Ok(Continuity::degenerate(bins));
    }
    let mut counts = vec![0usize; bins];
    for &s in scores {
        counts[bin_of(s, lo, hi, bins)] += 1;
    }
    continuity_from_counts(&counts)
}

/// A complete `δ^γ` lattice of score tuples, row-major over the axes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSweep {
    pub dims: usize,
    pub delta: usize,
    pub points: Vec<Vec<f64>>,
}

impl GridSweep {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims) {
            return Err(Error::InvalidConfig(format!("lattice dimension {} not in 1..=3", self.dims)));
        }
        let want = self.delta.pow(self.dims as u32);
        if self.points.len() != want || self.points.iter().any(|p| p.len() != self.dims) {
            return Err(Error::InvalidConfig(format!(
                "incomplete lattice: {} points for delta {} and dimension {}",
                self.points.len(),
                self.delta,
                self.dims
            )));
        }
        Ok(())
    }
}

/// γ-dimensional χ² over per-axis normalized scores with δ bins per axis.
///
/// An axis whose scores are constant puts every point in its first bin; if
/// every axis is constant the result is degenerate.
pub fn continuity_grid(sweep: &GridSweep) -> Result<Continuity> {
    sweep.validate()?;
    check_len(sweep.points.len())?;
    let samples = sweep.points.len();
    // δ bins per axis, reduced if needed so there are no more cells than samples.
    let mut per_axis = sweep.delta.max(2);
    while per_axis > 2 && per_axis.pow(sweep.dims as u32) > samples {
        per_axis -= 1;
    }
    let cells = per_axis.pow(sweep.dims as u32);
    let ranges: Vec<(f64, f64)> = (0..sweep.dims)
        .map(|a| {
            let col = sweep.points.iter().map(|p| p[a]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect();
    if ranges.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::NonFinite { op: "continuity_grid" });
    }
    if ranges.iter().all(|(lo, hi)| hi - lo <= FLAT_TOL) {
        return Ok(Continuity::degenerate(cells));
    }
    let mut counts = vec![0usize; cells];
    for p in &sweep.points {
        let mut cell = 0;
        for (a, &(lo, hi)) in ranges.iter().enumerate() {
            let b = if hi - lo <= FLAT_TOL {
                0
            } else {
                bin_of(p[a], lo, hi, per_axis)
            };
            cell = cell * per_axis + b;
        }
        counts[cell] += 1;
    }
    continuity_from_counts(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn concentrated_case() {
        let mut scores = vec![0.0; 14];
        scores.push(1.0);
        // Min-max normalized scores always reach the top bin, so the
        // all-in-one-bin case is built from counts.
        let mut counts = vec![0usize; 15];
        counts[0] = 15;
        let c = continuity_from_counts(&counts).unwrap();
        assert_eq!(c.chi2, Some(210.0));
        assert!((c.value.unwrap() - 14.0 / 210.0).abs() < 1e-12);
        let c = continuity(&scores).unwrap();
        // Counts are [14, 0, ..., 0, 1]: χ² = 13² + 13·1 + 0 = 182.
        assert_eq!(c.chi2, Some(182.0));
    }

    #[test]
    fn uniform_case_saturates() {
        let scores: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
        let c = continuity(&scores).unwrap();
        assert_eq!(c.status, ContinuityStatus::Saturated);
        assert_eq!(c.chi2, Some(0.0));
        assert_eq!(c.value, Some(14.0 / CHI2_EPS));
    }

    #[test]
    fn constant_and_short_inputs() {
        let c = continuity(&[0.3; 7]).unwrap();
        assert_eq!(c.status, ContinuityStatus::Degenerate);
        assert_eq!(c.value, None);
        assert_eq!(serde_json::to_value(c.status).unwrap(), "saturated-degenerate");
        assert!(continuity(&[1.0]).is_err());
        assert!(continuity(&[]).is_err());
    }

    #[test]
    fn joint_range_clamps() {
        let c = continuity_with_range(&[0.0, 0.5, 1.0], -1.0, 1.0).unwrap();
        // Normalized 0.5, 0.75, 1.0 land in bins 1, 2, 2.
        assert_eq!(c.chi2, Some(1.0 + 0.0 + 1.0));
    }

    #[test]
    fn grid_reduces_to_one_dimension() {
        let scores = [0.1, 0.9, 0.4, 0.45, 0.2, 0.3, 0.33];
        let sweep = GridSweep {
            dims: 1,
            delta: 7,
            points: scores.iter().map(|&s| vec![s]).collect(),
        };
        assert_eq!(continuity_grid(&sweep).unwrap(), continuity(&scores).unwrap());
    }

    #[test]
    fn grid_ramp_beats_flat_axis() {
        let d = 7;
        let mut ramp = Vec::new();
        let mut flat = Vec::new();
        for i in 0..d {
            for j in 0..d {
                ramp.push(vec![i as f64, j as f64]);
                flat.push(vec![i as f64, 0.5]);
            }
        }
        let ramp = continuity_grid(&GridSweep { dims: 2, delta: d, points: ramp }).unwrap();
        let flat = continuity_grid(&GridSweep { dims: 2, delta: d, points: flat }).unwrap();
        assert_eq!(ramp.status, ContinuityStatus::Saturated);
        assert!(flat.value.unwrap() < ramp.value.unwrap());
        let short = GridSweep { dims: 2, delta: 7, points: vec![vec![0.0, 0.0]; 48] };
        assert!(continuity_grid(&short).is_err());
    }

    proptest! {
        #[test]
        fn affine_invariance(scores in prop::collection::vec(-5.0f64..5.0, 2..20),
                             a in 0.1f64..10.0, b in -10.0f64..10.0) {
            let base = continuity(&scores).unwrap();
            let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let moved = continuity(&moved).unwrap();
            // Bin edges can shift by rounding for points that sit exactly on one.
            prop_assume!(base.status != ContinuityStatus::Degenerate);
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let n = scores.len() as f64;
            let on_edge = scores.iter().any(|s| {
                let u = (s - lo) / (hi - lo) * n;
                (u - u.round()).abs() < 1e-9
                    && u.round() > 0.0 && u.round() < n
            });
            prop_assume!(!on_edge);
            prop_assert_eq!(base, moved);
        }
    }
}
