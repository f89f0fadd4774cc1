//! Central finite-difference oracle for graph gradients.
//!
//! The oracle only evaluates forward values; it never reads the backward
//! rules it is checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
    pub max_rel_error: f64,
    /// Number of coordinates perturbed.
    pub coords: usize,
}

/// Compares `backward` against central differences of step `h`.
///
/// `build` receives a fresh graph and one leaf per entry of `inputs`, and must
/// return a scalar loss. When `max_coords` is set, a random subset of at most
/// that many coordinates per input is checked.
pub fn check_gradients<F, R>(
    inputs: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &leaves)?;
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &leaves)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut values = inputs.to_vec();
    for (which, leaf) in leaves.iter().enumerate() {
        let n = inputs[which].len();
        let picked: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(*leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &c in &picked {
            let orig = values[which].data()[c];
            values[which].data_mut()[c] = orig + h;
            let up = eval(&values)?;
            values[which].data_mut()[c] = orig - h;
            let down = eval(&values)?;
            values[which].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[c];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        coords += picked.len();
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords,
    })
}
