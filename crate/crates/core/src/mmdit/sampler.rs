use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EditorModel, ModelInput};
use crate::adapters::{Adapter, Sliders};
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::prompt::TextTokens;
use crate::tensor::Tensor;

/// Standard normal grid drawn from `seed`.
pub fn initial_noise(grid: &GridShape, seed: u64) -> Tensor {
    Tensor::randn(grid.dims(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Integrates `dz/dt = v(z, t)` from `t = 0` to `t = 1` in `steps` equal steps.
pub fn euler<F>(start: Tensor, steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = start;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(crate::error::shape_err(
                "euler",
                format!("velocity {:?} for state {:?}", v.shape(), z.shape()),
            ));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += vi * dt;
        }
        if !z.is_finite() {
            return Err(Error::NonFinite { op: "euler" });
        }
    }
    Ok(z)
}

/// Euler sampling from the fixed noise of `seed`.
pub fn sample_with_velocity<F>(grid: &GridShape, steps: usize, seed: u64, velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    euler(initial_noise(grid, seed), steps, velocity)
}

/// Samples an edit of `x_orig`, with optional per-instruction sliders.
pub fn sample_edit(
    model: &EditorModel,
    x_orig: &Tensor,
    tokens: &TextTokens,
    steps: usize,
    seed: u64,
    adapter: Option<(&Adapter, &Sliders)>,
) -> Result<Tensor> {
    let grid = model.config().grid;
    grid.check(x_orig)?;
    let selection = match adapter {
        Some((a, sliders)) => Some((a, a.selection(tokens, sliders)?)),
        None => None,
    };
    sample_with_velocity(&grid, steps, seed, |z, t| {
        let input = ModelInput {
            noisy: z,
            source: x_orig,
            tokens,
            t,
        };
        model.predict_velocity(&input, selection.as_ref().map(|(a, s)| (*a, s)), None)
    })
}
