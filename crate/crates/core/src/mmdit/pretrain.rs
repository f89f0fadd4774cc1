use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EditorModel, Hooks, ModelConfig, ModelInput};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamState, AdamWConfig};
use crate::tensor::Tensor;
use crate::world::{EditWorld, Example};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Linear warmup length; cosine decay to `min_lr_ratio·lr` follows.
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Prompt sizes drawn uniformly per example.
    pub prompt_sizes: Vec<usize>,
    /// Chance of appending the neutral instruction to a prompt.
    pub neutral_prob: f64,
    /// Success when the mean loss over the last `threshold_window` steps is below this.
    pub loss_threshold: f64,
    pub threshold_window: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            iterations: 1500,
            warmup: 100,
            min_lr_ratio: 0.1,
            seed: 0,
            prompt_sizes: vec![0, 1, 2, 3],
            neutral_prob: 0.25,
            loss_threshold: 0.15,
            threshold_window: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig("pretrain lr must be positive".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.threshold_window == 0 {
            return Err(Error::InvalidConfig(
                "pretrain iterations, batch_size and threshold_window must be positive".into(),
            ));
        }
        if self.prompt_sizes.is_empty() {
            return Err(Error::InvalidConfig("pretrain prompt_sizes is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.neutral_prob) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::InvalidConfig(
                "neutral_prob and min_lr_ratio must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((step + 1) as f64 / self.warmup.max(1) as f64).min(1.0);
        let progress = step as f64 / self.iterations as f64;
        let cosine = 0.5 * (1.0 + (PI * progress).cos());
        self.lr * warm * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub model: EditorModel,
    pub losses: Vec<f64>,
    /// Mean loss over the final window.
    pub final_loss: f64,
    pub reached_threshold: bool,
}

pub(crate) fn mean_squared_error(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.reduce_mean(sq)
}

/// `Z = (1 − t)·ε + t·X`.
pub(crate) fn noisy_latent(eps: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
    eps.zip_map(x, |e, xv| (1.0 - t) * e + t * xv)
}

/// Flow-matching training of `model` on examples produced by `next_example`.
///
/// Minimizes `‖v(Z, t) − (X_edit − ε)‖²` with `Z = (1 − t)ε + t·X_edit`,
/// conditioned on `X_orig` and the prompt.
pub fn pretrain_on<F>(
    mut model: EditorModel,
    hp: &PretrainConfig,
    vocab: &crate::prompt::Vocabulary,
    mut next_example: F,
) -> Result<PretrainReport>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Example>,
{
    hp.validate()?;
    let grid = model.config().grid;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(1));
    let mut state = AdamState::default();
    let adam = AdamWConfig::default();
    let mut losses = Vec::with_capacity(hp.iterations);
    let scale = 1.0 / hp.batch_size as f64;

    for step in 0..hp.iterations {
        let mut grads: Option<Vec<Tensor>> = None;
        let mut total = 0.0;
        for _ in 0..hp.batch_size {
            let ex = next_example(&mut rng)?;
            let tokens = model.encode(&ex.prompt, vocab)?;
            let eps = Tensor::randn(grid.dims(), 1.0, &mut rng);
            let t: f64 = rng.random();
            let z = noisy_latent(&eps, &ex.x_edit, t)?;
            let target = grid.to_tokens(&ex.x_edit.zip_map(&eps, |x, e| x - e)?)?;

            let step_result = (|| {
                let mut g = Graph::new();
                let p = model.bind(&mut g, true)?;
                let input = ModelInput {
                    noisy: &z,
                    source: &ex.x_orig,
                    tokens: &tokens,
                    t,
                };
                let v = model.forward(&mut g, &p, &input, &Hooks::default())?;
                let tv = g.constant(target.clone())?;
                let loss = mean_squared_error(&mut g, v, tv)?;
                let value = g.value(loss).item();
                let mut gr = g.backward(loss)?;
                Ok::<_, Error>((value, p.collect_grads(model.params(), &mut gr)?))
            })();
            let (value, g_ex) = match step_result {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                Err(e) => return Err(e),
            };
            total += value;
            match grads.as_mut() {
                None => {
                    grads = Some(g_ex.into_iter().map(|t| t.map(|v| v * scale)).collect());
                }
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g_ex) {
                        for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                            *x += y * scale;
                        }
                    }
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(diverged(step));
        }
        losses.push(loss);
        let grads = grads.expect("batch_size >= 1");
        let mut params: Vec<&mut Tensor> = model.params_mut().values_mut().collect();
        optimizer_step(&mut params, &grads, &mut state, &adam, hp.lr_at(step))?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged(step));
        }
    }

    let window = hp.threshold_window.min(losses.len());
    let final_loss = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    Ok(PretrainReport {
        model,
        reached_threshold: final_loss < hp.loss_threshold,
        final_loss,
        losses,
    })
}

fn diverged(step: usize) -> Error {
    Error::Diverged {
        step,
        last_good: step.checked_sub(1),
    }
}

/// Initializes a model from `hp.seed` and pretrains it on `world`.
pub fn pretrain_base(world: &EditWorld, config: &ModelConfig, hp: &PretrainConfig) -> Result<PretrainReport> {
    world.spec().validate_for_text_len(config.text_len)?;
    let vocab = world.vocabulary();
    if vocab.size() > config.vocab {
        return Err(Error::InvalidConfig(format!(
            "world needs {} token ids but the model has {}",
            vocab.size(),
            config.vocab
        )));
    }
    if let Some(&k) = hp.prompt_sizes.iter().find(|&&k| k > world.atoms().len()) {
        return Err(Error::InvalidConfig(format!(
            "prompt size {k} exceeds the {} atoms of the world",
            world.atoms().len()
        )));
    }
    let model = EditorModel::init(config, hp.seed)?;
    pretrain_on(model, hp, &vocab, |rng| {
        let k = hp.prompt_sizes[rng.random_range(0..hp.prompt_sizes.len())];
        let neutral = rng.random::<f64>() < hp.neutral_prob;
        world.sample_example_with(k, neutral, rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use crate::world::WorldSpec;

    fn small() -> (EditWorld, ModelConfig) {
        let spec = WorldSpec {
            atoms: 2,
            tokens_per_atom: 2,
            grid: GridShape::new(4, 4, 2),
            ..WorldSpec::default()
        };
        let cfg = ModelConfig {
            d_model: 16,
            blocks: 1,
            heads: 2,
            text_len: 8,
            vocab: 7,
            grid: spec.grid,
            ffn_hidden: 16,
        };
        (EditWorld::generate(&spec).unwrap(), cfg)
    }

    #[test]
    fn schedule_shape() {
        let hp = PretrainConfig::default();
        assert!((hp.lr_at(0) - 1e-5).abs() < 1e-12);
        assert!(hp.lr_at(99) > hp.lr_at(50));
        assert!(hp.lr_at(1499) < 0.11 * hp.lr);
        assert!(hp.lr_at(1499) >= 0.1 * hp.lr * 0.99);
    }

    #[test]
    fn noising_endpoints_are_exact() {
        let eps = Tensor::new([3], vec![0.3, -1.7, 2.2]).unwrap();
        let x = Tensor::new([3], vec![1.1, 0.0, -4.5]).unwrap();
        assert!(noisy_latent(&eps, &x, 1.0).unwrap().bit_eq(&x));
        assert!(noisy_latent(&eps, &x, 0.0).unwrap().bit_eq(&eps));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (world, cfg) = small();
        let hp = PretrainConfig {
            iterations: 5,
            batch_size: 2,
            prompt_sizes: vec![0, 1, 2],
            ..PretrainConfig::default()
        };
        let a = pretrain_base(&world, &cfg, &hp).unwrap();
        let b = pretrain_base(&world, &cfg, &hp).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.model.params().bit_eq(b.model.params()));
    }

    #[test]
    fn single_example_overfits() {
        let (world, cfg) = small();
        let ex = world.sample_example(1, 3).unwrap();
        let hp = PretrainConfig {
            iterations: 200,
            batch_size: 1,
            warmup: 10,
            lr: 3e-3,
            ..PretrainConfig::default()
        };
        let model = EditorModel::init(&cfg, 0).unwrap();
        let report = pretrain_on(model, &hp, &world.vocabulary(), |_| Ok(ex.clone())).unwrap();
        // Noise and time still vary per step, so compare windowed means.
        let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
        let windows: Vec<f64> = report.losses[50..].chunks(50).map(mean).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    #[test]
    fn oversized_prompts_are_rejected() {
        let (world, cfg) = small();
        let hp = PretrainConfig {
            prompt_sizes: vec![3],
            ..PretrainConfig::default()
        };
        assert!(pretrain_base(&world, &cfg, &hp).is_err());
    }
}
