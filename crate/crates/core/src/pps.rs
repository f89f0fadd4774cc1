//! Prompt-suppression objectives and the adapter training loop.
//!
//! The adapted model sees the full prompt; the frozen model sees the prompt
//! with the target instruction removed (or, for the simplified objective, an
//! empty or neutral prompt). The adapter learns to close the gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, Adapter, AdapterMode, BoundAdapter, Selection, DEFAULT_RANK};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mmdit::{EditorModel, Hooks, ModelInput};
pub use crate::optim::{optimizer_step, AdamState, AdamWConfig};
use crate::prompt::{Prompt, Vocabulary};
use crate::tensor::Tensor;
use crate::world::EditWorld;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Remove one random instruction from the reference prompt.
    Pps,
    /// Treat the whole prompt as one instruction; the reference is a null prompt.
    Spps,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pps" => Ok(Objective::Pps),
            "spps" => Ok(Objective::Spps),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullPrompt {
    Empty,
    Neutral,
}

/// Frozen model plus what is needed to encode reference prompts.
#[derive(Clone, Copy, Debug)]
pub struct SuppressionContext<'a> {
    pub model: &'a EditorModel,
    pub vocab: Vocabulary,
    /// Instruction id used when the null prompt is [`NullPrompt::Neutral`].
    pub neutral: usize,
}

impl<'a> SuppressionContext<'a> {
    pub fn new(model: &'a EditorModel, world: &EditWorld) -> Self {
        Self {
            model,
            vocab: world.vocabulary(),
            neutral: world.neutral_instruction(),
        }
    }
}

/// Noisy latents `Z` at time `t` for source `X_orig`.
#[derive(Clone, Copy, Debug)]
pub struct NoisySample<'a> {
    pub z: &'a Tensor,
    pub x_orig: &'a Tensor,
    pub t: f64,
}

/// Mean squared gap between the adapted velocity on `full` and the frozen
/// velocity on `reference`. The reference is evaluated on its own graph and
/// enters `g` as a constant.
fn suppression_loss(
    g: &mut Graph,
    ctx: &SuppressionContext,
    bound: &BoundAdapter,
    sample: &NoisySample,
    full: &Prompt,
    selection: &Selection,
    reference: &Prompt,
) -> Result<Var> {
    let model = ctx.model;
    let grid = model.config().grid;
    let ref_tokens = model.encode(reference, &ctx.vocab)?;
    let target = model.predict_velocity(
        &ModelInput {
            noisy: sample.z,
            source: sample.x_orig,
            tokens: &ref_tokens,
            t: sample.t,
        },
        None,
        None,
    )?;
    let tokens = model.encode(full, &ctx.vocab)?;
    let p = model.bind(g, false)?;
    let v = model.forward(
        g,
        &p,
        &ModelInput {
            noisy: sample.z,
            source: sample.x_orig,
            tokens: &tokens,
            t: sample.t,
        },
        &Hooks {
            adapter: Some((bound, selection)),
            intervention: None,
        },
    )?;
    let target = g.constant(grid.to_tokens(&target)?)?;
    crate::mmdit::mean_squared_error(g, v, target)
}

/// `‖v_adapted(Z, X, P) − v(Z, X, P ∖ {P_i})‖²`, averaged over entries.
pub fn pps_loss(
    g: &mut Graph,
    ctx: &SuppressionContext,
    adapter: &Adapter,
    bound: &BoundAdapter,
    sample: &NoisySample,
    prompt: &Prompt,
    target: usize,
) -> Result<Var> {
    let reference = prompt.without(target)?;
    let tokens = ctx.model.encode(prompt, &ctx.vocab)?;
    let selection = match adapter.mode() {
        AdapterMode::StLora => Selection::Spans(vec![(tokens.span(target)?, 1.0)]),
        AdapterMode::GstLora => Selection::All(1.0),
    };
    suppression_loss(g, ctx, bound, sample, prompt, &selection, &reference)
}

/// Whole-prompt suppression toward the empty or neutral prompt.
///
/// An empty prompt has nothing to suppress, so the adapter is left inactive
/// and the loss compares the base model with itself.
pub fn spps_loss(
    g: &mut Graph,
    ctx: &SuppressionContext,
    adapter: &Adapter,
    bound: &BoundAdapter,
    sample: &NoisySample,
    prompt: &Prompt,
    null: NullPrompt,
) -> Result<Var> {
    let reference = match null {
        NullPrompt::Empty => Prompt::empty(),
        NullPrompt::Neutral => Prompt::new(vec![ctx.neutral]),
    };
    let tokens = ctx.model.encode(prompt, &ctx.vocab)?;
    let selection = if prompt.is_empty() {
        Selection::Spans(Vec::new())
    } else {
        match adapter.mode() {
            AdapterMode::StLora => Selection::Spans(vec![(0..tokens.content_len(), 1.0)]),
            AdapterMode::GstLora => Selection::All(1.0),
        }
    };
    suppression_loss(g, ctx, bound, sample, prompt, &selection, &reference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub objective: Objective,
    pub spps_null: NullPrompt,
    /// Prompt sizes `K`, drawn uniformly per example.
    pub prompt_sizes: Vec<usize>,
    pub rank: usize,
    pub weight_decay: f64,
}

impl AdapterTrainConfig {
    /// STLoRA: 1000 iterations of 8 with PPS. GSTLoRA: 300 of 4 with SPPS.
    pub fn defaults_for(mode: AdapterMode) -> Self {
        match mode {
            AdapterMode::StLora => Self {
                lr: 1e-4,
                batch_size: 8,
                iterations: 1000,
                seed: 0,
                objective: Objective::Pps,
                spps_null: NullPrompt::Empty,
                prompt_sizes: vec![1, 2, 3],
                rank: DEFAULT_RANK,
                weight_decay: 0.0,
            },
            AdapterMode::GstLora => Self {
                lr: 1e-4,
                batch_size: 4,
                iterations: 300,
                seed: 0,
                objective: Objective::Spps,
                spps_null: NullPrompt::Empty,
                prompt_sizes: vec![1, 2],
                rank: DEFAULT_RANK,
                weight_decay: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig("adapter lr must be positive".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "adapter iterations and batch_size must be at least 1".into(),
            ));
        }
        if self.prompt_sizes.is_empty() || self.prompt_sizes.contains(&0) {
            return Err(Error::InvalidConfig(
                "adapter prompt_sizes must be non-empty and at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Suppressed prompt positions, one per example; empty for whole-prompt suppression.
    pub targets: Vec<usize>,
    pub t_mean: f64,
}

impl LossRecord {
    pub fn csv_header() -> &'static str {
        "step,loss,target_index,t_mean"
    }

    pub fn csv_row(&self) -> String {
        let targets = if self.targets.is_empty() {
            "all".to_owned()
        } else {
            self.targets
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        format!("{},{},{},{}", self.step, self.loss, targets, self.t_mean)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedAdapter {
    pub adapter: Adapter,
    pub log: Vec<LossRecord>,
}

/// One drawn training example with its noise, time and target.
struct Draw {
    x_orig: Tensor,
    prompt: Prompt,
    z: Tensor,
    t: f64,
    target: Option<usize>,
}

fn draw<R: Rng>(world: &EditWorld, cfg: &AdapterTrainConfig, rng: &mut R) -> Result<Draw> {
    let k = cfg.prompt_sizes[rng.random_range(0..cfg.prompt_sizes.len())];
    let ex = world.sample_example_with(k, false, rng)?;
    let eps = Tensor::randn(world.grid().dims(), 1.0, rng);
    let t: f64 = rng.random();
    let z = crate::mmdit::noisy_latent(&eps, &ex.x_orig, t)?;
    let target = match cfg.objective {
        Objective::Pps => Some(rng.random_range(0..ex.prompt.len())),
        Objective::Spps => None,
    };
    Ok(Draw {
        x_orig: ex.x_orig,
        prompt: ex.prompt,
        z,
        t,
        target,
    })
}

fn draw_loss(
    g: &mut Graph,
    ctx: &SuppressionContext,
    adapter: &Adapter,
    bound: &BoundAdapter,
    d: &Draw,
    cfg: &AdapterTrainConfig,
) -> Result<Var> {
    let sample = NoisySample {
        z: &d.z,
        x_orig: &d.x_orig,
        t: d.t,
    };
    match d.target {
        Some(i) => pps_loss(g, ctx, adapter, bound, &sample, &d.prompt, i),
        None => spps_loss(g, ctx, adapter, bound, &sample, &d.prompt, cfg.spps_null),
    }
}

/// Trains a fresh adapter against the frozen `model`.
///
/// Each example draws `K`, a background, `ε` and `t ~ U[0, 1]`, forms
/// `Z = (1 − t)ε + t·X_orig` and, for PPS, a uniform target instruction.
pub fn train_adapter(
    model: &EditorModel,
    world: &EditWorld,
    mode: AdapterMode,
    cfg: &AdapterTrainConfig,
) -> Result<TrainedAdapter> {
    cfg.validate()?;
    let mut adapter = init_adapter(model.config(), mode, cfg.rank, cfg.seed)?;
    let ctx = SuppressionContext::new(model, world);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.iterations);
    let scale = 1.0 / cfg.batch_size as f64;
    let diverged = |step: usize| Error::Diverged {
        step,
        last_good: step.checked_sub(1),
    };

    for step in 0..cfg.iterations {
        let mut grads: Vec<Tensor> = Vec::new();
        let mut total = 0.0;
        let mut t_sum = 0.0;
        let mut targets = Vec::new();
        for _ in 0..cfg.batch_size {
            let d = draw(world, cfg, &mut rng)?;
            let result = (|| {
                let mut g = Graph::new();
                let bound = adapter.bind(&mut g, true)?;
                let loss = draw_loss(&mut g, &ctx, &adapter, &bound, &d, cfg)?;
                let value = g.value(loss).item();
                let mut gr = g.backward(loss)?;
                let ex_grads: Vec<Tensor> = bound
                    .vars()
                    .into_iter()
                    .zip(adapter.pairs().values().flat_map(|p| [&p.a, &p.b]))
                    .map(|(v, t)| gr.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                    .collect();
                Ok::<_, Error>((value, ex_grads))
            })();
            let (value, ex_grads) = match result {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                Err(e) => return Err(e),
            };
            total += value;
            t_sum += d.t;
            targets.extend(d.target);
            if grads.is_empty() {
                grads = ex_grads.into_iter().map(|t| t.map(|v| v * scale)).collect();
            } else {
                for (a, gi) in grads.iter_mut().zip(&ex_grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                        *x += y * scale;
                    }
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(diverged(step));
        }
        log.push(LossRecord {
            step,
            loss,
            targets,
            t_mean: t_sum * scale,
        });
        let mut params = adapter.params_mut();
        optimizer_step(&mut params, &grads, &mut state, &adam, cfg.lr)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged(step));
        }
    }
    Ok(TrainedAdapter { adapter, log })
}

/// Mean suppression loss of `adapter` over `count` draws from `seed`.
///
/// Passing a freshly initialized adapter gives the zero-adapter baseline.
pub fn evaluate_suppression(
    model: &EditorModel,
    world: &EditWorld,
    adapter: &Adapter,
    cfg: &AdapterTrainConfig,
    count: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one example".into()));
    }
    let ctx = SuppressionContext::new(model, world);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..count {
        let d = draw(world, cfg, &mut rng)?;
        let mut g = Graph::new();
        let bound = adapter.bind(&mut g, false)?;
        let loss = draw_loss(&mut g, &ctx, adapter, &bound, &d, cfg)?;
        total += g.value(loss).item();
    }
    Ok(total / count as f64)
}
