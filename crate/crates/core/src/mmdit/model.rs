use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{ModelConfig, Projection};
use crate::adapters::{apply_on_graph, Adapter, BoundAdapter, RowUpdate, Selection};
use crate::archive::{Checkpoint, TensorArchive};
use crate::autodiff::{Axis, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::intervene::{interpolate_on_graph, RowInterpolation, SpanInterpolation};
use crate::params::{BoundParams, ParamStore};
use crate::prompt::{Prompt, TextTokens, Vocabulary};
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "editor-model";
/// Largest angular rate of the sinusoidal time features.
const TIME_SCALE: f64 = 1000.0;

/// One velocity query: noisy latents at time `t`, the source grid and the prompt.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub noisy: &'a Tensor,
    pub source: &'a Tensor,
    pub tokens: &'a TextTokens,
    pub t: f64,
}

/// Optional adapter routing and span interpolation for a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks<'a> {
    pub adapter: Option<(&'a BoundAdapter, &'a Selection)>,
    pub intervention: Option<&'a SpanInterpolation>,
}

/// Hooks resolved to joint-sequence rows for a single block.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockHooks<'a> {
    pub adapter: Option<(&'a BoundAdapter, &'a [RowUpdate])>,
    pub intervention: Option<&'a RowInterpolation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditorModel {
    config: ModelConfig,
    params: ParamStore,
}

impl EditorModel {
    /// Parameter names, shapes and init standard deviations, in init order.
    pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, f64)> {
        let d = config.d_model;
        let c = config.grid.channels;
        let ff = config.ffn_hidden;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut specs = vec![
            ("embed.tokens".to_owned(), vec![config.vocab, d], 0.5),
            ("image.in.weight".to_owned(), vec![d, c], inv(c)),
            ("image.in.bias".to_owned(), vec![d], 0.0),
            ("image.pos".to_owned(), vec![config.grid.tokens(), d], 0.5),
            ("stream.noisy".to_owned(), vec![d], 0.5),
            ("stream.cond".to_owned(), vec![d], 0.5),
            ("time.weight".to_owned(), vec![d, d], inv(d)),
            ("time.bias".to_owned(), vec![d], 0.0),
        ];
        for l in 0..config.blocks {
            for p in [Projection::Query, Projection::Key, Projection::Value, Projection::Output] {
                specs.push((p.weight_name(l), vec![d, d], inv(d)));
            }
            specs.push((Projection::FfnIn.weight_name(l), vec![ff, d], inv(d)));
            specs.push((format!("{}.bias", Projection::FfnIn.key(l)), vec![ff], 0.0));
            specs.push((Projection::FfnOut.weight_name(l), vec![d, ff], 0.5 * inv(ff)));
            specs.push((format!("{}.bias", Projection::FfnOut.key(l)), vec![d], 0.0));
        }
        // A zero head makes the untrained model predict zero velocity.
        specs.push(("head.weight".to_owned(), vec![c, d], 0.0));
        specs.push(("head.bias".to_owned(), vec![c], 0.0));
        specs
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, std) in Self::param_specs(config) {
            let value = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, std, &mut rng)
            };
            params.insert(name, value);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Wraps existing weights, checking names and shapes against `config`.
    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = Self::param_specs(config);
        if specs.len() != params.len() {
            if let Some(extra) = params.names().find(|n| !specs.iter().any(|(s, _, _)| s == n)) {
                return Err(Error::UnknownParam(extra.to_owned()));
            }
        }
        for (name, shape, _) in &specs {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(
                    "model parameters",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams> {
        self.params.bind(g, trainable)
    }

    pub fn encode(&self, prompt: &Prompt, vocab: &Vocabulary) -> Result<TextTokens> {
        if vocab.size() > self.config.vocab {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of {} ids exceeds the model's {}",
                vocab.size(),
                self.config.vocab
            )));
        }
        TextTokens::encode(prompt, vocab, self.config.text_len)
    }

    /// Builds the full forward pass and returns the velocity for the noisy tokens, `[N × C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        input: &ModelInput,
        hooks: &Hooks,
    ) -> Result<Var> {
        let cfg = &self.config;
        let grid = cfg.grid;
        let n = grid.tokens();
        if input.tokens.len() != cfg.text_len {
            return Err(shape_err(
                "forward",
                format!("text length {} but the model expects {}", input.tokens.len(), cfg.text_len),
            ));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::InvalidConfig(format!("time {} outside [0, 1]", input.t)));
        }
        let z = grid.to_tokens(input.noisy)?;
        let x = grid.to_tokens(input.source)?;

        let time_feat = g.constant(time_features(cfg.d_model, input.t))?;
        let temb = g.matmul_t(time_feat, p.get("time.weight")?, false, true)?;
        let temb = g.add(temb, p.get("time.bias")?)?;

        let img_w = p.get("image.in.weight")?;
        let img_b = p.get("image.in.bias")?;
        let pos = p.get("image.pos")?;
        let mut streams = Vec::with_capacity(3);
        for (tokens, stream) in [(z, "stream.noisy"), (x, "stream.cond")] {
            let v = g.constant(tokens)?;
            let v = g.matmul_t(v, img_w, false, true)?;
            let v = g.add(v, img_b)?;
            let v = g.add(v, pos)?;
            let v = g.add(v, p.get(stream)?)?;
            streams.push(g.add(v, temb)?);
        }
        let text = g.embed(p.get("embed.tokens")?, input.tokens.ids())?;
        streams.push(g.add(text, temb)?);
        let mut h = g.concat(&streams, Axis::Rows)?;

        let offset = cfg.text_offset();
        let updates;
        let adapter = match hooks.adapter {
            Some((bound, selection)) => {
                updates = selection.to_rows(offset, cfg.text_len)?;
                Some((bound, updates.as_slice()))
            }
            None => None,
        };
        let interp = match hooks.intervention {
            Some(spec) => Some(spec.resolve(input.tokens, offset, cfg.blocks)?),
            None => None,
        };
        for layer in 0..cfg.blocks {
            let intervention = match (&interp, hooks.intervention) {
                (Some(rows), Some(spec)) if spec.applies_to(layer) => Some(rows),
                _ => None,
            };
            h = self.joint_block(g, p, h, layer, &BlockHooks { adapter, intervention })?;
        }

        let out = g.slice(h, Axis::Rows, 0, n)?;
        let out = g.layernorm(out)?;
        let out = g.matmul_t(out, p.get("head.weight")?, false, true)?;
        g.add(out, p.get("head.bias")?)
    }

    /// One pre-norm block: joint attention then feed-forward, both residual.
    pub fn joint_block(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h: Var,
        layer: usize,
        hooks: &BlockHooks,
    ) -> Result<Var> {
        let cfg = &self.config;
        if layer >= cfg.blocks {
            return Err(Error::InvalidConfig(format!(
                "block {layer} out of range for {} blocks",
                cfg.blocks
            )));
        }
        let mut h = h;
        if let Some(interp) = hooks.intervention {
            h = interpolate_on_graph(g, h, interp)?;
        }

        let a = g.layernorm(h)?;
        let q = self.project(g, p, a, layer, Projection::Query, hooks)?;
        let k = self.project(g, p, a, layer, Projection::Key, hooks)?;
        let v = self.project(g, p, a, layer, Projection::Value, hooks)?;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, Axis::Cols, head * dh, dh)?,
                    g.slice(k, Axis::Cols, head * dh, dh)?,
                    g.slice(v, Axis::Cols, head * dh, dh)?,
                )
            };
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, Axis::Cols)?
        };
        let o = self.project(g, p, o, layer, Projection::Output, hooks)?;
        let h = g.add(h, o)?;

        let a = g.layernorm(h)?;
        let f = self.project(g, p, a, layer, Projection::FfnIn, hooks)?;
        let f = g.add(f, p.get(&format!("{}.bias", Projection::FfnIn.key(layer)))?)?;
        let f = g.gelu(f)?;
        let f = self.project(g, p, f, layer, Projection::FfnOut, hooks)?;
        let f = g.add(f, p.get(&format!("{}.bias", Projection::FfnOut.key(layer)))?)?;
        g.add(h, f)
    }

    fn project(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        layer: usize,
        proj: Projection,
        hooks: &BlockHooks,
    ) -> Result<Var> {
        let w = p.get(&proj.weight_name(layer))?;
        match hooks.adapter {
            Some((bound, updates)) => match bound.pair(&proj.key(layer)) {
                Some(pair) => apply_on_graph(g, x, w, pair, updates),
                None => Err(Error::UnknownParam(proj.key(layer))),
            },
            None => g.matmul_t(x, w, false, true),
        }
    }

    /// Velocity for the noisy grid as a `[H, W, C]` tensor.
    pub fn predict_velocity(
        &self,
        input: &ModelInput,
        adapter: Option<(&Adapter, &Selection)>,
        intervention: Option<&SpanInterpolation>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let bound;
        let hooks = Hooks {
            adapter: match adapter {
                Some((a, sel)) => {
                    a.check_config(&self.config)?;
                    bound = a.bind(&mut g, false)?;
                    Some((&bound, sel))
                }
                None => None,
            },
            intervention,
        };
        let out = self.forward(&mut g, &p, input, &hooks)?;
        self.config.grid.from_tokens(g.value(out))
    }
}

/// `[sin(ω_i t), cos(ω_i t)]` with `ω_i = 1000·1000^(−i/half)`, shape `[1, d]`.
pub(crate) fn time_features(d: usize, t: f64) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    for i in 0..half {
        let freq = (-(TIME_SCALE.ln()) * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![1, d], data)
}

impl Checkpoint for EditorModel {
    fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new(json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
        }));
        for (name, t) in self.params.iter() {
            archive.insert(name, t.clone())?;
        }
        Ok(archive)
    }

    fn from_archive(archive: TensorArchive) -> Result<Self> {
        if archive.metadata.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Archive(format!("not an {CHECKPOINT_KIND} checkpoint")));
        }
        let config: ModelConfig = serde_json::from_value(
            archive
                .metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Archive("checkpoint has no config".into()))?,
        )?;
        config.validate()?;
        let specs = Self::param_specs(&config);
        archive.expect_names(specs.iter().map(|(n, _, _)| n.as_str()))?;
        let mut params = ParamStore::new();
        for (name, t) in archive.into_tensors() {
            params.insert(name, t);
        }
        Self::from_params(&config, params)
    }
}
