//! Token-selective low-rank adapters and their slider scaling.
//!
//! Every eligible projection `W` gets a pair `(A, B)` with `ΔW = B·A`. A
//! selected row `x` is mapped through `W + α·ΔW`; all other rows through `W`.
//! In STLoRA mode only the text rows of the target instruction are selected;
//! in GSTLoRA mode every row of the joint sequence is.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Checkpoint, TensorArchive};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::mmdit::{ModelConfig, Projection};
use crate::prompt::TextTokens;
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "adapter";
pub const DEFAULT_RANK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    /// Update only the target instruction's text tokens.
    StLora,
    /// Update every text and image token.
    GstLora,
}

impl AdapterMode {
    pub fn name(self) -> &'static str {
        match self {
            AdapterMode::StLora => "stlora",
            AdapterMode::GstLora => "gstlora",
        }
    }
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stlora" => Ok(AdapterMode::StLora),
            "gstlora" => Ok(AdapterMode::GstLora),
            other => Err(Error::InvalidConfig(format!("unknown adapter mode `{other}`"))),
        }
    }
}

/// `A: [r × d_in]`, `B: [d_out × r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankPair {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `ΔW = B·A`, shape `[d_out × d_in]`.
    pub fn delta(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let a = g.constant(self.a.clone())?;
        let b = g.constant(self.b.clone())?;
        let d = g.matmul(b, a)?;
        Ok(g.value(d).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    mode: AdapterMode,
    rank: usize,
    pairs: BTreeMap<String, LowRankPair>,
}

/// One pair per eligible projection; `B = 0` and `A ~ N(0, 1/d_in)`.
pub fn init_adapter(config: &ModelConfig, mode: AdapterMode, rank: usize, seed: u64) -> Result<Adapter> {
    config.validate()?;
    let limit = Projection::ALL
        .iter()
        .map(|p| {
            let (i, o) = p.dims(config);
            i.min(o)
        })
        .min()
        .unwrap_or(0);
    if rank == 0 || rank > limit {
        return Err(Error::RankTooLarge { rank, limit });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = BTreeMap::new();
    for layer in 0..config.blocks {
        for proj in Projection::ALL {
            let (d_in, d_out) = proj.dims(config);
            pairs.insert(
                proj.key(layer),
                LowRankPair {
                    a: Tensor::randn([rank, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng),
                    b: Tensor::zeros([d_out, rank]),
                },
            );
        }
    }
    Ok(Adapter { mode, rank, pairs })
}

impl Adapter {
    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn pairs(&self) -> &BTreeMap<String, LowRankPair> {
        &self.pairs
    }

    pub fn pair(&self, key: &str) -> Result<&LowRankPair> {
        self.pairs
            .get(key)
            .ok_or_else(|| Error::UnknownParam(key.to_owned()))
    }

    /// Every `A` and `B`, in key order, `A` before `B`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.pairs
            .values_mut()
            .flat_map(|p| [&mut p.a, &mut p.b])
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Fails unless there is exactly one correctly shaped pair per eligible projection.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if self.pairs.len() != config.blocks * Projection::ALL.len() {
            return Err(shape_err(
                "adapter",
                format!(
                    "{} pairs for a model with {} eligible projections",
                    self.pairs.len(),
                    config.blocks * Projection::ALL.len()
                ),
            ));
        }
        for layer in 0..config.blocks {
            for proj in Projection::ALL {
                let key = proj.key(layer);
                let pair = self.pair(&key)?;
                let (d_in, d_out) = proj.dims(config);
                if pair.a.shape() != [self.rank, d_in] || pair.b.shape() != [d_out, self.rank] {
                    return Err(shape_err(
                        "adapter",
                        format!(
                            "{key}: A {:?} / B {:?} do not fit [{d_out} x {d_in}] at rank {}",
                            pair.a.shape(),
                            pair.b.shape(),
                            self.rank
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundAdapter> {
        let mut pairs = BTreeMap::new();
        for (key, pair) in &self.pairs {
            let (a, b) = if trainable {
                (g.param(pair.a.clone())?, g.param(pair.b.clone())?)
            } else {
                (g.constant(pair.a.clone())?, g.constant(pair.b.clone())?)
            };
            pairs.insert(key.clone(), BoundPair { a, b });
        }
        Ok(BoundAdapter { pairs })
    }

    /// A view applying `α·ΔW`. Outside `[0, 1]` needs `allow_extrapolation`.
    pub fn scaled(&self, alpha: f64, allow_extrapolation: bool) -> Result<ScaledAdapter<'_>> {
        check_alpha(alpha, allow_extrapolation)?;
        Ok(ScaledAdapter { adapter: self, alpha })
    }

    /// Routes slider settings to token rows according to the mode.
    pub fn selection(&self, tokens: &TextTokens, sliders: &Sliders) -> Result<Selection> {
        for s in &sliders.settings {
            check_alpha(s.alpha, sliders.allow_extrapolation)?;
            token_indices(tokens, s.instruction)?;
        }
        match self.mode {
            AdapterMode::StLora => Ok(Selection::Spans(
                sliders
                    .settings
                    .iter()
                    .map(|s| Ok((token_indices(tokens, s.instruction)?, s.alpha)))
                    .collect::<Result<_>>()?,
            )),
            AdapterMode::GstLora => match sliders.settings.as_slice() {
                [] => Ok(Selection::Spans(Vec::new())),
                [one] => Ok(Selection::All(one.alpha)),
                _ => Err(Error::InvalidConfig(
                    "a global adapter takes one slider; use stlora for per-instruction sliders".into(),
                )),
            },
        }
    }
}

fn check_alpha(alpha: f64, allow_extrapolation: bool) -> Result<()> {
    if !alpha.is_finite() {
        return Err(Error::InvalidScale {
            value: alpha,
            reason: "not finite",
        });
    }
    if !allow_extrapolation && !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidScale {
            value: alpha,
            reason: "outside [0, 1] without extrapolation enabled",
        });
    }
    Ok(())
}

/// Borrowed adapter with a fixed scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaledAdapter<'a> {
    adapter: &'a Adapter,
    alpha: f64,
}

impl ScaledAdapter<'_> {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn adapter(&self) -> &Adapter {
        self.adapter
    }

    /// User-facing edit strength, `β = 1 − α`.
    pub fn strength(&self) -> f64 {
        1.0 - self.alpha
    }

    /// `α·B·A` for one layer key.
    pub fn delta(&self, key: &str) -> Result<Tensor> {
        let alpha = self.alpha;
        Ok(self.adapter.pair(key)?.delta()?.map(|v| alpha * v))
    }

    /// Selection that applies this scale to one instruction, or globally.
    pub fn selection(&self, tokens: &TextTokens, instruction: usize) -> Result<Selection> {
        self.adapter.selection(
            tokens,
            &Sliders {
                settings: vec![SliderSetting {
                    instruction,
                    alpha: self.alpha,
                }],
                allow_extrapolation: true,
            },
        )
    }
}

/// Token positions of prompt instruction `i`; never includes pads.
pub fn token_indices(tokens: &TextTokens, instruction: usize) -> Result<Range<usize>> {
    tokens.span(instruction)
}

/// Slider value for one instruction of the prompt, by prompt position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliderSetting {
    pub instruction: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sliders {
    pub settings: Vec<SliderSetting>,
    pub allow_extrapolation: bool,
}

impl Sliders {
    pub fn single(instruction: usize, alpha: f64) -> Self {
        Self {
            settings: vec![SliderSetting { instruction, alpha }],
            allow_extrapolation: false,
        }
    }

    pub fn with_extrapolation(mut self) -> Self {
        self.allow_extrapolation = true;
        self
    }
}

/// Which rows an adapter touches, in text-token coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// Every row of the joint sequence at one scale.
    All(f64),
    /// Disjoint text spans, each with its own scale.
    Spans(Vec<(Range<usize>, f64)>),
}

impl Selection {
    /// Converts to joint-sequence rows; text starts at `offset`.
    pub fn to_rows(&self, offset: usize, text_len: usize) -> Result<Vec<RowUpdate>> {
        match self {
            Selection::All(alpha) => Ok(vec![RowUpdate { rows: None, alpha: *alpha }]),
            Selection::Spans(spans) => {
                let mut seen = vec![false; text_len];
                spans
                    .iter()
                    .map(|(span, alpha)| {
                        if span.end > text_len {
                            return Err(Error::InvalidIndices(format!(
                                "span {span:?} exceeds text length {text_len}"
                            )));
                        }
                        for i in span.clone() {
                            if std::mem::replace(&mut seen[i], true) {
                                return Err(Error::InvalidIndices(format!(
                                    "text position {i} selected twice"
                                )));
                            }
                        }
                        Ok(RowUpdate {
                            rows: Some(span.clone().map(|i| offset + i).collect()),
                            alpha: *alpha,
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Rows (or all rows, when `None`) that take `W + α·ΔW`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowUpdate {
    pub rows: Option<Vec<usize>>,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPair {
    pub a: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pairs: BTreeMap<String, BoundPair>,
}

impl BoundAdapter {
    /// Rebuilds a binding from leaves laid out as in [`Adapter::params_mut`].
    pub fn from_vars(keys: &[String], vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 2 * keys.len(), "expected an A and a B per key");
        let pairs = keys
            .iter()
            .zip(vars.chunks_exact(2))
            .map(|(k, ab)| (k.clone(), BoundPair { a: ab[0], b: ab[1] }))
            .collect();
        Self { pairs }
    }

    pub fn pair(&self, key: &str) -> Option<BoundPair> {
        self.pairs.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, BoundPair)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Leaf variables in the same order as [`Adapter::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        self.pairs.values().flat_map(|p| [p.a, p.b]).collect()
    }
}

/// `x·Wᵀ` with each update's rows replaced by `x·(W + α·B·A)ᵀ`.
///
/// Updates with `α = 0` or no rows are skipped, so the base path is
/// reproduced bit for bit.
pub fn apply_on_graph(
    g: &mut Graph,
    x: Var,
    w: Var,
    pair: BoundPair,
    updates: &[RowUpdate],
) -> Result<Var> {
    let mut out = g.matmul_t(x, w, false, true)?;
    for update in updates {
        if update.alpha == 0.0 {
            continue;
        }
        match &update.rows {
            None => {
                let xa = g.matmul_t(x, pair.a, false, true)?;
                let d = g.matmul_t(xa, pair.b, false, true)?;
                let d = g.scale(d, update.alpha)?;
                out = g.add(out, d)?;
            }
            Some(rows) if rows.is_empty() => {}
            Some(rows) => {
                let xs = g.embed(x, rows)?;
                let xa = g.matmul_t(xs, pair.a, false, true)?;
                let d = g.matmul_t(xa, pair.b, false, true)?;
                let d = g.scale(d, update.alpha)?;
                let base_rows = g.embed(out, rows)?;
                let upd = g.add(base_rows, d)?;
                out = g.scatter_rows(out, upd, rows)?;
            }
        }
    }
    Ok(out)
}

/// Value-level projection of `tokens` (`[M × d_in]`) through one adapted map.
///
/// In GSTLoRA mode `selected` is ignored and every row is adapted.
pub fn apply(
    w: &Tensor,
    pair: &LowRankPair,
    alpha: f64,
    tokens: &Tensor,
    mode: AdapterMode,
    selected: &[usize],
) -> Result<Tensor> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= tokens.rows()) {
        return Err(Error::InvalidIndices(format!(
            "row {bad} out of range for {} tokens",
            tokens.rows()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.clone())?;
    let wv = g.constant(w.clone())?;
    let bound = BoundPair {
        a: g.constant(pair.a.clone())?,
        b: g.constant(pair.b.clone())?,
    };
    let rows = match mode {
        AdapterMode::GstLora => None,
        AdapterMode::StLora => Some(selected.to_vec()),
    };
    let out = apply_on_graph(&mut g, x, wv, bound, &[RowUpdate { rows, alpha }])?;
    Ok(g.value(out).clone())
}

impl Checkpoint for Adapter {
    fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new(json!({
            "kind": CHECKPOINT_KIND,
            "mode": self.mode,
            "rank": self.rank,
        }));
        for (key, pair) in &self.pairs {
            archive.insert(format!("{key}.A"), pair.a.clone())?;
            archive.insert(format!("{key}.B"), pair.b.clone())?;
        }
        Ok(archive)
    }

    fn from_archive(archive: TensorArchive) -> Result<Self> {
        let meta = &archive.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Archive("not an adapter checkpoint".into()));
        }
        let mode: AdapterMode = serde_json::from_value(
            meta.get("mode")
                .cloned()
                .ok_or_else(|| Error::Archive("adapter checkpoint has no mode".into()))?,
        )?;
        let rank = meta
            .get("rank")
            .and_then(|r| r.as_u64())
            .ok_or_else(|| Error::Archive("adapter checkpoint has no rank".into()))? as usize;
        let mut pairs: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (name, t) in archive.into_tensors() {
            let (key, slot) = if let Some(k) = name.strip_suffix(".A") {
                (k, 0)
            } else if let Some(k) = name.strip_suffix(".B") {
                (k, 1)
            } else {
                return Err(Error::Archive(format!("unknown entry `{name}`")));
            };
            if !is_layer_key(key) {
                return Err(Error::Archive(format!("unknown entry `{name}`")));
            }
            let entry = pairs.entry(key.to_owned()).or_default();
            if slot == 0 {
                entry.0 = Some(t);
            } else {
                entry.1 = Some(t);
            }
        }
        let pairs = pairs
            .into_iter()
            .map(|(key, (a, b))| match (a, b) {
                (Some(a), Some(b)) => Ok((key, LowRankPair { a, b })),
                _ => Err(Error::Archive(format!("incomplete pair `{key}`"))),
            })
            .collect::<Result<_>>()?;
        Ok(Adapter { mode, rank, pairs })
    }
}

fn is_layer_key(key: &str) -> bool {
    let mut parts = key.splitn(3, '.');
    matches!(
        (parts.next(), parts.next().map(|n| n.parse::<usize>()), parts.next()),
        (Some("blocks"), Some(Ok(_)), Some("attn.q" | "attn.k" | "attn.v" | "attn.o" | "ff.fc1" | "ff.fc2"))
    )
}
