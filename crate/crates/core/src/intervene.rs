//! Interpolating an instruction's token states toward the pad state.
//!
//! At the input of each chosen block, rows of the target span become
//! `(1 − β)·y + β·y_pad`, where `y_pad` is the current state of the first
//! pad position.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::mmdit::{sample_with_velocity, EditorModel, ModelInput};
use crate::prompt::{Prompt, TextTokens};
use crate::tensor::Tensor;
use crate::world::EditWorld;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    /// Instruction position in the prompt.
    pub target: usize,
    pub beta: f64,
    /// Blocks to intervene on; `None` means all.
    pub layers: Option<Vec<usize>>,
}

/// An intervention in text-token coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanInterpolation {
    pub span: Range<usize>,
    pub beta: f64,
    pub layers: Option<Vec<usize>>,
}

/// An intervention in joint-sequence rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RowInterpolation {
    pub rows: Range<usize>,
    pub pad_row: usize,
    pub beta: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidScale {
            value: beta,
            reason: "interpolation coefficient must lie in [0, 1]",
        });
    }
    Ok(())
}

impl InterventionSpec {
    pub fn resolve(&self, tokens: &TextTokens) -> Result<SpanInterpolation> {
        check_beta(self.beta)?;
        Ok(SpanInterpolation {
            span: tokens.span(self.target)?,
            beta: self.beta,
            layers: self.layers.clone(),
        })
    }
}

impl SpanInterpolation {
    pub fn applies_to(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }

    /// Maps to joint rows, with text starting at `offset`.
    pub fn resolve(&self, tokens: &TextTokens, offset: usize, blocks: usize) -> Result<RowInterpolation> {
        check_beta(self.beta)?;
        if self.span.is_empty() {
            return Err(Error::InvalidIndices("interpolation span is empty".into()));
        }
        if self.span.end > tokens.content_len() {
            return Err(Error::InvalidIndices(format!(
                "span {:?} reaches past the {} prompt tokens",
                self.span,
                tokens.content_len()
            )));
        }
        if let Some(bad) = self.layers.iter().flatten().find(|&&l| l >= blocks) {
            return Err(Error::InvalidConfig(format!("layer {bad} out of range for {blocks} blocks")));
        }
        let pad = tokens
            .first_pad()
            .ok_or_else(|| Error::InvalidConfig("prompt has no pad position to interpolate toward".into()))?;
        Ok(RowInterpolation {
            rows: offset + self.span.start..offset + self.span.end,
            pad_row: offset + pad,
            beta: self.beta,
        })
    }
}

/// Value-level `(1 − β)·y_j + β·pad` over `span`; other rows are copied.
pub fn interpolate_span(y: &Tensor, span: Range<usize>, pad_row: &[f64], beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    if span.is_empty() {
        return Err(Error::InvalidIndices("interpolation span is empty".into()));
    }
    if span.end > y.rows() || pad_row.len() != y.cols() {
        return Err(shape_err(
            "interpolate_span",
            format!("span {span:?} / pad width {} on {:?}", pad_row.len(), y.shape()),
        ));
    }
    let mut out = y.clone();
    let w = y.cols();
    for r in span {
        for (c, p) in pad_row.iter().enumerate() {
            let v = &mut out.data_mut()[r * w + c];
            *v = (1.0 - beta) * *v + beta * p;
        }
    }
    Ok(out)
}

/// Graph version of [`interpolate_span`], reading the pad row from `h` itself.
pub fn interpolate_on_graph(g: &mut Graph, h: Var, interp: &RowInterpolation) -> Result<Var> {
    if interp.beta == 0.0 {
        return Ok(h);
    }
    let rows: Vec<usize> = interp.rows.clone().collect();
    let ys = g.embed(h, &rows)?;
    let pad = g.embed(h, &[interp.pad_row])?;
    let keep = g.scale(ys, 1.0 - interp.beta)?;
    let pull = g.scale(pad, interp.beta)?;
    let mixed = g.add(keep, pull)?;
    g.scatter_rows(h, mixed, &rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSample {
    pub beta: f64,
    pub grid: Tensor,
    /// Probe score of every world atom.
    pub scores: Vec<f64>,
}

/// One deterministic sample per β, intervening at every step.
#[allow(clippy::too_many_arguments)]
pub fn intervention_sweep(
    model: &EditorModel,
    world: &EditWorld,
    x_orig: &Tensor,
    prompt: &Prompt,
    target: usize,
    betas: &[f64],
    layers: Option<Vec<usize>>,
    steps: usize,
    seed: u64,
) -> Result<Vec<InterventionSample>> {
    for &b in betas {
        check_beta(b)?;
    }
    let tokens = model.encode(prompt, &world.vocabulary())?;
    let grid = model.config().grid;
    betas
        .iter()
        .map(|&beta| {
            let spec = InterventionSpec {
                target,
                beta,
                layers: layers.clone(),
            }
            .resolve(&tokens)?;
            let out = sample_with_velocity(&grid, steps, seed, |z, t| {
                let input = ModelInput {
                    noisy: z,
                    source: x_orig,
                    tokens: &tokens,
                    t,
                };
                model.predict_velocity(&input, None, Some(&spec))
            })?;
            Ok(InterventionSample {
                beta,
                scores: world.scores(&out)?,
                grid: out,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_and_endpoints() {
        let y = Tensor::new([3, 2], vec![9.0, 9.0, 2.0, 4.0, 7.0, 7.0]).unwrap();
        let out = interpolate_span(&y, 1..2, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(out.data(), &[9.0, 9.0, 1.0, 2.0, 7.0, 7.0]);
        assert!(interpolate_span(&y, 0..2, &[5.0, 6.0], 0.0).unwrap().bit_eq(&y));
        let full = interpolate_span(&y, 0..2, &[5.0, 6.0], 1.0).unwrap();
        assert_eq!(full.data(), &[5.0, 6.0, 5.0, 6.0, 7.0, 7.0]);
        assert!(interpolate_span(&y, 1..1, &[0.0, 0.0], 0.5).is_err());
        assert!(interpolate_span(&y, 0..1, &[0.0, 0.0], 1.5).is_err());
    }

    #[test]
    fn graph_matches_value_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::randn([6, 4], 1.0, &mut rng);
        for beta in [0.0, 0.3, 1.0] {
            let mut g = Graph::new();
            let h = g.constant(y.clone()).unwrap();
            let out = interpolate_on_graph(
                &mut g,
                h,
                &RowInterpolation { rows: 1..3, pad_row: 4, beta },
            )
            .unwrap();
            let want = interpolate_span(&y, 1..3, y.row(4), beta).unwrap();
            assert!(g.value(out).bit_eq(&want), "beta {beta}");
            for r in [0, 3, 4, 5] {
                assert_eq!(g.value(out).row(r), y.row(r));
            }
        }
    }
}
