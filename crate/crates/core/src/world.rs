//! Procedural edit world with analytic effects and exact attribute probes.
//!
//! Each atom owns a fixed pattern `p` over a disjoint part of the grid.
//! Applying atom `a` at strength `s` adds `s·amp·p`; its probe reads
//! `⟨X, p⟩ / (amp·⟨p, p⟩)`. Backgrounds are smooth random fields with every
//! atom pattern projected out, so probes are exact on clean backgrounds.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::prompt::{Prompt, Vocabulary};
use crate::tensor::Tensor;

/// Low-frequency cosines summed per channel of a background.
const BACKGROUND_WAVES: usize = 3;
/// Upper bound on spatial frequency, in cycles per grid side.
const BACKGROUND_MAX_FREQ: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectKind {
    /// Constant offset on one channel of a region.
    ChannelShift,
    /// Constant offset on every channel of a region.
    RegionScale,
    /// Left-to-right ramp from −1 to 1 on one channel.
    GradientTilt,
    /// ±1 checkerboard on one channel.
    PatternBlend,
}

impl EffectKind {
    pub const ALL: [EffectKind; 4] = [
        EffectKind::ChannelShift,
        EffectKind::RegionScale,
        EffectKind::GradientTilt,
        EffectKind::PatternBlend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EffectKind::ChannelShift => "channel-shift",
            EffectKind::RegionScale => "region-scale",
            EffectKind::GradientTilt => "gradient-tilt",
            EffectKind::PatternBlend => "pattern-blend",
        }
    }
}

/// Axis-aligned block of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditAtom {
    pub index: usize,
    pub kind: EffectKind,
    pub region: Region,
    pub channels: Vec<usize>,
    pub amplitude: f64,
    /// Flat grid offsets and weights of the effect pattern.
    pattern: Vec<(usize, f64)>,
    norm2: f64,
}

impl EditAtom {
    fn new(
        index: usize,
        kind: EffectKind,
        region: Region,
        channels: Vec<usize>,
        amplitude: f64,
        grid: &GridShape,
    ) -> Self {
        let mut pattern = Vec::new();
        for i in 0..region.height {
            for j in 0..region.width {
                let weight = match kind {
                    EffectKind::ChannelShift | EffectKind::RegionScale => 1.0,
                    EffectKind::GradientTilt => {
                        -1.0 + 2.0 * j as f64 / (region.width - 1) as f64
                    }
                    EffectKind::PatternBlend => {
                        if (i + j) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                if weight == 0.0 {
                    continue;
                }
                for &c in &channels {
                    pattern.push((grid.index(region.row + i, region.col + j, c), weight));
                }
            }
        }
        pattern.sort_by_key(|&(at, _)| at);
        let norm2 = pattern.iter().map(|&(_, w)| w * w).sum();
        Self {
            index,
            kind,
            region,
            channels,
            amplitude,
            pattern,
            norm2,
        }
    }

    pub fn pattern(&self) -> &[(usize, f64)] {
        &self.pattern
    }

    /// Whether the effect writes to flat grid offset `at`.
    pub fn touches(&self, at: usize) -> bool {
        self.pattern.binary_search_by_key(&at, |&(i, _)| i).is_ok()
    }

    /// Adds `s·amp·p` in place.
    pub fn apply_in_place(&self, x: &mut Tensor, strength: f64) {
        let data = x.data_mut();
        for &(at, w) in &self.pattern {
            data[at] += strength * self.amplitude * w;
        }
    }

    pub fn score(&self, x: &Tensor) -> f64 {
        let data = x.data();
        let dot: f64 = self.pattern.iter().map(|&(at, w)| data[at] * w).sum();
        dot / (self.amplitude * self.norm2)
    }

    fn project_out(&self, x: &mut Tensor) {
        let data = x.data_mut();
        let dot: f64 = self.pattern.iter().map(|&(at, w)| data[at] * w).sum();
        let coef = dot / self.norm2;
        for &(at, w) in &self.pattern {
            data[at] -= coef * w;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub atoms: usize,
    pub tokens_per_atom: usize,
    pub grid: GridShape,
    /// Standard deviation of the background field.
    pub background_std: f64,
    pub effect_amplitude: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            atoms: 4,
            tokens_per_atom: 3,
            grid: GridShape::default(),
            background_std: 0.35,
            effect_amplitude: 1.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.atoms == 0 || self.tokens_per_atom == 0 {
            return Err(Error::InvalidConfig(
                "world needs at least one atom and one token per atom".into(),
            ));
        }
        if self.grid.height < 4 || self.grid.width < 4 {
            return Err(Error::InvalidConfig(format!(
                "grid {}x{} is too small for quadrant regions (need at least 4x4)",
                self.grid.height, self.grid.width
            )));
        }
        if !(self.background_std.is_finite() && self.background_std >= 0.0) {
            return Err(Error::InvalidConfig("background_std must be finite and >= 0".into()));
        }
        if !(self.effect_amplitude.is_finite() && self.effect_amplitude > 0.0) {
            return Err(Error::InvalidConfig("effect_amplitude must be finite and > 0".into()));
        }
        Ok(())
    }

    /// Checks that every atom fits a text sequence of `text_len` with a pad to spare.
    pub fn validate_for_text_len(&self, text_len: usize) -> Result<()> {
        let needed = self.atoms * self.tokens_per_atom;
        if needed + 1 > text_len {
            return Err(Error::InvalidConfig(format!(
                "{} atoms x {} tokens leave no pad in a text length of {text_len}",
                self.atoms, self.tokens_per_atom
            )));
        }
        Ok(())
    }

    /// Vocabulary covering every atom plus the neutral instruction.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            instructions: self.atoms + 1,
            tokens_per_instruction: self.tokens_per_atom,
        }
    }
}

/// One training or evaluation triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x_orig: Tensor,
    pub prompt: Prompt,
    pub x_edit: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditWorld {
    spec: WorldSpec,
    atoms: Vec<EditAtom>,
}

impl EditWorld {
    /// Places atoms on disjoint (quadrant, channel) slots chosen by the seed.
    ///
    /// Effect kinds cycle through [`EffectKind::ALL`]. Region-scale atoms
    /// claim every channel of a quadrant; the others claim one channel.
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let grid = spec.grid;
        let (h2, w2) = (grid.height / 2, grid.width / 2);
        let mut quadrants = [
            Region { row: 0, col: 0, height: h2, width: w2 },
            Region { row: 0, col: w2, height: h2, width: grid.width - w2 },
            Region { row: h2, col: 0, height: grid.height - h2, width: w2 },
            Region { row: h2, col: w2, height: grid.height - h2, width: grid.width - w2 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        quadrants.shuffle(&mut rng);
        let mut used: Vec<Vec<usize>> = vec![Vec::new(); quadrants.len()];
        let mut exclusive = vec![false; quadrants.len()];

        let mut atoms = Vec::with_capacity(spec.atoms);
        for index in 0..spec.atoms {
            let kind = EffectKind::ALL[index % EffectKind::ALL.len()];
            let mut order: Vec<usize> = (0..quadrants.len()).collect();
            order.sort_by_key(|&q| used[q].len());
            let mut slot = None;
            for q in order {
                if exclusive[q] {
                    continue;
                }
                if kind == EffectKind::RegionScale {
                    if used[q].is_empty() {
                        slot = Some((q, (0..grid.channels).collect::<Vec<_>>()));
                        break;
                    }
                } else {
                    let free: Vec<usize> =
                        (0..grid.channels).filter(|c| !used[q].contains(c)).collect();
                    if let Some(&c) = free.choose(&mut rng) {
                        slot = Some((q, vec![c]));
                        break;
                    }
                }
            }
            let (q, channels) = slot.ok_or_else(|| {
                Error::WorldCapacity(format!(
                    "no disjoint slot left for atom {index} ({}) on a {}x{}x{} grid",
                    kind.name(),
                    grid.height,
                    grid.width,
                    grid.channels
                ))
            })?;
            if kind == EffectKind::RegionScale {
                exclusive[q] = true;
            }
            used[q].extend(&channels);
            atoms.push(EditAtom::new(
                index,
                kind,
                quadrants[q],
                channels,
                spec.effect_amplitude,
                &grid,
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            atoms,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn grid(&self) -> GridShape {
        self.spec.grid
    }

    pub fn atoms(&self) -> &[EditAtom] {
        &self.atoms
    }

    pub fn atom(&self, index: usize) -> Result<&EditAtom> {
        self.atoms.get(index).ok_or(Error::UnknownInstruction(index))
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.spec.vocabulary()
    }

    /// Instruction id of the neutral atom, which has no effect.
    pub fn neutral_instruction(&self) -> usize {
        self.atoms.len()
    }

    /// Draws a clean background: smooth, with every atom pattern removed.
    pub fn background<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let grid = self.spec.grid;
        let mut x = Tensor::zeros(grid.dims());
        let data = x.data_mut();
        for c in 0..grid.channels {
            for _ in 0..BACKGROUND_WAVES {
                let fx = rng.random::<f64>() * BACKGROUND_MAX_FREQ;
                let fy = rng.random::<f64>() * BACKGROUND_MAX_FREQ;
                let phase = rng.random::<f64>() * 2.0 * PI;
                let amp: f64 = rng.sample(StandardNormal);
                for r in 0..grid.height {
                    for col in 0..grid.width {
                        let arg = 2.0
                            * PI
                            * (fx * col as f64 / grid.width as f64
                                + fy * r as f64 / grid.height as f64)
                            + phase;
                        data[grid.index(r, col, c)] += amp * arg.cos();
                    }
                }
            }
        }
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        let std = var.sqrt();
        if std > 1e-12 {
            let k = self.spec.background_std / std;
            x.data_mut().iter_mut().for_each(|v| *v *= k);
        }
        for atom in &self.atoms {
            atom.project_out(&mut x);
        }
        x
    }

    /// Returns `x` with atom `atom` applied at strength `s`.
    pub fn apply_effect(&self, x: &Tensor, atom: usize, strength: f64) -> Result<Tensor> {
        self.spec.grid.check(x)?;
        let mut out = x.clone();
        self.atom(atom)?.apply_in_place(&mut out, strength);
        Ok(out)
    }

    /// Strength of atom `atom` read from `x`.
    pub fn attribute_score(&self, x: &Tensor, atom: usize) -> Result<f64> {
        self.spec.grid.check(x)?;
        Ok(self.atom(atom)?.score(x))
    }

    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        (0..self.atoms.len()).map(|a| self.attribute_score(x, a)).collect()
    }

    /// Applies every atom of `prompt` at unit strength; the neutral instruction is a no-op.
    pub fn edit(&self, x_orig: &Tensor, prompt: &Prompt) -> Result<Tensor> {
        self.spec.grid.check(x_orig)?;
        let mut out = x_orig.clone();
        for &inst in prompt.instructions() {
            if inst == self.neutral_instruction() {
                continue;
            }
            self.atom(inst)?.apply_in_place(&mut out, 1.0);
        }
        Ok(out)
    }

    /// A fresh background edited by a caller-chosen prompt.
    pub fn example_for<R: Rng + ?Sized>(&self, prompt: Prompt, rng: &mut R) -> Result<Example> {
        let x_orig = self.background(rng);
        let x_edit = self.edit(&x_orig, &prompt)?;
        Ok(Example { x_orig, prompt, x_edit })
    }

    /// Samples `k` distinct atoms over a fresh background.
    pub fn sample_example(&self, k: usize, seed: u64) -> Result<Example> {
        self.sample_example_with(k, false, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Like [`sample_example`](Self::sample_example) with a caller RNG. When
    /// `neutral` is set the neutral instruction is appended to the prompt.
    pub fn sample_example_with<R: Rng + ?Sized>(
        &self,
        k: usize,
        neutral: bool,
        rng: &mut R,
    ) -> Result<Example> {
        if k > self.atoms.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot draw {k} distinct atoms from {}",
                self.atoms.len()
            )));
        }
        let x_orig = self.background(rng);
        let mut chosen = rand::seq::index::sample(rng, self.atoms.len(), k).into_vec();
        let mut x_edit = x_orig.clone();
        for &a in &chosen {
            self.atoms[a].apply_in_place(&mut x_edit, 1.0);
        }
        if neutral {
            chosen.push(self.neutral_instruction());
        }
        Ok(Example {
            x_orig,
            prompt: Prompt::new(chosen),
            x_edit,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldSpec,
    pub seed: u64,
    pub count: usize,
    pub prompts: Vec<Vec<usize>>,
}

/// Draws `count` examples with `k` cycling over `prompt_sizes`.
pub fn generate_dataset(
    world: &EditWorld,
    count: usize,
    prompt_sizes: &[usize],
    seed: u64,
) -> Result<Vec<Example>> {
    if prompt_sizes.is_empty() {
        return Err(Error::InvalidConfig("prompt_sizes is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| world.sample_example_with(prompt_sizes[i % prompt_sizes.len()], false, &mut rng))
        .collect()
}

/// Writes `dataset.sled` and `manifest.json` into `dir`.
pub fn export_dataset(world: &EditWorld, examples: &[Example], seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        world: world.spec().clone(),
        seed,
        count: examples.len(),
        prompts: examples.iter().map(|e| e.prompt.instructions().to_vec()).collect(),
    };
    let mut archive = TensorArchive::new(serde_json::json!({ "kind": "dataset" }));
    for (i, e) in examples.iter().enumerate() {
        archive.insert(format!("x_orig.{i}"), e.x_orig.clone())?;
        archive.insert(format!("x_edit.{i}"), e.x_edit.clone())?;
    }
    archive.save(&dir.join("dataset.sled"))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Example>)> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut archive = TensorArchive::load(&dir.join("dataset.sled"))?;
    if archive.len() != 2 * manifest.count || manifest.prompts.len() != manifest.count {
        return Err(Error::Archive(format!(
            "manifest lists {} examples but the archive holds {} tensors",
            manifest.count,
            archive.len()
        )));
    }
    let examples = manifest
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Example {
                x_orig: archive.take(&format!("x_orig.{i}"))?,
                prompt: Prompt::new(p.clone()),
                x_edit: archive.take(&format!("x_edit.{i}"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, examples))
}
