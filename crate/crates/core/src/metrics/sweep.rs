use serde::Serialize;

use super::continuity::GridSweep;
use crate::adapters::{Adapter, SliderSetting, Sliders};
use crate::error::{Error, Result};
use crate::intervene::intervention_sweep;
use crate::mmdit::{sample_edit, sample_with_velocity, EditorModel, ModelInput};
use crate::prompt::Prompt;
use crate::tensor::Tensor;
use crate::world::EditWorld;

/// What an edit sweep holds fixed: model, source image, prompt, sampler.
#[derive(Clone, Copy)]
pub struct EditRequest<'a> {
    pub model: &'a EditorModel,
    pub world: &'a EditWorld,
    pub x_orig: &'a Tensor,
    pub prompt: &'a Prompt,
    pub steps: usize,
    pub seed: u64,
}

impl EditRequest<'_> {
    /// World atom named by prompt position `target`.
    pub fn target_atom(&self, target: usize) -> Result<usize> {
        let inst = *self
            .prompt
            .instructions()
            .get(target)
            .ok_or(Error::InstructionOutOfRange {
                index: target,
                count: self.prompt.len(),
            })?;
        self.world.atom(inst)?;
        Ok(inst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMethod {
    Slider,
    ExplicitCfg,
    Intervention,
}

/// Probe scores along a one-parameter family of edits.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub method: SweepMethod,
    /// Prompt position being controlled.
    pub target: usize,
    pub atom: usize,
    /// α for sliders, w for guidance, β for interventions.
    pub params: Vec<f64>,
    /// Target atom's probe at each parameter.
    pub scores: Vec<f64>,
    /// Every atom's probe at each parameter.
    pub all_scores: Vec<Vec<f64>>,
    #[serde(skip)]
    pub grids: Vec<Tensor>,
    pub forward_passes: usize,
}

fn check_params(params: &[f64]) -> Result<()> {
    if params.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite { op: "sweep parameters" });
    }
    if params.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("sweep values must be strictly increasing".into()));
    }
    Ok(())
}

fn trajectory(
    req: &EditRequest,
    method: SweepMethod,
    target: usize,
    params: &[f64],
    grids: Vec<Tensor>,
    forward_passes: usize,
) -> Result<Trajectory> {
    let atom = req.target_atom(target)?;
    let all_scores = grids.iter().map(|g| req.world.scores(g)).collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        method,
        target,
        atom,
        params: params.to_vec(),
        scores: all_scores.iter().map(|s| s[atom]).collect(),
        all_scores,
        grids,
        forward_passes,
    })
}

/// One sample per α with only `target`'s slider set. Extrapolated α are allowed.
pub fn slider_sweep(req: &EditRequest, adapter: &Adapter, target: usize, alphas: &[f64]) -> Result<Trajectory> {
    check_params(alphas)?;
    req.target_atom(target)?;
    let tokens = req.model.encode(req.prompt, &req.world.vocabulary())?;
    let grids = alphas
        .iter()
        .map(|&a| {
            let sliders = Sliders::single(target, a).with_extrapolation();
            sample_edit(req.model, req.x_orig, &tokens, req.steps, req.seed, Some((adapter, &sliders)))
        })
        .collect::<Result<Vec<_>>>()?;
    let passes = alphas.len() * req.steps;
    trajectory(req, SweepMethod::Slider, target, alphas, grids, passes)
}

/// Guidance on one instruction: `v = v_u + w·(v_c − v_u)`, where `v_u` drops
/// `target` from the prompt. `w = 1` and `w = 0` use a single forward pass.
pub fn explicit_cfg_sweep(req: &EditRequest, target: usize, weights: &[f64]) -> Result<Trajectory> {
    check_params(weights)?;
    req.target_atom(target)?;
    let vocab = req.world.vocabulary();
    let cond = req.model.encode(req.prompt, &vocab)?;
    let uncond = req.model.encode(&req.prompt.without(target)?, &vocab)?;
    let grid = req.model.config().grid;
    let mut passes = 0;
    let mut grids = Vec::with_capacity(weights.len());
    for &w in weights {
        let out = sample_with_velocity(&grid, req.steps, req.seed, |z, t| {
            let input = |tokens| ModelInput {
                noisy: z,
                source: req.x_orig,
                tokens,
                t,
            };
            if w == 1.0 {
                passes += 1;
                return req.model.predict_velocity(&input(&cond), None, None);
            }
            if w == 0.0 {
                passes += 1;
                return req.model.predict_velocity(&input(&uncond), None, None);
            }
            passes += 2;
            let vc = req.model.predict_velocity(&input(&cond), None, None)?;
            let vu = req.model.predict_velocity(&input(&uncond), None, None)?;
            vu.zip_map(&vc, |u, c| u + w * (c - u))
        })?;
        grids.push(out);
    }
    trajectory(req, SweepMethod::ExplicitCfg, target, weights, grids, passes)
}

/// Interpolation of `target`'s tokens toward the pad state, one sample per β.
pub fn intervention_trajectory(
    req: &EditRequest,
    target: usize,
    betas: &[f64],
    layers: Option<Vec<usize>>,
) -> Result<Trajectory> {
    check_params(betas)?;
    req.target_atom(target)?;
    let samples = intervention_sweep(
        req.model, req.world, req.x_orig, req.prompt, target, betas, layers, req.steps, req.seed,
    )?;
    let grids = samples.into_iter().map(|s| s.grid).collect();
    trajectory(req, SweepMethod::Intervention, target, betas, grids, betas.len() * req.steps)
}

#[derive(Clone, Debug, Serialize)]
pub struct LatticePoint {
    pub alphas: Vec<f64>,
    /// Every atom's probe.
    pub scores: Vec<f64>,
}

/// Samples over every combination of slider values for several instructions.
#[derive(Clone, Debug, Serialize)]
pub struct SliderLattice {
    /// Prompt positions, one per axis.
    pub targets: Vec<usize>,
    pub atoms: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Row-major over the axes, last axis fastest.
    pub points: Vec<LatticePoint>,
}

/// Score changes across the ends of lattice lines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CrossTalk {
    /// Summed `|Δ probe|` of the varied atom.
    pub own_change: f64,
    /// Summed `|Δ probe|` of the other lattice atoms.
    pub other_change: f64,
}

impl CrossTalk {
    pub fn ratio(&self) -> f64 {
        self.other_change / self.own_change
    }

    pub fn merge(self, other: CrossTalk) -> CrossTalk {
        CrossTalk {
            own_change: self.own_change + other.own_change,
            other_change: self.other_change + other.other_change,
        }
    }
}

impl SliderLattice {
    pub fn dims(&self) -> usize {
        self.targets.len()
    }

    /// Score tuples of the lattice atoms, for [`continuity_grid`](super::continuity_grid).
    pub fn grid_sweep(&self) -> GridSweep {
        GridSweep {
            dims: self.dims(),
            delta: self.alphas.len(),
            points: self
                .points
                .iter()
                .map(|p| self.atoms.iter().map(|&a| p.scores[a]).collect())
                .collect(),
        }
    }

    /// Along every line where only `axis` varies, compares the change in
    /// that axis's atom with the change in the other lattice atoms.
    pub fn cross_talk(&self, axis: usize) -> Result<CrossTalk> {
        let dims = self.dims();
        if axis >= dims {
            return Err(Error::InvalidIndices(format!("axis {axis} of a {dims}-axis lattice")));
        }
        let d = self.alphas.len();
        let stride = d.pow((dims - 1 - axis) as u32);
        let mut out = CrossTalk::default();
        for start in 0..self.points.len() {
            if !(start / stride).is_multiple_of(d) {
                continue;
            }
            let first = &self.points[start].scores;
            let last = &self.points[start + (d - 1) * stride].scores;
            for (b, &atom) in self.atoms.iter().enumerate() {
                let change = (last[atom] - first[atom]).abs();
                if b == axis {
                    out.own_change += change;
                } else {
                    out.other_change += change;
                }
            }
        }
        Ok(out)
    }
}

/// Samples all `δ^γ` combinations of `alphas` over the `targets` sliders.
pub fn slider_lattice(
    req: &EditRequest,
    adapter: &Adapter,
    targets: &[usize],
    alphas: &[f64],
) -> Result<SliderLattice> {
    check_params(alphas)?;
    if !(1..=3).contains(&targets.len()) {
        return Err(Error::InvalidConfig(format!(
            "lattice needs 1 to 3 sliders, got {}",
            targets.len()
        )));
    }
    let atoms = targets.iter().map(|&t| req.target_atom(t)).collect::<Result<Vec<_>>>()?;
    let tokens = req.model.encode(req.prompt, &req.world.vocabulary())?;
    let d = alphas.len();
    let total = d.pow(targets.len() as u32);
    let mut points = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rest = flat;
        let mut point = vec![0.0; targets.len()];
        for slot in point.iter_mut().rev() {
            *slot = alphas[rest % d];
            rest /= d;
        }
        let sliders = Sliders {
            settings: targets
                .iter()
                .zip(&point)
                .map(|(&instruction, &alpha)| SliderSetting { instruction, alpha })
                .collect(),
            allow_extrapolation: true,
        };
        let out = sample_edit(req.model, req.x_orig, &tokens, req.steps, req.seed, Some((adapter, &sliders)))?;
        points.push(LatticePoint {
            alphas: point,
            scores: req.world.scores(&out)?,
        });
    }
    Ok(SliderLattice {
        targets: targets.to_vec(),
        atoms,
        alphas: alphas.to_vec(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterMode};
    use crate::grid::GridShape;
    use crate::mmdit::ModelConfig;
    use crate::world::WorldSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EditorModel, EditWorld, Adapter) {
        let spec = WorldSpec {
            atoms: 3,
            tokens_per_atom: 2,
            grid: GridShape::new(4, 4, 2),
            ..WorldSpec::default()
        };
        let cfg = ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            text_len: 8,
            vocab: 9,
            grid: spec.grid,
            ffn_hidden: 8,
        };
        let mut model = EditorModel::init(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in model.params_mut().values_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
        }
        let mut adapter = init_adapter(&cfg, AdapterMode::StLora, 2, 0).unwrap();
        for t in adapter.params_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
        }
        (model, EditWorld::generate(&spec).unwrap(), adapter)
    }

    #[test]
    fn cfg_endpoints_match_plain_sampling() {
        let (model, world, _) = setup();
        let ex = world.sample_example(2, 1).unwrap();
        let req = EditRequest {
            model: &model,
            world: &world,
            x_orig: &ex.x_orig,
            prompt: &ex.prompt,
            steps: 3,
            seed: 5,
        };
        let traj = explicit_cfg_sweep(&req, 0, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(traj.forward_passes, 3 + 6 + 3);
        let vocab = world.vocabulary();
        let cond = model.encode(&ex.prompt, &vocab).unwrap();
        let plain = sample_edit(&model, &ex.x_orig, &cond, 3, 5, None).unwrap();
        assert!(traj.grids[2].bit_eq(&plain));
        let uncond = model.encode(&ex.prompt.without(0).unwrap(), &vocab).unwrap();
        let dropped = sample_edit(&model, &ex.x_orig, &uncond, 3, 5, None).unwrap();
        assert!(traj.grids[0].bit_eq(&dropped));
        assert_eq!(traj.scores[1], traj.all_scores[1][traj.atom]);
    }

    #[test]
    fn slider_zero_matches_base_and_lattice_layout() {
        let (model, world, adapter) = setup();
        let ex = world.sample_example(2, 2).unwrap();
        let req = EditRequest {
            model: &model,
            world: &world,
            x_orig: &ex.x_orig,
            prompt: &ex.prompt,
            steps: 2,
            seed: 3,
        };
        let traj = slider_sweep(&req, &adapter, 1, &[-0.5, 0.0, 1.25]).unwrap();
        let tokens = model.encode(&ex.prompt, &world.vocabulary()).unwrap();
        let base = sample_edit(&model, &ex.x_orig, &tokens, 2, 3, None).unwrap();
        assert!(traj.grids[1].bit_eq(&base));
        assert_eq!(traj.atom, ex.prompt.instructions()[1]);

        let lattice = slider_lattice(&req, &adapter, &[0, 1], &[0.0, 1.0]).unwrap();
        let alphas: Vec<Vec<f64>> = lattice.points.iter().map(|p| p.alphas.clone()).collect();
        assert_eq!(alphas, vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        // The (0, α) line of the lattice is the single-slider sweep.
        assert_eq!(lattice.points[1].scores, slider_sweep(&req, &adapter, 1, &[1.0]).unwrap().all_scores[0]);
        assert!(lattice.grid_sweep().validate().is_ok());
    }

    #[test]
    fn cross_talk_on_synthetic_lattice() {
        // Axis 0 moves atom 0 by 1 per step and leaks 0.1 into atom 1.
        let alphas = vec![0.0, 1.0, 2.0];
        let mut points = Vec::new();
        for &a in &alphas {
            for &b in &alphas {
                points.push(LatticePoint {
                    alphas: vec![a, b],
                    scores: vec![a, b + 0.1 * a, 7.0],
                });
            }
        }
        let lattice = SliderLattice {
            targets: vec![0, 1],
            atoms: vec![0, 1],
            alphas,
            points,
        };
        let a0 = lattice.cross_talk(0).unwrap();
        assert!((a0.ratio() - 0.1).abs() < 1e-12);
        let a1 = lattice.cross_talk(1).unwrap();
        assert_eq!(a1.other_change, 0.0);
        assert_eq!(a1.own_change, 6.0);
        assert!(lattice.cross_talk(2).is_err());
    }

    #[test]
    fn bad_sweeps_are_rejected() {
        let (model, world, adapter) = setup();
        let ex = world.sample_example(1, 2).unwrap();
        let req = EditRequest {
            model: &model,
            world: &world,
            x_orig: &ex.x_orig,
            prompt: &ex.prompt,
            steps: 2,
            seed: 3,
        };
        assert!(slider_sweep(&req, &adapter, 0, &[]).is_err());
        assert!(slider_sweep(&req, &adapter, 0, &[1.0, 0.0]).is_err());
        assert!(slider_sweep(&req, &adapter, 1, &[0.0]).is_err());
        assert!(explicit_cfg_sweep(&req, 0, &[f64::NAN]).is_err());
        assert!(slider_lattice(&req, &adapter, &[], &[0.0]).is_err());
    }
}
