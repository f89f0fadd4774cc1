use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sled_core::archive::{load_checkpoint, Checkpoint};
use sled_core::metrics::{
    continuity, continuity_grid, disentanglement, explicit_cfg_sweep, extrapolation, intervention_trajectory,
    slider_lattice, slider_sweep, Continuity, CrossTalk, EditRequest, Trajectory, CHI2_EPS,
};
use sled_core::pps::{evaluate_suppression, LossRecord};
use sled_core::{
    pretrain_base, train_adapter, Adapter, AdapterMode, EditWorld, EditorModel, Example, Objective, Prompt,
};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::output::{check_outputs, join, sibling, write_file, write_json};

/// Held-out backgrounds come from seeds far from any training stream.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;
/// Examples per held-out suppression estimate.
pub const HELD_OUT_EXAMPLES: usize = 32;

pub const SCORE_SOURCE: &str = "analytic world probe; stands in for learned image-text scorers";
pub const IDENTITY_PROXY: &str = "L2 distance to the source grid outside the target atom; stands in for identity similarity";

/// Source grid for evaluation seed `seed`, edited by `prompt`.
pub fn held_out_example(world: &EditWorld, prompt: Prompt, seed: u64) -> sled_core::Result<Example> {
    world.example_for(prompt, &mut ChaCha8Rng::seed_from_u64(HELD_OUT_OFFSET.wrapping_add(seed)))
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn init_config(out: &Path, force: bool) -> CliResult<()> {
    check_outputs(&[out.to_path_buf()], force)?;
    write_file(out, Config::default_toml().as_bytes())
}

fn load_base(config: &Config, path: &Path) -> CliResult<EditorModel> {
    let model: EditorModel = load_checkpoint(path)?;
    if model.config() != &config.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} was built for a different model config",
            path.display()
        )));
    }
    Ok(model)
}

fn load_adapter(config: &Config, path: &Path) -> CliResult<Adapter> {
    let adapter: Adapter = load_checkpoint(path)?;
    adapter.check_config(&config.model)?;
    Ok(adapter)
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub loss_threshold: f64,
    pub reached_threshold: bool,
}

/// Writes `out`, `<stem>.manifest.json` and `<stem>.loss.csv`. Missing the
/// loss threshold still writes everything and then reports budget exhaustion.
pub fn pretrain(config_path: &Path, out: &Path, force: bool) -> CliResult<PretrainSummary> {
    let config = Config::load(config_path)?;
    let manifest_path = sibling(out, "manifest.json");
    let loss_path = sibling(out, "loss.csv");
    check_outputs(&[out.to_path_buf(), manifest_path.clone(), loss_path.clone()], force)?;

    let world = config.world()?;
    let report = pretrain_base(&world, &config.model, &config.pretrain)?;
    let summary = PretrainSummary {
        config_hash: config.hash(),
        seed: config.pretrain.seed,
        iterations: report.losses.len(),
        final_loss: report.final_loss,
        loss_threshold: config.pretrain.loss_threshold,
        reached_threshold: report.reached_threshold,
    };
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("writing to a String");
    }
    write_file(out, &report.model.to_archive()?.to_bytes()?)?;
    write_file(&loss_path, csv.as_bytes())?;
    write_json(&manifest_path, &json!({ "kind": "pretrain", "summary": summary, "config": config }))?;
    if !summary.reached_threshold {
        return Err(CliError::BudgetExhausted(format!(
            "final loss {} after {} iterations is above the threshold {}",
            summary.final_loss, summary.iterations, summary.loss_threshold
        )));
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct AdapterSummary {
    pub config_hash: String,
    pub mode: AdapterMode,
    pub objective: Objective,
    pub iterations: usize,
    pub final_loss: f64,
    /// Held-out suppression loss of the untrained (zero) adapter.
    pub baseline_heldout_loss: f64,
    pub heldout_loss: f64,
}

pub fn train_adapter_cmd(
    config_path: &Path,
    base: &Path,
    mode: AdapterMode,
    objective: Option<Objective>,
    out: &Path,
    force: bool,
) -> CliResult<AdapterSummary> {
    let config = Config::load(config_path)?;
    let manifest_path = sibling(out, "manifest.json");
    let loss_path = sibling(out, "loss.csv");
    check_outputs(&[out.to_path_buf(), manifest_path.clone(), loss_path.clone()], force)?;
    let model = load_base(&config, base)?;
    let world = config.world()?;
    let mut hp = config.adapter.for_mode(mode).clone();
    if let Some(o) = objective {
        hp.objective = o;
    }

    let zero = sled_core::init_adapter(&config.model, mode, hp.rank, hp.seed)?;
    let eval_seed = HELD_OUT_OFFSET.wrapping_add(hp.seed);
    let baseline = evaluate_suppression(&model, &world, &zero, &hp, HELD_OUT_EXAMPLES, eval_seed)?;
    let trained = train_adapter(&model, &world, mode, &hp)?;
    let heldout = evaluate_suppression(&model, &world, &trained.adapter, &hp, HELD_OUT_EXAMPLES, eval_seed)?;

    let tail = trained.log.len().min(10);
    let final_loss = trained.log[trained.log.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
    let summary = AdapterSummary {
        config_hash: config.hash(),
        mode,
        objective: hp.objective,
        iterations: trained.log.len(),
        final_loss,
        baseline_heldout_loss: baseline,
        heldout_loss: heldout,
    };
    let mut csv = format!("{}\n", LossRecord::csv_header());
    for r in &trained.log {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(out, &trained.adapter.to_archive()?.to_bytes()?)?;
    write_file(&loss_path, csv.as_bytes())?;
    write_json(&manifest_path, &json!({ "kind": "adapter", "summary": summary, "hyperparameters": hp }))?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub method: &'static str,
    pub seed: u64,
    pub atoms: Vec<usize>,
    pub continuity: Continuity,
    /// Largest target probe along the sweep (one slider only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extrapolation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_at_zero: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disentanglement: Option<sled_core::metrics::Disentanglement>,
    /// Per axis: change in the other lattice atoms over change in the varied one.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cross_talk: Vec<CrossTalk>,
    /// `[point][atom]` probe scores; points follow the α lattice order.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub method: &'static str,
    pub atoms: Vec<usize>,
    /// χ² averaged over non-degenerate seeds.
    pub mean_chi2: Option<f64>,
    /// `dof / (mean χ² + ε)`.
    pub continuity: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub kind: &'static str,
    pub config_hash: String,
    pub score_source: &'static str,
    pub identity_proxy: &'static str,
    pub binning: &'static str,
    pub chi2_eps: f64,
    pub gamma: usize,
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SweepSummary>,
}

fn one_axis_continuity(scores: &[f64]) -> sled_core::Result<Continuity> {
    if scores.len() < 2 {
        return Ok(Continuity::degenerate(scores.len()));
    }
    continuity(scores)
}

fn trajectory_run(
    world: &EditWorld,
    ex: &Example,
    traj: &Trajectory,
    alphas: &[f64],
    method: &'static str,
    seed: u64,
    reversed: bool,
) -> CliResult<SweepRun> {
    let mut scores = traj.scores.clone();
    let mut all = traj.all_scores.clone();
    if reversed {
        scores.reverse();
        all.reverse();
    }
    let zero = alphas.iter().position(|&a| a == 0.0).map(|i| scores[i]);
    Ok(SweepRun {
        method,
        seed,
        atoms: vec![traj.atom],
        continuity: one_axis_continuity(&scores)?,
        extrapolation: Some(extrapolation(&scores)?),
        score_at_zero: zero,
        disentanglement: Some(disentanglement(world, &ex.x_orig, &traj.grids, traj.atom)?),
        cross_talk: Vec::new(),
        scores: all,
    })
}

fn summarize(runs: &[SweepRun]) -> Vec<SweepSummary> {
    let mut keys: Vec<(&'static str, Vec<usize>)> = Vec::new();
    for r in runs {
        let k = (r.method, r.atoms.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, atoms)| {
            let group: Vec<&Continuity> = runs
                .iter()
                .filter(|r| r.method == method && r.atoms == atoms)
                .map(|r| &r.continuity)
                .collect();
            let chis: Vec<f64> = group.iter().filter_map(|c| c.chi2).collect();
            let mean_chi2 = (!chis.is_empty()).then(|| chis.iter().sum::<f64>() / chis.len() as f64);
            let dof = group.first().map_or(0, |c| c.dof);
            SweepSummary {
                method,
                continuity: mean_chi2.map(|m| dof as f64 / (m + CHI2_EPS)),
                mean_chi2,
                atoms,
            }
        })
        .collect()
}

pub struct SweepArgs<'a> {
    pub config: &'a Path,
    pub base: &'a Path,
    pub adapter: &'a Path,
    pub gamma: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub with_cfg: bool,
    pub out: &'a Path,
    pub force: bool,
}

pub fn sweep_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("sweep.json"), out.join("sweep.csv"))
}

pub fn sweep(args: &SweepArgs) -> CliResult<SweepReport> {
    let config = Config::load(args.config)?;
    let gamma = args.gamma.unwrap_or(config.eval.gamma);
    if gamma == 0 || gamma > 3 || gamma > config.world.atoms {
        return Err(CliError::Usage(format!(
            "gamma {gamma} must be in 1..=3 and at most the {} atoms",
            config.world.atoms
        )));
    }
    let alphas = args.alphas.clone().unwrap_or_else(|| config.eval.alphas(gamma));
    if alphas.is_empty() || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Usage("alphas must be non-empty and strictly increasing".into()));
    }
    if args.with_cfg && gamma != 1 {
        return Err(CliError::Usage("the guidance baseline needs gamma = 1".into()));
    }
    let (json_path, csv_path) = sweep_paths(args.out);
    check_outputs(&[json_path.clone(), csv_path.clone()], args.force)?;
    let model = load_base(&config, args.base)?;
    let adapter = load_adapter(&config, args.adapter)?;
    let world = config.world()?;
    let steps = config.eval.steps;

    let mut runs = Vec::new();
    let mut csv = String::from("method,gamma,seed,alphas,atom,probe_score\n");
    for &seed in &config.eval.seeds {
        for atoms in combinations(config.world.atoms, gamma) {
            let prompt = Prompt::new(atoms.clone());
            let ex = held_out_example(&world, prompt.clone(), seed)?;
            let req = EditRequest {
                model: &model,
                world: &world,
                x_orig: &ex.x_orig,
                prompt: &prompt,
                steps,
                seed,
            };
            if gamma == 1 {
                let traj = slider_sweep(&req, &adapter, 0, &alphas)?;
                runs.push(trajectory_run(&world, &ex, &traj, &alphas, "slider", seed, false)?);
                if args.with_cfg {
                    let weights: Vec<f64> = alphas.iter().rev().map(|a| 1.0 - a).collect();
                    let traj = explicit_cfg_sweep(&req, 0, &weights)?;
                    runs.push(trajectory_run(&world, &ex, &traj, &alphas, "explicit-cfg", seed, true)?);
                }
            } else {
                let targets: Vec<usize> = (0..gamma).collect();
                let lattice = slider_lattice(&req, &adapter, &targets, &alphas)?;
                let cont = if alphas.len() < 2 {
                    Continuity::degenerate(1)
                } else {
                    continuity_grid(&lattice.grid_sweep())?
                };
                runs.push(SweepRun {
                    method: "slider",
                    seed,
                    atoms: atoms.clone(),
                    continuity: cont,
                    extrapolation: None,
                    score_at_zero: None,
                    disentanglement: None,
                    cross_talk: (0..gamma).map(|a| lattice.cross_talk(a)).collect::<sled_core::Result<_>>()?,
                    scores: lattice.points.iter().map(|p| p.scores.clone()).collect(),
                });
            }
        }
    }
    for r in &runs {
        let points: Vec<Vec<f64>> = lattice_points(&alphas, r.atoms.len());
        for (p, scores) in points.iter().zip(&r.scores) {
            for &a in &r.atoms {
                writeln!(csv, "{},{gamma},{},{},{a},{}", r.method, r.seed, join(p), scores[a]).expect("String write");
            }
        }
    }
    let report = SweepReport {
        kind: "slider-sweep",
        config_hash: config.hash(),
        score_source: SCORE_SOURCE,
        identity_proxy: IDENTITY_PROXY,
        binning: "per-axis min-max normalization, delta bins per axis, expected count samples/bins",
        chi2_eps: CHI2_EPS,
        gamma,
        alphas,
        steps,
        seeds: config.eval.seeds.clone(),
        summary: summarize(&runs),
        runs,
    };
    write_json(&json_path, &serde_json::to_value(&report).map_err(sled_core::Error::from)?)?;
    write_file(&csv_path, csv.as_bytes())?;
    Ok(report)
}

/// α tuples of a `δ^γ` lattice, last axis fastest.
fn lattice_points(alphas: &[f64], dims: usize) -> Vec<Vec<f64>> {
    let d = alphas.len();
    (0..d.pow(dims as u32))
        .map(|flat| {
            let mut rest = flat;
            let mut p = vec![0.0; dims];
            for slot in p.iter_mut().rev() {
                *slot = alphas[rest % d];
                rest /= d;
            }
            p
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct InterpEntry {
    pub seed: u64,
    pub beta: f64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InterpReport {
    pub kind: &'static str,
    pub config_hash: String,
    pub score_source: &'static str,
    pub target_atom: usize,
    pub betas: Vec<f64>,
    pub layers: Option<Vec<usize>>,
    pub steps: usize,
    pub entries: Vec<InterpEntry>,
}

pub fn interp_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("interp.json"), out.join("interp.csv"))
}

pub fn interp(config_path: &Path, base: &Path, target: usize, betas: &[f64], out: &Path, force: bool) -> CliResult<InterpReport> {
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(CliError::Usage(format!("beta {b} is outside [0, 1]")));
    }
    if betas.is_empty() || betas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Usage("betas must be non-empty and strictly increasing".into()));
    }
    let config = Config::load(config_path)?;
    if target >= config.world.atoms {
        return Err(CliError::Usage(format!(
            "target atom {target} out of range for {} atoms",
            config.world.atoms
        )));
    }
    let (json_path, csv_path) = interp_paths(out);
    check_outputs(&[json_path.clone(), csv_path.clone()], force)?;
    let model = load_base(&config, base)?;
    let world = config.world()?;
    let layers = config.eval.intervention_layers.clone();

    let mut entries = Vec::new();
    let mut csv = String::from("method,seed,beta,atom,probe_score\n");
    for &seed in &config.eval.seeds {
        let prompt = Prompt::new(vec![target]);
        let ex = held_out_example(&world, prompt.clone(), seed)?;
        let req = EditRequest {
            model: &model,
            world: &world,
            x_orig: &ex.x_orig,
            prompt: &prompt,
            steps: config.eval.steps,
            seed,
        };
        let traj = intervention_trajectory(&req, 0, betas, layers.clone())?;
        for (&beta, scores) in betas.iter().zip(traj.all_scores) {
            for (a, s) in scores.iter().enumerate() {
                writeln!(csv, "intervention,{seed},{beta},{a},{s}").expect("String write");
            }
            entries.push(InterpEntry { seed, beta, scores });
        }
    }
    let report = InterpReport {
        kind: "intervention",
        config_hash: config.hash(),
        score_source: SCORE_SOURCE,
        target_atom: target,
        betas: betas.to_vec(),
        layers,
        steps: config.eval.steps,
        entries,
    };
    write_json(&json_path, &serde_json::to_value(&report).map_err(sled_core::Error::from)?)?;
    write_file(&csv_path, csv.as_bytes())?;
    Ok(report)
}
