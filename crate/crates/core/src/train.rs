//! Training harness: deterministic batched optimization over scenario
//! sets, with structured logs, periodic checkpoints, and evaluation.
//!
//! Determinism contract: given the same config and scenario list, two runs
//! produce identical parameters, identical loss curves, and identical
//! checkpoint checksums. Noise is derived from (seed, step, scenario id,
//! modality), never from global state; the only nondeterministic output is
//! the elapsed-time column at the end of each log line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, CoordinateFrame};
use crate::metrics::{MetricReport, PredictionSet};
use crate::params::{fnv1a64, Adam, GradStore, ParamError, ParamStore};
use crate::prednet::{standard_noise, variety_loss, zero_noise, ModelError, PredNet};
use crate::scene::{load_scenario_dir, Scenario, SceneError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("serializing {what}: {source}")]
    Json {
        what: &'static str,
        source: serde_json::Error,
    },
    #[error("non-finite gradient at step {step} (first bad group: {group})")]
    NonFinite { step: usize, group: String },
    #[error("no scenarios to train on")]
    NoData,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Mix a step/scenario/purpose triple into one RNG seed.
fn noise_seed(seed: u64, step: u64, scenario_id: &str) -> u64 {
    seed ^ step.wrapping_mul(0x9E3779B97F4A7C15) ^ fnv1a64(scenario_id.as_bytes())
}

/// Per-(modality, agent) noise for one scenario at one step. A single
/// modality decodes deterministically (zero noise); multimodal decoding
/// draws standard normal vectors.
pub fn noise_for(
    seed: u64,
    step: u64,
    scenario_id: &str,
    modalities: usize,
    agents: usize,
    dim: usize,
) -> Vec<Vec<Vec<f64>>> {
    if modalities <= 1 {
        return zero_noise(modalities.max(1), agents, dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, step, scenario_id));
    standard_noise(modalities, agents, dim, &mut rng)
}

/// Apply the configured coordinate frame. Relative framing recenters on
/// the ego at t_obs; scenarios without an ego stay in their own frame.
pub fn prepare_frame(scenario: &Scenario, frame: CoordinateFrame) -> Result<Scenario, SceneError> {
    match frame {
        CoordinateFrame::World => Ok(scenario.clone()),
        CoordinateFrame::Relative => {
            if scenario.ego_track().is_some() {
                scenario.to_relative_frame()
            } else {
                Ok(scenario.clone())
            }
        }
    }
}

/// Predict one scenario and return the set in the scenario's original
/// frame (reversing any recentering applied for the model).
pub fn predict_scenario(
    cfg: &Config,
    net: &PredNet,
    store: &ParamStore,
    scenario: &Scenario,
    step_seed: u64,
) -> Result<PredictionSet, TrainError> {
    let prepared = prepare_frame(scenario, cfg.coordinate_frame)?;
    let mut g = crate::tensor::Graph::new();
    let bp = store.bind(&mut g);
    let noise = noise_for(
        cfg.train.seed,
        step_seed,
        &prepared.id,
        cfg.model.modalities,
        prepared.predicted_agents().len(),
        cfg.model.noise_dim,
    );
    let ro = net.rollout(&mut g, &bp, &prepared, &cfg.toggles, &cfg.raster, &noise)?;
    let mut set = ro.to_prediction_set(&g, &prepared);
    // undo the recentering so coordinates line up with the input data
    let shift = [
        prepared.frame_origin[0] - scenario.frame_origin[0],
        prepared.frame_origin[1] - scenario.frame_origin[1],
    ];
    if shift != [0.0, 0.0] {
        for traj in set.trajectories.iter_mut().flatten() {
            for p in traj.iter_mut() {
                p[0] += shift[0];
                p[1] += shift[1];
            }
        }
    }
    set.scenario_id = scenario.id.clone();
    Ok(set)
}

/// Evaluation noise stream: disjoint from every training step.
pub const EVAL_NOISE_STEP: u64 = u64::MAX;

/// Evaluate a parameter snapshot over scenarios with best-of-k metrics.
pub fn evaluate_model(
    cfg: &Config,
    store: &ParamStore,
    scenarios: &[Scenario],
) -> Result<MetricReport, TrainError> {
    if scenarios.is_empty() {
        return Err(TrainError::NoData);
    }
    let net = PredNet::attach(&cfg.model);
    let sets: Vec<PredictionSet> = scenarios
        .iter()
        .map(|s| predict_scenario(cfg, &net, store, s, EVAL_NOISE_STEP))
        .collect::<Result<_, _>>()?;
    let items: Vec<(&PredictionSet, &Scenario)> = sets.iter().zip(scenarios).collect();
    Ok(MetricReport::evaluate(&items, cfg.metric, cfg.variety_min))
}

/// End-of-run summary, written to `summary.json` in the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub scenarios: usize,
    pub final_loss: f64,
    pub final_train_ade: f64,
    pub final_train_fde: f64,
    /// Checkpoint checksum as hex, matching the last log.csv column.
    pub checksum: String,
}

/// Result of [`train`]; paths point into the run directory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub run_dir: PathBuf,
    pub final_params: ParamStore,
}

pub const LOG_HEADER: &str = "step,loss,winners,checksum,elapsed_ms";

/// Train from fresh initialization. Writes `config.json`, `log.csv`,
/// `ckpt_<step>.bin` every `checkpoint_every` steps, `final.bin`, and
/// `summary.json` into `run_dir`.
///
/// Gradients of a batch are summed, not averaged; each scenario in the
/// batch contributes its variety loss normalized by its own agent count
/// and horizon. Batches cycle through the scenario list in order.
pub fn train(cfg: &Config, scenarios: &[Scenario], run_dir: &Path) -> Result<TrainOutcome, TrainError> {
    if scenarios.is_empty() {
        return Err(TrainError::NoData);
    }
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let cfg_path = run_dir.join("config.json");
    let cfg_json = serde_json::to_string_pretty(cfg).map_err(|source| TrainError::Json {
        what: "config snapshot",
        source,
    })?;
    std::fs::write(&cfg_path, cfg_json).map_err(io_err(&cfg_path))?;

    let prepared: Vec<Scenario> = scenarios
        .iter()
        .map(|s| prepare_frame(s, cfg.coordinate_frame))
        .collect::<Result<_, _>>()?;

    let mut store = ParamStore::new();
    let net = PredNet::register(&mut store, &cfg.model, cfg.train.seed);
    let mut adam = Adam::new(cfg.train.learning_rate);
    let mut log = String::from(LOG_HEADER);
    log.push('\n');

    let batch = cfg.train.batch_size.max(1);
    let h = cfg.model.modalities;
    let mut last_loss = f64::NAN;

    for step in 1..=cfg.train.steps {
        let started = Instant::now();
        let mut grads = GradStore::zeros_like(&store);
        let mut loss_sum = 0.0;
        let mut winners = vec![0usize; h];

        for j in 0..batch {
            let scenario = &prepared[((step - 1) * batch + j) % prepared.len()];
            let mut g = crate::tensor::Graph::new();
            let bp = store.bind(&mut g);
            let noise = noise_for(
                cfg.train.seed,
                step as u64,
                &scenario.id,
                h,
                scenario.predicted_agents().len(),
                cfg.model.noise_dim,
            );
            let ro = net.rollout(&mut g, &bp, scenario, &cfg.toggles, &cfg.raster, &noise)?;
            let vl = variety_loss(&mut g, &ro, scenario, cfg.variety_min)?;
            loss_sum += g.data(vl.loss)[0];
            for &w in &vl.winners {
                winners[w] += 1;
            }
            g.backward(vl.loss)?;
            grads.add_assign(&bp.grads(&g));
        }

        if grads.has_non_finite() {
            let group = grads
                .names()
                .find(|n| !grads.l2_norm(n).is_finite())
                .unwrap_or("unknown")
                .to_string();
            return Err(TrainError::NonFinite { step, group });
        }
        adam.step(&mut store, &grads);
        last_loss = loss_sum / batch as f64;

        let elapsed_ms = started.elapsed().as_millis();
        let win_col = winners
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("|");
        log.push_str(&format!(
            "{step},{last_loss},{win_col},{:016x},{elapsed_ms}\n",
            store.checksum()
        ));

        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            let path = run_dir.join(format!("ckpt_{step}.bin"));
            store.save(&path)?;
        }
    }

    let log_path = run_dir.join("log.csv");
    std::fs::write(&log_path, &log).map_err(io_err(&log_path))?;
    let final_path = run_dir.join("final.bin");
    store.save(&final_path)?;

    let report = evaluate_model(cfg, &store, scenarios)?;
    let summary = TrainSummary {
        steps: cfg.train.steps,
        scenarios: scenarios.len(),
        final_loss: last_loss,
        final_train_ade: report.ade,
        final_train_fde: report.fde,
        checksum: format!("{:016x}", store.checksum()),
    };
    let summary_path = run_dir.join("summary.json");
    let summary_json =
        serde_json::to_string_pretty(&summary).map_err(|source| TrainError::Json {
            what: "run summary",
            source,
        })?;
    std::fs::write(&summary_path, summary_json).map_err(io_err(&summary_path))?;

    Ok(TrainOutcome {
        summary,
        run_dir: run_dir.to_path_buf(),
        final_params: store,
    })
}

/// Scenario groups loaded from immediate subdirectories of `root`, sorted
/// by directory name.
pub fn load_grouped(root: &Path) -> Result<Vec<(String, Vec<Scenario>)>, TrainError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut groups = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        groups.push((name, load_scenario_dir(&dir)?));
    }
    Ok(groups)
}

/// One leave-one-out fold: train on every other group, evaluate on the
/// held-out one.
#[derive(Debug, Clone)]
pub struct LooSplit {
    pub held_out: String,
    pub train: Vec<Scenario>,
    pub eval: Vec<Scenario>,
}

/// Build every leave-one-out fold from named groups.
pub fn split_leave_one_out(groups: &[(String, Vec<Scenario>)]) -> Vec<LooSplit> {
    groups
        .iter()
        .enumerate()
        .map(|(i, (name, eval))| LooSplit {
            held_out: name.clone(),
            train: groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, (_, s))| s.iter().cloned())
                .collect(),
            eval: eval.clone(),
        })
        .collect()
}

/// Log lines with the timing column removed, for determinism comparisons.
pub fn strip_timing(log: &str) -> String {
    log.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
