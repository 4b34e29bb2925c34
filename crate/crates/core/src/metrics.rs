//! Displacement metrics and evaluation reports.
//!
//! Conventions: ADE averages the per-step error over the prediction
//! horizon, FDE takes the final step only. With multiple modalities the
//! best-of-k rule picks the minimum per agent and per metric
//! independently (the usual min-ADE / min-FDE convention), which is
//! stricter bookkeeping than the training-time variety loss; reports
//! record both conventions in their metadata.

use serde::{Deserialize, Serialize};

use crate::config::{MetricKind, VarietyMin};
use crate::scene::Scenario;

/// Predicted trajectories for one scenario, detached from any graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scenario_id: String,
    pub agent_ids: Vec<i64>,
    pub t_obs: usize,
    /// Steps predicted per agent: t_obs+1 ..= t_obs+horizon.
    pub horizon: usize,
    /// trajectories[modality][agent][step]
    pub trajectories: Vec<Vec<Vec<[f64; 2]>>>,
}

impl PredictionSet {
    pub fn modalities(&self) -> usize {
        self.trajectories.len()
    }

    /// Ground-truth rows aligned with `agent_ids`, or None when an agent
    /// misses a frame.
    pub fn truth_from(&self, scenario: &Scenario) -> Option<Vec<Vec<[f64; 2]>>> {
        self.agent_ids
            .iter()
            .map(|&id| {
                let track = scenario.track(id)?;
                (1..=self.horizon)
                    .map(|k| track.position_at(self.t_obs + k))
                    .collect()
            })
            .collect()
    }
}

fn step_error(p: [f64; 2], t: [f64; 2], kind: MetricKind) -> f64 {
    let d2 = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
    match kind {
        MetricKind::L2 => d2.sqrt(),
        MetricKind::Mse => d2,
    }
}

/// Average displacement error over one trajectory.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]], kind: MetricKind) -> f64 {
    assert_eq!(pred.len(), truth.len(), "trajectory lengths must match");
    assert!(!pred.is_empty(), "empty trajectory has no error");
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| step_error(p, t, kind))
        .sum();
    total / pred.len() as f64
}

/// Final displacement error of one trajectory.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]], kind: MetricKind) -> f64 {
    assert_eq!(pred.len(), truth.len(), "trajectory lengths must match");
    let p = *pred.last().expect("empty trajectory has no error");
    let t = *truth.last().expect("empty trajectory has no error");
    step_error(p, t, kind)
}

/// Best-of-k errors for one agent: each metric takes its own minimum over
/// modalities.
pub fn best_of_k(
    modalities: &[&[[f64; 2]]],
    truth: &[[f64; 2]],
    kind: MetricKind,
) -> (f64, f64) {
    assert!(!modalities.is_empty(), "need at least one modality");
    let best_ade = modalities
        .iter()
        .map(|m| ade(m, truth, kind))
        .fold(f64::INFINITY, f64::min);
    let best_fde = modalities
        .iter()
        .map(|m| fde(m, truth, kind))
        .fold(f64::INFINITY, f64::min);
    (best_ade, best_fde)
}

/// CSV header for prediction dumps.
pub const PREDICTIONS_CSV_HEADER: &str = "scenario_id,agent_id,modality,t,x,y";

/// Append one scenario's predictions: rows ordered by (agent, modality, t).
pub fn append_csv_rows(out: &mut String, set: &PredictionSet) {
    for (i, &id) in set.agent_ids.iter().enumerate() {
        for (j, per_agent) in set.trajectories.iter().enumerate() {
            for (k, p) in per_agent[i].iter().enumerate() {
                let t = set.t_obs + 1 + k;
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    set.scenario_id, id, j, t, p[0], p[1]
                ));
            }
        }
    }
}

/// Per-scenario evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario_id: String,
    pub agents: usize,
    pub ade: f64,
    pub fde: f64,
}

/// Aggregate evaluation over a scenario set. Scenario rows are averaged
/// per agent; the aggregate weighs scenarios by their agent counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub modalities: usize,
    /// Eval-time multimodal convention (always per-agent best-of-k).
    pub eval_rule: String,
    /// Training-time variety-loss convention, recorded for comparison.
    pub variety_min: VarietyMin,
    pub rows: Vec<ScenarioMetrics>,
    pub ade: f64,
    pub fde: f64,
}

impl MetricReport {
    pub fn evaluate(
        items: &[(&PredictionSet, &Scenario)],
        metric: MetricKind,
        variety_min: VarietyMin,
    ) -> MetricReport {
        let mut rows = Vec::with_capacity(items.len());
        let mut total_agents = 0usize;
        let mut ade_sum = 0.0;
        let mut fde_sum = 0.0;
        let mut modalities = 0usize;
        for (set, scenario) in items {
            modalities = modalities.max(set.modalities());
            let truth = set
                .truth_from(scenario)
                .expect("prediction set agents must have ground truth");
            let mut scenario_ade = 0.0;
            let mut scenario_fde = 0.0;
            for (i, truth_row) in truth.iter().enumerate() {
                let per_mod: Vec<&[[f64; 2]]> = set
                    .trajectories
                    .iter()
                    .map(|m| m[i].as_slice())
                    .collect();
                let (a, f) = best_of_k(&per_mod, truth_row, metric);
                scenario_ade += a;
                scenario_fde += f;
            }
            let n = truth.len();
            ade_sum += scenario_ade;
            fde_sum += scenario_fde;
            total_agents += n;
            rows.push(ScenarioMetrics {
                scenario_id: set.scenario_id.clone(),
                agents: n,
                ade: scenario_ade / n.max(1) as f64,
                fde: scenario_fde / n.max(1) as f64,
            });
        }
        let denom = total_agents.max(1) as f64;
        MetricReport {
            metric,
            modalities,
            eval_rule: "best_of_k_per_agent".to_string(),
            variety_min,
            rows,
            ade: ade_sum / denom,
            fde: fde_sum / denom,
        }
    }

    /// One row per scenario plus a TOTAL row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario_id,agents,ade,fde\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.scenario_id, row.agents, row.ade, row.fde
            ));
        }
        let agents: usize = self.rows.iter().map(|r| r.agents).sum();
        out.push_str(&format!("TOTAL,{},{},{}\n", agents, self.ade, self.fde));
        out
    }

    /// Compact "ADE/FDE" cell for result tables.
    pub fn summary_cell(&self) -> String {
        format!("{:.3}/{:.3}", self.ade, self.fde)
    }
}
