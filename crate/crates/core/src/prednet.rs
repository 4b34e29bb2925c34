//! Prediction network: per-agent gated attention over the interaction
//! state, an LSTM encoder over observed frames, noise-conditioned LSTM
//! decoders that integrate displacements into future positions, and the
//! variety loss over modalities.
//!
//! One rollout drives one scenario through one graph: encode frames
//! 1..=t_obs, fork the interaction state per modality, then decode frames
//! t_obs+1..=t_pred autoregressively on predicted coordinates.
//!
//! Ego handling: when an ego plan is given the ego is encoded but never
//! predicted. Every channel through which the plan could reach the other
//! agents (the plan feature, decode-time position pooling, decode-time ego
//! motion, per-frame raster centering) is gated by the ETF toggle, so with
//! ETF off the predictions are exactly invariant to the plan: the ego is
//! held frozen at its last observed position instead.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::ain::Ain;
use crate::config::{ModelConfig, Toggles, VarietyMin};
use crate::envnet::EnvNet;
use crate::map::{rasterize, EgoPose, HdMap, RasterConfig};
use crate::params::{BoundParams, Init, ParamStore};
use crate::rnn::{LstmCell, LstmState};
use crate::scene::Scenario;
use crate::tensor::{Graph, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scenario {id}: {reason}")]
    Contract { id: String, reason: String },
}

/// All three networks plus the prediction head. Parameter names:
/// `ain.*`, `env_cnn.*`, `env_embed.*`, `pred.attn.*`, `pred.disp.*`,
/// `enc_lstm.*`, `dec_lstm.*`, `pred.head.*`, `pred.noise.*`.
#[derive(Debug, Clone)]
pub struct PredNet {
    pub cfg: ModelConfig,
    pub ain: Ain,
    pub env: EnvNet,
    pub enc: LstmCell,
    pub dec: LstmCell,
}

fn register_linear(store: &mut ParamStore, name: &str, input: usize, output: usize, seed: u64) {
    store.register(
        &format!("{name}.w"),
        vec![input, output],
        Init::Uniform {
            bound: 1.0 / (input as f64).sqrt(),
        },
        seed,
    );
    store.register(&format!("{name}.b"), vec![1, output], Init::Zeros, seed);
}

impl PredNet {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        let ain = Ain::register(store, cfg, seed);
        let env = EnvNet::register(store, cfg, seed);
        register_linear(store, "pred.attn", 2, cfg.fst_dim(), seed);
        register_linear(store, "pred.disp", 2, cfg.d_embed, seed);
        let enc = LstmCell::register(store, "enc_lstm", cfg.lstm_input_dim(), cfg.lstm_hidden, seed);
        let dec = LstmCell::register(store, "dec_lstm", cfg.lstm_input_dim(), cfg.lstm_hidden, seed);
        register_linear(store, "pred.head", cfg.lstm_hidden, 2, seed);
        register_linear(
            store,
            "pred.noise",
            cfg.lstm_hidden + cfg.noise_dim,
            cfg.lstm_hidden,
            seed,
        );
        PredNet {
            cfg: cfg.clone(),
            ain,
            env,
            enc,
            dec,
        }
    }

    pub fn attach(cfg: &ModelConfig) -> Self {
        PredNet {
            cfg: cfg.clone(),
            ain: Ain::attach(cfg),
            env: EnvNet::attach(cfg),
            enc: LstmCell::attach("enc_lstm", cfg.lstm_input_dim(), cfg.lstm_hidden),
            dec: LstmCell::attach("dec_lstm", cfg.lstm_input_dim(), cfg.lstm_hidden),
        }
    }

    /// Gated attention: q = fst ⊙ σ(p·W_c + b_c).
    pub fn attention(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        pos: TensorId,
        fst: TensorId,
    ) -> Result<TensorId, TensorError> {
        let w = bp.id("pred.attn.w");
        let b = bp.id("pred.attn.b");
        let lin = g.matmul(pos, w)?;
        let pre = g.add(lin, b)?;
        let gate = g.sigmoid(pre);
        g.mul(fst, gate)
    }

    fn embed_disp(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        disp: TensorId,
    ) -> Result<TensorId, TensorError> {
        let w = bp.id("pred.disp.w");
        let b = bp.id("pred.disp.b");
        let lin = g.matmul(disp, w)?;
        g.add(lin, b)
    }

    fn head(&self, g: &mut Graph, bp: &BoundParams, h: TensorId) -> Result<TensorId, TensorError> {
        let w = bp.id("pred.head.w");
        let b = bp.id("pred.head.b");
        let lin = g.matmul(h, w)?;
        g.add(lin, b)
    }

    fn merge_noise(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        h_e: TensorId,
        z: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let merged = match z {
            Some(z) => g.concat(&[h_e, z], 1)?,
            None => h_e,
        };
        let w = bp.id("pred.noise.w");
        let b = bp.id("pred.noise.b");
        let lin = g.matmul(merged, w)?;
        g.add(lin, b)
    }
}

/// One scenario's predictions, still attached to the graph.
pub struct Rollout {
    /// Agents receiving predictions, in track order.
    pub predicted_ids: Vec<i64>,
    /// Steps predicted: t_obs+1 ..= t_pred.
    pub horizon: usize,
    /// positions[modality][agent][k] is the prediction for t = t_obs+1+k.
    pub positions: Vec<Vec<Vec<TensorId>>>,
    /// noise_leaves[modality][agent]: the z leaf (absent when noise_dim=0).
    pub noise_leaves: Vec<Vec<Option<TensorId>>>,
}

impl Rollout {
    pub fn modalities(&self) -> usize {
        self.positions.len()
    }

    /// Detach into an evaluation-ready prediction set.
    pub fn to_prediction_set(&self, g: &Graph, scenario: &Scenario) -> crate::metrics::PredictionSet {
        crate::metrics::PredictionSet {
            scenario_id: scenario.id.clone(),
            agent_ids: self.predicted_ids.clone(),
            t_obs: scenario.t_obs,
            horizon: self.horizon,
            trajectories: self.positions_f64(g),
        }
    }

    /// Detach predictions as plain coordinates.
    pub fn positions_f64(&self, g: &Graph) -> Vec<Vec<Vec<[f64; 2]>>> {
        self.positions
            .iter()
            .map(|per_agent| {
                per_agent
                    .iter()
                    .map(|steps| {
                        steps
                            .iter()
                            .map(|&id| {
                                let d = g.data(id);
                                [d[0], d[1]]
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Standard-normal noise, one vector per (modality, agent).
pub fn standard_noise(
    modalities: usize,
    agents: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<Vec<f64>>> {
    (0..modalities)
        .map(|_| {
            (0..agents)
                .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

/// Zero noise (the unimodal deterministic decoder).
pub fn zero_noise(modalities: usize, agents: usize, dim: usize) -> Vec<Vec<Vec<f64>>> {
    vec![vec![vec![0.0; dim]; agents]; modalities]
}

// where the ego's decode-time position comes from
#[derive(Clone, Copy, PartialEq)]
enum EgoDecode {
    /// follow the plan (plan given, ETF on)
    Plan,
    /// hold the last observed position (plan hidden by ETF off, or no
    /// full track to predict from)
    Frozen,
    /// the ego is predicted like any other agent (index into predicted set)
    Predicted(usize),
    /// no ego in the scenario
    Absent,
}

struct AinInputs {
    positions: Vec<TensorId>,
    hiddens: Vec<TensorId>,
    ego_disp: Option<TensorId>,
    plan_points: Vec<TensorId>,
}

impl PredNet {
    fn ain_step(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        toggles: &Toggles,
        inputs: AinInputs,
        h_gru: TensorId,
        scenario_id: &str,
    ) -> Result<(TensorId, TensorId), ModelError> {
        let d = self.cfg.d_embed;
        let contract = |reason: &str| ModelError::Contract {
            id: scenario_id.to_string(),
            reason: reason.to_string(),
        };
        let interaction_on = toggles.pf || toggles.tf || toggles.emf;
        let (st, h_next) = if interaction_on {
            let o = if toggles.pf {
                if inputs.positions.is_empty() {
                    return Err(contract("position feature enabled with zero agents to pool"));
                }
                self.ain.position_feature(g, bp, &inputs.positions)?
            } else {
                g.zeros(vec![1, d])
            };
            let r = if toggles.tf {
                if inputs.hiddens.is_empty() {
                    return Err(contract("tracking feature enabled with zero agents to pool"));
                }
                self.ain.tracking_feature(g, bp, &inputs.hiddens)?
            } else {
                g.zeros(vec![1, d])
            };
            let m = if toggles.emf {
                match inputs.ego_disp {
                    Some(disp) => self.ain.ego_motion_feature(g, bp, disp)?,
                    None => g.zeros(vec![1, d]),
                }
            } else {
                g.zeros(vec![1, d])
            };
            self.ain.fuse(g, bp, o, r, m, h_gru)?
        } else {
            // the whole interaction state is a disabled block
            (g.zeros(vec![1, self.cfg.state_dim()]), h_gru)
        };
        let f = if toggles.etf && !inputs.plan_points.is_empty() {
            self.ain.plan_feature(g, bp, &inputs.plan_points)?
        } else {
            g.zeros(vec![1, d])
        };
        let fst = self.ain.assemble_fst(g, f, st)?;
        Ok((fst, h_next))
    }

    /// Run one scenario end to end. `noise[modality][predicted_agent]` must
    /// hold `noise_dim` components each (empty vectors only when
    /// noise_dim=0). The scenario is consumed in whatever coordinate frame
    /// it is already in.
    pub fn rollout(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        scenario: &Scenario,
        toggles: &Toggles,
        raster_cfg: &RasterConfig,
        noise: &[Vec<Vec<f64>>],
    ) -> Result<Rollout, ModelError> {
        let contract = |reason: String| ModelError::Contract {
            id: scenario.id.clone(),
            reason,
        };
        scenario
            .validate()
            .map_err(|e| contract(e.to_string()))?;

        let t_obs = scenario.t_obs;
        let t_pred = scenario.t_pred;
        let horizon = t_pred - t_obs;

        // participating agents: full-window tracks only
        let full_ids = scenario.fully_covered_agents();
        if full_ids.is_empty() {
            return Err(contract("no fully covered agents".into()));
        }
        let has_plan = scenario.ego_plan.is_some();
        let ego_id = scenario.ego_id;

        let predicted_ids = scenario.predicted_agents();
        if predicted_ids.is_empty() {
            return Err(contract("no agents to predict".into()));
        }
        let ego_decode = match ego_id {
            None => EgoDecode::Absent,
            Some(id) => {
                if has_plan {
                    if toggles.etf {
                        EgoDecode::Plan
                    } else {
                        EgoDecode::Frozen
                    }
                } else if let Some(pos) = predicted_ids.iter().position(|&p| p == id) {
                    EgoDecode::Predicted(pos)
                } else {
                    EgoDecode::Frozen
                }
            }
        };

        // encoded set: predicted agents plus the ego when it is not
        // predicted (its hidden state and positions still pool)
        let mut encoded_ids = predicted_ids.clone();
        if let Some(id) = ego_id {
            if !encoded_ids.contains(&id) {
                encoded_ids.push(id);
            }
        }
        let pos_at = |id: i64, t: usize| -> [f64; 2] {
            scenario
                .track(id)
                .and_then(|tr| tr.position_at(t))
                .expect("coverage validated")
        };
        let plan_at = |k: usize| -> [f64; 2] {
            scenario.ego_plan.as_ref().expect("plan presence checked")[k - t_obs - 1]
        };
        // ego position at step t as plain numbers (raster centering)
        let ego_host_pos = |t: usize| -> Option<[f64; 2]> {
            ego_id.map(|id| match ego_decode {
                EgoDecode::Plan if t > t_obs => plan_at(t),
                _ => pos_at(id, t_obs.min(t)),
            })
        };

        // environment: one ego-centered raster, or one per step
        let use_map = toggles.ef;
        let empty_map = HdMap::default();
        let map_ref = scenario.map.as_ref().unwrap_or(&empty_map);
        let raster_center_at = |t: usize| -> EgoPose {
            let p = ego_host_pos(t).unwrap_or([0.0, 0.0]);
            EgoPose::at(p[0], p[1])
        };
        let mut encode_fm: Option<(TensorId, EgoPose)> = None;
        if use_map {
            let ego_pose = raster_center_at(t_obs);
            let img = rasterize(map_ref, &ego_pose, raster_cfg);
            let img_id = g.tensor(img.as_tensor());
            let fm = self.env.encode_map(g, bp, img_id)?;
            encode_fm = Some((fm, ego_pose));
        }

        let d = self.cfg.d_embed;
        let zero2 = [0.0, 0.0];

        // map ROI embed for a graph position, or the zero block
        let roi_or_zero = |g: &mut Graph,
                           fm: &Option<(TensorId, EgoPose)>,
                           p: TensorId|
         -> Result<TensorId, ModelError> {
            match fm {
                Some((fm_id, pose)) => {
                    let center = self.env.world_to_fm(g, raster_cfg, pose, p)?;
                    Ok(self
                        .env
                        .roi_embed(g, bp, *fm_id, center, raster_cfg, self.cfg.roi_span_m)?)
                }
                None => Ok(g.zeros(vec![1, d])),
            }
        };

        // ---- encoder phase: t = 1..=t_obs ----
        let n_enc = encoded_ids.len();
        let mut enc_states: Vec<LstmState> = (0..n_enc).map(|_| self.enc.zero_state(g)).collect();
        let mut h_gru = self.ain.gru.zero_state(g);
        let pool_ego = self.cfg.include_ego_in_pooling;
        let poolable = |id: i64| pool_ego || Some(id) != ego_id;

        for t in 1..=t_obs {
            let positions: Vec<TensorId> = encoded_ids
                .iter()
                .filter(|&&id| poolable(id))
                .map(|&id| g.row(&pos_at(id, t)))
                .collect();
            let hiddens: Vec<TensorId> = encoded_ids
                .iter()
                .zip(&enc_states)
                .filter(|(&id, _)| poolable(id))
                .map(|(_, s)| s.h)
                .collect();
            let ego_disp = ego_id.filter(|&id| encoded_ids.contains(&id)).map(|id| {
                let cur = pos_at(id, t);
                let prev = if t == 1 { cur } else { pos_at(id, t - 1) };
                g.row(&[cur[0] - prev[0], cur[1] - prev[1]])
            });
            let plan_points: Vec<TensorId> = match (ego_id, has_plan) {
                (Some(id), true) => {
                    let mut pts = Vec::new();
                    for k in t + 1..=t_pred {
                        let p = if k <= t_obs { pos_at(id, k) } else { plan_at(k) };
                        pts.push(g.row(&p));
                    }
                    pts
                }
                _ => Vec::new(),
            };
            let (fst, h_next) = self.ain_step(
                g,
                bp,
                toggles,
                AinInputs {
                    positions,
                    hiddens,
                    ego_disp,
                    plan_points,
                },
                h_gru,
                &scenario.id,
            )?;
            h_gru = h_next;

            for (i, &id) in encoded_ids.iter().enumerate() {
                let cur = pos_at(id, t);
                let prev = if t == 1 { cur } else { pos_at(id, t - 1) };
                let disp = g.row(&[cur[0] - prev[0], cur[1] - prev[1]]);
                let e_p = self.embed_disp(g, bp, disp)?;
                let p_row = g.row(&cur);
                let v = roi_or_zero(g, &encode_fm, p_row)?;
                let q = self.attention(g, bp, p_row, fst)?;
                let x = g.concat(&[e_p, v, q], 1)?;
                enc_states[i] = self.enc.step(g, bp, x, enc_states[i]);
            }
        }

        // ---- fork per modality ----
        let modalities = noise.len();
        if modalities == 0 {
            return Err(contract("at least one modality required".into()));
        }
        let n_pred = predicted_ids.len();
        for (j, per_agent) in noise.iter().enumerate() {
            if per_agent.len() != n_pred {
                return Err(contract(format!(
                    "noise[{j}] covers {} agents, need {n_pred}",
                    per_agent.len()
                )));
            }
            for (i, z) in per_agent.iter().enumerate() {
                if z.len() != self.cfg.noise_dim {
                    return Err(contract(format!(
                        "noise[{j}][{i}] has {} dims, need {}",
                        z.len(),
                        self.cfg.noise_dim
                    )));
                }
            }
        }
        // index of each predicted agent in the encoded list
        let pred_enc_idx: Vec<usize> = predicted_ids
            .iter()
            .map(|id| encoded_ids.iter().position(|e| e == id).expect("subset"))
            .collect();
        let ego_enc_idx = ego_id.and_then(|id| encoded_ids.iter().position(|&e| e == id));

        let mut all_positions = Vec::with_capacity(modalities);
        let mut all_noise = Vec::with_capacity(modalities);

        for z_rows in noise.iter().take(modalities) {
            // decoder init per predicted agent
            let mut noise_leaves: Vec<Option<TensorId>> = Vec::with_capacity(n_pred);
            let mut dec_states: Vec<LstmState> = Vec::with_capacity(n_pred);
            for (i, _) in predicted_ids.iter().enumerate() {
                let h_e = enc_states[pred_enc_idx[i]].h;
                let z_leaf = if self.cfg.noise_dim > 0 {
                    Some(
                        g.leaf(vec![1, self.cfg.noise_dim], z_rows[i].clone(), true)
                            .expect("noise leaf"),
                    )
                } else {
                    None
                };
                let h_d = self.merge_noise(g, bp, h_e, z_leaf)?;
                let c_d = g.zeros(vec![1, self.cfg.lstm_hidden]);
                noise_leaves.push(z_leaf);
                dec_states.push(LstmState { h: h_d, c: c_d });
            }

            // last positions: start at the observed t_obs anchor
            let mut last_pos: Vec<TensorId> = predicted_ids
                .iter()
                .map(|&id| g.row(&pos_at(id, t_obs)))
                .collect();
            let mut trajs: Vec<Vec<TensorId>> = vec![Vec::with_capacity(horizon); n_pred];

            // first prediction comes straight from the initialized hidden
            for i in 0..n_pred {
                let delta = self.head(g, bp, dec_states[i].h)?;
                let p1 = g.add(last_pos[i], delta)?;
                trajs[i].push(p1);
            }
            let mut prev_pos = last_pos.clone();
            last_pos = trajs.iter().map(|tr| tr[0]).collect();

            // decode steps t = t_obs+1 .. t_pred-1 emit positions t+1
            let mut h_gru_m = h_gru;
            for t in t_obs + 1..t_pred {
                // ego position/hidden sources for pooling at step t
                let ego_pos_row: Option<TensorId> = match ego_decode {
                    EgoDecode::Absent => None,
                    EgoDecode::Plan => Some(g.row(&plan_at(t))),
                    EgoDecode::Frozen => {
                        Some(g.row(&pos_at(ego_id.expect("frozen needs ego"), t_obs)))
                    }
                    EgoDecode::Predicted(_) => None, // already in predicted set
                };
                let positions: Vec<TensorId> = predicted_ids
                    .iter()
                    .enumerate()
                    .filter(|(_, &id)| poolable(id))
                    .map(|(i, _)| last_pos[i])
                    .chain(ego_pos_row.into_iter().filter(|_| pool_ego))
                    .collect();
                let hiddens: Vec<TensorId> = predicted_ids
                    .iter()
                    .enumerate()
                    .filter(|(_, &id)| poolable(id))
                    .map(|(i, _)| dec_states[i].h)
                    .chain(
                        match ego_decode {
                            EgoDecode::Plan | EgoDecode::Frozen => {
                                ego_enc_idx.map(|idx| enc_states[idx].h)
                            }
                            _ => None,
                        }
                        .into_iter()
                        .filter(|_| pool_ego),
                    )
                    .collect();
                let ego_disp: Option<TensorId> = match ego_decode {
                    EgoDecode::Absent => None,
                    EgoDecode::Frozen => Some(g.row(&zero2)),
                    EgoDecode::Plan => {
                        let cur = plan_at(t);
                        let prev = if t == t_obs + 1 {
                            pos_at(ego_id.expect("plan needs ego"), t_obs)
                        } else {
                            plan_at(t - 1)
                        };
                        Some(g.row(&[cur[0] - prev[0], cur[1] - prev[1]]))
                    }
                    EgoDecode::Predicted(pi) => {
                        let diff = g.sub(last_pos[pi], prev_pos[pi])?;
                        Some(diff)
                    }
                };
                let plan_points: Vec<TensorId> = if has_plan {
                    (t + 1..=t_pred).map(|k| g.row(&plan_at(k))).collect()
                } else {
                    Vec::new()
                };
                let (fst, h_next) = self.ain_step(
                    g,
                    bp,
                    toggles,
                    AinInputs {
                        positions,
                        hiddens,
                        ego_disp,
                        plan_points,
                    },
                    h_gru_m,
                    &scenario.id,
                )?;
                h_gru_m = h_next;

                // per-step raster recentered on the ego when configured
                let step_fm: Option<(TensorId, EgoPose)> = if use_map {
                    if self.cfg.per_frame_centering {
                        let pose = match ego_decode {
                            EgoDecode::Predicted(pi) => {
                                let dp = g.data(last_pos[pi]);
                                EgoPose::at(dp[0], dp[1])
                            }
                            _ => raster_center_at(t),
                        };
                        let img = rasterize(map_ref, &pose, raster_cfg);
                        let img_id = g.tensor(img.as_tensor());
                        Some((self.env.encode_map(g, bp, img_id)?, pose))
                    } else {
                        encode_fm
                    }
                } else {
                    None
                };

                for i in 0..n_pred {
                    let disp = g.sub(last_pos[i], prev_pos[i])?;
                    let e_p = self.embed_disp(g, bp, disp)?;
                    let v = roi_or_zero(g, &step_fm, last_pos[i])?;
                    let q = self.attention(g, bp, last_pos[i], fst)?;
                    let x = g.concat(&[e_p, v, q], 1)?;
                    dec_states[i] = self.dec.step(g, bp, x, dec_states[i]);
                    let delta = self.head(g, bp, dec_states[i].h)?;
                    let next = g.add(last_pos[i], delta)?;
                    trajs[i].push(next);
                }
                prev_pos = last_pos;
                last_pos = trajs.iter().map(|tr| *tr.last().expect("pushed")).collect();
            }

            all_positions.push(trajs);
            all_noise.push(noise_leaves);
        }

        Ok(Rollout {
            predicted_ids,
            horizon,
            positions: all_positions,
            noise_leaves: all_noise,
        })
    }
}

/// Variety-loss result, still attached to the graph.
pub struct VarietyLoss {
    pub loss: TensorId,
    /// Scene mode: one winner; agent mode: one winner per predicted agent.
    pub winners: Vec<usize>,
    /// Total squared error per modality (for logging either mode).
    pub modality_errors: Vec<f64>,
}

/// Squared-error variety loss: only the winning modality (lowest summed
/// squared error; ties take the lowest index) contributes gradient. The
/// normalizer is (predicted agents) x (predicted steps).
pub fn variety_loss(
    g: &mut Graph,
    rollout: &Rollout,
    scenario: &Scenario,
    mode: VarietyMin,
) -> Result<VarietyLoss, ModelError> {
    let contract = |reason: String| ModelError::Contract {
        id: scenario.id.clone(),
        reason,
    };
    let h = rollout.modalities();
    let n = rollout.predicted_ids.len();
    let t = rollout.horizon;
    if h == 0 || n == 0 || t == 0 {
        return Err(contract("empty prediction set".into()));
    }
    let norm = 1.0 / (n as f64 * t as f64);

    // per (modality, agent) squared-error scalars
    let mut per_agent: Vec<Vec<TensorId>> = Vec::with_capacity(h);
    for traj in &rollout.positions {
        let mut row = Vec::with_capacity(n);
        for (i, &id) in rollout.predicted_ids.iter().enumerate() {
            let mut acc: Option<TensorId> = None;
            for (k, &p_hat) in traj[i].iter().enumerate() {
                let frame = scenario.t_obs + 1 + k;
                let truth = scenario
                    .track(id)
                    .and_then(|tr| tr.position_at(frame))
                    .ok_or_else(|| contract(format!("agent {id} missing truth at t={frame}")))?;
                let truth_row = g.row(&truth);
                let diff = g.sub(p_hat, truth_row)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum_all(sq);
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            row.push(acc.expect("t >= 1"));
        }
        per_agent.push(row);
    }

    let scene_sum = |g: &mut Graph, row: &[TensorId]| -> Result<TensorId, TensorError> {
        let mut acc = row[0];
        for &s in &row[1..] {
            acc = g.add(acc, s)?;
        }
        Ok(acc)
    };

    match mode {
        VarietyMin::Scene => {
            let sums: Vec<TensorId> = per_agent
                .iter()
                .map(|row| scene_sum(g, row))
                .collect::<Result<_, _>>()?;
            let errors: Vec<f64> = sums.iter().map(|&s| g.data(s)[0]).collect();
            let winner = argmin(&errors);
            let loss = g.scale(sums[winner], norm);
            Ok(VarietyLoss {
                loss,
                winners: vec![winner],
                modality_errors: errors,
            })
        }
        VarietyMin::Agent => {
            let mut winners = Vec::with_capacity(n);
            let mut picked: Vec<TensorId> = Vec::with_capacity(n);
            for i in 0..n {
                let errs: Vec<f64> = (0..h).map(|j| g.data(per_agent[j][i])[0]).collect();
                let w = argmin(&errs);
                winners.push(w);
                picked.push(per_agent[w][i]);
            }
            let total = scene_sum(g, &picked)?;
            let loss = g.scale(total, norm);
            let modality_errors: Vec<f64> = (0..h)
                .map(|j| (0..n).map(|i| g.data(per_agent[j][i])[0]).sum())
                .collect();
            Ok(VarietyLoss {
                loss,
                winners,
                modality_errors,
            })
        }
    }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
