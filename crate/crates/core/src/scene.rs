//! Scenario data model, ingestion, windowing, coordinate frames, and a
//! synthetic generator.
//!
//! A scenario is a fixed window of `t_pred` frames, indexed 1..=t_pred, of
//! which the first `t_obs` are observed. Every included agent covers the
//! whole window; agents with gaps are dropped at load time and counted.
//! Agent id 0 is the ego by convention when present. The optional ego plan
//! covers exactly frames t_obs+1..=t_pred.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::HdMap;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("scenario json {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("map referenced by scenario: {0}")]
    Map(#[from] crate::map::MapError),
    #[error("scenario {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("scenario {id} has no ego track (required for this operation)")]
    MissingEgo { id: String },
    #[error("unknown template {0:?} (expected crossing_pedestrians, lane_following_vehicle, or ego_with_plan)")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub t: usize,
    pub pos: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: i64,
    /// Strictly increasing frame indices.
    pub points: Vec<TrackPoint>,
}

impl AgentTrack {
    pub fn position_at(&self, t: usize) -> Option<[f64; 2]> {
        self.points
            .binary_search_by_key(&t, |p| p.t)
            .ok()
            .map(|i| self.points[i].pos)
    }

    fn covers(&self, from: usize, to: usize) -> bool {
        (from..=to).all(|t| self.position_at(t).is_some())
    }
}

/// A time-slice view: every agent's position at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: usize,
    pub agents: Vec<(i64, [f64; 2])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub tracks: Vec<AgentTrack>,
    pub ego_id: Option<i64>,
    /// Ego positions for frames t_obs+1..=t_pred, in frame order.
    pub ego_plan: Option<Vec<[f64; 2]>>,
    pub map: Option<HdMap>,
    pub t_obs: usize,
    pub t_pred: usize,
    /// World origin subtracted so far by [`Scenario::to_relative_frame`];
    /// keeps map/world bookkeeping consistent after re-centering.
    pub frame_origin: [f64; 2],
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |reason: String| {
            Err(SceneError::Invalid {
                id: self.id.clone(),
                reason,
            })
        };
        if self.t_obs >= self.t_pred {
            return fail(format!("t_obs {} must be < t_pred {}", self.t_obs, self.t_pred));
        }
        if self.t_obs == 0 {
            return fail("t_obs must be at least 1".into());
        }
        if self.tracks.is_empty() {
            return fail("no tracks".into());
        }
        let mut seen = std::collections::HashSet::new();
        for track in &self.tracks {
            if !seen.insert(track.agent_id) {
                return fail(format!("duplicate agent id {}", track.agent_id));
            }
            for pair in track.points.windows(2) {
                if pair[1].t <= pair[0].t {
                    return fail(format!(
                        "agent {}: frame indices not strictly increasing at t={}",
                        track.agent_id, pair[1].t
                    ));
                }
            }
            if !track.covers(1, self.t_obs) {
                return fail(format!(
                    "agent {} does not cover observation frames 1..={}",
                    track.agent_id, self.t_obs
                ));
            }
        }
        if let Some(ego) = self.ego_id {
            if !seen.contains(&ego) {
                return fail(format!("ego id {ego} has no track"));
            }
        }
        if let Some(plan) = &self.ego_plan {
            if self.ego_id.is_none() {
                return fail("ego_plan given without ego_id".into());
            }
            if plan.len() != self.t_pred - self.t_obs {
                return fail(format!(
                    "ego_plan has {} points; needs exactly t_pred-t_obs = {}",
                    plan.len(),
                    self.t_pred - self.t_obs
                ));
            }
        }
        Ok(())
    }

    pub fn track(&self, agent_id: i64) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.agent_id == agent_id)
    }

    pub fn ego_track(&self) -> Option<&AgentTrack> {
        self.ego_id.and_then(|id| self.track(id))
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            t,
            agents: self
                .tracks
                .iter()
                .filter_map(|tr| tr.position_at(t).map(|p| (tr.agent_id, p)))
                .collect(),
        }
    }

    /// Split frames into (observed 1..=t_obs, future t_obs+1..=t_pred).
    pub fn window(&self) -> (Vec<Frame>, Vec<Frame>) {
        let observed = (1..=self.t_obs).map(|t| self.frame(t)).collect();
        let future = (self.t_obs + 1..=self.t_pred).map(|t| self.frame(t)).collect();
        (observed, future)
    }

    /// Subtract the ego position at t_obs from every coordinate (tracks,
    /// plan, and map), recording the shift in `frame_origin`. Idempotent
    /// after the first application: the ego then sits at (0,0) at t_obs.
    pub fn to_relative_frame(&self) -> Result<Scenario, SceneError> {
        let ego = self.ego_track().ok_or(SceneError::MissingEgo {
            id: self.id.clone(),
        })?;
        let origin = ego
            .position_at(self.t_obs)
            .ok_or(SceneError::MissingEgo {
                id: self.id.clone(),
            })?;
        let shift = |p: [f64; 2]| [p[0] - origin[0], p[1] - origin[1]];
        Ok(Scenario {
            id: self.id.clone(),
            tracks: self
                .tracks
                .iter()
                .map(|tr| AgentTrack {
                    agent_id: tr.agent_id,
                    points: tr
                        .points
                        .iter()
                        .map(|p| TrackPoint {
                            t: p.t,
                            pos: shift(p.pos),
                        })
                        .collect(),
                })
                .collect(),
            ego_id: self.ego_id,
            ego_plan: self
                .ego_plan
                .as_ref()
                .map(|plan| plan.iter().map(|&p| shift(p)).collect()),
            map: self
                .map
                .as_ref()
                .map(|m| m.translated(-origin[0], -origin[1])),
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            frame_origin: [
                self.frame_origin[0] + origin[0],
                self.frame_origin[1] + origin[1],
            ],
        })
    }

    /// Agents that cover the entire window and therefore participate in
    /// training loss and metrics.
    pub fn fully_covered_agents(&self) -> Vec<i64> {
        self.tracks
            .iter()
            .filter(|tr| tr.covers(1, self.t_pred))
            .map(|tr| tr.agent_id)
            .collect()
    }

    /// Agents that receive predictions: fully covered tracks, minus the
    /// ego when a plan is supplied (the plan replaces its prediction).
    pub fn predicted_agents(&self) -> Vec<i64> {
        let skip_ego = self.ego_plan.is_some();
        self.fully_covered_agents()
            .into_iter()
            .filter(|&id| !(skip_ego && Some(id) == self.ego_id))
            .collect()
    }
}

// ---- plain-text ingestion ----

/// Parse whitespace-separated "frame_id agent_id x y" lines ('#' starts a
/// comment), then cut the frame sequence into consecutive non-overlapping
/// windows of `t_pred` frames, renumbered 1..=t_pred. Agents missing any
/// frame of a window are dropped from it; the count of such drops is
/// returned alongside the scenarios.
pub fn load_plain_text(
    path: &Path,
    t_obs: usize,
    t_pred: usize,
) -> Result<(Vec<Scenario>, usize), SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scenarios".into());
    parse_plain_text(&text, &path.display().to_string(), &stem, t_obs, t_pred)
}

fn parse_plain_text(
    text: &str,
    path: &str,
    stem: &str,
    t_obs: usize,
    t_pred: usize,
) -> Result<(Vec<Scenario>, usize), SceneError> {
    // (frame, agent) -> position
    let mut rows: BTreeMap<i64, BTreeMap<i64, [f64; 2]>> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| SceneError::Parse {
            path: path.to_string(),
            line: lineno + 1,
            reason,
        };
        if fields.len() != 4 {
            return Err(err(format!(
                "expected 4 fields (frame_id agent_id x y), got {}",
                fields.len()
            )));
        }
        let int_field = |s: &str, what: &str| -> Result<i64, SceneError> {
            let v: f64 = s
                .parse()
                .map_err(|_| err(format!("{what} {s:?} is not a number")))?;
            if v.fract() != 0.0 {
                return Err(err(format!("{what} {s:?} is not an integer")));
            }
            Ok(v as i64)
        };
        let frame = int_field(fields[0], "frame_id")?;
        let agent = int_field(fields[1], "agent_id")?;
        let x: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("x {:?} is not a number", fields[2])))?;
        let y: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("y {:?} is not a number", fields[3])))?;
        rows.entry(frame).or_default().insert(agent, [x, y]);
    }

    let frames: Vec<i64> = rows.keys().copied().collect();
    let mut scenarios = Vec::new();
    let mut dropped = 0usize;
    for (w, chunk) in frames.chunks(t_pred).enumerate() {
        if chunk.len() < t_pred {
            break; // incomplete tail window
        }
        // agents present at every frame of the window
        let mut agents: Vec<i64> = rows[&chunk[0]].keys().copied().collect();
        let mut all_agents: std::collections::BTreeSet<i64> = std::collections::BTreeSet::new();
        for f in chunk {
            all_agents.extend(rows[f].keys().copied());
        }
        agents.retain(|a| chunk.iter().all(|f| rows[f].contains_key(a)));
        dropped += all_agents.len() - agents.len();
        if agents.is_empty() {
            continue;
        }
        let tracks = agents
            .iter()
            .map(|&agent_id| AgentTrack {
                agent_id,
                points: chunk
                    .iter()
                    .enumerate()
                    .map(|(i, f)| TrackPoint {
                        t: i + 1,
                        pos: rows[f][&agent_id],
                    })
                    .collect(),
            })
            .collect::<Vec<_>>();
        let ego_id = agents.contains(&0).then_some(0);
        let scenario = Scenario {
            id: format!("{stem}_w{w}"),
            tracks,
            ego_id,
            ego_plan: None,
            map: None,
            t_obs,
            t_pred,
            frame_origin: [0.0, 0.0],
        };
        scenario.validate()?;
        scenarios.push(scenario);
    }
    Ok((scenarios, dropped))
}

/// Write scenarios back to the plain-text format; window `k` occupies
/// frames k*t_pred+1 .. (k+1)*t_pred, so a reload reproduces the same
/// windows. Plans and maps are not representable in this format.
pub fn save_plain_text(scenarios: &[Scenario], path: &Path) -> Result<(), SceneError> {
    let mut out = String::new();
    for (w, s) in scenarios.iter().enumerate() {
        for t in 1..=s.t_pred {
            let global = w * s.t_pred + t;
            for track in &s.tracks {
                if let Some(p) = track.position_at(t) {
                    out.push_str(&format!("{global} {} {} {}\n", track.agent_id, p[0], p[1]));
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---- scenario json ----

#[derive(Serialize, Deserialize)]
struct TrackDoc {
    id: i64,
    points: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioDoc {
    ego_id: Option<i64>,
    t_obs: usize,
    t_pred: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    map: Option<String>,
    tracks: Vec<TrackDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ego_plan: Option<Vec<[f64; 3]>>,
}

/// Load one scenario document; a relative "map" path resolves against the
/// scenario file's directory. The scenario id is the file stem.
pub fn load_scenario_json(path: &Path) -> Result<Scenario, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let doc: ScenarioDoc = serde_json::from_str(&text).map_err(|source| SceneError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scenario".into());
    let map = match &doc.map {
        Some(rel) => {
            let map_path = path.parent().unwrap_or(Path::new(".")).join(rel);
            Some(HdMap::load(&map_path)?)
        }
        None => None,
    };
    let fail = |reason: String| SceneError::Invalid {
        id: id.clone(),
        reason,
    };
    let mut ego_plan = None;
    if let Some(plan) = &doc.ego_plan {
        let mut points = Vec::with_capacity(plan.len());
        for (i, row) in plan.iter().enumerate() {
            let expect = (doc.t_obs + 1 + i) as f64;
            if row[0] != expect {
                return Err(fail(format!(
                    "ego_plan[{i}] has t={} but must cover t_obs+1..=t_pred contiguously (expected {expect})",
                    row[0]
                )));
            }
            points.push([row[1], row[2]]);
        }
        ego_plan = Some(points);
    }
    let tracks = doc
        .tracks
        .iter()
        .map(|td| AgentTrack {
            agent_id: td.id,
            points: td
                .points
                .iter()
                .map(|row| TrackPoint {
                    t: row[0] as usize,
                    pos: [row[1], row[2]],
                })
                .collect(),
        })
        .collect();
    let scenario = Scenario {
        id,
        tracks,
        ego_id: doc.ego_id,
        ego_plan,
        map,
        t_obs: doc.t_obs,
        t_pred: doc.t_pred,
        frame_origin: [0.0, 0.0],
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Write `<id>.json` (and `<id>_map.json` when a map is attached) into
/// `dir`; returns the scenario file path.
pub fn save_scenario_json(s: &Scenario, dir: &Path) -> Result<std::path::PathBuf, SceneError> {
    let io_err = |source: std::io::Error| SceneError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let map_name = match &s.map {
        Some(map) => {
            let name = format!("{}_map.json", s.id);
            let text = serde_json::to_string(map).expect("map serialization");
            std::fs::write(dir.join(&name), text).map_err(io_err)?;
            Some(name)
        }
        None => None,
    };
    let doc = ScenarioDoc {
        ego_id: s.ego_id,
        t_obs: s.t_obs,
        t_pred: s.t_pred,
        map: map_name,
        tracks: s
            .tracks
            .iter()
            .map(|tr| TrackDoc {
                id: tr.agent_id,
                points: tr
                    .points
                    .iter()
                    .map(|p| [p.t as f64, p.pos[0], p.pos[1]])
                    .collect(),
            })
            .collect(),
        ego_plan: s.ego_plan.as_ref().map(|plan| {
            plan.iter()
                .enumerate()
                .map(|(i, p)| [(s.t_obs + 1 + i) as f64, p[0], p[1]])
                .collect()
        }),
    };
    let path = dir.join(format!("{}.json", s.id));
    let text = serde_json::to_string_pretty(&doc).expect("scenario serialization");
    std::fs::write(&path, text).map_err(io_err)?;
    Ok(path)
}

/// Load every `*.json` scenario in a directory (non-recursive), sorted by
/// file name. Files ending in `_map.json` are skipped (they are referenced
/// by scenarios, not scenarios themselves).
pub fn load_scenario_dir(dir: &Path) -> Result<Vec<Scenario>, SceneError> {
    let io_err = |source: std::io::Error| SceneError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "json")
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with("_map.json"))
        })
        .collect();
    files.sort();
    files.iter().map(|p| load_scenario_json(p)).collect()
}

// ---- synthetic generation ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    CrossingPedestrians,
    LaneFollowingVehicle,
    EgoWithPlan,
}

impl std::str::FromStr for Template {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, SceneError> {
        match s {
            "crossing_pedestrians" | "crossing" => Ok(Template::CrossingPedestrians),
            "lane_following_vehicle" | "lane" => Ok(Template::LaneFollowingVehicle),
            "ego_with_plan" | "ego" => Ok(Template::EgoWithPlan),
            other => Err(SceneError::UnknownTemplate(other.to_string())),
        }
    }
}

/// Generator knobs. The social-force constants follow common crowd-model
/// magnitudes (relaxation 0.5 s, repulsion 2.0 at range 0.8 m, step 0.4 s)
/// and are exposed, not tuned claims.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub template: Template,
    pub count: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub pedestrians: usize,
    pub dt_s: f64,
    pub relaxation_s: f64,
    pub repulsion: f64,
    pub repulsion_range_m: f64,
    pub lane_noise_m: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            template: Template::CrossingPedestrians,
            count: 1,
            t_obs: 6,
            t_pred: 12,
            pedestrians: 4,
            dt_s: 0.4,
            relaxation_s: 0.5,
            repulsion: 2.0,
            repulsion_range_m: 0.8,
            lane_noise_m: 0.0,
        }
    }
}

/// Internal Euler updates per recorded frame. A raw step of dt_s through a
/// close encounter carries >10% error in minimum clearance; sub-stepping
/// keeps the recorded frames at dt_s while integrating accurately.
pub const EULER_SUBSTEPS: usize = 8;

/// Two-term social-force integrator: relaxation toward a desired velocity
/// plus exponential repulsion from other agents and point obstacles.
/// Forward Euler, sub-stepped [`EULER_SUBSTEPS`] times per frame.
pub struct SocialSim<'a> {
    pub spec: &'a SyntheticSpec,
}

impl SocialSim<'_> {
    /// Advance one frame (dt_s). `obstacles` are (position, force
    /// multiplier) pairs that repel but do not move (e.g. the ego vehicle
    /// at this instant).
    pub fn step(
        &self,
        pos: &mut [[f64; 2]],
        vel: &mut [[f64; 2]],
        desired: &[[f64; 2]],
        obstacles: &[([f64; 2], f64)],
    ) {
        let s = self.spec;
        let n = pos.len();
        let dt = s.dt_s / EULER_SUBSTEPS as f64;
        let mut force = vec![[0.0; 2]; n];
        for _ in 0..EULER_SUBSTEPS {
            for i in 0..n {
                force[i][0] = (desired[i][0] - vel[i][0]) / s.relaxation_s;
                force[i][1] = (desired[i][1] - vel[i][1]) / s.relaxation_s;
                let mut push = |src: [f64; 2], weight: f64| {
                    let dx = pos[i][0] - src[0];
                    let dy = pos[i][1] - src[1];
                    let d = (dx * dx + dy * dy).sqrt();
                    if d > 1e-9 {
                        let mag = weight * s.repulsion * (-d / s.repulsion_range_m).exp();
                        force[i][0] += mag * dx / d;
                        force[i][1] += mag * dy / d;
                    }
                };
                for j in 0..n {
                    if j != i {
                        push(pos[j], 1.0);
                    }
                }
                for &(p, w) in obstacles {
                    push(p, w);
                }
            }
            for i in 0..n {
                vel[i][0] += dt * force[i][0];
                vel[i][1] += dt * force[i][1];
                pos[i][0] += dt * vel[i][0];
                pos[i][1] += dt * vel[i][1];
            }
        }
    }
}

/// Deterministic per-scenario generation: same spec and seed give bitwise
/// identical output regardless of generation order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Vec<Scenario> {
    (0..spec.count)
        .map(|index| match spec.template {
            Template::CrossingPedestrians => gen_crossing(spec, seed, index),
            Template::LaneFollowingVehicle => gen_lane(spec, seed, index),
            Template::EgoWithPlan => gen_ego_with_plan(spec, seed, index),
        })
        .collect()
}

fn scenario_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15))
}

fn tracks_from_history(history: &[Vec<[f64; 2]>]) -> Vec<AgentTrack> {
    // history[t][agent]; output frames are 1-based
    let n = history[0].len();
    (0..n)
        .map(|a| AgentTrack {
            agent_id: a as i64,
            points: history
                .iter()
                .enumerate()
                .map(|(t, frame)| TrackPoint {
                    t: t + 1,
                    pos: frame[a],
                })
                .collect(),
        })
        .collect()
}

/// Pedestrians on a circle heading to diametrically opposite goals, with
/// mutual repulsion. Agent 0 doubles as the nominal ego (no plan, no map).
fn gen_crossing(spec: &SyntheticSpec, seed: u64, index: usize) -> Scenario {
    let mut rng = scenario_rng(seed, index as u64 + 1);
    let n = spec.pedestrians.max(1);
    let radius = 6.0;
    let mut pos = Vec::with_capacity(n);
    let mut vel = Vec::with_capacity(n);
    let mut desired = Vec::with_capacity(n);
    for k in 0..n {
        let angle = 2.0 * std::f64::consts::PI * (k as f64 / n as f64)
            + rng.random_range(-0.25..0.25);
        let speed = rng.random_range(1.0..1.5);
        let start = [radius * angle.cos(), radius * angle.sin()];
        // goal is the antipode: desired velocity points through the center
        let v = [-speed * angle.cos(), -speed * angle.sin()];
        pos.push(start);
        vel.push(v); // start at desired speed: force-free limit is straight
        desired.push(v);
    }
    let sim = SocialSim { spec };
    let mut history = vec![pos.clone()];
    for _ in 1..spec.t_pred {
        sim.step(&mut pos, &mut vel, &desired, &[]);
        history.push(pos.clone());
    }
    Scenario {
        id: format!("crossing_{index:04}"),
        tracks: tracks_from_history(&history),
        ego_id: Some(0),
        ego_plan: None,
        map: None,
        t_obs: spec.t_obs,
        t_pred: spec.t_pred,
        frame_origin: [0.0, 0.0],
    }
}

/// Walk a polyline by arc length; `s` beyond the end extrapolates the last
/// segment's direction so constant speed never stalls.
fn point_at_arclength(line: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut remaining = s;
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if remaining <= len {
            let t = remaining / len;
            return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        }
        remaining -= len;
    }
    let k = line.len() - 1;
    let (a, b) = (line[k - 1], line[k]);
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let t = remaining / len;
    [b[0] + t * (b[0] - a[0]), b[1] + t * (b[1] - a[1])]
}

/// Vehicles following parallel lane centerlines at constant speed, with
/// optional perpendicular noise. Zero noise keeps every position exactly
/// on its centerline.
fn gen_lane(spec: &SyntheticSpec, seed: u64, index: usize) -> Scenario {
    let mut rng = scenario_rng(seed, index as u64 + 1);
    let n = spec.pedestrians.max(1); // vehicle count for this template
    let mut centerlines = Vec::with_capacity(n);
    let mut tracks = Vec::with_capacity(n);
    for v in 0..n {
        let y0 = (v as f64) * 3.5 - 1.75 * (n as f64 - 1.0);
        let bend = rng.random_range(-6.0..6.0);
        let line = vec![[-40.0, y0], [0.0, y0], [40.0, y0 + bend]];
        let speed = rng.random_range(4.0..9.0);
        let s0 = rng.random_range(0.0..12.0);
        let points = (1..=spec.t_pred)
            .map(|t| {
                let mut p = point_at_arclength(&line, s0 + speed * spec.dt_s * (t - 1) as f64);
                if spec.lane_noise_m > 0.0 {
                    p[0] += rng.random_range(-spec.lane_noise_m..spec.lane_noise_m);
                    p[1] += rng.random_range(-spec.lane_noise_m..spec.lane_noise_m);
                }
                TrackPoint { t, pos: p }
            })
            .collect();
        centerlines.push(line);
        tracks.push(AgentTrack {
            agent_id: v as i64,
            points,
        });
    }
    Scenario {
        id: format!("lane_{index:04}"),
        tracks,
        ego_id: Some(0),
        ego_plan: None,
        map: Some(HdMap { centerlines }),
        t_obs: spec.t_obs,
        t_pred: spec.t_pred,
        frame_origin: [0.0, 0.0],
    }
}

/// Ego drives a straight lane with a planned post-observation speed change;
/// pedestrians follow a crosswalk whose bend direction flips with the
/// scenario index parity. Scenario pairs (2k, 2k+1) share all randomness
/// drawn before the member-specific bend/speed draws, so their observed
/// frames coincide while futures diverge. The map (lane + bent crosswalk)
/// and the ego plan carry the disambiguating signal.
fn gen_ego_with_plan(spec: &SyntheticSpec, seed: u64, index: usize) -> Scenario {
    let pair = (index / 2) as u64;
    let member = index % 2;
    let mut rng = scenario_rng(seed, pair.wrapping_add(0x517cc1b727220a95));

    // shared draws (identical within a pair)
    let ego_speed = rng.random_range(2.2..2.8);
    let ped_speed = rng.random_range(1.1..1.4);
    let n_peds = spec.pedestrians.max(1);
    let ped_gaps: Vec<f64> = (0..n_peds).map(|_| rng.random_range(1.0..1.8)).collect();
    let ped_side: Vec<f64> = (0..n_peds)
        .map(|_| rng.random_range(-0.3..0.3))
        .collect();
    let speed_mults = [0.6, 1.0, 1.4];
    let shared_mult_a = speed_mults[rng.random_range(0..3)];
    let shared_mult_b = speed_mults[rng.random_range(0..3)];

    // member-specific: bend sign and which shared multiplier applies
    let bend_sign: f64 = if member == 0 { 1.0 } else { -1.0 };
    let mult = if member == 0 {
        shared_mult_a
    } else {
        shared_mult_b
    };

    let dt = spec.dt_s;
    let t_obs = spec.t_obs;
    let t_pred = spec.t_pred;

    // ego heads east on y=0 and reaches the crosswalk (x=0) near t_obs+2
    let cross_eta = (t_obs + 2).min(t_pred) as f64;
    let ego_x0 = -ego_speed * dt * (cross_eta - 1.0);
    let mut ego_positions = Vec::with_capacity(t_pred);
    let mut x = ego_x0;
    for t in 1..=t_pred {
        ego_positions.push([x, 0.0]);
        let v = if t >= t_obs { ego_speed * mult } else { ego_speed };
        let _ = t;
        x += v * dt;
    }

    // crosswalk: walk north along x=0, bend at the lead pedestrian's t_obs
    // position, then continue rotated by the signed bend angle
    let bend_angle = bend_sign * 0.6; // ~34 degrees
    let y_bend = -1.6;
    let lead_y0 = y_bend - ped_speed * dt * (t_obs as f64 - 1.0);
    let crosswalk = vec![
        [0.0, lead_y0 - 4.0],
        [0.0, y_bend],
        [
            bend_angle.sin() * 10.0,
            y_bend + bend_angle.cos() * 10.0,
        ],
    ];
    let lane = vec![[ego_x0 - 6.0, 0.0], [ego_speed * 1.6 * dt * t_pred as f64 + 6.0, 0.0]];

    // pedestrians queue along the crosswalk behind the lead
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(n_peds);
    let mut gap_acc = 0.0;
    for k in 0..n_peds {
        if k > 0 {
            gap_acc += ped_gaps[k];
        }
        pos.push([ped_side[k], lead_y0 - gap_acc]);
    }
    let mut vel: Vec<[f64; 2]> = vec![[0.0, ped_speed]; n_peds];
    let sim = SocialSim { spec };
    let mut ped_history = vec![pos.clone()];
    for t in 2..=t_pred {
        // desired velocity follows the crosswalk tangent at each position
        let desired: Vec<[f64; 2]> = pos
            .iter()
            .map(|p| {
                if p[1] < y_bend {
                    [0.0, ped_speed]
                } else {
                    [ped_speed * bend_angle.sin(), ped_speed * bend_angle.cos()]
                }
            })
            .collect();
        let ego_now = ego_positions[t - 2]; // ego repels from its current spot
        sim.step(&mut pos, &mut vel, &desired, &[(ego_now, 3.0)]);
        ped_history.push(pos.clone());
    }

    let mut tracks = vec![AgentTrack {
        agent_id: 0,
        points: ego_positions
            .iter()
            .enumerate()
            .map(|(i, &p)| TrackPoint { t: i + 1, pos: p })
            .collect(),
    }];
    for (k, _) in (0..n_peds).enumerate() {
        tracks.push(AgentTrack {
            agent_id: (k + 1) as i64,
            points: ped_history
                .iter()
                .enumerate()
                .map(|(i, frame)| TrackPoint {
                    t: i + 1,
                    pos: frame[k],
                })
                .collect(),
        });
    }
    Scenario {
        id: format!("egoplan_{index:04}"),
        tracks,
        ego_id: Some(0),
        ego_plan: Some(ego_positions[t_obs..].to_vec()),
        map: Some(HdMap {
            centerlines: vec![lane, crosswalk],
        }),
        t_obs,
        t_pred,
        frame_origin: [0.0, 0.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn plain_text_two_lines_single_window() {
        let (scenarios, dropped) =
            parse_plain_text("1 0 0.0 0.0\n2 0 1.0 0.0\n", "mem", "mem", 1, 2).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(scenarios.len(), 1);
        let s = &scenarios[0];
        assert_eq!(s.tracks.len(), 1);
        assert_eq!(s.ego_id, Some(0));
        assert_eq!(s.track(0).unwrap().position_at(2), Some([1.0, 0.0]));
    }

    #[test]
    fn plain_text_drops_partial_agents_with_count() {
        // agent 7 appears only at frame 3 of an 8-frame window
        let mut text = String::new();
        for f in 1..=8 {
            text.push_str(&format!("{f} 0 {}.0 0.0\n", f));
        }
        text.push_str("3 7 9.0 9.0\n");
        let (scenarios, dropped) = parse_plain_text(&text, "mem", "mem", 4, 8).unwrap();
        assert_eq!(scenarios.len(), 1);
        assert_eq!(dropped, 1);
        assert!(scenarios[0].track(7).is_none());
    }

    #[test]
    fn plain_text_comments_and_errors_carry_line_numbers() {
        let text = "# header\n1 0 0.0 0.0\noops\n";
        let err = parse_plain_text(text, "f.txt", "f", 1, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f.txt:3"), "{msg}");

        let empty = parse_plain_text("# nothing\n", "f.txt", "f", 1, 2).unwrap();
        assert_eq!(empty.0.len(), 0);
    }

    #[test]
    fn plain_text_round_trip_preserves_numbers() {
        let spec = SyntheticSpec {
            template: Template::CrossingPedestrians,
            count: 3,
            pedestrians: 3,
            ..Default::default()
        };
        let scenarios = generate_synthetic(&spec, 5);
        let dir = tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        save_plain_text(&scenarios, &path).unwrap();
        let (loaded, dropped) = load_plain_text(&path, spec.t_obs, spec.t_pred).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(loaded.len(), scenarios.len());
        for (a, b) in scenarios.iter().zip(&loaded) {
            assert_eq!(a.tracks.len(), b.tracks.len());
            for (ta, tb) in a.tracks.iter().zip(&b.tracks) {
                assert_eq!(ta.agent_id, tb.agent_id);
                for (pa, pb) in ta.points.iter().zip(&tb.points) {
                    assert_eq!(pa.t, pb.t);
                    assert_eq!(pa.pos, pb.pos, "positions survive the text round trip");
                }
            }
        }
    }

    #[test]
    fn scenario_json_round_trip_with_map_and_plan() {
        let spec = SyntheticSpec {
            template: Template::EgoWithPlan,
            count: 2,
            pedestrians: 2,
            ..Default::default()
        };
        let scenarios = generate_synthetic(&spec, 11);
        let dir = tempdir().unwrap();
        for s in &scenarios {
            save_scenario_json(s, dir.path()).unwrap();
        }
        let loaded = load_scenario_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), scenarios.len());
        for (a, b) in scenarios.iter().zip(&loaded) {
            assert_eq!(a, b, "json round trip is exact");
        }
    }

    #[test]
    fn window_partitions_frames() {
        let spec = SyntheticSpec {
            count: 1,
            ..Default::default()
        };
        let s = &generate_synthetic(&spec, 1)[0];
        let (obs, fut) = s.window();
        assert_eq!(obs.len(), s.t_obs);
        assert_eq!(fut.len(), s.t_pred - s.t_obs);
        assert_eq!(obs[0].t, 1);
        assert_eq!(fut[0].t, s.t_obs + 1);
        assert_eq!(fut.last().unwrap().t, s.t_pred);
        let total: usize = obs.len() + fut.len();
        assert_eq!(total, s.t_pred);
    }

    #[test]
    fn relative_frame_zeroes_ego_and_is_idempotent() {
        let spec = SyntheticSpec {
            template: Template::EgoWithPlan,
            count: 1,
            pedestrians: 2,
            ..Default::default()
        };
        let s = &generate_synthetic(&spec, 3)[0];
        let rel = s.to_relative_frame().unwrap();
        let ego_at_tobs = rel.ego_track().unwrap().position_at(rel.t_obs).unwrap();
        assert_eq!(ego_at_tobs, [0.0, 0.0]);
        let rel2 = rel.to_relative_frame().unwrap();
        assert_eq!(rel, rel2);
        // pairwise distances preserved at every frame
        for t in 1..=s.t_pred {
            let f0 = s.frame(t);
            let f1 = rel.frame(t);
            for i in 0..f0.agents.len() {
                for j in i + 1..f0.agents.len() {
                    let d = |f: &Frame, i: usize, j: usize| {
                        let (a, b) = (f.agents[i].1, f.agents[j].1);
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                    };
                    assert!((d(&f0, i, j) - d(&f1, i, j)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn relative_frame_requires_ego() {
        let spec = SyntheticSpec {
            count: 1,
            ..Default::default()
        };
        let mut s = generate_synthetic(&spec, 1)[0].clone();
        s.ego_id = None;
        assert!(matches!(
            s.to_relative_frame(),
            Err(SceneError::MissingEgo { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            template: Template::EgoWithPlan,
            count: 4,
            ..Default::default()
        };
        let a = generate_synthetic(&spec, 42);
        let b = generate_synthetic(&spec, 42);
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn crossing_without_repulsion_is_straight() {
        let spec = SyntheticSpec {
            template: Template::CrossingPedestrians,
            count: 1,
            pedestrians: 3,
            repulsion: 0.0,
            ..Default::default()
        };
        let s = &generate_synthetic(&spec, 9)[0];
        for track in &s.tracks {
            // constant velocity: second differences vanish
            let p: Vec<[f64; 2]> = track.points.iter().map(|tp| tp.pos).collect();
            for w in p.windows(3) {
                let ddx = (w[2][0] - w[1][0]) - (w[1][0] - w[0][0]);
                let ddy = (w[2][1] - w[1][1]) - (w[1][1] - w[0][1]);
                assert!(ddx.abs() < 1e-9 && ddy.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lane_following_zero_noise_lies_on_centerline() {
        let spec = SyntheticSpec {
            template: Template::LaneFollowingVehicle,
            count: 2,
            pedestrians: 2,
            lane_noise_m: 0.0,
            ..Default::default()
        };
        for s in &generate_synthetic(&spec, 21) {
            let map = s.map.as_ref().unwrap();
            for (track, line) in s.tracks.iter().zip(&map.centerlines) {
                for tp in &track.points {
                    let d2 = line
                        .windows(2)
                        .map(|seg| {
                            crate::map::dist2_point_segment(
                                (tp.pos[0], tp.pos[1]),
                                (seg[0][0], seg[0][1]),
                                (seg[1][0], seg[1][1]),
                            )
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!(d2.sqrt() < 1e-9, "point {:?} off centerline", tp.pos);
                }
            }
        }
    }

    #[test]
    fn ego_with_plan_pairs_share_observations_and_diverge_later() {
        let spec = SyntheticSpec {
            template: Template::EgoWithPlan,
            count: 2,
            pedestrians: 3,
            ..Default::default()
        };
        let s = generate_synthetic(&spec, 77);
        let (a, b) = (&s[0], &s[1]);
        // observed pedestrian frames identical across the pair
        for t in 1..=a.t_obs {
            for id in 1..=3i64 {
                assert_eq!(
                    a.track(id).unwrap().position_at(t),
                    b.track(id).unwrap().position_at(t),
                    "pair observation must match at t={t}"
                );
            }
        }
        // futures diverge for the lead pedestrian
        let last = a.t_pred;
        let pa = a.track(1).unwrap().position_at(last).unwrap();
        let pb = b.track(1).unwrap().position_at(last).unwrap();
        let gap = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        assert!(gap > 0.5, "futures too close: {gap}");
        // maps differ (bend direction) while plans cover the future window
        assert_ne!(a.map, b.map);
        assert_eq!(a.ego_plan.as_ref().unwrap().len(), a.t_pred - a.t_obs);
        a.validate().unwrap();
        b.validate().unwrap();
    }

    #[test]
    fn head_on_pedestrians_min_distance_matches_fine_integration() {
        // two pedestrians passing with a lateral offset; re-integrate the
        // same dynamics at 10x smaller timestep as the reference
        let spec = SyntheticSpec {
            template: Template::CrossingPedestrians,
            count: 1,
            pedestrians: 2,
            t_pred: 30,
            t_obs: 10,
            ..Default::default()
        };
        let offset = 0.9;
        let p0 = [[-6.0, 0.0], [6.0, offset]];
        let v0 = [[1.3, 0.0], [-1.3, 0.0]];
        let desired = [[1.3, 0.0], [-1.3, 0.0]];

        // coarse path runs the production integrator
        let sim = SocialSim { spec: &spec };
        let mut pos = p0.to_vec();
        let mut vel = v0.to_vec();
        let mut coarse_min = f64::INFINITY;
        let pair_d = |p: &[[f64; 2]]| (p[0][0] - p[1][0]).hypot(p[0][1] - p[1][1]);
        coarse_min = coarse_min.min(pair_d(&pos));
        for _ in 1..spec.t_pred {
            sim.step(&mut pos, &mut vel, &desired, &[]);
            coarse_min = coarse_min.min(pair_d(&pos));
        }

        // reference: same dynamics, independent code, 10x finer than the
        // production integrator's effective sub-step; compared at the same
        // frame instants so sampling density does not enter the delta
        let sub = spec.dt_s / EULER_SUBSTEPS as f64;
        let per_frame = EULER_SUBSTEPS * 10;
        let fine = integrate(&spec, p0, v0, &desired, sub / 10.0, (spec.t_pred - 1) * per_frame);
        let df = fine
            .iter()
            .step_by(per_frame)
            .map(|f| ((f[0][0] - f[1][0]).powi(2) + (f[0][1] - f[1][1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        let dc = coarse_min;
        assert!(dc > offset * 0.9, "repulsion must increase clearance: {dc}");
        assert!(
            (dc - df).abs() <= 0.05 * df,
            "coarse {dc} vs fine {df} disagree beyond 5%"
        );
    }

    // independent Euler re-integration used as the timestep oracle
    fn integrate(
        spec: &SyntheticSpec,
        mut pos: [[f64; 2]; 2],
        mut vel: [[f64; 2]; 2],
        desired: &[[f64; 2]; 2],
        dt: f64,
        steps: usize,
    ) -> Vec<[[f64; 2]; 2]> {
        let mut out = vec![pos];
        for _ in 0..steps {
            let mut acc = [[0.0f64; 2]; 2];
            for i in 0..2 {
                let j = 1 - i;
                acc[i][0] = (desired[i][0] - vel[i][0]) / spec.relaxation_s;
                acc[i][1] = (desired[i][1] - vel[i][1]) / spec.relaxation_s;
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let d = dx.hypot(dy);
                if d > 1e-9 {
                    let mag = spec.repulsion * (-d / spec.repulsion_range_m).exp();
                    acc[i][0] += mag * dx / d;
                    acc[i][1] += mag * dy / d;
                }
            }
            for i in 0..2 {
                vel[i][0] += dt * acc[i][0];
                vel[i][1] += dt * acc[i][1];
                pos[i][0] += dt * vel[i][0];
                pos[i][1] += dt * vel[i][1];
            }
            out.push(pos);
        }
        out
    }

    #[test]
    fn template_parsing() {
        assert_eq!(
            "crossing_pedestrians".parse::<Template>().unwrap(),
            Template::CrossingPedestrians
        );
        assert_eq!(
            "ego_with_plan".parse::<Template>().unwrap(),
            Template::EgoWithPlan
        );
        assert!(matches!(
            "flying_cars".parse::<Template>(),
            Err(SceneError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn validate_rejects_bad_plans_and_windows() {
        let spec = SyntheticSpec {
            template: Template::EgoWithPlan,
            count: 1,
            ..Default::default()
        };
        let good = generate_synthetic(&spec, 1)[0].clone();
        good.validate().unwrap();

        let mut short_plan = good.clone();
        short_plan.ego_plan.as_mut().unwrap().pop();
        assert!(short_plan.validate().is_err());

        let mut bad_window = good.clone();
        bad_window.t_obs = bad_window.t_pred;
        assert!(bad_window.validate().is_err());

        let mut gap = good.clone();
        gap.tracks[1].points.remove(2);
        assert!(gap.validate().is_err());
    }
}
