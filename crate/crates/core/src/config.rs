//! Run configuration: model dimensions, feature toggles, rasterization,
//! and training knobs, with JSON persistence and dotted-path overrides.
//!
//! Every run writes its fully resolved configuration next to its outputs,
//! so results are reproducible from the artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::RasterConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override {0:?} must look like key.path=value")]
    BadOverride(String),
    #[error("override path {0:?} does not name an existing config key")]
    UnknownKey(String),
    #[error("override path {0:?} descends into a non-object value")]
    BadPath(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Feature toggles for ablations. Disabled features are replaced by
/// zero blocks of unchanged width, so checkpoints stay shape-compatible
/// across all toggle combinations.
///
/// - `pf`: global position feature (pooled agent positions)
/// - `tf`: global tracking feature (pooled recurrent hiddens)
/// - `emf`: ego-motion feature (ego displacement embed)
/// - `etf`: ego-trajectory feature (pooled future plan waypoints)
/// - `ef`: environment feature (map raster ROI)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "UPPERCASE")]
pub struct Toggles {
    pub pf: bool,
    pub tf: bool,
    pub emf: bool,
    pub etf: bool,
    pub ef: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            pf: true,
            tf: true,
            emf: true,
            etf: true,
            ef: true,
        }
    }
}

impl Toggles {
    pub const fn none() -> Self {
        Toggles {
            pf: false,
            tf: false,
            emf: false,
            etf: false,
            ef: false,
        }
    }

    pub const fn all() -> Self {
        Toggles {
            pf: true,
            tf: true,
            emf: true,
            etf: true,
            ef: true,
        }
    }
}

/// The ablation ladder: each row enables one more feature group, ending at
/// the full model. Row names key output tables and run directories.
pub fn ablation_rows() -> Vec<(&'static str, Toggles)> {
    let t = |pf, tf, emf, etf, ef| Toggles { pf, tf, emf, etf, ef };
    vec![
        ("baseline", t(false, false, false, false, false)),
        ("v1_pf", t(true, false, false, false, false)),
        ("v2_pf_tf", t(true, true, false, false, false)),
        ("v3_emf", t(true, true, true, false, false)),
        ("v4_etf", t(true, true, true, true, false)),
        ("full", t(true, true, true, true, true)),
    ]
}

/// Which set the variety loss minimizes over: one winning modality per
/// scene (literal reading) or per agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarietyMin {
    Scene,
    Agent,
}

/// Displacement-error flavor: `l2` is the mean Euclidean distance;
/// `mse` is the mean squared distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    L2,
    Mse,
}

/// Coordinate frame fed to the networks: `relative` re-centers every
/// scenario on the ego position at t_obs; `world` uses raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateFrame {
    Relative,
    World,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of every embedding layer (position, tracking,
    /// ego-motion, plan, displacement, and map ROI embeds).
    pub d_embed: usize,
    /// Interaction GRU hidden width.
    pub gru_hidden: usize,
    /// Encoder/decoder LSTM hidden width.
    pub lstm_hidden: usize,
    /// Noise vector width for multimodal decoding.
    pub noise_dim: usize,
    /// Modalities decoded per agent.
    pub modalities: usize,
    /// Side length in meters of the square map region pooled around an
    /// agent position.
    pub roi_span_m: f64,
    /// ROI pooling grid is roi_bins x roi_bins.
    pub roi_bins: usize,
    /// Channel widths of the three stride-2 conv layers.
    pub conv_channels: [usize; 3],
    /// Pool the ego agent's position/hidden into the global features.
    pub include_ego_in_pooling: bool,
    /// Re-rasterize the map around the agent's current position at every
    /// decode step instead of once around the ego.
    pub per_frame_centering: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_embed: 64,
            gru_hidden: 128,
            lstm_hidden: 64,
            noise_dim: 16,
            modalities: 3,
            roi_span_m: 20.0,
            roi_bins: 3,
            conv_channels: [8, 16, 32],
            include_ego_in_pooling: true,
            per_frame_centering: false,
        }
    }
}

impl ModelConfig {
    /// Fused interaction state width: position + tracking + ego-motion.
    pub fn state_dim(&self) -> usize {
        3 * self.d_embed
    }

    /// Interaction GRU input width (the three pooled embeds concatenated).
    pub fn gru_input_dim(&self) -> usize {
        3 * self.d_embed
    }

    /// Plan feature + interaction state, the attention payload.
    pub fn fst_dim(&self) -> usize {
        self.d_embed + self.state_dim()
    }

    /// Encoder/decoder LSTM input: displacement embed + map ROI embed +
    /// attention output.
    pub fn lstm_input_dim(&self) -> usize {
        2 * self.d_embed + self.fst_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Scenarios per optimization step; gradients are summed across them.
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 20000,
            learning_rate: 5e-4,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub raster: RasterConfig,
    pub train: TrainConfig,
    pub variety_min: VarietyMin,
    pub metric: MetricKind,
    pub coordinate_frame: CoordinateFrame,
}

impl Default for VarietyMin {
    fn default() -> Self {
        VarietyMin::Scene
    }
}

impl Default for MetricKind {
    fn default() -> Self {
        MetricKind::L2
    }
}

impl Default for CoordinateFrame {
    fn default() -> Self {
        CoordinateFrame::Relative
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serialization");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if m.d_embed == 0 || m.gru_hidden == 0 || m.lstm_hidden == 0 {
            return bad("embedding and hidden widths must be positive".into());
        }
        if m.modalities == 0 {
            return bad("modalities must be at least 1".into());
        }
        if m.noise_dim == 0 && m.modalities > 1 {
            return bad("multimodal decoding needs noise_dim >= 1".into());
        }
        if m.roi_bins == 0 {
            return bad("roi_bins must be at least 1".into());
        }
        if !(m.roi_span_m > 0.0) {
            return bad(format!("roi_span_m must be positive, got {}", m.roi_span_m));
        }
        if m.conv_channels.iter().any(|&c| c == 0) {
            return bad("conv_channels must all be positive".into());
        }
        let r = &self.raster;
        if r.height_px == 0 || r.width_px == 0 {
            return bad("raster pixel dimensions must be positive".into());
        }
        if !(r.height_m > 0.0 && r.width_m > 0.0 && r.half_width_m > 0.0) {
            return bad("raster meter dimensions must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(t.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", t.learning_rate));
        }
        if t.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }

    /// Apply `key.path=value` overrides. The path must name an existing
    /// key (the config key set is closed); the value is parsed as JSON,
    /// with a bare-string fallback so enum values need no quotes.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Config, ConfigError> {
        let mut root = serde_json::to_value(self)?;
        for s in sets {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(s.clone()))?;
            let path = path.trim();
            let raw = raw.trim();
            if path.is_empty() || raw.is_empty() {
                return Err(ConfigError::BadOverride(s.clone()));
            }
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let parts: Vec<&str> = path.split('.').collect();
            let (last, body) = parts.split_last().expect("split produces one part");
            let mut cur = &mut root;
            for part in body {
                cur = cur
                    .as_object_mut()
                    .ok_or_else(|| ConfigError::BadPath(path.to_string()))?
                    .get_mut(*part)
                    .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
            }
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| ConfigError::BadPath(path.to_string()))?;
            if !obj.contains_key(*last) {
                return Err(ConfigError::UnknownKey(path.to_string()));
            }
            obj.insert(last.to_string(), parsed);
        }
        let cfg: Config = serde_json::from_value(root)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
