//! Environment network: a small convolutional encoder over the semantic
//! raster, ROI pooling of per-agent local map features, and the embedding
//! that turns a pooled window into the per-step map input.
//!
//! The encoder is three stride-2 3x3 convolutions (downsampling by 8), so
//! feature-map cell (a, b) is centered on raster pixel (8a, 8b) and pixel
//! coordinates convert to feature-map coordinates by dividing by 8.

use crate::config::ModelConfig;
use crate::map::{EgoPose, RasterConfig};
use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Graph, TensorError, TensorId};

const DOWNSAMPLE: usize = 8;

/// Convolutional map encoder plus ROI embedding. Parameters live under
/// "env_cnn.*" and "env_embed.*".
#[derive(Debug, Clone, Copy)]
pub struct EnvNet {
    pub channels: [usize; 3],
    pub d_embed: usize,
    pub roi_bins: usize,
}

impl EnvNet {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        let [c1, c2, c3] = cfg.conv_channels;
        let k = cfg.roi_bins;
        let conv = |store: &mut ParamStore, name: &str, cout: usize, cin: usize| {
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            store.register(
                &format!("env_cnn.{name}.w"),
                vec![cout, cin, 3, 3],
                Init::Uniform { bound },
                seed,
            );
            store.register(&format!("env_cnn.{name}.b"), vec![1, cout], Init::Zeros, seed);
        };
        conv(store, "conv1", c1, 1);
        conv(store, "conv2", c2, c1);
        conv(store, "conv3", c3, c2);
        let flat = c3 * k * k;
        store.register(
            "env_embed.w",
            vec![flat, cfg.d_embed],
            Init::Uniform {
                bound: 1.0 / (flat as f64).sqrt(),
            },
            seed,
        );
        store.register("env_embed.b", vec![1, cfg.d_embed], Init::Zeros, seed);
        Self::attach(cfg)
    }

    pub fn attach(cfg: &ModelConfig) -> Self {
        EnvNet {
            channels: cfg.conv_channels,
            d_embed: cfg.d_embed,
            roi_bins: cfg.roi_bins,
        }
    }

    /// Encode a `[1, H, W]` raster into a `[C, H/8, W/8]` feature map.
    /// Spatial dims must be divisible by 8 so the cell<->pixel arithmetic
    /// stays exact.
    pub fn encode_map(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        img: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 3 || shape[1] % DOWNSAMPLE != 0 || shape[2] % DOWNSAMPLE != 0 {
            return Err(TensorError::DimMismatch {
                op: "encode_map",
                left: shape,
                right: vec![1, DOWNSAMPLE, DOWNSAMPLE],
            });
        }
        let mut x = img;
        for stage in ["conv1", "conv2", "conv3"] {
            let w = bp.id(&format!("env_cnn.{stage}.w"));
            let b = bp.id(&format!("env_cnn.{stage}.b"));
            x = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Map a world position `[1, 2]` tensor to feature-map (col, row)
    /// coordinates as a differentiable graph node. Mirrors
    /// [`crate::map::world_to_pixel`] divided by the downsampling factor.
    pub fn world_to_fm(
        &self,
        g: &mut Graph,
        raster: &RasterConfig,
        ego: &EgoPose,
        p: TensorId,
    ) -> Result<TensorId, TensorError> {
        let e = g.row(&[ego.x, ego.y]);
        let mut d = g.sub(p, e)?;
        if raster.align_heading && ego.heading != 0.0 {
            let (s, c) = ego.heading.sin_cos();
            // row-vector form of the relative() rotation
            let rot = g.leaf(vec![2, 2], vec![c, -s, s, c], false)?;
            d = g.matmul(d, rot)?;
        }
        let (hp, wp) = (raster.height_px as f64, raster.width_px as f64);
        let f = DOWNSAMPLE as f64;
        let scale = g.row(&[wp / (f * raster.width_m), -hp / (f * raster.height_m)]);
        let offset = g.row(&[wp / (2.0 * f), hp / (2.0 * f)]);
        let scaled = g.mul(d, scale)?;
        g.add(scaled, offset)
    }

    /// ROI box side lengths in feature-map cells for a 2*roi_span_m meter
    /// window: span meters at (px per meter) pixels, divided by 8.
    pub fn roi_side_cells(raster: &RasterConfig, roi_span_m: f64) -> (f64, f64) {
        let rows = raster.height_px as f64 * roi_span_m / (4.0 * raster.height_m);
        let cols = raster.width_px as f64 * roi_span_m / (4.0 * raster.width_m);
        (rows, cols)
    }

    /// Pool a K x K window around `center_fm` (feature-map coords, from
    /// [`EnvNet::world_to_fm`]) and embed it to `[1, d_embed]`. Gradients
    /// flow to the feature map, the embed parameters, and the center.
    pub fn roi_embed(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        fm: TensorId,
        center_fm: TensorId,
        raster: &RasterConfig,
        roi_span_m: f64,
    ) -> Result<TensorId, TensorError> {
        let (side_rows, side_cols) = Self::roi_side_cells(raster, roi_span_m);
        let pooled = g.roi_align(fm, center_fm, side_rows, side_cols, self.roi_bins)?;
        let c = g.shape(fm)[0];
        let flat = g.reshape(pooled, vec![1, c * self.roi_bins * self.roi_bins])?;
        let w = bp.id("env_embed.w");
        let b = bp.id("env_embed.b");
        let prod = g.matmul(flat, w)?;
        g.add(prod, b)
    }
}
