//! Agent interaction network: pooled global features (positions, tracking
//! hiddens, ego motion, ego plan), GRU fusion into an interaction state,
//! and assembly of the attention payload.
//!
//! Pooled features embed each item with a shared linear layer and take a
//! column-wise max over items, so they are exactly invariant to item order
//! and to the number of agents.

use crate::config::ModelConfig;
use crate::params::{BoundParams, Init, ParamStore};
use crate::rnn::GruCell;
use crate::tensor::{Graph, TensorError, TensorId};

/// Interaction-feature parameters and the fusion GRU. Parameter names:
/// `ain.pos.*`, `ain.track.*`, `ain.motion.*`, `ain.plan.*`, `ain.gru.*`,
/// `ain.proj.*`.
#[derive(Debug, Clone)]
pub struct Ain {
    pub d_embed: usize,
    pub gru: GruCell,
}

fn register_embed(store: &mut ParamStore, name: &str, input: usize, output: usize, seed: u64) {
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

impl Ain {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.d_embed;
        register_embed(store, "ain.pos", 2, d, seed);
        register_embed(store, "ain.track", cfg.lstm_hidden, d, seed);
        register_embed(store, "ain.motion", 2, d, seed);
        register_embed(store, "ain.plan", 2, d, seed);
        let gru = GruCell::register(store, "ain.gru", cfg.gru_input_dim(), cfg.gru_hidden, seed);
        register_embed(store, "ain.proj", cfg.gru_hidden, cfg.state_dim(), seed);
        Ain { d_embed: d, gru }
    }

    pub fn attach(cfg: &ModelConfig) -> Self {
        Ain {
            d_embed: cfg.d_embed,
            gru: GruCell::attach("ain.gru", cfg.gru_input_dim(), cfg.gru_hidden),
        }
    }

    /// Shared linear embed of each `[1, in]` item, stacked and max-pooled
    /// column-wise to one `[1, d_embed]` row.
    fn embed_maxpool(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        prefix: &str,
        items: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        if items.is_empty() {
            return Err(TensorError::EmptyInput { op: "embed_maxpool" });
        }
        let w = bp.id(&format!("{prefix}.w"));
        let b = bp.id(&format!("{prefix}.b"));
        let mut rows = Vec::with_capacity(items.len());
        for &item in items {
            let prod = g.matmul(item, w)?;
            rows.push(g.add(prod, b)?);
        }
        let stack = g.concat(&rows, 0)?;
        g.maxpool_rows(stack)
    }

    /// Global position feature: pooled embeds of every agent position.
    pub fn position_feature(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        positions: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        self.embed_maxpool(g, bp, "ain.pos", positions)
    }

    /// Global tracking feature: pooled embeds of every agent's recurrent
    /// hidden state.
    pub fn tracking_feature(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        hiddens: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        self.embed_maxpool(g, bp, "ain.track", hiddens)
    }

    /// Ego-motion feature: embed of the ego displacement for this step.
    pub fn ego_motion_feature(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        displacement: TensorId,
    ) -> Result<TensorId, TensorError> {
        let w = bp.id("ain.motion.w");
        let b = bp.id("ain.motion.b");
        let prod = g.matmul(displacement, w)?;
        g.add(prod, b)
    }

    /// Ego-plan feature: pooled embeds of the remaining future waypoints.
    pub fn plan_feature(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        waypoints: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        self.embed_maxpool(g, bp, "ain.plan", waypoints)
    }

    /// One fusion step: GRU over concat([o, r, m]), then the projection to
    /// the interaction state. Returns (st, updated hidden).
    pub fn fuse(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        o: TensorId,
        r: TensorId,
        m: TensorId,
        h_gru: TensorId,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let x = g.concat(&[o, r, m], 1)?;
        let h = self.gru.step(g, bp, x, h_gru);
        let w = bp.id("ain.proj.w");
        let b = bp.id("ain.proj.b");
        let prod = g.matmul(h, w)?;
        let st = g.add(prod, b)?;
        Ok((st, h))
    }

    /// fst = concat([f, st]) along the feature axis; zero blocks stand in
    /// for disabled features.
    pub fn assemble_fst(
        &self,
        g: &mut Graph,
        f: TensorId,
        st: TensorId,
    ) -> Result<TensorId, TensorError> {
        g.concat(&[f, st], 1)
    }
}
