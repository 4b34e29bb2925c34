//! GRU and LSTM cells over `[1, d]` row states.
//!
//! Cells own no values; they register named parameters in a [`ParamStore`]
//! and build one time step of computation on a [`Graph`] per call, so the
//! same cell can be unrolled for any sequence length and cloned state (for
//! multi-modal decoding) is just reusing a `TensorId`.

use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Graph, TensorId};

fn gate(
    g: &mut Graph,
    bp: &BoundParams,
    x: TensorId,
    h: TensorId,
    wx: &str,
    wh: &str,
    b: &str,
) -> TensorId {
    let xw = g.matmul(x, bp.id(wx)).expect("gate x matmul");
    let hw = g.matmul(h, bp.id(wh)).expect("gate h matmul");
    let s = g.add(xw, hw).expect("gate add");
    g.add(s, bp.id(b)).expect("gate bias")
}

/// Gated recurrent unit:
///
/// ```text
/// z = sigmoid(x Wxz + h Whz + bz)
/// r = sigmoid(x Wxr + h Whr + br)
/// n = tanh(x Wxn + (r * h) Whn + bn)
/// h' = (1 - z) * h + z * n
/// ```
///
/// A saturated update gate (z -> 1) replaces the state with the candidate.
#[derive(Debug, Clone)]
pub struct GruCell {
    prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn register(
        params: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        for gate in ["z", "r", "n"] {
            params.register(
                &format!("{prefix}.wx_{gate}"),
                vec![input, hidden],
                Init::Uniform { bound },
                seed,
            );
            params.register(
                &format!("{prefix}.wh_{gate}"),
                vec![hidden, hidden],
                Init::Uniform { bound },
                seed,
            );
            params.register(
                &format!("{prefix}.b_{gate}"),
                vec![1, hidden],
                Init::Uniform { bound },
                seed,
            );
        }
        GruCell {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    /// Reattach to parameters registered under `prefix`.
    pub fn attach(prefix: &str, input: usize, hidden: usize) -> Self {
        GruCell {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph) -> TensorId {
        g.zeros(vec![1, self.hidden])
    }

    pub fn step(&self, g: &mut Graph, bp: &BoundParams, x: TensorId, h: TensorId) -> TensorId {
        let p = &self.prefix;
        let z_pre = gate(g, bp, x, h, &format!("{p}.wx_z"), &format!("{p}.wh_z"), &format!("{p}.b_z"));
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, bp, x, h, &format!("{p}.wx_r"), &format!("{p}.wh_r"), &format!("{p}.b_r"));
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h).expect("reset gate");
        let xw = g.matmul(x, bp.id(&format!("{p}.wx_n"))).expect("cand x");
        let hw = g.matmul(rh, bp.id(&format!("{p}.wh_n"))).expect("cand h");
        let s = g.add(xw, hw).expect("cand add");
        let n_pre = g.add(s, bp.id(&format!("{p}.b_n"))).expect("cand bias");
        let n = g.tanh(n_pre);
        // (1 - z) * h + z * n, written as h + z * (n - h)
        let diff = g.sub(n, h).expect("gru blend sub");
        let zd = g.mul(z, diff).expect("gru blend mul");
        g.add(h, zd).expect("gru blend add")
    }
}

/// LSTM state: hidden and cell rows, both `[1, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: TensorId,
    pub c: TensorId,
}

/// Long short-term memory cell:
///
/// ```text
/// i = sigmoid(x Wxi + h Whi + bi)    f = sigmoid(x Wxf + h Whf + bf)
/// g = tanh   (x Wxg + h Whg + bg)    o = sigmoid(x Wxo + h Who + bo)
/// c' = f * c + i * g                 h' = o * tanh(c')
/// ```
///
/// Weights and biases start in `U[-1/sqrt(hidden), +1/sqrt(hidden)]` except
/// the forget bias, which starts at 1 so early training does not erase the
/// cell state.
#[derive(Debug, Clone)]
pub struct LstmCell {
    prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn register(
        params: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        for gate in ["i", "f", "g", "o"] {
            params.register(
                &format!("{prefix}.wx_{gate}"),
                vec![input, hidden],
                Init::Uniform { bound },
                seed,
            );
            params.register(
                &format!("{prefix}.wh_{gate}"),
                vec![hidden, hidden],
                Init::Uniform { bound },
                seed,
            );
            let init = if gate == "f" {
                Init::Const(1.0)
            } else {
                Init::Uniform { bound }
            };
            params.register(&format!("{prefix}.b_{gate}"), vec![1, hidden], init, seed);
        }
        LstmCell {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    pub fn attach(prefix: &str, input: usize, hidden: usize) -> Self {
        LstmCell {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState {
            h: g.zeros(vec![1, self.hidden]),
            c: g.zeros(vec![1, self.hidden]),
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: TensorId,
        state: LstmState,
    ) -> LstmState {
        let p = &self.prefix;
        let i_pre = gate(g, bp, x, state.h, &format!("{p}.wx_i"), &format!("{p}.wh_i"), &format!("{p}.b_i"));
        let i = g.sigmoid(i_pre);
        let f_pre = gate(g, bp, x, state.h, &format!("{p}.wx_f"), &format!("{p}.wh_f"), &format!("{p}.b_f"));
        let f = g.sigmoid(f_pre);
        let g_pre = gate(g, bp, x, state.h, &format!("{p}.wx_g"), &format!("{p}.wh_g"), &format!("{p}.b_g"));
        let gg = g.tanh(g_pre);
        let o_pre = gate(g, bp, x, state.h, &format!("{p}.wx_o"), &format!("{p}.wh_o"), &format!("{p}.b_o"));
        let o = g.sigmoid(o_pre);
        let fc = g.mul(f, state.c).expect("forget path");
        let ig = g.mul(i, gg).expect("input path");
        let c = g.add(fc, ig).expect("cell update");
        let tc = g.tanh(c);
        let h = g.mul(o, tc).expect("output gate");
        LstmState { h, c }
    }
}
