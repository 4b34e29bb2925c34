//! Finite-difference verification of analytic gradients.
//!
//! Every backward rule in the crate is checked against central differences:
//! an element passes when `|analytic - fd| <= max(abs_tol, rel_tol *
//! max(|analytic|, |fd|))`. The checker rebuilds the graph for every probe,
//! so it exercises exactly the code path training uses.

use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub failed: usize,
    /// Largest `|analytic - fd|` over all elements.
    pub max_abs_diff: f64,
    /// Element with the worst tolerance violation: (index, analytic, fd).
    pub worst: Option<(usize, f64, f64)>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        match (self.pass, self.worst) {
            (true, _) => format!(
                "{}: ok ({} elements, max |diff| {:.3e})",
                self.name, self.checked, self.max_abs_diff
            ),
            (false, Some((i, a, f))) => format!(
                "{}: FAIL ({}/{} elements out of tolerance; worst at [{}]: analytic {:.6e} vs fd {:.6e})",
                self.name, self.failed, self.checked, i, a, f
            ),
            (false, None) => format!("{}: FAIL", self.name),
        }
    }
}

fn within_tol(analytic: f64, fd: f64, cfg: &CheckConfig) -> bool {
    let diff = (analytic - fd).abs();
    diff <= cfg.abs_tol.max(cfg.rel_tol * analytic.abs().max(fd.abs()))
}

/// Central-difference value for every element of `x0` against the claimed
/// analytic gradient; returns (analytic, fd) pairs in element order.
pub fn element_diffs(
    x0: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    step: f64,
) -> Vec<(f64, f64)> {
    assert_eq!(x0.len(), analytic.len(), "gradient length mismatch");
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        out.push((analytic[i], (fp - fm) / (2.0 * step)));
    }
    out
}

fn report_from_diffs(name: &str, diffs: &[(f64, f64)], cfg: &CheckConfig) -> GradCheckReport {
    let mut failed = 0usize;
    let mut max_abs_diff = 0.0f64;
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, &(a, fd)) in diffs.iter().enumerate() {
        let diff = (a - fd).abs();
        max_abs_diff = max_abs_diff.max(diff);
        if !within_tol(a, fd, cfg) {
            failed += 1;
            let margin = diff - cfg.abs_tol.max(cfg.rel_tol * a.abs().max(fd.abs()));
            if worst.is_none_or(|(_, _, _, m)| margin > m) {
                worst = Some((i, a, fd, margin));
            }
        }
    }
    GradCheckReport {
        name: name.to_string(),
        checked: diffs.len(),
        failed,
        max_abs_diff,
        worst: worst.map(|(i, a, fd, _)| (i, a, fd)),
        pass: failed == 0,
    }
}

/// Compare an analytic gradient against finite differences of `f` at `x0`.
/// `f` must be deterministic in `x`.
pub fn check_scalar_fn(
    name: &str,
    x0: &[f64],
    f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    cfg: &CheckConfig,
) -> GradCheckReport {
    let diffs = element_diffs(x0, f, analytic, cfg.step);
    report_from_diffs(name, &diffs, cfg)
}

/// Check a graph builder: `build` recreates the computation from the flat
/// input vector and returns (differentiable leaves in layout order, scalar
/// loss). The concatenated leaf data must equal the input vector.
pub fn check_builder(
    name: &str,
    x0: &[f64],
    build: impl Fn(&mut Graph, &[f64]) -> (Vec<TensorId>, TensorId),
    cfg: &CheckConfig,
) -> GradCheckReport {
    // analytic pass
    let mut g = Graph::new();
    let (leaves, loss) = build(&mut g, x0);
    let total: usize = leaves.iter().map(|&id| g.value(id).numel()).sum();
    assert_eq!(total, x0.len(), "{name}: leaves do not cover the input vector");
    g.backward(loss).expect("backward failed during gradient check");
    let mut analytic = Vec::with_capacity(x0.len());
    for &id in &leaves {
        analytic.extend_from_slice(g.grad(id).expect("leaf missing gradient"));
    }

    check_scalar_fn(
        name,
        x0,
        |x| {
            let mut g = Graph::new();
            let (_, loss) = build(&mut g, x);
            g.data(loss)[0]
        },
        &analytic,
        cfg,
    )
}

/// Deterministic pseudorandom values in (-1, 1), decorrelated across `seed`.
/// Good enough for probe points; not a statistical RNG.
pub fn probe_values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            // splitmix64 step
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            // map to (-1, 1), keep magnitudes away from relu/max kinks
            let u = (z >> 11) as f64 / (1u64 << 53) as f64;
            let v = 2.0 * u - 1.0;
            v + 0.05 * v.signum()
        })
        .collect()
}

/// Fixed non-uniform weights so output gradients are not all ones; a
/// backward rule that drops or transposes terms cannot pass by symmetry.
pub fn loss_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i * 7 + 3) % 11) as f64 * 0.17).collect()
}

pub fn weighted_loss(g: &mut Graph, out: TensorId) -> TensorId {
    let n = g.value(out).numel();
    let shape = g.shape(out).to_vec();
    let w = g
        .leaf(shape, loss_weights(n), false)
        .expect("weight leaf");
    let prod = g.mul(out, w).expect("weighted loss mul");
    g.sum_all(prod)
}

/// Gradient checks for every differentiable operation, each on a small
/// randomized instance with a non-uniform weighted-sum loss.
pub fn check_all_ops(cfg: &CheckConfig) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();

    reports.push(check_builder(
        "matmul",
        &probe_values(3 * 4 + 4 * 2, 11),
        |g, x| {
            let a = g.leaf(vec![3, 4], x[..12].to_vec(), true).unwrap();
            let b = g.leaf(vec![4, 2], x[12..].to_vec(), true).unwrap();
            let y = g.matmul(a, b).unwrap();
            (vec![a, b], weighted_loss(g, y))
        },
        cfg,
    ));

    for (kind, name) in [(0, "add"), (1, "sub"), (2, "mul")] {
        reports.push(check_builder(
            name,
            &probe_values(12, 23 + kind),
            move |g, x| {
                let a = g.leaf(vec![2, 3], x[..6].to_vec(), true).unwrap();
                let b = g.leaf(vec![2, 3], x[6..].to_vec(), true).unwrap();
                let y = match kind {
                    0 => g.add(a, b).unwrap(),
                    1 => g.sub(a, b).unwrap(),
                    _ => g.mul(a, b).unwrap(),
                };
                (vec![a, b], weighted_loss(g, y))
            },
            cfg,
        ));
    }

    reports.push(check_builder(
        "mul_scalar_broadcast",
        &probe_values(7, 31),
        |g, x| {
            let a = g.leaf(vec![2, 3], x[..6].to_vec(), true).unwrap();
            let s = g.leaf(vec![1, 1], vec![x[6]], true).unwrap();
            let y = g.mul(a, s).unwrap();
            (vec![a, s], weighted_loss(g, y))
        },
        cfg,
    ));

    reports.push(check_builder(
        "add_scalar_broadcast",
        &probe_values(7, 37),
        |g, x| {
            let a = g.leaf(vec![2, 3], x[..6].to_vec(), true).unwrap();
            let s = g.leaf(vec![1, 1], vec![x[6]], true).unwrap();
            let y = g.add(a, s).unwrap();
            (vec![a, s], weighted_loss(g, y))
        },
        cfg,
    ));

    for (which, name) in [(0, "sigmoid"), (1, "tanh"), (2, "relu")] {
        reports.push(check_builder(
            name,
            &probe_values(8, 41 + which),
            move |g, x| {
                let a = g.leaf(vec![2, 4], x.to_vec(), true).unwrap();
                let y = match which {
                    0 => g.sigmoid(a),
                    1 => g.tanh(a),
                    _ => g.relu(a),
                };
                (vec![a], weighted_loss(g, y))
            },
            cfg,
        ));
    }

    reports.push(check_builder(
        "scale",
        &probe_values(6, 53),
        |g, x| {
            let a = g.leaf(vec![2, 3], x.to_vec(), true).unwrap();
            let y = g.scale(a, -1.75);
            (vec![a], weighted_loss(g, y))
        },
        cfg,
    ));

    for axis in [0usize, 1] {
        reports.push(check_builder(
            &format!("concat_axis{axis}"),
            &probe_values(18, 59 + axis as u64),
            move |g, x| {
                let a = g.leaf(vec![2, 3], x[..6].to_vec(), true).unwrap();
                let b = g.leaf(vec![2, 3], x[6..12].to_vec(), true).unwrap();
                let c = g.leaf(vec![2, 3], x[12..].to_vec(), true).unwrap();
                let y = g.concat(&[a, b, c], axis).unwrap();
                (vec![a, b, c], weighted_loss(g, y))
            },
            cfg,
        ));
    }

    reports.push(check_builder(
        "maxpool_rows",
        // spread values so an FD step cannot flip a winner
        &probe_values(20, 67).iter().map(|v| 3.0 * v).collect::<Vec<_>>(),
        |g, x| {
            let a = g.leaf(vec![5, 4], x.to_vec(), true).unwrap();
            let y = g.maxpool_rows(a).unwrap();
            (vec![a], weighted_loss(g, y))
        },
        cfg,
    ));

    reports.push(check_builder(
        "sum_all",
        &probe_values(9, 71),
        |g, x| {
            let a = g.leaf(vec![3, 3], x.to_vec(), true).unwrap();
            let y = g.sum_all(a);
            (vec![a], y)
        },
        cfg,
    ));

    reports.push(check_builder(
        "reshape",
        &probe_values(12, 73),
        |g, x| {
            let a = g.leaf(vec![3, 4], x.to_vec(), true).unwrap();
            let r = g.reshape(a, vec![2, 6]).unwrap();
            (vec![a], weighted_loss(g, r))
        },
        cfg,
    ));

    reports.push(check_builder(
        "conv2d",
        &probe_values(2 * 6 * 6 + 3 * 2 * 3 * 3 + 3, 79),
        |g, x| {
            let n_img = 2 * 6 * 6;
            let n_w = 3 * 2 * 3 * 3;
            let img = g.leaf(vec![2, 6, 6], x[..n_img].to_vec(), true).unwrap();
            let w = g
                .leaf(vec![3, 2, 3, 3], x[n_img..n_img + n_w].to_vec(), true)
                .unwrap();
            let b = g.leaf(vec![3], x[n_img + n_w..].to_vec(), true).unwrap();
            let y = g.conv2d(img, w, b, 2, 1).unwrap();
            (vec![img, w, b], weighted_loss(g, y))
        },
        cfg,
    ));

    reports.push(check_builder(
        "roi_align",
        &{
            let mut v = probe_values(2 * 7 * 7, 83);
            // center well inside the map, fractional parts away from cell edges
            v.push(3.3);
            v.push(2.6);
            v
        },
        |g, x| {
            let n_fm = 2 * 7 * 7;
            let fm = g.leaf(vec![2, 7, 7], x[..n_fm].to_vec(), true).unwrap();
            let c = g.leaf(vec![1, 2], x[n_fm..].to_vec(), true).unwrap();
            let y = g.roi_align(fm, c, 2.5, 2.5, 3).unwrap();
            (vec![fm, c], weighted_loss(g, y))
        },
        cfg,
    ));

    reports.push(check_builder(
        "roi_align_box_straddles_border",
        &{
            let mut v = probe_values(1 * 5 * 5, 89);
            v.push(0.4); // box extends past the left edge; outside reads zero
            v.push(4.3); // and past the bottom edge
            v
        },
        |g, x| {
            let fm = g.leaf(vec![1, 5, 5], x[..25].to_vec(), true).unwrap();
            let c = g.leaf(vec![1, 2], x[25..].to_vec(), true).unwrap();
            let y = g.roi_align(fm, c, 3.0, 3.0, 3).unwrap();
            (vec![fm, c], weighted_loss(g, y))
        },
        cfg,
    ));

    reports
}

/// One parameter group's slice of the end-to-end check. Groups follow the
/// dotted naming (everything up to the last dot, e.g. `ain.pos`,
/// `enc_lstm`).
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: String,
    pub elements: usize,
    pub failed: usize,
    /// Worst relative disagreement max |a-fd| / max(|a|, |fd|, 1e-12).
    pub worst_rel: f64,
    pub pass: bool,
}

impl GroupCheck {
    pub fn summary(&self) -> String {
        format!(
            "{:24} {:>6} elements  worst rel {:.3e}  {}",
            self.group,
            self.elements,
            self.worst_rel,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

/// End-to-end model check: overall verdict plus per-group detail.
#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub overall: GradCheckReport,
    pub groups: Vec<GroupCheck>,
}

/// Finite-difference check of the full model (all three networks, decoder
/// rollout, variety loss) on a toy scenario: two predicted agents, a map,
/// an ego plan, two modalities, every feature path enabled. The parameter
/// vector is probed element by element; results are reported per group.
pub fn check_model(cfg: &CheckConfig) -> ModelCheck {
    use crate::config::{ModelConfig, Toggles, VarietyMin};
    use crate::map::RasterConfig;
    use crate::params::ParamStore;
    use crate::prednet::{standard_noise, variety_loss, PredNet};
    use crate::scene::{generate_synthetic, SyntheticSpec, Template};
    use rand::SeedableRng;

    let model_cfg = ModelConfig {
        d_embed: 4,
        gru_hidden: 5,
        lstm_hidden: 4,
        noise_dim: 3,
        modalities: 2,
        roi_span_m: 6.0,
        roi_bins: 2,
        conv_channels: [2, 2, 3],
        ..ModelConfig::default()
    };
    let raster = RasterConfig {
        height_px: 32,
        width_px: 32,
        height_m: 24.0,
        width_m: 24.0,
        ..RasterConfig::default()
    };
    let spec = SyntheticSpec {
        template: Template::EgoWithPlan,
        count: 1,
        pedestrians: 2,
        t_obs: 3,
        t_pred: 5,
        ..Default::default()
    };
    let scenario = generate_synthetic(&spec, 5)[0]
        .to_relative_frame()
        .expect("synthetic scenario has an ego");
    let noise = {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(97);
        standard_noise(2, 2, model_cfg.noise_dim, &mut rng)
    };

    // layout: (group, numel) in flat-vector order
    let mut probe_store = ParamStore::new();
    PredNet::register(&mut probe_store, &model_cfg, 51);
    let layout: Vec<(String, usize)> = probe_store
        .names()
        .map(|n| {
            let group = match n.rfind('.') {
                Some(i) => n[..i].to_string(),
                None => n.to_string(),
            };
            (group, probe_store.get(n).numel())
        })
        .collect();
    let x0 = probe_values(probe_store.numel(), 401);

    let run = |g: &mut Graph, x: &[f64]| {
        let mut store = ParamStore::new();
        let net = PredNet::register(&mut store, &model_cfg, 51);
        store.set_flat_values(x);
        let bp = store.bind(g);
        let ro = net
            .rollout(g, &bp, &scenario, &Toggles::all(), &raster, &noise)
            .expect("toy rollout");
        let vl = variety_loss(g, &ro, &scenario, VarietyMin::Scene).expect("toy loss");
        (bp.ids_sorted(), vl.loss)
    };

    // analytic gradient once
    let mut g = Graph::new();
    let (leaves, loss) = run(&mut g, &x0);
    g.backward(loss).expect("backward in model check");
    let mut analytic = Vec::with_capacity(x0.len());
    for &id in &leaves {
        analytic.extend_from_slice(g.grad(id).expect("param gradient"));
    }

    let diffs = element_diffs(
        &x0,
        |x| {
            let mut g = Graph::new();
            let (_, loss) = run(&mut g, x);
            g.data(loss)[0]
        },
        &analytic,
        cfg.step,
    );
    let overall = report_from_diffs("model_end_to_end", &diffs, cfg);

    let mut groups: Vec<GroupCheck> = Vec::new();
    let mut off = 0usize;
    for (group, n) in layout {
        let slice = &diffs[off..off + n];
        off += n;
        let entry = match groups.iter_mut().find(|gc| gc.group == group) {
            Some(e) => e,
            None => {
                groups.push(GroupCheck {
                    group: group.clone(),
                    elements: 0,
                    failed: 0,
                    worst_rel: 0.0,
                    pass: true,
                });
                groups.last_mut().expect("just pushed")
            }
        };
        for &(a, fd) in slice {
            entry.elements += 1;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            entry.worst_rel = entry.worst_rel.max(rel);
            if !within_tol(a, fd, cfg) {
                entry.failed += 1;
                entry.pass = false;
            }
        }
    }
    ModelCheck { overall, groups }
}

/// Everything the verification command runs: per-op checks plus the
/// end-to-end model check.
pub struct SuiteReport {
    pub ops: Vec<GradCheckReport>,
    pub model: ModelCheck,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.ops.iter().all(|r| r.pass) && self.model.overall.pass
    }
}

pub fn run_full_suite(cfg: &CheckConfig) -> SuiteReport {
    SuiteReport {
        ops: check_all_ops(cfg),
        model: check_model(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fault;

    #[test]
    fn all_op_gradients_match_finite_differences() {
        let cfg = CheckConfig::default();
        let reports = check_all_ops(&cfg);
        assert!(reports.len() >= 15);
        for r in &reports {
            assert!(r.pass, "{}", r.summary());
        }
    }

    #[test]
    fn checker_flags_wrong_gradient() {
        let cfg = CheckConfig::default();
        let x0 = probe_values(4, 7);
        // loss = sum(x^2), but claim gradient x instead of 2x
        let wrong: Vec<f64> = x0.clone();
        let report = check_scalar_fn(
            "deliberately_wrong",
            &x0,
            |x| x.iter().map(|v| v * v).sum(),
            &wrong,
            &cfg,
        );
        assert!(!report.pass);
        assert!(report.worst.is_some());
    }

    #[test]
    fn injected_matmul_fault_is_caught() {
        let cfg = CheckConfig::default();
        fault::set_matmul_backward_sign_fault(true);
        let report = check_builder(
            "matmul_faulted",
            &probe_values(8, 13),
            |g, x| {
                let a = g.leaf(vec![2, 2], x[..4].to_vec(), true).unwrap();
                let b = g.leaf(vec![2, 2], x[4..].to_vec(), true).unwrap();
                let y = g.matmul(a, b).unwrap();
                let s = g.sum_all(y);
                (vec![a, b], s)
            },
            &cfg,
        );
        fault::set_matmul_backward_sign_fault(false);
        assert!(!report.pass, "fault injection must be detected");
    }

    #[test]
    fn probe_values_are_reproducible_and_bounded() {
        let a = probe_values(64, 5);
        let b = probe_values(64, 5);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() > 0.04 && v.abs() < 1.1));
        let c = probe_values(64, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn model_check_covers_every_parameter_group() {
        let check = check_model(&CheckConfig::default());
        assert!(check.overall.pass, "{}", check.overall.summary());
        let names: Vec<&str> = check.groups.iter().map(|g| g.group.as_str()).collect();
        for expected in [
            "ain.pos",
            "ain.track",
            "ain.motion",
            "ain.plan",
            "ain.gru",
            "ain.proj",
            "env_cnn.conv1",
            "env_cnn.conv2",
            "env_cnn.conv3",
            "env_embed",
            "pred.attn",
            "pred.disp",
            "pred.head",
            "pred.noise",
            "enc_lstm",
            "dec_lstm",
        ] {
            assert!(names.contains(&expected), "missing group {expected}");
        }
        for group in &check.groups {
            assert!(group.pass, "{}", group.summary());
        }
        let total: usize = check.groups.iter().map(|g| g.elements).sum();
        assert_eq!(total, check.overall.checked);
    }

    #[test]
    fn model_check_detects_an_injected_fault() {
        fault::set_matmul_backward_sign_fault(true);
        let check = check_model(&CheckConfig::default());
        fault::set_matmul_backward_sign_fault(false);
        assert!(!check.overall.pass, "sign fault must not verify");
        assert!(check.groups.iter().any(|g| !g.pass));
    }
}
