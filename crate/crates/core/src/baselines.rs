//! Reference predictors: closed-form extrapolation baselines and config
//! presets for the two recurrent baselines (a plain displacement LSTM and
//! its noise-conditioned multimodal variant, both just the prediction
//! network with every feature toggle off).

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::config::{Config, Toggles};
use crate::scene::Scenario;

/// Closed-form baseline choices for the CLI and evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Linear,
    KalmanCv,
}

/// Least-squares line fit per axis over the observed points, extrapolated
/// `horizon` steps past the last observation. A single observation
/// degenerates to a constant prediction.
pub fn linear_extrapolate(observed: &[[f64; 2]], horizon: usize) -> Vec<[f64; 2]> {
    assert!(!observed.is_empty(), "need at least one observation");
    let n = observed.len();
    let nf = n as f64;
    // centered time keeps the normal equations well conditioned
    let tc = (nf - 1.0) / 2.0;
    let mut sat = 0.0; // sum (t - tc)^2
    let mut sx = [0.0; 2]; // sum (t - tc) * p
    let mut mean = [0.0; 2];
    for (i, p) in observed.iter().enumerate() {
        let dt = i as f64 - tc;
        sat += dt * dt;
        for a in 0..2 {
            sx[a] += dt * p[a];
            mean[a] += p[a] / nf;
        }
    }
    let slope = if sat > 0.0 {
        [sx[0] / sat, sx[1] / sat]
    } else {
        [0.0, 0.0]
    };
    (1..=horizon)
        .map(|k| {
            let dt = (n - 1 + k) as f64 - tc;
            [mean[0] + slope[0] * dt, mean[1] + slope[1] * dt]
        })
        .collect()
}

/// Constant-velocity Kalman filter over 2D positions. State is
/// [x, y, vx, vy]; measurements are positions. Updates use the Joseph form
/// so the covariance stays symmetric positive semidefinite.
#[derive(Debug, Clone, Copy)]
pub struct KalmanCv {
    /// White-noise acceleration spectral density.
    pub process_noise: f64,
    /// Measurement variance per axis.
    pub obs_noise: f64,
    /// Frame spacing in state-propagation time units.
    pub dt: f64,
}

impl Default for KalmanCv {
    fn default() -> Self {
        KalmanCv {
            process_noise: 0.1,
            obs_noise: 0.05,
            dt: 1.0,
        }
    }
}

/// Filtered state at the last observation plus diagnostics.
#[derive(Debug, Clone)]
pub struct KalmanEstimate {
    pub state: Vector4<f64>,
    pub cov: Matrix4<f64>,
    /// Smallest covariance eigenvalue seen across all updates.
    pub min_cov_eigenvalue: f64,
}

impl KalmanCv {
    fn transition(&self) -> Matrix4<f64> {
        let dt = self.dt;
        Matrix4::new(
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn process_cov(&self) -> Matrix4<f64> {
        // white-noise acceleration, integrated over one step
        let dt = self.dt;
        let q = self.process_noise;
        let a = q * dt * dt * dt / 3.0;
        let b = q * dt * dt / 2.0;
        let c = q * dt;
        Matrix4::new(
            a, 0.0, b, 0.0, //
            0.0, a, 0.0, b, //
            b, 0.0, c, 0.0, //
            0.0, b, 0.0, c,
        )
    }

    fn measurement() -> Matrix2x4<f64> {
        Matrix2x4::new(
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0,
        )
    }

    /// Run the filter over the observed track. Needs two points to pin
    /// down a velocity; the first two initialize the state exactly, the
    /// rest are filtered.
    pub fn filter(&self, observed: &[[f64; 2]]) -> KalmanEstimate {
        assert!(observed.len() >= 2, "need two observations for a velocity");
        let r = self.obs_noise;
        let dt = self.dt;
        let (p0, p1) = (observed[0], observed[1]);
        let mut x = Vector4::new(
            p1[0],
            p1[1],
            (p1[0] - p0[0]) / dt,
            (p1[1] - p0[1]) / dt,
        );
        // two-measurement posterior for a diffuse prior
        let mut p = Matrix4::zeros();
        for axis in 0..2 {
            let (i, j) = (axis, axis + 2);
            p[(i, i)] = r;
            p[(i, j)] = r / dt;
            p[(j, i)] = r / dt;
            p[(j, j)] = 2.0 * r / (dt * dt);
        }

        let f = self.transition();
        let q = self.process_cov();
        let h = Self::measurement();
        let r_m = Matrix2::identity() * r;
        let mut min_eig = symmetric_min_eigenvalue(&p);

        for z in &observed[2..] {
            // predict
            x = f * x;
            p = f * p * f.transpose() + q;
            // update (Joseph form)
            let z_v = Vector2::new(z[0], z[1]);
            let s = h * p * h.transpose() + r_m;
            let s_inv = s.try_inverse().expect("innovation covariance invertible");
            let k: Matrix4x2<f64> = p * h.transpose() * s_inv;
            let innovation = z_v - h * x;
            x += k * innovation;
            let ikh = Matrix4::identity() - k * h;
            p = ikh * p * ikh.transpose() + k * r_m * k.transpose();
            p = (p + p.transpose()) * 0.5;
            min_eig = min_eig.min(symmetric_min_eigenvalue(&p));
        }
        KalmanEstimate {
            state: x,
            cov: p,
            min_cov_eigenvalue: min_eig,
        }
    }

    /// Filter the observations, then roll the dynamics forward `horizon`
    /// steps without further measurements.
    pub fn predict_track(&self, observed: &[[f64; 2]], horizon: usize) -> Vec<[f64; 2]> {
        assert!(!observed.is_empty(), "need at least one observation");
        if observed.len() == 1 {
            return vec![observed[0]; horizon];
        }
        let mut x = self.filter(observed).state;
        let f = self.transition();
        (0..horizon)
            .map(|_| {
                x = f * x;
                [x[0], x[1]]
            })
            .collect()
    }
}

fn symmetric_min_eigenvalue(m: &Matrix4<f64>) -> f64 {
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Predict every eligible agent of a scenario with a closed-form baseline.
/// Returns (agent ids, trajectories over t_obs+1..=t_pred), matching the
/// learned model's prediction set.
pub fn baseline_predict(kind: BaselineKind, scenario: &Scenario) -> (Vec<i64>, Vec<Vec<[f64; 2]>>) {
    let ids = scenario.predicted_agents();
    let horizon = scenario.t_pred - scenario.t_obs;
    let tracks = ids
        .iter()
        .map(|&id| {
            let track = scenario.track(id).expect("predicted agents have tracks");
            let observed: Vec<[f64; 2]> = (1..=scenario.t_obs)
                .map(|t| track.position_at(t).expect("observation coverage"))
                .collect();
            match kind {
                BaselineKind::Linear => linear_extrapolate(&observed, horizon),
                BaselineKind::KalmanCv => KalmanCv::default().predict_track(&observed, horizon),
            }
        })
        .collect();
    (ids, tracks)
}

/// Plain displacement LSTM: every feature toggle off, one modality. With
/// zero noise the decoder sees only its own displacement embedding.
pub fn vanilla_lstm_config(base: &Config) -> Config {
    let mut cfg = base.clone();
    cfg.toggles = Toggles::none();
    cfg.model.modalities = 1;
    cfg
}

/// Noise-conditioned displacement LSTM: toggles off but multimodal, so the
/// variety loss and latent noise stay in play.
pub fn noise_lstm_config(base: &Config, modalities: usize) -> Config {
    let mut cfg = base.clone();
    cfg.toggles = Toggles::none();
    cfg.model.modalities = modalities.max(2);
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic, SyntheticSpec, Template};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cv_track(p0: [f64; 2], v: [f64; 2], n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|k| [p0[0] + v[0] * k as f64, p0[1] + v[1] * k as f64])
            .collect()
    }

    #[test]
    fn linear_fit_continues_a_line_exactly() {
        let obs = cv_track([3.0, -2.0], [0.7, 0.25], 6);
        let pred = linear_extrapolate(&obs, 4);
        for (k, p) in pred.iter().enumerate() {
            let t = (6 + k) as f64;
            assert!((p[0] - (3.0 + 0.7 * t)).abs() < 1e-12);
            assert!((p[1] - (-2.0 + 0.25 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_fit_matches_explicit_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let obs: Vec<[f64; 2]> = (0..7)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let pred = linear_extrapolate(&obs, 3);
        // uncentered normal equations, solved by 2x2 elimination
        let n = obs.len() as f64;
        for axis in 0..2 {
            let (mut st, mut stt, mut sp, mut stp) = (0.0, 0.0, 0.0, 0.0);
            for (i, p) in obs.iter().enumerate() {
                let t = i as f64;
                st += t;
                stt += t * t;
                sp += p[axis];
                stp += t * p[axis];
            }
            let det = n * stt - st * st;
            let slope = (n * stp - st * sp) / det;
            let intercept = (sp * stt - st * stp) / det;
            for (k, p) in pred.iter().enumerate() {
                let t = (obs.len() + k) as f64;
                assert!(
                    (p[axis] - (intercept + slope * t)).abs() < 1e-9,
                    "axis {axis} step {k}"
                );
            }
        }
    }

    #[test]
    fn single_observation_predicts_standing_still() {
        let obs = [[2.0, 5.0]];
        assert_eq!(linear_extrapolate(&obs, 3), vec![[2.0, 5.0]; 3]);
        assert_eq!(
            KalmanCv::default().predict_track(&obs, 3),
            vec![[2.0, 5.0]; 3]
        );
    }

    #[test]
    fn kalman_is_exact_on_noiseless_constant_velocity() {
        let obs = cv_track([-4.0, 1.5], [1.2, -0.4], 6);
        let pred = KalmanCv::default().predict_track(&obs, 6);
        let mut ade = 0.0;
        for (k, p) in pred.iter().enumerate() {
            let t = (6 + k) as f64;
            let truth = [-4.0 + 1.2 * t, 1.5 - 0.4 * t];
            ade += ((p[0] - truth[0]).powi(2) + (p[1] - truth[1]).powi(2)).sqrt();
        }
        ade /= 6.0;
        assert!(ade < 1e-9, "noiseless constant velocity must be exact: {ade}");
    }

    #[test]
    fn kalman_covariance_stays_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let obs: Vec<[f64; 2]> = cv_track([0.0, 0.0], v, 12)
                .into_iter()
                .map(|p| {
                    [
                        p[0] + rng.random_range(-0.3..0.3),
                        p[1] + rng.random_range(-0.3..0.3),
                    ]
                })
                .collect();
            let est = KalmanCv::default().filter(&obs);
            assert!(
                est.min_cov_eigenvalue >= -1e-10,
                "covariance lost positive semidefiniteness: {}",
                est.min_cov_eigenvalue
            );
        }
    }

    #[test]
    fn kalman_matches_hand_rolled_recursion() {
        // independent implementation with plain arrays and textbook
        // (non-Joseph) updates
        type M4 = [[f64; 4]; 4];
        fn matmul4(a: &M4, b: &M4) -> M4 {
            let mut out = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    for (k, bk) in b.iter().enumerate() {
                        out[i][j] += a[i][k] * bk[j];
                    }
                }
            }
            out
        }
        fn transpose4(a: &M4) -> M4 {
            let mut out = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    out[i][j] = a[j][i];
                }
            }
            out
        }

        let kf = KalmanCv {
            process_noise: 0.3,
            obs_noise: 0.2,
            dt: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let obs: Vec<[f64; 2]> = cv_track([1.0, -2.0], [0.8, 0.3], 9)
            .into_iter()
            .map(|p| {
                [
                    p[0] + rng.random_range(-0.25..0.25),
                    p[1] + rng.random_range(-0.25..0.25),
                ]
            })
            .collect();

        let dt = kf.dt;
        let r = kf.obs_noise;
        let q = kf.process_noise;
        let f: M4 = [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let (qa, qb, qc) = (q * dt * dt * dt / 3.0, q * dt * dt / 2.0, q * dt);
        let qm: M4 = [
            [qa, 0.0, qb, 0.0],
            [0.0, qa, 0.0, qb],
            [qb, 0.0, qc, 0.0],
            [0.0, qb, 0.0, qc],
        ];
        let mut x = [
            obs[1][0],
            obs[1][1],
            (obs[1][0] - obs[0][0]) / dt,
            (obs[1][1] - obs[0][1]) / dt,
        ];
        let mut p: M4 = [[0.0; 4]; 4];
        for axis in 0..2 {
            p[axis][axis] = r;
            p[axis][axis + 2] = r / dt;
            p[axis + 2][axis] = r / dt;
            p[axis + 2][axis + 2] = 2.0 * r / (dt * dt);
        }
        for z in &obs[2..] {
            // predict
            let mut xp = [0.0; 4];
            for i in 0..4 {
                for (k, &xk) in x.iter().enumerate() {
                    xp[i] += f[i][k] * xk;
                }
            }
            x = xp;
            let mut pp = matmul4(&matmul4(&f, &p), &transpose4(&f));
            for i in 0..4 {
                for j in 0..4 {
                    pp[i][j] += qm[i][j];
                }
            }
            p = pp;
            // update: S = P[0..2][0..2] + rI, K = P H^T S^-1
            let s = [[p[0][0] + r, p[0][1]], [p[1][0], p[1][1] + r]];
            let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
            let si = [
                [s[1][1] / det, -s[0][1] / det],
                [-s[1][0] / det, s[0][0] / det],
            ];
            let mut k_gain = [[0.0; 2]; 4];
            for i in 0..4 {
                for j in 0..2 {
                    for l in 0..2 {
                        k_gain[i][j] += p[i][l] * si[l][j];
                    }
                }
            }
            let innov = [z[0] - x[0], z[1] - x[1]];
            for i in 0..4 {
                x[i] += k_gain[i][0] * innov[0] + k_gain[i][1] * innov[1];
            }
            // P' = (I - K H) P
            let mut ikh: M4 = [[0.0; 4]; 4];
            for (i, row) in ikh.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            for i in 0..4 {
                for j in 0..2 {
                    ikh[i][j] -= k_gain[i][j];
                }
            }
            p = matmul4(&ikh, &p);
        }

        let est = kf.filter(&obs);
        for i in 0..4 {
            assert!(
                (est.state[i] - x[i]).abs() < 1e-10,
                "state[{i}]: {} vs {}",
                est.state[i],
                x[i]
            );
            for j in 0..4 {
                assert!(
                    (est.cov[(i, j)] - p[i][j]).abs() < 1e-9,
                    "cov[{i}][{j}]: {} vs {}",
                    est.cov[(i, j)],
                    p[i][j]
                );
            }
        }
    }

    #[test]
    fn baseline_predict_skips_the_planned_ego() {
        let spec = SyntheticSpec {
            template: Template::EgoWithPlan,
            count: 1,
            pedestrians: 3,
            t_obs: 4,
            t_pred: 8,
            ..Default::default()
        };
        let scenario = &generate_synthetic(&spec, 12)[0];
        for kind in [BaselineKind::Linear, BaselineKind::KalmanCv] {
            let (ids, tracks) = baseline_predict(kind, scenario);
            assert!(!ids.contains(&0), "planned ego must not be predicted");
            assert_eq!(ids.len(), 3);
            assert!(tracks.iter().all(|t| t.len() == 4));
        }
    }

    #[test]
    fn recurrent_baseline_presets_disable_every_feature() {
        let base = Config::default();
        let vanilla = vanilla_lstm_config(&base);
        assert_eq!(vanilla.toggles, Toggles::none());
        assert_eq!(vanilla.model.modalities, 1);
        let noisy = noise_lstm_config(&base, 3);
        assert_eq!(noisy.toggles, Toggles::none());
        assert_eq!(noisy.model.modalities, 3);
        // untouched fields carry over
        assert_eq!(vanilla.model.d_embed, base.model.d_embed);
        assert_eq!(noisy.train, base.train);
    }
}
