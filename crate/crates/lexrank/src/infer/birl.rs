//! Bayesian IRL baseline: Metropolis-Hastings over the weights of a linear
//! per-step reward, with a Boltzmann action likelihood computed from
//! Q-values solved by value iteration on a discretized version of the
//! treatment environment.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::StateGrid;
use crate::envs::CancerEnv;
use crate::error::{Error, Result};
use crate::rewards::{RewardFamily, Trajectory};

/// Chain and solver settings. Defaults: 10000 samples, the first 1000
/// ignored, every 100th of the remainder averaged, multiplicative proposals
/// with log-std 0.01.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BirlConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal_std: f64,
    /// Boltzmann action-likelihood temperature.
    pub boltzmann_c: f64,
    /// Episode length used to express per-step rewards in trajectory-mean
    /// units, matching the reward the trajectories are scored with.
    pub horizon: usize,
    pub discount: f64,
    pub vi_tol: f64,
    pub vi_max_sweeps: usize,
    pub seed: u64,
}

impl Default for BirlConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            burn_in: 1_000,
            thin: 100,
            proposal_std: 0.01,
            boltzmann_c: 3.0,
            horizon: 20,
            discount: 0.9,
            vi_tol: 1e-6,
            vi_max_sweeps: 100_000,
            seed: 0,
        }
    }
}

/// Chain summary returned alongside the posterior-mean reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BirlDiagnostics {
    pub acceptance_rate: f64,
    pub n_kept: usize,
    pub mean_log_theta_z: f64,
    pub mean_log_theta_w: f64,
    pub total_vi_sweeps: usize,
}

/// Standard normal CDF via the Abramowitz-Stegun 26.2.17 polynomial.
fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.2316419 * x.abs());
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let tail = pdf * poly;
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Transition model of the discretized environment: per action, independent
/// row-stochastic matrices over the tumor axis and the WBC axis.
struct DiscretizedMdp {
    grid: StateGrid,
    /// `pz[a][i * z_bins + j]`: probability of moving from tumor bin i to j.
    pz: [Vec<f64>; 2],
    pw: [Vec<f64>; 2],
    z_centers: Vec<f64>,
    w_centers: Vec<f64>,
}

impl DiscretizedMdp {
    fn new(env: &CancerEnv, grid: &StateGrid) -> Self {
        let z_centers = grid.z_centers();
        let w_centers = grid.w_centers();
        let sigma = env.config.noise_std;
        let build_axis = |centers: &[f64], min: f64, max: f64, bins: usize, mean_of: &dyn Fn(f64) -> f64| {
            let width = (max - min) / bins as f64;
            let mut matrix = vec![0.0; bins * bins];
            for (i, &c) in centers.iter().enumerate() {
                let mu = mean_of(c);
                for j in 0..bins {
                    let lo = min + j as f64 * width;
                    let hi = lo + width;
                    let p = if sigma > 0.0 {
                        // Edge bins absorb the tails, matching index clamping.
                        let upper = if j + 1 == bins {
                            1.0
                        } else {
                            normal_cdf((hi - mu) / sigma)
                        };
                        let lower = if j == 0 {
                            0.0
                        } else {
                            normal_cdf((lo - mu) / sigma)
                        };
                        upper - lower
                    } else {
                        f64::from(u8::from(
                            (mu >= lo || j == 0) && (mu < hi || j + 1 == bins),
                        ))
                    };
                    matrix[i * bins + j] = p.max(0.0);
                }
            }
            matrix
        };
        let pz = [0u8, 1u8].map(|a| {
            build_axis(&z_centers, grid.z_min, grid.z_max, grid.z_bins, &|z: f64| {
                z + 0.003 * z * (1000.0 / z.max(1e-3)).ln() - 0.15 * z * f64::from(a)
            })
        });
        let pw = [0u8, 1u8].map(|a| {
            build_axis(&w_centers, grid.w_min, grid.w_max, grid.w_bins, &|w: f64| {
                w + 1.2 - 0.15 * w - 0.4 * w * f64::from(a)
            })
        });
        Self {
            grid: grid.clone(),
            pz,
            pw,
            z_centers,
            w_centers,
        }
    }

    fn n_states(&self) -> usize {
        self.grid.n_states()
    }

    /// Expected next value per state for one action:
    /// `EV = Pz * V * Pw^T` over the factored axes.
    fn expected_value(&self, action: usize, v: &[f64], tmp: &mut [f64], out: &mut [f64]) {
        let nz = self.grid.z_bins;
        let nw = self.grid.w_bins;
        let pw = &self.pw[action];
        let pz = &self.pz[action];
        // tmp[i * nw + l] = sum_j V[i * nw + j] * Pw[l * nw + j]
        for i in 0..nz {
            let v_row = &v[i * nw..(i + 1) * nw];
            for l in 0..nw {
                let pw_row = &pw[l * nw..(l + 1) * nw];
                let mut acc = 0.0;
                for j in 0..nw {
                    acc += v_row[j] * pw_row[j];
                }
                tmp[i * nw + l] = acc;
            }
        }
        // out[k * nw + l] = sum_i Pz[k * nz + i] * tmp[i * nw + l]
        for k in 0..nz {
            let pz_row = &pz[k * nz..(k + 1) * nz];
            for l in 0..nw {
                let mut acc = 0.0;
                for i in 0..nz {
                    acc += pz_row[i] * tmp[i * nw + l];
                }
                out[k * nw + l] = acc;
            }
        }
    }

    fn state_rewards(&self, theta_z: f64, theta_w: f64, scale: f64, out: &mut [f64]) {
        let nw = self.grid.w_bins;
        for (i, &zc) in self.z_centers.iter().enumerate() {
            for (j, &wc) in self.w_centers.iter().enumerate() {
                out[i * nw + j] = scale * (-theta_z * zc + theta_w * wc);
            }
        }
    }

    /// Value iteration to the configured tolerance, warm-started from `v`.
    /// Writes Q-values for both actions and returns the sweep count.
    fn solve(
        &self,
        theta_z: f64,
        theta_w: f64,
        config: &BirlConfig,
        v: &mut Vec<f64>,
        q: &mut [Vec<f64>; 2],
    ) -> Result<usize> {
        let n = self.n_states();
        v.resize(n, 0.0);
        let mut rewards = vec![0.0; n];
        self.state_rewards(theta_z, theta_w, 1.0 / config.horizon.max(1) as f64, &mut rewards);
        let mut tmp = vec![0.0; n];
        let mut ev = [vec![0.0; n], vec![0.0; n]];
        for sweep in 1..=config.vi_max_sweeps {
            for a in 0..2 {
                self.expected_value(a, v, &mut tmp, &mut ev[a]);
            }
            let mut delta: f64 = 0.0;
            for s in 0..n {
                let q0 = rewards[s] + config.discount * ev[0][s];
                let q1 = rewards[s] + config.discount * ev[1][s];
                let new_v = q0.max(q1);
                delta = delta.max((new_v - v[s]).abs());
                v[s] = new_v;
                q[0][s] = q0;
                q[1][s] = q1;
            }
            if delta < config.vi_tol {
                return Ok(sweep);
            }
        }
        Err(Error::ValueIteration(format!(
            "no convergence within {} sweeps (discount {}, tol {})",
            config.vi_max_sweeps, config.discount, config.vi_tol
        )))
    }
}

/// Boltzmann log-likelihood of the demonstrated actions under the Q-values.
fn demo_log_likelihood(states: &[usize], actions: &[u8], q: &[Vec<f64>; 2], c: f64) -> f64 {
    let mut ll = 0.0;
    for (&s, &a) in states.iter().zip(actions) {
        let q0 = c * q[0][s];
        let q1 = c * q[1][s];
        let m = q0.max(q1);
        let lse = m + ((q0 - m).exp() + (q1 - m).exp()).ln();
        ll += if a == 0 { q0 } else { q1 } - lse;
    }
    ll
}

/// Posterior-mean linear reward weights from demonstrations, via
/// Metropolis-Hastings with multiplicative log-normal proposals and a flat
/// prior on the log-weights.
pub fn fit_birl<R: Rng>(
    demos: &[Trajectory],
    env: &CancerEnv,
    grid: &StateGrid,
    config: &BirlConfig,
    rng: &mut R,
) -> Result<(RewardFamily, BirlDiagnostics)> {
    if demos.is_empty() {
        return Err(Error::invalid("BIRL needs at least one demonstration"));
    }
    if config.n_samples == 0 {
        return Err(Error::invalid("chain length must be at least 1"));
    }
    if config.burn_in >= config.n_samples {
        return Err(Error::invalid(format!(
            "burn-in {} leaves no samples out of {}",
            config.burn_in, config.n_samples
        )));
    }
    let mdp = DiscretizedMdp::new(env, grid);
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for traj in demos {
        for ((&z, &w), &a) in traj.tumor.iter().zip(traj.wbc.iter()).zip(&traj.actions) {
            states.push(grid.index(z, w));
            actions.push(a);
        }
    }

    let proposal = Normal::new(0.0, config.proposal_std)
        .map_err(|e| Error::invalid(format!("proposal std: {e}")))?;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut q = [vec![0.0; n], vec![0.0; n]];
    let mut total_sweeps = 0usize;

    let mut theta = [1.0f64, 1.0f64];
    total_sweeps += mdp.solve(theta[0], theta[1], config, &mut v, &mut q)?;
    let mut ll = demo_log_likelihood(&states, &actions, &q, config.boltzmann_c);

    let mut accepted = 0usize;
    let mut kept = 0usize;
    let mut sum_theta = [0.0f64, 0.0f64];
    let mut sum_log_theta = [0.0f64, 0.0f64];
    for i in 1..=config.n_samples {
        let candidate = [
            theta[0] * proposal.sample(rng).exp(),
            theta[1] * proposal.sample(rng).exp(),
        ];
        total_sweeps += mdp.solve(candidate[0], candidate[1], config, &mut v, &mut q)?;
        let cand_ll = demo_log_likelihood(&states, &actions, &q, config.boltzmann_c);
        if rng.gen::<f64>().ln() < cand_ll - ll {
            theta = candidate;
            ll = cand_ll;
            accepted += 1;
        }
        if i > config.burn_in && (i - config.burn_in).is_multiple_of(config.thin) {
            kept += 1;
            sum_theta[0] += theta[0];
            sum_theta[1] += theta[1];
            sum_log_theta[0] += theta[0].ln();
            sum_log_theta[1] += theta[1].ln();
        }
    }
    if kept == 0 {
        return Err(Error::invalid(
            "thinning produced no kept samples; lower thin or burn_in",
        ));
    }
    let family = RewardFamily::TrajLinear {
        theta_z: sum_theta[0] / kept as f64,
        theta_w: sum_theta[1] / kept as f64,
    };
    let diagnostics = BirlDiagnostics {
        acceptance_rate: accepted as f64 / config.n_samples as f64,
        n_kept: kept,
        mean_log_theta_z: sum_log_theta[0] / kept as f64,
        mean_log_theta_w: sum_log_theta[1] / kept as f64,
        total_vi_sweeps: total_sweeps,
    };
    Ok((family, diagnostics))
}
