//! Policies and their learners: thresholded lexicographic Q-learning, the
//! uniform-mixture behavior policy, behavioral cloning, and the
//! preference-frequency policy comparison metric.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::CancerEnv;
use crate::error::{Error, Result};
use crate::infer::{rmsprop_minimize, FitConfig};
use crate::prefmodel::LexRewardModel;
use crate::rewards::{softmin, Alternative, RewardFamily, Trajectory};

/// Uniform discretization of the (tumor, wbc) plane for tabular methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub z_min: f64,
    pub z_max: f64,
    pub z_bins: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub w_bins: usize,
}

impl StateGrid {
    pub fn new(
        z_min: f64,
        z_max: f64,
        z_bins: usize,
        w_min: f64,
        w_max: f64,
        w_bins: usize,
    ) -> Result<Self> {
        if !(z_min.is_finite() && z_max.is_finite() && w_min.is_finite() && w_max.is_finite()) {
            return Err(Error::invalid("grid bounds must be finite"));
        }
        if z_min >= z_max || w_min >= w_max {
            return Err(Error::invalid("grid lower bounds must be below uppers"));
        }
        if z_bins < 2 || w_bins < 2 {
            return Err(Error::invalid("grid needs at least 2 bins per axis"));
        }
        Ok(Self {
            z_min,
            z_max,
            z_bins,
            w_min,
            w_max,
            w_bins,
        })
    }

    /// Default used by the treatment studies: z in [0, 60], w in [0, 12],
    /// 24 bins per axis.
    pub fn default_cancer() -> Self {
        Self::new(0.0, 60.0, 24, 0.0, 12.0, 24).expect("valid default grid")
    }

    pub fn n_states(&self) -> usize {
        self.z_bins * self.w_bins
    }

    fn axis_bin(v: f64, min: f64, max: f64, bins: usize) -> usize {
        let width = (max - min) / bins as f64;
        let raw = ((v - min) / width).floor();
        raw.clamp(0.0, (bins - 1) as f64) as usize
    }

    /// Out-of-range states clamp to the nearest edge bin.
    pub fn index(&self, z: f64, w: f64) -> usize {
        let zi = Self::axis_bin(z, self.z_min, self.z_max, self.z_bins);
        let wi = Self::axis_bin(w, self.w_min, self.w_max, self.w_bins);
        zi * self.w_bins + wi
    }

    pub fn z_centers(&self) -> Vec<f64> {
        let width = (self.z_max - self.z_min) / self.z_bins as f64;
        (0..self.z_bins)
            .map(|i| self.z_min + (i as f64 + 0.5) * width)
            .collect()
    }

    pub fn w_centers(&self) -> Vec<f64> {
        let width = (self.w_max - self.w_min) / self.w_bins as f64;
        (0..self.w_bins)
            .map(|i| self.w_min + (i as f64 + 0.5) * width)
            .collect()
    }
}

/// Lexicographic action filter: at every level keep the surviving actions
/// whose value is within `threshold` of the best surviving value, then let
/// the next level refine further.
pub fn lex_filter(q_per_level: &[&[f64]], thresholds: &[f64]) -> Vec<usize> {
    let n_actions = q_per_level.first().map_or(0, |q| q.len());
    let mut survivors: Vec<usize> = (0..n_actions).collect();
    for (q, &tau) in q_per_level.iter().zip(thresholds) {
        let best = survivors
            .iter()
            .map(|&a| q[a])
            .fold(f64::NEG_INFINITY, f64::max);
        survivors.retain(|&a| q[a] >= best - tau);
        if survivors.len() <= 1 {
            break;
        }
    }
    survivors
}

/// A tabular policy holding one Q-table per priority level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub grid: StateGrid,
    /// Per level, row-major `state * 2 + action`.
    pub q: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub visits: Vec<u32>,
}

impl TabularPolicy {
    fn survivors(&self, state: usize) -> Vec<usize> {
        let slices: Vec<&[f64]> = self
            .q
            .iter()
            .map(|q| &q[state * 2..state * 2 + 2])
            .collect();
        lex_filter(&slices, &self.thresholds)
    }

    /// Fraction of grid states visited during training.
    pub fn coverage(&self) -> f64 {
        let visited = self.visits.iter().filter(|&&v| v > 0).count();
        visited as f64 / self.visits.len() as f64
    }
}

/// Feedforward action classifier produced by behavioral cloning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub input_loc: [f64; 2],
    pub input_scale: [f64; 2],
}

impl MlpPolicy {
    fn forward(&self, z: f64, w: f64) -> [f64; 2] {
        let x = [
            (z - self.input_loc[0]) / self.input_scale[0],
            (w - self.input_loc[1]) / self.input_scale[1],
        ];
        let mut logits = [self.b2[0], self.b2[1]];
        for j in 0..self.hidden {
            let pre = self.w1[j * 2] * x[0] + self.w1[j * 2 + 1] * x[1] + self.b1[j];
            let h = pre.max(0.0);
            logits[0] += self.w2[j] * h;
            logits[1] += self.w2[self.hidden + j] * h;
        }
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }
}

/// A mapping from patient state to a distribution over the two actions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Tabular(TabularPolicy),
    Mixture {
        base: Box<Policy>,
        uniform_weight: f64,
    },
    Cloned(MlpPolicy),
    Constant {
        action: u8,
    },
    Uniform,
}

impl Policy {
    pub fn action_probs(&self, z: f64, w: f64) -> [f64; 2] {
        match self {
            Policy::Tabular(table) => {
                let state = table.grid.index(z, w);
                if table.visits[state] == 0 {
                    return [0.5, 0.5];
                }
                let survivors = table.survivors(state);
                let p = 1.0 / survivors.len() as f64;
                let mut probs = [0.0, 0.0];
                for a in survivors {
                    probs[a] = p;
                }
                probs
            }
            Policy::Mixture {
                base,
                uniform_weight,
            } => {
                let base_probs = base.action_probs(z, w);
                [
                    (1.0 - uniform_weight) * base_probs[0] + uniform_weight * 0.5,
                    (1.0 - uniform_weight) * base_probs[1] + uniform_weight * 0.5,
                ]
            }
            Policy::Cloned(mlp) => mlp.forward(z, w),
            Policy::Constant { action } => {
                if *action == 0 {
                    [1.0, 0.0]
                } else {
                    [0.0, 1.0]
                }
            }
            Policy::Uniform => [0.5, 0.5],
        }
    }

    pub fn sample_action<R: Rng>(&self, z: f64, w: f64, rng: &mut R) -> u8 {
        let probs = self.action_probs(z, w);
        if rng.gen::<f64>() < probs[0] {
            0
        } else {
            1
        }
    }
}

/// Mixes a policy with the uniform policy; this is the imperfect-clinician
/// model used to generate demonstrations.
pub fn make_behavior_policy(optimal: Policy, epsilon_explore: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&epsilon_explore) {
        return Err(Error::invalid(format!(
            "mixture weight must lie in [0, 1], got {epsilon_explore}"
        )));
    }
    Ok(Policy::Mixture {
        base: Box::new(optimal),
        uniform_weight: epsilon_explore,
    })
}

/// Per-step reward signal for one level, scaled so that undiscounted episode
/// returns line up with the trajectory-level rewards. Capped families apply
/// their cap per step; evaluation always uses the exact trajectory reward.
fn per_step_reward(family: &RewardFamily, z: f64, w: f64, horizon: usize) -> Result<f64> {
    let tau = horizon as f64;
    match family {
        RewardFamily::CancerGroundTruthWbc => Ok(w.min(5.0) / tau),
        RewardFamily::CancerGroundTruthTumor => Ok(-z / tau),
        RewardFamily::TrajThresholdedLinear {
            theta_max,
            theta_z,
            theta_w,
            softmin_beta,
        } => Ok(softmin(*theta_max, -theta_z * z + theta_w * w, *softmin_beta) / tau),
        RewardFamily::TrajLinear { theta_z, theta_w } => Ok((-theta_z * z + theta_w * w) / tau),
        other => Err(Error::invalid(format!(
            "no per-step decomposition for this reward family: {other:?}"
        ))),
    }
}

/// Q-learning settings. Exploration anneals linearly from `explore_start`
/// to `explore_end` over the episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub learning_rate: f64,
    /// Final learning rate; the step size anneals linearly alongside
    /// exploration.
    pub learning_rate_end: f64,
    pub discount: f64,
    pub explore_start: f64,
    pub explore_end: f64,
    /// Per-level action-filter widths; defaults to each level's epsilon,
    /// widened by `threshold_scale` on non-final levels.
    pub thresholds: Option<Vec<f64>>,
    /// Discounted Q-values compress the level-value differences the filter
    /// compares against reward-unit widths; non-final thresholds are widened
    /// by this factor to compensate.
    pub threshold_scale: f64,
    /// Extra independently-trained candidates; the returned policy wins a
    /// rollout tournament judged by the training reward model itself.
    pub restarts: usize,
    /// Trajectory pairs per tournament comparison.
    pub selection_samples: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            episodes: 100_000,
            horizon: 20,
            learning_rate: 0.05,
            learning_rate_end: 0.05,
            discount: 0.95,
            explore_start: 1.0,
            explore_end: 0.02,
            thresholds: None,
            threshold_scale: 1.8,
            restarts: 2,
            selection_samples: 400,
        }
    }
}

/// Tabular Q-learning over one Q-table per reward level, with lexicographic
/// action filtering during both exploration and bootstrapping. Training runs
/// `1 + restarts` times; the candidates play a sampled-rollout tournament
/// judged by `reward_levels` and the winner is returned.
pub fn lex_q_learning<R: Rng>(
    reward_levels: &LexRewardModel,
    env: &CancerEnv,
    grid: &StateGrid,
    config: &RlConfig,
    rng: &mut R,
) -> Result<Policy> {
    let mut best: Option<Policy> = None;
    for _ in 0..=config.restarts {
        let candidate = train_lex_q(reward_levels, env, grid, config, rng)?;
        best = Some(match best {
            None => candidate,
            Some(incumbent) => {
                let freq = policy_pref_frequency(
                    &candidate,
                    &incumbent,
                    reward_levels,
                    env,
                    config.horizon,
                    config.selection_samples,
                    rng,
                )?;
                if freq.mean > 0.5 {
                    candidate
                } else {
                    incumbent
                }
            }
        });
    }
    Ok(best.expect("at least one candidate"))
}

fn train_lex_q<R: Rng>(
    reward_levels: &LexRewardModel,
    env: &CancerEnv,
    grid: &StateGrid,
    config: &RlConfig,
    rng: &mut R,
) -> Result<Policy> {
    let k = reward_levels.k();
    let n_states = grid.n_states();
    let thresholds = match &config.thresholds {
        Some(t) => {
            if t.len() != k {
                return Err(Error::invalid(format!(
                    "expected {k} thresholds, got {}",
                    t.len()
                )));
            }
            t.clone()
        }
        None => reward_levels
            .levels
            .iter()
            .enumerate()
            .map(|(i, (_, p))| {
                if i + 1 < k {
                    config.threshold_scale * p.epsilon
                } else {
                    p.epsilon
                }
            })
            .collect(),
    };
    let mut q: Vec<Vec<f64>> = vec![vec![0.0; n_states * 2]; k];
    let mut visits = vec![0u32; n_states];

    let greedy = |q: &[Vec<f64>], state: usize| -> Vec<usize> {
        let slices: Vec<&[f64]> = q.iter().map(|t| &t[state * 2..state * 2 + 2]).collect();
        lex_filter(&slices, &thresholds)
    };

    for episode in 0..config.episodes {
        let frac = if config.episodes > 1 {
            episode as f64 / (config.episodes - 1) as f64
        } else {
            0.0
        };
        let explore = config.explore_start + (config.explore_end - config.explore_start) * frac;
        let lr = config.learning_rate + (config.learning_rate_end - config.learning_rate) * frac;
        let mut state = env.init_state(rng);
        for t in 0..config.horizon {
            let s_idx = grid.index(state.z, state.w);
            visits[s_idx] += 1;
            let action = if rng.gen::<f64>() < explore {
                rng.gen_range(0..2u8)
            } else {
                let survivors = greedy(&q, s_idx);
                survivors[rng.gen_range(0..survivors.len())] as u8
            };
            let next = env.step(state, action, rng);
            let terminal = t + 1 == config.horizon;
            let next_idx = grid.index(next.z, next.w);
            let next_action = if terminal { 0 } else { greedy(&q, next_idx)[0] };
            for (level, (family, _)) in reward_levels.levels.iter().enumerate() {
                let r = per_step_reward(family, state.z, state.w, config.horizon)?;
                let target = if terminal {
                    r
                } else {
                    r + config.discount * q[level][next_idx * 2 + next_action]
                };
                let cell = &mut q[level][s_idx * 2 + action as usize];
                *cell += lr * (target - *cell);
            }
            state = next;
        }
    }

    Ok(Policy::Tabular(TabularPolicy {
        grid: grid.clone(),
        q,
        thresholds,
        visits,
    }))
}

/// Behavioral-cloning settings: network width plus the optimizer knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub rmsprop_discount: f64,
    pub patience: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            learning_rate: 0.001,
            rmsprop_discount: 0.9,
            patience: 100,
            max_iters: 2_000,
            seed: 0,
        }
    }
}

/// Fits a one-hidden-layer action classifier to the demonstrated
/// state-action pairs by full-batch RMSprop on the cross-entropy loss.
/// Returns the cloned policy and its loss trace.
pub fn behavioral_cloning(demos: &[Trajectory], config: &BcConfig) -> Result<(Policy, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::invalid("behavioral cloning needs demonstrations"));
    }
    if config.hidden == 0 {
        return Err(Error::invalid("hidden layer width must be at least 1"));
    }
    let hidden = config.hidden;
    let samples: Vec<(f64, f64, usize)> = demos
        .iter()
        .flat_map(|traj| {
            traj.actions
                .iter()
                .zip(traj.tumor.iter().zip(traj.wbc.iter()))
                .map(|(&a, (&z, &w))| (z, w, a as usize))
        })
        .collect();
    let n = samples.len() as f64;
    let mean_z = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_w = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let var_z = samples.iter().map(|s| (s.0 - mean_z).powi(2)).sum::<f64>() / n;
    let var_w = samples.iter().map(|s| (s.1 - mean_w).powi(2)).sum::<f64>() / n;
    let input_loc = [mean_z, mean_w];
    let input_scale = [var_z.sqrt().max(1e-6), var_w.sqrt().max(1e-6)];

    // Parameter layout: w1, b1, w2, b2.
    let n_params = hidden * 2 + hidden + 2 * hidden + 2;
    let (w1_at, b1_at, w2_at, b2_at) = (0, hidden * 2, hidden * 3, hidden * 5);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    let init_w1 = Normal::new(0.0, 1.0 / (2.0f64).sqrt()).unwrap();
    let mut params = vec![0.0; n_params];
    for p in params[w1_at..b1_at].iter_mut() {
        *p = init_w1.sample(&mut rng);
    }
    let init_w2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
    for p in params[w2_at..b2_at].iter_mut() {
        *p = init_w2.sample(&mut rng);
    }

    let fit_config = FitConfig {
        learning_rate: config.learning_rate,
        rmsprop_discount: config.rmsprop_discount,
        patience: config.patience,
        max_iters: config.max_iters,
        ..FitConfig::default()
    };
    let mut h_buf = vec![0.0; hidden];
    let mut pre_buf = vec![0.0; hidden];
    let (params, trace, _converged) = rmsprop_minimize(params, &fit_config, |params, grads| {
        let (w1, rest) = params.split_at(b1_at);
        let (b1, rest2) = rest.split_at(hidden);
        let (w2, b2) = rest2.split_at(2 * hidden);
        let mut loss = 0.0;
        for &(z, w, action) in &samples {
            let x = [
                (z - input_loc[0]) / input_scale[0],
                (w - input_loc[1]) / input_scale[1],
            ];
            for j in 0..hidden {
                pre_buf[j] = w1[j * 2] * x[0] + w1[j * 2 + 1] * x[1] + b1[j];
                h_buf[j] = pre_buf[j].max(0.0);
            }
            let mut logits = [b2[0], b2[1]];
            for j in 0..hidden {
                logits[0] += w2[j] * h_buf[j];
                logits[1] += w2[hidden + j] * h_buf[j];
            }
            let m = logits[0].max(logits[1]);
            let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
            let z_norm = e[0] + e[1];
            let p = [e[0] / z_norm, e[1] / z_norm];
            loss -= p[action].max(1e-300).ln();
            let dlogits = [
                p[0] - if action == 0 { 1.0 } else { 0.0 },
                p[1] - if action == 1 { 1.0 } else { 0.0 },
            ];
            grads[b2_at] += dlogits[0];
            grads[b2_at + 1] += dlogits[1];
            for j in 0..hidden {
                grads[w2_at + j] += dlogits[0] * h_buf[j];
                grads[w2_at + hidden + j] += dlogits[1] * h_buf[j];
                if pre_buf[j] > 0.0 {
                    let dh = w2[j] * dlogits[0] + w2[hidden + j] * dlogits[1];
                    grads[w1_at + j * 2] += dh * x[0];
                    grads[w1_at + j * 2 + 1] += dh * x[1];
                    grads[b1_at + j] += dh;
                }
            }
        }
        Ok(loss)
    })?;

    let policy = Policy::Cloned(MlpPolicy {
        hidden,
        w1: params[w1_at..b1_at].to_vec(),
        b1: params[b1_at..w2_at].to_vec(),
        w2: params[w2_at..b2_at].to_vec(),
        b2: params[b2_at..].to_vec(),
        input_loc,
        input_scale,
    });
    Ok((policy, trace))
}

/// Monte-Carlo estimate of how often trajectories from the first policy are
/// preferred to trajectories from the second under the ground-truth model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrefFrequency {
    pub mean: f64,
    pub std_error: f64,
}

/// Samples `n_samples` independent trajectory pairs and averages the raw
/// mixture preference probability of the ground-truth model.
pub fn policy_pref_frequency<R: Rng>(
    pi_star: &Policy,
    pi_circ: &Policy,
    ground_truth: &LexRewardModel,
    env: &CancerEnv,
    horizon: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<PrefFrequency> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample pair"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let star = Alternative::Traj(env.rollout(pi_star, horizon, false, rng)?);
        let circ = Alternative::Traj(env.rollout(pi_circ, horizon, false, rng)?);
        let p = ground_truth.lex_pref_prob(&star, &circ)?;
        sum += p;
        sum_sq += p * p;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(PrefFrequency {
        mean,
        std_error: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::CancerEnvConfig;
    use crate::prefmodel::LevelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cancer_truth(epsilon: f64) -> LexRewardModel {
        LexRewardModel::new(vec![
            (
                RewardFamily::CancerGroundTruthWbc,
                LevelParams {
                    alpha: 1.0,
                    epsilon,
                },
            ),
            (
                RewardFamily::CancerGroundTruthTumor,
                LevelParams {
                    alpha: 1.0,
                    epsilon,
                },
            ),
        ])
        .unwrap()
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(StateGrid::new(0.0, 60.0, 1, 0.0, 12.0, 24).is_err());
        assert!(StateGrid::new(60.0, 0.0, 24, 0.0, 12.0, 24).is_err());
        assert!(StateGrid::new(0.0, f64::INFINITY, 24, 0.0, 12.0, 24).is_err());
    }

    #[test]
    fn grid_clamps_out_of_range() {
        let grid = StateGrid::default_cancer();
        assert_eq!(grid.index(-5.0, -5.0), 0);
        assert_eq!(grid.index(1000.0, 1000.0), grid.n_states() - 1);
        assert!(grid.index(30.0, 6.0) < grid.n_states());
    }

    #[test]
    fn lex_filter_matches_brute_force_on_three_actions() {
        // Brute-force enumeration of the filter definition on hand-built
        // Q-rows, three actions, two levels.
        let cases: Vec<([f64; 3], [f64; 3], [f64; 2], Vec<usize>)> = vec![
            // Level 1 separates everything.
            ([1.0, 0.0, -1.0], [0.0, 5.0, 9.0], [0.1, 0.1], vec![0]),
            // Level 1 ties two actions, level 2 breaks the tie.
            ([1.0, 0.95, 0.0], [0.0, 5.0, 9.0], [0.1, 0.1], vec![1]),
            // Everything within threshold at both levels.
            (
                [1.0, 0.95, 0.92],
                [5.0, 5.0, 5.01],
                [0.1, 0.1],
                vec![0, 1, 2],
            ),
            // Zero thresholds keep exact maxima only.
            ([1.0, 1.0, 0.5], [2.0, 3.0, 9.0], [0.0, 0.0], vec![1]),
        ];
        for (q1, q2, taus, expected) in cases {
            let got = lex_filter(&[&q1, &q2], &taus);
            assert_eq!(got, expected, "q1={q1:?} q2={q2:?} taus={taus:?}");
            // Independent brute force: filter level by level.
            let mut survivors: Vec<usize> = (0..3).collect();
            for (q, tau) in [(q1, taus[0]), (q2, taus[1])] {
                let best = survivors.iter().map(|&a| q[a]).fold(f64::MIN, f64::max);
                survivors = survivors
                    .into_iter()
                    .filter(|&a| q[a] >= best - tau)
                    .collect();
            }
            assert_eq!(got, survivors);
        }
    }

    #[test]
    fn behavior_policy_mixture_arithmetic() {
        let optimal = Policy::Constant { action: 1 };
        let b = make_behavior_policy(optimal.clone(), 0.5).unwrap();
        assert_eq!(b.action_probs(10.0, 5.0), [0.25, 0.75]);
        let same = make_behavior_policy(optimal.clone(), 0.0).unwrap();
        assert_eq!(same.action_probs(3.0, 3.0), [0.0, 1.0]);
        let uniform = make_behavior_policy(optimal, 1.0).unwrap();
        assert_eq!(uniform.action_probs(3.0, 3.0), [0.5, 0.5]);
        assert!(make_behavior_policy(Policy::Uniform, 1.5).is_err());
    }

    #[test]
    fn action_probs_normalize_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let env = CancerEnv::default();
        let truth = cancer_truth(0.1);
        let config = RlConfig {
            episodes: 300,
            ..RlConfig::default()
        };
        let policy =
            lex_q_learning(&truth, &env, &StateGrid::default_cancer(), &config, &mut rng).unwrap();
        let behavior = make_behavior_policy(policy, 0.5).unwrap();
        for z in [0.0, 15.0, 30.0, 59.0, 80.0] {
            for w in [0.0, 3.0, 6.0, 11.0, 20.0] {
                let p = behavior.action_probs(z, w);
                assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_level_reduces_to_standard_q_learning() {
        // With one level the filter is a plain argmax within threshold; a
        // trivially better action must dominate the learned policy.
        let truth = LexRewardModel::new(vec![(
            RewardFamily::CancerGroundTruthTumor,
            LevelParams {
                alpha: 1.0,
                epsilon: 0.0,
            },
        )])
        .unwrap();
        let env = CancerEnv::new(CancerEnvConfig {
            noise_std: 0.1,
            ..CancerEnvConfig::default()
        });
        let config = RlConfig {
            episodes: 4000,
            thresholds: Some(vec![0.01]),
            ..RlConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy =
            lex_q_learning(&truth, &env, &StateGrid::default_cancer(), &config, &mut rng).unwrap();
        // Minimizing tumor volume alone means treating at typical states.
        let probs = policy.action_probs(30.0, 8.0);
        assert!(probs[1] > 0.9, "expected treatment, got {probs:?}");
    }

    #[test]
    fn unvisited_states_fall_back_to_uniform() {
        let table = TabularPolicy {
            grid: StateGrid::default_cancer(),
            q: vec![vec![1.0; StateGrid::default_cancer().n_states() * 2]],
            thresholds: vec![0.1],
            visits: vec![0; StateGrid::default_cancer().n_states()],
        };
        let policy = Policy::Tabular(table);
        assert_eq!(policy.action_probs(30.0, 6.0), [0.5, 0.5]);
    }

    #[test]
    fn cloning_recovers_constant_action() {
        let env = CancerEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let demos: Vec<Trajectory> = (0..30)
            .map(|_| {
                env.rollout(&Policy::Constant { action: 1 }, 10, false, &mut rng)
                    .unwrap()
            })
            .collect();
        let config = BcConfig {
            max_iters: 400,
            ..BcConfig::default()
        };
        let (policy, trace) = behavioral_cloning(&demos, &config).unwrap();
        for traj in &demos {
            for (&z, &w) in traj.tumor.iter().zip(traj.wbc.iter()) {
                let p = policy.action_probs(z, w);
                assert!(p[1] >= 0.99, "cloned policy unsure at ({z}, {w}): {p:?}");
            }
        }
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn cloning_loss_decreases_early() {
        let env = CancerEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Learnable rule: treat when wbc is high.
        let mut demos = Vec::new();
        for _ in 0..40 {
            let mut state = env.init_state(&mut rng);
            let mut actions = Vec::new();
            let mut tumor = Vec::new();
            let mut wbc = Vec::new();
            for _ in 0..10 {
                let a = u8::from(state.w > 5.0);
                actions.push(a);
                tumor.push(state.z);
                wbc.push(state.w);
                state = env.step(state, a, &mut rng);
            }
            demos.push(Trajectory::new(actions, tumor, wbc, None).unwrap());
        }
        let config = BcConfig {
            max_iters: 120,
            ..BcConfig::default()
        };
        let (_, trace) = behavioral_cloning(&demos, &config).unwrap();
        assert!(trace[100.min(trace.len() - 1)] < trace[0]);
    }

    #[test]
    fn cloning_rejects_empty_width_and_empty_demos() {
        let env = CancerEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let demos = vec![env.rollout(&Policy::Uniform, 5, false, &mut rng).unwrap()];
        assert!(behavioral_cloning(
            &demos,
            &BcConfig {
                hidden: 0,
                ..BcConfig::default()
            }
        )
        .is_err());
        assert!(behavioral_cloning(&[], &BcConfig::default()).is_err());
    }

    #[test]
    fn same_policy_preference_frequency_is_half() {
        let env = CancerEnv::default();
        let truth = LexRewardModel::new(vec![(
            RewardFamily::CancerGroundTruthTumor,
            LevelParams {
                alpha: 1.0,
                epsilon: 0.0,
            },
        )])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = policy_pref_frequency(
            &Policy::Uniform,
            &Policy::Uniform,
            &truth,
            &env,
            20,
            400,
            &mut rng,
        )
        .unwrap();
        assert!(
            (f.mean - 0.5).abs() < 3.0 * f.std_error,
            "mean {} se {}",
            f.mean,
            f.std_error
        );
    }

    #[test]
    fn single_sample_frequency_is_probability() {
        let env = CancerEnv::default();
        let truth = cancer_truth(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = policy_pref_frequency(
            &Policy::Constant { action: 1 },
            &Policy::Constant { action: 0 },
            &truth,
            &env,
            20,
            1,
            &mut rng,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&f.mean));
        assert!(policy_pref_frequency(
            &Policy::Uniform,
            &Policy::Uniform,
            &truth,
            &env,
            20,
            0,
            &mut rng
        )
        .is_err());
    }
}
