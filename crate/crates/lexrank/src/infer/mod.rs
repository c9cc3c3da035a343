//! Maximum-likelihood fitting of lexicographic reward models from
//! preference counts: the negative log-likelihood, its analytic gradients,
//! the RMSprop loop with the patience stop rule, and the fitting entry
//! points for the lexicographic model and its single-reward counterpart.

pub mod birl;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::dataset::PreferenceDataset;
use crate::error::{Error, Result};
use crate::prefmodel::{logistic, LevelParams, LexRewardModel};
use crate::rewards::{Alternative, RewardFamily};

/// Probabilities below this are clamped before logs and divisions; each
/// clamp is counted as an underflow in the fit report.
const PROB_FLOOR: f64 = 1e-300;

/// Optimizer settings. Defaults are learning rate 0.001, discount 0.9,
/// patience 10, at most 50000 iterations, epsilon learned, alpha fixed at 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub rmsprop_discount: f64,
    pub patience: usize,
    pub max_iters: usize,
    pub learn_alpha: bool,
    pub learn_epsilon: bool,
    pub seed: u64,
    /// Extra randomly-jittered starts; the best final loss wins.
    pub restarts: usize,
    /// Half-width of the uniform jitter applied to unconstrained
    /// coordinates on restarts.
    pub restart_jitter: f64,
    /// Build the levels one at a time: fit one level, append a fresh level
    /// at the template init, refit jointly, and so on. Escapes the basin
    /// where a jointly-initialized lower level duplicates the level above.
    pub stagewise: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            rmsprop_discount: 0.9,
            patience: 10,
            max_iters: 50_000,
            learn_alpha: false,
            learn_epsilon: true,
            seed: 0,
            restarts: 0,
            restart_jitter: 2.0,
            stagewise: false,
        }
    }
}

/// Per-parameter squared-gradient accumulators for RMSprop.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub h: Vec<f64>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            iteration: 0,
        }
    }
}

/// One RMSprop update: all accumulators first, then all parameters.
pub fn rmsprop_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    config: &FitConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.h.len());
    let gamma = config.rmsprop_discount;
    for (h, g) in state.h.iter_mut().zip(grads) {
        *h = gamma * *h + (1.0 - gamma) * g * g;
    }
    for ((p, g), h) in params.iter_mut().zip(grads).zip(&state.h) {
        *p -= config.learning_rate * g / h.max(PROB_FLOOR).sqrt();
    }
    state.iteration += 1;
}

/// Maps between a model's free parameters and one flat unconstrained vector.
///
/// Layout per level: family coordinates, then `ln epsilon` when learned,
/// then `ln alpha` when learned. Frozen values come from the template.
#[derive(Debug, Clone)]
pub struct ParamMap {
    template: LexRewardModel,
    learn_alpha: bool,
    learn_epsilon: bool,
    level_offsets: Vec<usize>,
    dim: usize,
}

impl ParamMap {
    pub fn new(template: &LexRewardModel, learn_epsilon: bool, learn_alpha: bool) -> Self {
        let mut level_offsets = Vec::with_capacity(template.levels.len());
        let mut dim = 0;
        for (family, _) in &template.levels {
            level_offsets.push(dim);
            dim += family.param_dim();
            if learn_epsilon {
                dim += 1;
            }
            if learn_alpha {
                dim += 1;
            }
        }
        Self {
            template: template.clone(),
            learn_alpha,
            learn_epsilon,
            level_offsets,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn theta_dim(&self, level: usize) -> usize {
        self.template.levels[level].0.param_dim()
    }

    fn epsilon_slot(&self, level: usize) -> Option<usize> {
        self.learn_epsilon
            .then(|| self.level_offsets[level] + self.theta_dim(level))
    }

    fn alpha_slot(&self, level: usize) -> Option<usize> {
        self.learn_alpha.then(|| {
            self.level_offsets[level] + self.theta_dim(level) + usize::from(self.learn_epsilon)
        })
    }

    pub fn pack(&self, model: &LexRewardModel) -> Vec<f64> {
        let mut coords = vec![0.0; self.dim];
        for (level, (family, params)) in model.levels.iter().enumerate() {
            let offset = self.level_offsets[level];
            let theta = family.to_unconstrained();
            coords[offset..offset + theta.len()].copy_from_slice(&theta);
            if let Some(slot) = self.epsilon_slot(level) {
                coords[slot] = params.epsilon.ln();
            }
            if let Some(slot) = self.alpha_slot(level) {
                coords[slot] = params.alpha.ln();
            }
        }
        coords
    }

    pub fn unpack(&self, coords: &[f64]) -> Result<LexRewardModel> {
        if coords.len() != self.dim {
            return Err(Error::invalid(format!(
                "expected {} coordinates, got {}",
                self.dim,
                coords.len()
            )));
        }
        let mut levels = Vec::with_capacity(self.template.levels.len());
        for (level, (family, params)) in self.template.levels.iter().enumerate() {
            let offset = self.level_offsets[level];
            let theta_dim = family.param_dim();
            let new_family = family.from_unconstrained(&coords[offset..offset + theta_dim])?;
            let epsilon = match self.epsilon_slot(level) {
                Some(slot) => coords[slot].exp(),
                None => params.epsilon,
            };
            let alpha = match self.alpha_slot(level) {
                Some(slot) => coords[slot].exp(),
                None => params.alpha,
            };
            levels.push((new_family, LevelParams { alpha, epsilon }));
        }
        LexRewardModel::new(levels)
    }
}

/// Preprocessed dataset view used by the likelihood passes: ordered
/// preference entries reindexed against the alternatives they actually use.
struct PairData<'a> {
    alternatives: Vec<&'a Alternative>,
    /// (star slot, circ slot, count as f64)
    pairs: Vec<(u32, u32, f64)>,
}

impl<'a> PairData<'a> {
    fn new(data: &'a PreferenceDataset) -> Self {
        let n = data.alternatives().len();
        let mut slot = vec![u32::MAX; n];
        let mut alternatives = Vec::new();
        let mut pairs = Vec::with_capacity(data.num_pairs());
        for (a, b, count) in data.iter_counts() {
            for id in [a, b] {
                if slot[id as usize] == u32::MAX {
                    slot[id as usize] = alternatives.len() as u32;
                    alternatives.push(data.alternative(id));
                }
            }
            pairs.push((slot[a as usize], slot[b as usize], count as f64));
        }
        Self {
            alternatives,
            pairs,
        }
    }
}

/// Scratch buffers reused across iterations of a fit.
struct Workspace {
    /// Per-alternative, per-level reward values (level-major per alternative).
    rewards: Vec<f64>,
    /// Per-alternative family gradients, one block per alternative with
    /// per-level sub-blocks.
    grads: Vec<f64>,
    grad_offsets: Vec<usize>,
    grad_block: usize,
    // Per-pair per-level scratch.
    s: Vec<f64>,
    p: Vec<f64>,
    e: Vec<f64>,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
}

impl Workspace {
    fn new(levels: &[(RewardFamily, LevelParams)]) -> Self {
        let k = levels.len();
        let mut grad_offsets = Vec::with_capacity(k);
        let mut grad_block = 0;
        for (family, _) in levels {
            grad_offsets.push(grad_block);
            grad_block += family.param_dim();
        }
        Self {
            rewards: Vec::new(),
            grads: Vec::new(),
            grad_offsets,
            grad_block,
            s: vec![0.0; k],
            p: vec![0.0; k],
            e: vec![0.0; k],
            prefix: vec![0.0; k + 1],
            suffix: vec![0.0; k + 1],
        }
    }
}

/// One full pass over the dataset: negative log-likelihood, and optionally
/// its gradient in `map` coordinates accumulated into `grad_out`.
fn nll_pass(
    levels: &[(RewardFamily, LevelParams)],
    data: &PairData,
    ws: &mut Workspace,
    grad_out: Option<(&ParamMap, &mut [f64])>,
) -> Result<(f64, u64)> {
    let k = levels.len();
    let n_alts = data.alternatives.len();
    let want_grads = grad_out.is_some();

    ws.rewards.clear();
    ws.rewards.resize(n_alts * k, 0.0);
    if want_grads {
        ws.grads.clear();
        ws.grads.resize(n_alts * ws.grad_block, 0.0);
    }
    for (slot, alt) in data.alternatives.iter().enumerate() {
        for (level, (family, _)) in levels.iter().enumerate() {
            ws.rewards[slot * k + level] = family.eval(alt)?;
            if want_grads {
                let start = slot * ws.grad_block + ws.grad_offsets[level];
                let dim = family.param_dim();
                if dim > 0 {
                    let g = family.param_grad(alt)?;
                    ws.grads[start..start + dim].copy_from_slice(&g);
                }
            }
        }
    }

    let mut map_and_out = grad_out;
    let mut loss = 0.0;
    let mut underflows = 0u64;

    for &(star, circ, count) in &data.pairs {
        let star = star as usize;
        let circ = circ as usize;
        // Per-level comparison probabilities.
        for level in 0..k {
            let params = &levels[level].1;
            let d = ws.rewards[star * k + level] - ws.rewards[circ * k + level];
            let s = logistic(params.alpha * (d - params.epsilon));
            let p = logistic(params.alpha * (-d - params.epsilon));
            ws.s[level] = s;
            ws.p[level] = p;
            ws.e[level] = (1.0 - s - p).max(0.0);
        }
        // prefix[i] = product of e over levels < i; mixture probability.
        ws.prefix[0] = 1.0;
        let mut prob = 0.0;
        for level in 0..k {
            prob += ws.s[level] * ws.prefix[level];
            ws.prefix[level + 1] = ws.prefix[level] * ws.e[level];
        }
        let floored = prob.max(PROB_FLOOR);
        if prob < PROB_FLOOR {
            underflows += 1;
        }
        loss -= count * floored.ln();

        if let Some((map, out)) = map_and_out.as_mut() {
            // suffix[l] = sum over i > l of s_i * prod_{l<j<i} e_j, so the
            // tie-term weight for level l is prefix[l] * suffix[l].
            ws.suffix[k] = 0.0;
            for level in (0..k).rev() {
                ws.suffix[level] = ws.s[level] + ws.e[level] * ws.suffix[level + 1];
            }
            let weight = count / floored;
            for level in 0..k {
                let params = &levels[level].1;
                let d = ws.rewards[star * k + level] - ws.rewards[circ * k + level];
                let s = ws.s[level];
                let p = ws.p[level];
                let sv = s * (1.0 - s);
                let pv = p * (1.0 - p);
                let head = ws.prefix[level];
                let tie = ws.prefix[level] * ws.suffix[level + 1];

                // d/d(reward diff)
                let ds_dd = params.alpha * sv;
                let dp_dd = -params.alpha * pv;
                let de_dd = -ds_dd - dp_dd;
                let coef_d = head * ds_dd + tie * de_dd;
                if coef_d != 0.0 {
                    let dim = levels[level].0.param_dim();
                    if dim > 0 {
                        let offset = map.level_offsets[level];
                        let gs = star * ws.grad_block + ws.grad_offsets[level];
                        let gc = circ * ws.grad_block + ws.grad_offsets[level];
                        for j in 0..dim {
                            out[offset + j] -=
                                weight * coef_d * (ws.grads[gs + j] - ws.grads[gc + j]);
                        }
                    }
                }
                if let Some(slot) = map.epsilon_slot(level) {
                    let ds_de = -params.alpha * sv;
                    let dp_de = -params.alpha * pv;
                    let de_de = -ds_de - dp_de;
                    let coef = head * ds_de + tie * de_de;
                    // Chain through epsilon = exp(coordinate).
                    out[slot] -= weight * coef * params.epsilon;
                }
                if let Some(slot) = map.alpha_slot(level) {
                    let ds_da = sv * (d - params.epsilon);
                    let dp_da = pv * (-d - params.epsilon);
                    let de_da = -ds_da - dp_da;
                    let coef = head * ds_da + tie * de_da;
                    out[slot] -= weight * coef * params.alpha;
                }
            }
        }
    }
    Ok((loss, underflows))
}

/// Negative log-likelihood of the ordered preference counts:
/// `-sum n(star, circ) ln Pr(star > circ)`. Empty data gives 0.
pub fn neg_log_likelihood(model: &LexRewardModel, data: &PreferenceDataset) -> Result<f64> {
    let pair_data = PairData::new(data);
    let mut ws = Workspace::new(&model.levels);
    let (loss, _) = nll_pass(&model.levels, &pair_data, &mut ws, None)?;
    Ok(loss)
}

fn ln_binomial(total: u32, chosen: u32) -> f64 {
    (1..=chosen)
        .map(|i| (((total - chosen + i) as f64) / (i as f64)).ln())
        .sum()
}

/// Full log-likelihood including the binomial coefficients and the half
/// exponent over ordered pairs; diagnostic only, never optimized.
pub fn full_log_likelihood(model: &LexRewardModel, data: &PreferenceDataset) -> Result<f64> {
    let mut unordered: BTreeMap<(u32, u32), (u32, u32)> = BTreeMap::new();
    for (a, b, n) in data.iter_counts() {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let entry = unordered.entry((lo, hi)).or_insert((0, 0));
        if a < b {
            entry.0 += n;
        } else {
            entry.1 += n;
        }
    }
    let mut total = -neg_log_likelihood(model, data)?;
    for (&(lo, hi), &(n_fwd, n_rev)) in &unordered {
        let _ = (lo, hi);
        total += ln_binomial(n_fwd + n_rev, n_fwd);
    }
    Ok(total)
}

/// Analytic gradient of the negative log-likelihood with respect to the
/// free parameters described by `map`.
pub fn nll_gradients(
    model: &LexRewardModel,
    data: &PreferenceDataset,
    map: &ParamMap,
) -> Result<Vec<f64>> {
    let pair_data = PairData::new(data);
    let mut ws = Workspace::new(&model.levels);
    let mut grads = vec![0.0; map.dim()];
    nll_pass(&model.levels, &pair_data, &mut ws, Some((map, &mut grads)))?;
    Ok(grads)
}

/// Outcome of one fit: loss trace, iteration count, stop reason, and
/// numeric-guard counters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub underflow_count: u64,
    pub seed: u64,
    pub final_loss: f64,
}

/// Full-batch RMSprop with the patience stop rule: stop as soon as the loss
/// exceeds its value `patience` iterations ago. The closure computes the
/// loss at the current parameters and writes the gradient.
pub(crate) fn rmsprop_minimize<F>(
    mut params: Vec<f64>,
    config: &FitConfig,
    mut loss_and_grad: F,
) -> Result<(Vec<f64>, Vec<f64>, bool)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let mut state = OptimizerState::new(params.len());
    let mut grads = vec![0.0; params.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    for step in 0..=config.max_iters {
        grads.fill(0.0);
        let loss = loss_and_grad(&params, &mut grads)?;
        trace.push(loss);
        if step >= config.patience && trace[step] > trace[step - config.patience] {
            converged = true;
            break;
        }
        if step == config.max_iters {
            break;
        }
        rmsprop_step(&mut state, &mut params, &grads, config);
    }
    Ok((params, trace, converged))
}

/// Fits the free parameters of `template` to the data by full-batch RMSprop
/// on the negative log-likelihood. The starting point is the template's own
/// parameter values.
pub fn fit_model(
    data: &PreferenceDataset,
    template: &LexRewardModel,
    config: &FitConfig,
) -> Result<(LexRewardModel, FitReport)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot fit an empty preference dataset"));
    }
    for (family, _) in &template.levels {
        family.validate()?;
    }
    let map = ParamMap::new(template, config.learn_epsilon, config.learn_alpha);
    let pair_data = PairData::new(data);
    let mut ws = Workspace::new(&template.levels);

    let mut best: Option<(f64, LexRewardModel, FitReport)> = None;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    for restart in 0..=config.restarts {
        let mut start = map.pack(template);
        if restart > 0 {
            use rand::Rng;
            for c in start.iter_mut() {
                *c += rng.gen_range(-config.restart_jitter..config.restart_jitter);
            }
        }
        let mut underflows = 0u64;
        let (coords, trace, converged) = rmsprop_minimize(start, config, |coords, grads| {
            let model = map.unpack(coords)?;
            let (loss, uf) =
                nll_pass(&model.levels, &pair_data, &mut ws, Some((&map, grads)))?;
            underflows += uf;
            Ok(loss)
        })?;
        let model = map.unpack(&coords)?;
        let final_loss = *trace.last().unwrap();
        let report = FitReport {
            iterations: trace.len() - 1,
            loss_trace: trace,
            converged,
            underflow_count: underflows,
            seed: config.seed,
            final_loss,
        };
        if best.as_ref().is_none_or(|(l, _, _)| final_loss < *l) {
            best = Some((final_loss, model, report));
        }
    }
    let (_, model, report) = best.unwrap();
    Ok((model, report))
}

/// Fits `k` lexicographically-ordered copies of the family template.
/// By default all levels start from the template's parameters jointly; with
/// `stagewise` the levels are introduced one at a time.
pub fn fit_lori(
    data: &PreferenceDataset,
    k: usize,
    family_template: &RewardFamily,
    config: &FitConfig,
) -> Result<(LexRewardModel, FitReport)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let fresh_level = || {
        (
            family_template.clone(),
            LevelParams {
                alpha: 1.0,
                epsilon: 1.0,
            },
        )
    };
    if config.stagewise && k > 1 {
        let mut levels = vec![fresh_level()];
        let mut fitted = fit_model(data, &LexRewardModel::new(levels)?, config)?;
        for _ in 1..k {
            levels = fitted.0.levels;
            // A shallower fit shrinks its indifference bands toward zero,
            // which would starve the new level of probability mass; widen
            // them back to the init before refitting jointly.
            for (_, params) in levels.iter_mut() {
                params.epsilon = params.epsilon.max(1.0);
            }
            levels.push(fresh_level());
            fitted = fit_model(data, &LexRewardModel::new(levels)?, config)?;
        }
        return Ok(fitted);
    }
    let levels = (0..k).map(|_| fresh_level()).collect();
    let template = LexRewardModel::new(levels)?;
    fit_model(data, &template, config)
}

/// Single-reward counterpart: one level, epsilon frozen at zero, alpha
/// frozen at one, so the objective is the plain logistic log-likelihood.
pub fn fit_trex(
    data: &PreferenceDataset,
    family_template: &RewardFamily,
    config: &FitConfig,
) -> Result<(LexRewardModel, FitReport)> {
    let template = LexRewardModel::new(vec![(
        family_template.clone(),
        LevelParams {
            alpha: 1.0,
            epsilon: 0.0,
        },
    )])?;
    let mut config = config.clone();
    config.learn_epsilon = false;
    config.learn_alpha = false;
    fit_model(data, &template, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefmodel::PreferenceLabel;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature_dataset(
        model: &LexRewardModel,
        n_alts: usize,
        dim: usize,
        n_pairs: usize,
        seed: u64,
    ) -> PreferenceDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = PreferenceDataset::new();
        for _ in 0..n_alts {
            ds.push_alternative(Alternative::features(
                (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            ));
        }
        for _ in 0..n_pairs {
            let a = rng.gen_range(0..n_alts as u32);
            let mut b = rng.gen_range(0..n_alts as u32);
            while b == a {
                b = rng.gen_range(0..n_alts as u32);
            }
            let star = ds.alternative(a).clone();
            let circ = ds.alternative(b).clone();
            match model.sample_preference(&star, &circ, &mut rng).unwrap() {
                PreferenceLabel::StarPreferred => ds.record(a, b).unwrap(),
                PreferenceLabel::CircPreferred => ds.record(b, a).unwrap(),
            }
        }
        ds
    }

    #[test]
    fn nll_half_probability_is_ln_two() {
        // One pair, n = 1, both rewards equal and epsilon 0 gives Pr = 0.5.
        let model = LexRewardModel::coordinate_projections(1, 1.0, 0.0);
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![0.7]));
        let b = ds.push_alternative(Alternative::features(vec![0.7]));
        ds.record(a, b).unwrap();
        let loss = neg_log_likelihood(&model, &ds).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn nll_empty_dataset_is_zero() {
        let model = LexRewardModel::coordinate_projections(1, 1.0, 0.0);
        let ds = PreferenceDataset::new();
        assert_eq!(neg_log_likelihood(&model, &ds).unwrap(), 0.0);
    }

    #[test]
    fn nll_logistic_counts_example() {
        // k = 1, eps = 0, reward diff 1 gives sigma(1); counts 2 and 1.
        // Frozen from high-precision evaluation of the closed form.
        let model = LexRewardModel::coordinate_projections(1, 1.0, 0.0);
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![1.0]));
        let b = ds.push_alternative(Alternative::features(vec![0.0]));
        ds.record(a, b).unwrap();
        ds.record(a, b).unwrap();
        ds.record(b, a).unwrap();
        let loss = neg_log_likelihood(&model, &ds).unwrap();
        assert_relative_eq!(loss, 1.9397850625546684, epsilon = 1e-12);
    }

    #[test]
    fn full_log_likelihood_single_event_has_unit_coefficient() {
        let model = LexRewardModel::coordinate_projections(1, 1.0, 0.0);
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![1.0]));
        let b = ds.push_alternative(Alternative::features(vec![0.0]));
        ds.record(a, b).unwrap();
        let full = full_log_likelihood(&model, &ds).unwrap();
        let nll = neg_log_likelihood(&model, &ds).unwrap();
        assert_relative_eq!(full, -nll, epsilon = 1e-12);
    }

    #[test]
    fn full_log_likelihood_mutual_pair() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![0.4, -0.3]));
        let b = ds.push_alternative(Alternative::features(vec![-0.1, 0.6]));
        ds.record(a, b).unwrap();
        ds.record(b, a).unwrap();
        let q_fwd = model
            .lex_pref_prob(ds.alternative(a), ds.alternative(b))
            .unwrap();
        let q_rev = model
            .lex_pref_prob(ds.alternative(b), ds.alternative(a))
            .unwrap();
        let expected = (2.0_f64).ln() + q_fwd.ln() + q_rev.ln();
        assert_relative_eq!(
            full_log_likelihood(&model, &ds).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn full_and_neg_differ_by_binomial_terms() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 0.5);
        let ds = feature_dataset(&model, 12, 2, 200, 3);
        let full = full_log_likelihood(&model, &ds).unwrap();
        let nll = neg_log_likelihood(&model, &ds).unwrap();
        let mut binom = 0.0;
        let n_alts = ds.alternatives().len() as u32;
        for a in 0..n_alts {
            for b in (a + 1)..n_alts {
                let n_fwd = ds.n(a, b);
                let total = ds.total(a, b);
                if total > 0 {
                    binom += ln_binomial(total, n_fwd);
                }
            }
        }
        assert_relative_eq!(full, -nll + binom, epsilon = 1e-9);
    }

    #[test]
    fn gradient_reduces_to_logistic_regression_at_k1() {
        // Single preference, linear scalar reward, eps = 0:
        // dL/dtheta = -alpha (1 - p) (x_star - x_circ).
        let alpha = 1.3;
        let theta = 0.8;
        let model = LexRewardModel::new(vec![(
            RewardFamily::linear(vec![theta]),
            LevelParams {
                alpha,
                epsilon: 0.0,
            },
        )])
        .unwrap();
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![1.4]));
        let b = ds.push_alternative(Alternative::features(vec![-0.3]));
        ds.record(a, b).unwrap();
        let map = ParamMap::new(&model, false, false);
        let grads = nll_gradients(&model, &ds, &map).unwrap();
        let diff = 1.4 - (-0.3);
        let p = logistic(alpha * theta * diff);
        assert_relative_eq!(grads[0], -alpha * (1.0 - p) * diff, epsilon = 1e-12);
    }

    #[test]
    fn epsilon_gradient_vanishes_at_zero_alpha() {
        let model = LexRewardModel::new(vec![(
            RewardFamily::linear(vec![1.0]),
            LevelParams {
                alpha: 0.0,
                epsilon: 0.5,
            },
        )])
        .unwrap();
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![1.0]));
        let b = ds.push_alternative(Alternative::features(vec![0.0]));
        ds.record(a, b).unwrap();
        let map = ParamMap::new(&model, true, false);
        let grads = nll_gradients(&model, &ds, &map).unwrap();
        let eps_slot = map.epsilon_slot(0).unwrap();
        assert_eq!(grads[eps_slot], 0.0);
    }

    /// Finite-difference oracle over the map coordinates, independent of the
    /// analytic gradient path.
    fn fd_nll_grad(
        model: &LexRewardModel,
        data: &PreferenceDataset,
        map: &ParamMap,
        step: f64,
    ) -> Vec<f64> {
        let coords = map.pack(model);
        (0..coords.len())
            .map(|i| {
                let mut plus = coords.clone();
                plus[i] += step;
                let mut minus = coords.clone();
                minus[i] -= step;
                let fp = neg_log_likelihood(&map.unpack(&plus).unwrap(), data).unwrap();
                let fm = neg_log_likelihood(&map.unpack(&minus).unwrap(), data).unwrap();
                (fp - fm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..30 {
            let k = 1 + trial % 3;
            let dim = 2;
            let levels = (0..k)
                .map(|_| {
                    (
                        RewardFamily::linear(
                            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        ),
                        LevelParams {
                            alpha: rng.gen_range(0.3..2.0),
                            epsilon: rng.gen_range(0.1..1.0),
                        },
                    )
                })
                .collect();
            let model = LexRewardModel::new(levels).unwrap();
            let ds = feature_dataset(&model, 8, dim, 40, 100 + trial as u64);
            for (learn_eps, learn_alpha) in [(false, false), (true, false), (true, true)] {
                let map = ParamMap::new(&model, learn_eps, learn_alpha);
                let analytic = nll_gradients(&model, &ds, &map).unwrap();
                let numeric = fd_nll_grad(&model, &ds, &map, 1e-5);
                for (a, n) in analytic.iter().zip(numeric.iter()) {
                    let denom = n.abs().max(1e-6);
                    assert!(
                        (a - n).abs() / denom < 1e-5,
                        "grad mismatch: {a} vs {n} (k={k}, eps={learn_eps}, alpha={learn_alpha})"
                    );
                }
            }
        }
    }

    #[test]
    fn rmsprop_zero_gradient_keeps_params() {
        let config = FitConfig::default();
        let mut state = OptimizerState::new(2);
        let mut params = vec![1.5, -0.5];
        rmsprop_step(&mut state, &mut params, &[0.0, 0.0], &config);
        assert_eq!(params, vec![1.5, -0.5]);
    }

    #[test]
    fn rmsprop_first_step_magnitude() {
        // With accumulators starting at zero, the first step is
        // eta / sqrt(1 - gamma) regardless of gradient size.
        let config = FitConfig::default();
        let mut state = OptimizerState::new(2);
        let mut params = vec![0.0, 0.0];
        rmsprop_step(&mut state, &mut params, &[0.3, -3.0], &config);
        assert_relative_eq!(params[0], -0.0031622776601683794, epsilon = 1e-15);
        assert_relative_eq!(params[1], 0.0031622776601683794, epsilon = 1e-15);
    }

    #[test]
    fn fit_recovers_single_linear_direction() {
        let truth = LexRewardModel::new(vec![(
            RewardFamily::linear(vec![1.0, -0.6]),
            LevelParams {
                alpha: 1.0,
                epsilon: 0.0,
            },
        )])
        .unwrap();
        let ds = feature_dataset(&truth, 300, 2, 4000, 7);
        let config = FitConfig {
            max_iters: 4000,
            ..FitConfig::default()
        };
        let (fitted, report) =
            fit_trex(&ds, &RewardFamily::linear(vec![0.0, 0.0]), &config).unwrap();
        assert!(report.iterations > 0);
        let theta = match &fitted.levels[0].0 {
            RewardFamily::Linear { theta, .. } => theta.clone(),
            _ => panic!("unexpected family"),
        };
        let truth_theta = [1.0, -0.6];
        let dot: f64 = theta.iter().zip(truth_theta.iter()).map(|(a, b)| a * b).sum();
        let na: f64 = theta.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = truth_theta.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(
            dot / (na * nb) > 0.95,
            "direction cosine too low: {}",
            dot / (na * nb)
        );
    }

    #[test]
    fn fit_is_deterministic() {
        let truth = LexRewardModel::coordinate_projections(2, 2.0, 0.3);
        let ds = feature_dataset(&truth, 40, 2, 300, 5);
        let config = FitConfig {
            max_iters: 300,
            ..FitConfig::default()
        };
        let template = RewardFamily::linear(vec![0.0, 0.0]);
        let (m1, r1) = fit_lori(&ds, 2, &template, &config).unwrap();
        let (m2, r2) = fit_lori(&ds, 2, &template, &config).unwrap();
        assert_eq!(r1.loss_trace, r2.loss_trace);
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
    }

    #[test]
    fn loss_trace_satisfies_patience_rule_until_break() {
        let truth = LexRewardModel::coordinate_projections(2, 2.0, 0.3);
        let ds = feature_dataset(&truth, 40, 2, 300, 9);
        let config = FitConfig::default();
        let (_, report) = fit_lori(&ds, 2, &RewardFamily::linear(vec![0.0, 0.0]), &config).unwrap();
        let trace = &report.loss_trace;
        let p = config.patience;
        for t in p..trace.len() - 1 {
            assert!(
                trace[t] <= trace[t - p],
                "patience rule violated mid-run at {t}"
            );
        }
        if report.converged {
            let last = trace.len() - 1;
            assert!(trace[last] > trace[last - p]);
        }
    }

    #[test]
    fn separable_data_drives_theta_up_monotonically() {
        // One-dimensional separable preferences have no finite optimum; the
        // weight should climb until the iteration cap.
        let mut ds = PreferenceDataset::new();
        let a = ds.push_alternative(Alternative::features(vec![1.0]));
        let b = ds.push_alternative(Alternative::features(vec![-1.0]));
        for _ in 0..5 {
            ds.record(a, b).unwrap();
        }
        let config = FitConfig {
            max_iters: 400,
            ..FitConfig::default()
        };
        let (fitted, report) = fit_trex(&ds, &RewardFamily::linear(vec![0.0]), &config).unwrap();
        let theta = match &fitted.levels[0].0 {
            RewardFamily::Linear { theta, .. } => theta[0],
            _ => unreachable!(),
        };
        assert!(theta > 0.3, "theta should have climbed, got {theta}");
        for w in report.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased on separable data");
        }
    }

    #[test]
    fn fit_empty_dataset_errors() {
        let ds = PreferenceDataset::new();
        assert!(fit_lori(
            &ds,
            2,
            &RewardFamily::linear(vec![0.0]),
            &FitConfig::default()
        )
        .is_err());
    }
}
