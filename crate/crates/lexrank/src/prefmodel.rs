//! Stochastic lexicographic preference model.
//!
//! A model holds `k` reward functions in priority order. Each level compares
//! two alternatives through a logistic with consistency scale `alpha` and an
//! indifference band `epsilon`; a comparison falls through to the next level
//! when the current level judges the pair "not significantly different".

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{Alternative, RewardFamily};

/// Numerically stable logistic, safe for arguments of any magnitude.
#[inline]
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Running equivalence products below this are treated as zero and the
/// remaining levels skipped.
const EQUIV_PRODUCT_FLOOR: f64 = 1e-300;

/// Per-level comparison parameters: consistency scale and indifference width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub alpha: f64,
    pub epsilon: f64,
}

impl LevelParams {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::invalid(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        Ok(Self { alpha, epsilon })
    }
}

/// Probabilities of "significantly better", "significantly worse", and
/// "not significantly different" at a single level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonTriple {
    pub p_succ: f64,
    pub p_prec: f64,
    pub p_equiv: f64,
}

/// Per-level comparison probabilities for a reward difference `d`:
/// `p_succ = logistic(alpha * (d - epsilon))`, `p_prec` the mirror image,
/// `p_equiv` the remainder.
pub fn component_probs(reward_diff: f64, params: &LevelParams) -> Result<ComparisonTriple> {
    if !reward_diff.is_finite() {
        return Err(Error::invalid(format!(
            "reward difference must be finite, got {reward_diff}"
        )));
    }
    let p_succ = logistic(params.alpha * (reward_diff - params.epsilon));
    let p_prec = logistic(params.alpha * (-reward_diff - params.epsilon));
    let p_equiv = (1.0 - p_succ - p_prec).max(0.0);
    Ok(ComparisonTriple {
        p_succ,
        p_prec,
        p_equiv,
    })
}

/// An ordered vector of per-level rewards for one alternative. Index order is
/// priority order: index 0 is the highest-priority level.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    /// Strict lexicographic dominance: at the first index where the vectors
    /// differ, `self` is larger.
    pub fn lex_dominates(&self, other: &RewardVector) -> Result<bool> {
        if self.0.len() != other.0.len() {
            return Err(Error::invalid(format!(
                "reward vector lengths differ: {} vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for (a, b) in self.0.iter().zip(other.0.iter()) {
            if a > b {
                return Ok(true);
            }
            if a < b {
                return Ok(false);
            }
        }
        Ok(false)
    }
}

/// Outcome of a single sampled pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceLabel {
    StarPreferred,
    CircPreferred,
}

/// `k` reward functions in priority order, each with its comparison
/// parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexRewardModel {
    pub levels: Vec<(RewardFamily, LevelParams)>,
}

impl LexRewardModel {
    pub fn new(levels: Vec<(RewardFamily, LevelParams)>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("a model needs at least one level"));
        }
        Ok(Self { levels })
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    /// Evaluates every level's reward on one alternative.
    pub fn reward_vector(&self, x: &Alternative) -> Result<RewardVector> {
        let mut values = Vec::with_capacity(self.levels.len());
        for (family, _) in &self.levels {
            values.push(family.eval(x)?);
        }
        Ok(RewardVector(values))
    }

    /// The lexicographic mixture probability that `x_star` is preferred:
    /// each level contributes its "better" probability weighted by the
    /// probability that all higher-priority levels were indifferent.
    pub fn lex_pref_prob(&self, x_star: &Alternative, x_circ: &Alternative) -> Result<f64> {
        let mut total = 0.0;
        let mut equiv_product = 1.0;
        for (family, params) in &self.levels {
            let d = family.eval(x_star)? - family.eval(x_circ)?;
            let t = component_probs(d, params)?;
            total += t.p_succ * equiv_product;
            equiv_product *= t.p_equiv;
            if equiv_product < EQUIV_PRODUCT_FLOOR {
                break;
            }
        }
        Ok(total)
    }

    /// Preference probability with the residual indifference mass split
    /// evenly between the two alternatives. Written so that the two argument
    /// orders sum to exactly 1.
    pub fn pref_prob_tiebreak(&self, x_star: &Alternative, x_circ: &Alternative) -> Result<f64> {
        let forward = self.lex_pref_prob(x_star, x_circ)?;
        let backward = self.lex_pref_prob(x_circ, x_star)?;
        Ok(0.5 + 0.5 * (forward - backward))
    }

    /// Convenience constructor: `k` coordinate-projection rewards on `R^k`
    /// with shared comparison parameters.
    pub fn coordinate_projections(k: usize, alpha: f64, epsilon: f64) -> Self {
        let levels = (0..k)
            .map(|i| {
                let mut theta = vec![0.0; k];
                theta[i] = 1.0;
                (
                    RewardFamily::linear(theta),
                    LevelParams { alpha, epsilon },
                )
            })
            .collect();
        Self { levels }
    }

    /// Draws one comparison outcome; residual indifference resolves by fair
    /// coin.
    pub fn sample_preference<R: Rng>(
        &self,
        x_star: &Alternative,
        x_circ: &Alternative,
        rng: &mut R,
    ) -> Result<PreferenceLabel> {
        let p_succ = self.lex_pref_prob(x_star, x_circ)?;
        let p_prec = self.lex_pref_prob(x_circ, x_star)?;
        let u: f64 = rng.gen();
        if u < p_succ {
            Ok(PreferenceLabel::StarPreferred)
        } else if u < p_succ + p_prec {
            Ok(PreferenceLabel::CircPreferred)
        } else if rng.gen::<bool>() {
            Ok(PreferenceLabel::StarPreferred)
        } else {
            Ok(PreferenceLabel::CircPreferred)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(values: &[f64]) -> Alternative {
        Alternative::features(values.to_vec())
    }

    #[test]
    fn component_probs_at_threshold_is_half() {
        for alpha in [0.5, 1.0, 7.3] {
            let p = LevelParams::new(alpha, 0.4).unwrap();
            let t = component_probs(0.4, &p).unwrap();
            assert_eq!(t.p_succ, 0.5);
        }
    }

    #[test]
    fn component_probs_symmetric_at_zero_diff() {
        // sigma(-1) and 1 - 2*sigma(-1), frozen from high-precision evaluation.
        let p = LevelParams::new(1.0, 1.0).unwrap();
        let t = component_probs(0.0, &p).unwrap();
        assert_relative_eq!(t.p_succ, 0.2689414213699951, epsilon = 1e-15);
        assert_relative_eq!(t.p_prec, 0.2689414213699951, epsilon = 1e-15);
        assert_relative_eq!(t.p_equiv, 0.46211715726000974, epsilon = 1e-14);
    }

    #[test]
    fn component_probs_alpha_zero_is_uniform() {
        let p = LevelParams::new(0.0, 3.0).unwrap();
        for d in [-5.0, 0.0, 2.0] {
            let t = component_probs(d, &p).unwrap();
            assert_eq!(t.p_succ, 0.5);
            assert_eq!(t.p_prec, 0.5);
            assert_eq!(t.p_equiv, 0.0);
        }
    }

    #[test]
    fn component_probs_rejects_non_finite() {
        let p = LevelParams::new(1.0, 1.0).unwrap();
        assert!(component_probs(f64::NAN, &p).is_err());
        assert!(component_probs(f64::INFINITY, &p).is_err());
    }

    #[test]
    fn triple_sums_to_one() {
        let p = LevelParams::new(2.5, 0.3).unwrap();
        for d in [-10.0, -0.31, -0.3, 0.0, 0.29, 0.3, 1.0, 100.0] {
            let t = component_probs(d, &p).unwrap();
            assert!((0.0..=1.0).contains(&t.p_succ));
            assert!((0.0..=1.0).contains(&t.p_prec));
            assert!((0.0..=1.0).contains(&t.p_equiv));
            assert!((t.p_succ + t.p_prec + t.p_equiv - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_level_zero_epsilon_reduces_to_logistic() {
        let model = LexRewardModel::coordinate_projections(1, 1.7, 0.0);
        let a = feat(&[2.0]);
        let b = feat(&[-1.0]);
        let p = model.lex_pref_prob(&a, &b).unwrap();
        assert_relative_eq!(p, logistic(1.7 * 3.0), epsilon = 1e-12);
    }

    #[test]
    fn two_level_mixture_matches_frozen_value() {
        // Coordinate projections on R^2, alpha = epsilon = 1. Frozen from
        // high-precision evaluation of the mixture formula; note the raw
        // value is below one half.
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let x = feat(&[-0.6, 2.0]);
        let xp = feat(&[0.0, 0.0]);
        let p = model.lex_pref_prob(&x, &xp).unwrap();
        assert_relative_eq!(p, 0.48285296411124207, epsilon = 1e-14);
    }

    #[test]
    fn identical_alternatives_match_frozen_value() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let x = feat(&[3.0, -4.0]);
        let y = feat(&[3.0, -4.0]);
        let p = model.lex_pref_prob(&x, &y).unwrap();
        assert_relative_eq!(p, 0.3932238664829637, epsilon = 1e-14);
        assert_eq!(p, model.lex_pref_prob(&y, &x).unwrap());
    }

    #[test]
    fn tiebreak_symmetric_case_is_exactly_half() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let x = feat(&[1.0, 2.0]);
        let y = feat(&[1.0, 2.0]);
        assert_eq!(model.pref_prob_tiebreak(&x, &y).unwrap(), 0.5);
    }

    #[test]
    fn tiebreak_intransitivity_triple_cycles() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let x = feat(&[-0.6, 2.0]);
        let xp = feat(&[0.0, 0.0]);
        let xpp = feat(&[0.6, -2.0]);
        let t1 = model.pref_prob_tiebreak(&x, &xp).unwrap();
        let t2 = model.pref_prob_tiebreak(&xp, &xpp).unwrap();
        let t3 = model.pref_prob_tiebreak(&xpp, &x).unwrap();
        assert_relative_eq!(t1, 0.5305570069725141, epsilon = 1e-14);
        assert_relative_eq!(t2, 0.5305570069725141, epsilon = 1e-14);
        assert_relative_eq!(t3, 0.5593160175623711, epsilon = 1e-14);
        assert!(t1 > 0.5 && t2 > 0.5 && t3 > 0.5);
    }

    #[test]
    fn tiebreak_k1_zero_epsilon_equals_raw() {
        let model = LexRewardModel::coordinate_projections(1, 2.0, 0.0);
        let a = feat(&[0.7]);
        let b = feat(&[-0.2]);
        let raw = model.lex_pref_prob(&a, &b).unwrap();
        let tb = model.pref_prob_tiebreak(&a, &b).unwrap();
        assert_relative_eq!(tb, raw, epsilon = 1e-15);
    }

    #[test]
    fn lex_dominates_basic_cases() {
        let a = RewardVector(vec![1.0, 0.0]);
        let b = RewardVector(vec![0.0, 5.0]);
        assert!(a.lex_dominates(&b).unwrap());
        assert!(!b.lex_dominates(&a).unwrap());

        let c = RewardVector(vec![1.0, 2.0]);
        let d = RewardVector(vec![1.0, 3.0]);
        assert!(!c.lex_dominates(&d).unwrap());
        assert!(d.lex_dominates(&c).unwrap());

        let e = RewardVector(vec![1.0, 2.0]);
        assert!(!e.lex_dominates(&e.clone()).unwrap());
    }

    #[test]
    fn lex_dominates_length_mismatch_errors() {
        let a = RewardVector(vec![1.0]);
        let b = RewardVector(vec![1.0, 2.0]);
        assert!(a.lex_dominates(&b).is_err());
    }

    #[test]
    fn deterministic_limit_sampling() {
        let model = LexRewardModel::coordinate_projections(2, 1e6, 1e-6);
        let better = feat(&[1.0, 0.0]);
        let worse = feat(&[0.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let wins = (0..n)
            .filter(|_| {
                model.sample_preference(&better, &worse, &mut rng).unwrap()
                    == PreferenceLabel::StarPreferred
            })
            .count();
        assert_eq!(wins, n);
    }

    #[test]
    fn equal_alternatives_sample_near_half() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let x = feat(&[1.0, 1.0]);
        let y = feat(&[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_usize;
        let wins = (0..n)
            .filter(|_| {
                model.sample_preference(&x, &y, &mut rng).unwrap()
                    == PreferenceLabel::StarPreferred
            })
            .count();
        // 3 sigma binomial band around one half.
        let sigma = (0.25 / n as f64).sqrt();
        assert!((wins as f64 / n as f64 - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn sampling_frequency_matches_tiebreak_probability() {
        let model = LexRewardModel::coordinate_projections(2, 1.0, 1.0);
        let x = feat(&[-0.6, 2.0]);
        let xp = feat(&[0.0, 0.0]);
        let expected = model.pref_prob_tiebreak(&x, &xp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 10_000_usize;
        let wins = (0..n)
            .filter(|_| {
                model.sample_preference(&x, &xp, &mut rng).unwrap()
                    == PreferenceLabel::StarPreferred
            })
            .count();
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((wins as f64 / n as f64 - expected).abs() < 3.0 * sigma);
    }

    #[test]
    fn logistic_is_stable_for_huge_arguments() {
        assert_eq!(logistic(1e4), 1.0);
        assert_eq!(logistic(-1e4), 0.0);
        assert!(logistic(1e8).is_finite());
        assert!(logistic(-1e8).is_finite());
        assert_eq!(logistic(0.0), 0.5);
    }
}
