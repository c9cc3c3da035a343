//! Experiment plumbing: preference-prediction metrics, dataset and model
//! serialization, and the scripted studies behind the CLI.

pub mod io;
pub mod studies;

use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceDataset;
use crate::error::{Error, Result};
use crate::prefmodel::LexRewardModel;

/// Preference-prediction quality of one fitted model on one test set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Root-mean-square gap between fitted and ground-truth tie-break
    /// probabilities over test events.
    pub rmse: f64,
    /// Fraction of test preference events the fitted model calls correctly;
    /// a predicted probability of exactly one half earns half credit.
    pub accuracy: f64,
}

/// Scores a fitted model against observed test preferences and the
/// generating model.
pub fn eval_preference_metrics(
    model: &LexRewardModel,
    test_data: &PreferenceDataset,
    ground_truth: &LexRewardModel,
) -> Result<MetricsReport> {
    if test_data.is_empty() {
        return Err(Error::invalid("test dataset is empty"));
    }
    let mut events = 0.0;
    let mut correct = 0.0;
    let mut sq_err = 0.0;
    for (star, circ, n) in test_data.iter_counts() {
        let a = test_data.alternative(star);
        let b = test_data.alternative(circ);
        let n = n as f64;
        let fitted = model.pref_prob_tiebreak(a, b)?;
        let truth = ground_truth.pref_prob_tiebreak(a, b)?;
        events += n;
        correct += n * if fitted > 0.5 {
            1.0
        } else if fitted == 0.5 {
            0.5
        } else {
            0.0
        };
        sq_err += n * (fitted - truth) * (fitted - truth);
    }
    Ok(MetricsReport {
        rmse: (sq_err / events).sqrt(),
        accuracy: correct / events,
    })
}

/// Mean and population standard deviation, plus the standard error of the
/// mean, over per-seed values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
}

pub fn summarize(values: &[f64]) -> SeedSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    SeedSummary {
        mean,
        std,
        std_error: std / n.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::gen_preference_dataset;
    use crate::prefmodel::{LevelParams, LexRewardModel};
    use crate::rewards::{Alternative, RewardFamily};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_model_has_zero_rmse() {
        let truth = LexRewardModel::coordinate_projections(2, 2.0, 0.3);
        let pool: Vec<Alternative> = (0..10)
            .map(|i| Alternative::features(vec![i as f64 * 0.2, -(i as f64) * 0.1]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = gen_preference_dataset(&truth, &pool, 200, &mut rng).unwrap();
        let m = eval_preference_metrics(&truth, &ds, &truth).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!(m.accuracy > 0.5);
    }

    #[test]
    fn constant_half_model_gets_half_credit() {
        // Zero weights and zero epsilon predict exactly one half everywhere.
        let flat = LexRewardModel::new(vec![(
            RewardFamily::linear(vec![0.0, 0.0]),
            LevelParams {
                alpha: 1.0,
                epsilon: 0.0,
            },
        )])
        .unwrap();
        let truth = LexRewardModel::coordinate_projections(2, 2.0, 0.3);
        let pool: Vec<Alternative> = (0..10)
            .map(|i| Alternative::features(vec![i as f64 * 0.2, 0.5 - i as f64 * 0.1]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = gen_preference_dataset(&truth, &pool, 100, &mut rng).unwrap();
        let m = eval_preference_metrics(&flat, &ds, &truth).unwrap();
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn summarize_population_std() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(s.mean, 2.5, epsilon = 1e-12);
        assert_relative_eq!(s.std, (1.25f64).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.std_error, (1.25f64).sqrt() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_test_set_rejected() {
        let truth = LexRewardModel::coordinate_projections(1, 1.0, 0.0);
        let ds = crate::dataset::PreferenceDataset::new();
        assert!(eval_preference_metrics(&truth, &ds, &truth).is_err());
    }
}
