//! The scripted studies: cancer treatment, single-reward ablation, the
//! level-count sweep, age-gated priority recovery, and synthetic organ
//! allocation. Every study is a deterministic function of its config and
//! seed list and writes provenance-stamped CSV files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{eval_preference_metrics, summarize, MetricsReport, SeedSummary};
use crate::control::{
    behavioral_cloning, lex_q_learning, make_behavior_policy, policy_pref_frequency, BcConfig,
    Policy, RlConfig, StateGrid,
};
use crate::dataset::PreferenceDataset;
use crate::envs::{
    gen_allocation_dataset, gen_preference_dataset, gen_synthetic_lex_env, AllocationConfig,
    CancerEnv, SyntheticLexConfig,
};
use crate::error::{Error, Result};
use crate::infer::birl::{fit_birl, BirlConfig};
use crate::infer::{fit_lori, fit_model, fit_trex, FitConfig};
use crate::prefmodel::{LevelParams, LexRewardModel, PreferenceLabel};
use crate::rewards::{Alternative, GatePolarity, RewardFamily, Trajectory};

/// Which scripted experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyName {
    Cancer,
    SingleReward,
    KSweep,
    Age,
    Allocation,
}

impl StudyName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cancer" => Ok(StudyName::Cancer),
            "single-reward" => Ok(StudyName::SingleReward),
            "k-sweep" => Ok(StudyName::KSweep),
            "age" => Ok(StudyName::Age),
            "allocation" => Ok(StudyName::Allocation),
            other => Err(Error::invalid(format!(
                "unknown study {other:?}; expected cancer|single-reward|k-sweep|age|allocation"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StudyName::Cancer => "cancer",
            StudyName::SingleReward => "single-reward",
            StudyName::KSweep => "k-sweep",
            StudyName::Age => "age",
            StudyName::Allocation => "allocation",
        }
    }
}

/// Optimizer knobs shared by the fitting steps of every study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    pub learning_rate: f64,
    pub rmsprop_discount: f64,
    pub patience: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub stagewise: bool,
}

impl Default for FitParams {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            learning_rate: d.learning_rate,
            rmsprop_discount: d.rmsprop_discount,
            patience: d.patience,
            max_iters: d.max_iters,
            restarts: d.restarts,
            stagewise: d.stagewise,
        }
    }
}

impl FitParams {
    fn to_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            rmsprop_discount: self.rmsprop_discount,
            patience: self.patience,
            max_iters: self.max_iters,
            restarts: self.restarts,
            stagewise: self.stagewise,
            seed,
            ..FitConfig::default()
        }
    }
}

/// Q-learning knobs shared by the policy-training steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlParams {
    pub episodes: usize,
    pub learning_rate: f64,
    pub learning_rate_end: f64,
    pub discount: f64,
    pub explore_start: f64,
    pub explore_end: f64,
    pub threshold_scale: f64,
    pub restarts: usize,
    pub selection_samples: usize,
}

impl Default for RlParams {
    fn default() -> Self {
        let d = RlConfig::default();
        Self {
            episodes: d.episodes,
            learning_rate: d.learning_rate,
            learning_rate_end: d.learning_rate_end,
            discount: d.discount,
            explore_start: d.explore_start,
            explore_end: d.explore_end,
            threshold_scale: d.threshold_scale,
            restarts: d.restarts,
            selection_samples: d.selection_samples,
        }
    }
}

impl RlParams {
    fn to_config(&self, horizon: usize) -> RlConfig {
        RlConfig {
            episodes: self.episodes,
            horizon,
            learning_rate: self.learning_rate,
            learning_rate_end: self.learning_rate_end,
            discount: self.discount,
            explore_start: self.explore_start,
            explore_end: self.explore_end,
            thresholds: None,
            threshold_scale: self.threshold_scale,
            restarts: self.restarts,
            selection_samples: self.selection_samples,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CancerStudyParams {
    pub n_demos: usize,
    pub horizon: usize,
    pub behavior_mix: f64,
    pub n_train_prefs: usize,
    pub n_test_prefs: usize,
    pub pref_alpha: f64,
    pub pref_epsilon: f64,
    pub n_policy_samples: usize,
    pub softmin_beta: f64,
    pub fit: FitParams,
    pub rl: RlParams,
    pub birl: BirlConfig,
    pub bc: BcConfig,
}

impl Default for CancerStudyParams {
    fn default() -> Self {
        Self {
            n_demos: 1000,
            horizon: 20,
            behavior_mix: 0.5,
            n_train_prefs: 1000,
            n_test_prefs: 1000,
            pref_alpha: 10.0 * 9.0_f64.ln(),
            pref_epsilon: 0.1,
            n_policy_samples: 1000,
            softmin_beta: 10.0,
            fit: FitParams {
                stagewise: true,
                ..FitParams::default()
            },
            rl: RlParams::default(),
            birl: BirlConfig::default(),
            bc: BcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleRewardParams {
    pub n_demos: usize,
    pub horizon: usize,
    pub behavior_mix: f64,
    pub n_train_prefs: usize,
    pub n_test_prefs: usize,
    pub pref_alpha: f64,
    /// Ground-truth weights of the single reward `-wz * mean z + ww * mean w`.
    pub truth_theta_z: f64,
    pub truth_theta_w: f64,
    pub softmin_beta: f64,
    pub fit: FitParams,
    pub rl: RlParams,
    pub birl: BirlConfig,
}

impl Default for SingleRewardParams {
    fn default() -> Self {
        Self {
            n_demos: 1000,
            horizon: 20,
            behavior_mix: 0.5,
            n_train_prefs: 1000,
            n_test_prefs: 1000,
            pref_alpha: 10.0 * 9.0_f64.ln(),
            truth_theta_z: 0.2,
            truth_theta_w: 0.8,
            softmin_beta: 10.0,
            fit: FitParams {
                stagewise: true,
                ..FitParams::default()
            },
            rl: RlParams::default(),
            birl: BirlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KSweepParams {
    pub synth: SyntheticLexConfig,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub fit: FitParams,
}

impl Default for KSweepParams {
    fn default() -> Self {
        Self {
            synth: SyntheticLexConfig::default(),
            n_train_pairs: 10_000,
            n_test_pairs: 10_000,
            k_min: 1,
            k_max: 10,
            fit: FitParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgeStudyParams {
    pub n_demos: usize,
    pub horizon: usize,
    pub behavior_mix: f64,
    pub n_prefs: usize,
    pub y_threshold: f64,
    pub y_sensitivity: f64,
    pub pref_alpha: f64,
    pub pref_epsilon: f64,
    pub curve_age_max: f64,
    pub curve_age_step: f64,
    pub fit: FitParams,
    pub rl: RlParams,
}

impl Default for AgeStudyParams {
    fn default() -> Self {
        Self {
            n_demos: 1000,
            horizon: 20,
            behavior_mix: 0.5,
            n_prefs: 1000,
            y_threshold: 40.0,
            y_sensitivity: 1.0,
            pref_alpha: 10.0 * 9.0_f64.ln(),
            pref_epsilon: 0.1,
            curve_age_max: 80.0,
            curve_age_step: 2.0,
            fit: FitParams::default(),
            rl: RlParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocationStudyParams {
    pub gen: AllocationConfig,
    pub truth_theta_1: [f64; 2],
    pub truth_theta_2: [f64; 2],
    pub truth_epsilon_1: f64,
    pub truth_epsilon_2: f64,
    pub truth_alpha: f64,
    pub curve_need_max: f64,
    pub curve_need_step: f64,
    pub fit: FitParams,
}

impl Default for AllocationStudyParams {
    fn default() -> Self {
        Self {
            gen: AllocationConfig::default(),
            // Need-prioritized truth: level 1 weighs need, level 2 benefit,
            // with indifference bands on the tens-of-days scale. The
            // consistency scale keeps the lexicographic structure visible
            // through the tournament noise.
            truth_theta_1: [0.0001, 0.0139],
            truth_theta_2: [0.0562, 0.0002],
            truth_epsilon_1: 0.8944,
            truth_epsilon_2: 1.8830,
            truth_alpha: 5.0,
            curve_need_max: 100.0,
            curve_need_step: 5.0,
            fit: FitParams::default(),
        }
    }
}

/// Everything a study run needs: which study, the seed list, and per-study
/// parameter blocks (unused blocks are ignored by the dispatcher).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub study: StudyName,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cancer: CancerStudyParams,
    #[serde(default)]
    pub single_reward: SingleRewardParams,
    #[serde(default)]
    pub k_sweep: KSweepParams,
    #[serde(default)]
    pub age: AgeStudyParams,
    #[serde(default)]
    pub allocation: AllocationStudyParams,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl ExperimentConfig {
    pub fn new(study: StudyName) -> Self {
        Self {
            study,
            seeds: default_seeds(),
            cancer: CancerStudyParams::default(),
            single_reward: SingleRewardParams::default(),
            k_sweep: KSweepParams::default(),
            age: AgeStudyParams::default(),
            allocation: AllocationStudyParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; stamped into every output file.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn provenance(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "# study={} config_hash={} seeds={}\n",
            self.study.as_str(),
            self.hash(),
            seeds.join(",")
        )
    }
}

/// Independent deterministic stream for one phase of one seed's pipeline.
pub fn phase_rng(seed: u64, phase: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(phase.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn phase_seed(seed: u64, phase: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(phase.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn write_csv(path: &Path, provenance: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(provenance.len() + header.len() + rows.len() * 32);
    out.push_str(provenance);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// Cancer study
// ---------------------------------------------------------------------------

/// The two-level treatment objective used to both label preferences and
/// score policies.
pub fn cancer_ground_truth(alpha: f64, epsilon: f64) -> LexRewardModel {
    LexRewardModel::new(vec![
        (
            RewardFamily::CancerGroundTruthWbc,
            LevelParams { alpha, epsilon },
        ),
        (
            RewardFamily::CancerGroundTruthTumor,
            LevelParams { alpha, epsilon },
        ),
    ])
    .expect("two levels")
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: String,
    pub per_seed: Vec<MetricsReport>,
    pub rmse: SeedSummary,
    pub accuracy: SeedSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyCell {
    pub row: String,
    pub col: String,
    pub per_seed: Vec<f64>,
    pub summary: SeedSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct CancerOutcome {
    pub methods: Vec<MethodMetrics>,
    pub policy_cells: Vec<PolicyCell>,
}

struct CancerSeedResult {
    metrics: BTreeMap<String, MetricsReport>,
    policy: BTreeMap<(String, String), f64>,
}

fn run_cancer_seed(params: &CancerStudyParams, seed: u64) -> Result<CancerSeedResult> {
    let env = CancerEnv::default();
    let grid = StateGrid::default_cancer();
    let truth = cancer_ground_truth(params.pref_alpha, params.pref_epsilon);

    let rl_config = params.rl.to_config(params.horizon);
    let optimal = lex_q_learning(
        &truth,
        &env,
        &grid,
        &rl_config,
        &mut phase_rng(seed, "rl-optimal"),
    )?;
    let behavior = make_behavior_policy(optimal.clone(), params.behavior_mix)?;

    let mut demo_rng = phase_rng(seed, "demos");
    let demos: Vec<Trajectory> = (0..params.n_demos)
        .map(|_| env.rollout(&behavior, params.horizon, false, &mut demo_rng))
        .collect::<Result<_>>()?;
    let pool: Vec<Alternative> = demos.iter().cloned().map(Alternative::Traj).collect();

    let train = gen_preference_dataset(
        &truth,
        &pool,
        params.n_train_prefs,
        &mut phase_rng(seed, "prefs-train"),
    )?;
    let test = gen_preference_dataset(
        &truth,
        &pool,
        params.n_test_prefs,
        &mut phase_rng(seed, "prefs-test"),
    )?;

    let fit_config = params.fit.to_config(phase_seed(seed, "fit"));
    let lori_template = RewardFamily::TrajThresholdedLinear {
        theta_max: 0.0,
        theta_z: 1.0,
        theta_w: 1.0,
        softmin_beta: params.softmin_beta,
    };
    let (lori_model, _) = fit_lori(&train, 2, &lori_template, &fit_config)?;
    let trex_template = RewardFamily::TrajLinear {
        theta_z: 1.0,
        theta_w: 1.0,
    };
    let (trex_model, _) = fit_trex(&train, &trex_template, &fit_config)?;

    let mut birl_config = params.birl.clone();
    birl_config.seed = phase_seed(seed, "birl");
    let (birl_family, _) = fit_birl(&demos, &env, &grid, &birl_config, &mut phase_rng(seed, "birl"))?;
    let birl_model = LexRewardModel::new(vec![(
        birl_family,
        LevelParams {
            alpha: 1.0,
            epsilon: 0.0,
        },
    )])?;

    let mut metrics = BTreeMap::new();
    metrics.insert("birl".into(), eval_preference_metrics(&birl_model, &test, &truth)?);
    metrics.insert("trex".into(), eval_preference_metrics(&trex_model, &test, &truth)?);
    metrics.insert("lori".into(), eval_preference_metrics(&lori_model, &test, &truth)?);

    let bc_config = BcConfig {
        seed: phase_seed(seed, "bc"),
        ..params.bc.clone()
    };
    let (bc_policy, _) = behavioral_cloning(&demos, &bc_config)?;
    let lori_policy = lex_q_learning(
        &lori_model,
        &env,
        &grid,
        &rl_config,
        &mut phase_rng(seed, "rl-lori"),
    )?;
    let trex_policy = lex_q_learning(
        &trex_model,
        &env,
        &grid,
        &rl_config,
        &mut phase_rng(seed, "rl-trex"),
    )?;
    let birl_policy = lex_q_learning(
        &birl_model,
        &env,
        &grid,
        &rl_config,
        &mut phase_rng(seed, "rl-birl"),
    )?;

    let ordered: Vec<(&str, &Policy)> = vec![
        ("behavior", &behavior),
        ("bc", &bc_policy),
        ("birl", &birl_policy),
        ("trex", &trex_policy),
        ("lori", &lori_policy),
        ("optimal", &optimal),
    ];
    let mut eval_rng = phase_rng(seed, "policy-eval");
    let mut policy = BTreeMap::new();
    for i in 1..ordered.len() {
        for j in 0..i {
            let freq = policy_pref_frequency(
                ordered[i].1,
                ordered[j].1,
                &truth,
                &env,
                params.horizon,
                params.n_policy_samples,
                &mut eval_rng,
            )?;
            policy.insert((ordered[i].0.to_string(), ordered[j].0.to_string()), freq.mean);
        }
    }

    Ok(CancerSeedResult { metrics, policy })
}

fn collect_method_metrics(
    methods: &[&str],
    results: &[BTreeMap<String, MetricsReport>],
) -> Vec<MethodMetrics> {
    methods
        .iter()
        .map(|&m| {
            let per_seed: Vec<MetricsReport> = results.iter().map(|r| r[m]).collect();
            MethodMetrics {
                method: m.to_string(),
                rmse: summarize(&per_seed.iter().map(|x| x.rmse).collect::<Vec<_>>()),
                accuracy: summarize(&per_seed.iter().map(|x| x.accuracy).collect::<Vec<_>>()),
                per_seed,
            }
        })
        .collect()
}

fn run_cancer(config: &ExperimentConfig, out_dir: &Path) -> Result<CancerOutcome> {
    let params = &config.cancer;
    let mut seed_results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        match run_cancer_seed(params, seed) {
            Ok(r) => seed_results.push((seed, r)),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }

    let provenance = config.provenance();
    let mut metric_rows = Vec::new();
    for (seed, r) in &seed_results {
        for (method, m) in &r.metrics {
            metric_rows.push(format!("{method},{seed},{},{}", m.rmse, m.accuracy));
        }
    }
    write_csv(
        &out_dir.join("reward_metrics.csv"),
        &provenance,
        "method,seed,rmse,accuracy",
        &metric_rows,
    )?;

    let metric_maps: Vec<BTreeMap<String, MetricsReport>> =
        seed_results.iter().map(|(_, r)| r.metrics.clone()).collect();
    let methods = collect_method_metrics(&["birl", "trex", "lori"], &metric_maps);
    let summary_rows: Vec<String> = methods
        .iter()
        .map(|m| {
            format!(
                "{},{},{},{},{},{},{}",
                m.method,
                m.rmse.mean,
                m.rmse.std,
                m.rmse.std_error,
                m.accuracy.mean,
                m.accuracy.std,
                m.accuracy.std_error
            )
        })
        .collect();
    write_csv(
        &out_dir.join("reward_summary.csv"),
        &provenance,
        "method,mean_rmse,std_rmse,stderr_rmse,mean_accuracy,std_accuracy,stderr_accuracy",
        &summary_rows,
    )?;

    let mut cell_keys: Vec<(String, String)> = Vec::new();
    if let Some((_, first)) = seed_results.first() {
        cell_keys = first.policy.keys().cloned().collect();
    }
    let mut matrix_rows = Vec::new();
    let mut policy_cells = Vec::new();
    for key in &cell_keys {
        let per_seed: Vec<f64> = seed_results.iter().map(|(_, r)| r.policy[key]).collect();
        for ((seed, _), value) in seed_results.iter().zip(&per_seed) {
            matrix_rows.push(format!("{},{},{seed},{value}", key.0, key.1));
        }
        policy_cells.push(PolicyCell {
            row: key.0.clone(),
            col: key.1.clone(),
            summary: summarize(&per_seed),
            per_seed,
        });
    }
    write_csv(
        &out_dir.join("policy_matrix.csv"),
        &provenance,
        "row_policy,col_policy,seed,pref_frequency",
        &matrix_rows,
    )?;
    let policy_summary_rows: Vec<String> = policy_cells
        .iter()
        .map(|c| {
            format!(
                "{},{},{},{},{}",
                c.row, c.col, c.summary.mean, c.summary.std, c.summary.std_error
            )
        })
        .collect();
    write_csv(
        &out_dir.join("policy_summary.csv"),
        &provenance,
        "row_policy,col_policy,mean,std,stderr",
        &policy_summary_rows,
    )?;

    if !failures.is_empty() {
        return Err(Error::invalid(format!(
            "{} of {} seeds failed: {}",
            failures.len(),
            config.seeds.len(),
            failures.join("; ")
        )));
    }
    Ok(CancerOutcome {
        methods,
        policy_cells,
    })
}

// ---------------------------------------------------------------------------
// Single-reward ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SingleRewardOutcome {
    pub methods: Vec<MethodMetrics>,
}

fn run_single_reward_seed(
    params: &SingleRewardParams,
    seed: u64,
) -> Result<BTreeMap<String, MetricsReport>> {
    let env = CancerEnv::default();
    let grid = StateGrid::default_cancer();
    let truth = LexRewardModel::new(vec![(
        RewardFamily::TrajLinear {
            theta_z: params.truth_theta_z,
            theta_w: params.truth_theta_w,
        },
        LevelParams {
            alpha: params.pref_alpha,
            epsilon: 0.0,
        },
    )])?;

    let rl_config = params.rl.to_config(params.horizon);
    let optimal = lex_q_learning(
        &truth,
        &env,
        &grid,
        &rl_config,
        &mut phase_rng(seed, "rl-optimal"),
    )?;
    let behavior = make_behavior_policy(optimal, params.behavior_mix)?;
    let mut demo_rng = phase_rng(seed, "demos");
    let demos: Vec<Trajectory> = (0..params.n_demos)
        .map(|_| env.rollout(&behavior, params.horizon, false, &mut demo_rng))
        .collect::<Result<_>>()?;
    let pool: Vec<Alternative> = demos.iter().cloned().map(Alternative::Traj).collect();
    let train = gen_preference_dataset(
        &truth,
        &pool,
        params.n_train_prefs,
        &mut phase_rng(seed, "prefs-train"),
    )?;
    let test = gen_preference_dataset(
        &truth,
        &pool,
        params.n_test_prefs,
        &mut phase_rng(seed, "prefs-test"),
    )?;

    let fit_config = params.fit.to_config(phase_seed(seed, "fit"));
    let (lori_model, _) = fit_lori(
        &train,
        2,
        &RewardFamily::TrajThresholdedLinear {
            theta_max: 0.0,
            theta_z: 1.0,
            theta_w: 1.0,
            softmin_beta: params.softmin_beta,
        },
        &fit_config,
    )?;
    let (trex_model, _) = fit_trex(
        &train,
        &RewardFamily::TrajLinear {
            theta_z: 1.0,
            theta_w: 1.0,
        },
        &fit_config,
    )?;
    let mut birl_config = params.birl.clone();
    birl_config.seed = phase_seed(seed, "birl");
    let (birl_family, _) = fit_birl(&demos, &env, &grid, &birl_config, &mut phase_rng(seed, "birl"))?;
    let birl_model = LexRewardModel::new(vec![(
        birl_family,
        LevelParams {
            alpha: 1.0,
            epsilon: 0.0,
        },
    )])?;

    let mut metrics = BTreeMap::new();
    metrics.insert("birl".into(), eval_preference_metrics(&birl_model, &test, &truth)?);
    metrics.insert("trex".into(), eval_preference_metrics(&trex_model, &test, &truth)?);
    metrics.insert("lori".into(), eval_preference_metrics(&lori_model, &test, &truth)?);
    Ok(metrics)
}

fn run_single_reward(config: &ExperimentConfig, out_dir: &Path) -> Result<SingleRewardOutcome> {
    let params = &config.single_reward;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        match run_single_reward_seed(params, seed) {
            Ok(r) => results.push((seed, r)),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let provenance = config.provenance();
    let mut rows = Vec::new();
    for (seed, metrics) in &results {
        for (method, m) in metrics {
            rows.push(format!("{method},{seed},{},{}", m.rmse, m.accuracy));
        }
    }
    write_csv(
        &out_dir.join("reward_metrics.csv"),
        &provenance,
        "method,seed,rmse,accuracy",
        &rows,
    )?;
    let maps: Vec<BTreeMap<String, MetricsReport>> =
        results.iter().map(|(_, r)| r.clone()).collect();
    let methods = collect_method_metrics(&["birl", "trex", "lori"], &maps);
    let summary_rows: Vec<String> = methods
        .iter()
        .map(|m| {
            format!(
                "{},{},{},{},{},{},{}",
                m.method,
                m.rmse.mean,
                m.rmse.std,
                m.rmse.std_error,
                m.accuracy.mean,
                m.accuracy.std,
                m.accuracy.std_error
            )
        })
        .collect();
    write_csv(
        &out_dir.join("reward_summary.csv"),
        &provenance,
        "method,mean_rmse,std_rmse,stderr_rmse,mean_accuracy,std_accuracy,stderr_accuracy",
        &summary_rows,
    )?;
    if !failures.is_empty() {
        return Err(Error::invalid(format!(
            "{} of {} seeds failed: {}",
            failures.len(),
            config.seeds.len(),
            failures.join("; ")
        )));
    }
    Ok(SingleRewardOutcome { methods })
}

// ---------------------------------------------------------------------------
// Level-count sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct KSweepOutcome {
    /// Indexed by k (from `k_min`), RMSE per seed.
    pub rmse_by_k: Vec<(usize, Vec<f64>)>,
    pub summary_by_k: Vec<(usize, SeedSummary)>,
}

/// Fresh-pair dataset: every comparison uses two newly sampled alternatives.
fn ksweep_dataset<R: Rng>(
    env: &crate::envs::SyntheticLexEnv,
    n_pairs: usize,
    rng: &mut R,
) -> Result<PreferenceDataset> {
    let mut ds = PreferenceDataset::new();
    for _ in 0..n_pairs {
        let a = env.sample_alternative(rng);
        let b = env.sample_alternative(rng);
        let ia = ds.push_alternative(a.clone());
        let ib = ds.push_alternative(b.clone());
        match env.model.sample_preference(&a, &b, rng)? {
            PreferenceLabel::StarPreferred => ds.record(ia, ib)?,
            PreferenceLabel::CircPreferred => ds.record(ib, ia)?,
        }
    }
    Ok(ds)
}

fn run_k_sweep_seed(params: &KSweepParams, seed: u64) -> Result<Vec<(usize, MetricsReport)>> {
    let env = gen_synthetic_lex_env(&params.synth, &mut phase_rng(seed, "synth-env"));
    let train = ksweep_dataset(&env, params.n_train_pairs, &mut phase_rng(seed, "train"))?;
    let test = ksweep_dataset(&env, params.n_test_pairs, &mut phase_rng(seed, "test"))?;
    let fit_config = params.fit.to_config(phase_seed(seed, "fit"));
    let template = RewardFamily::linear(vec![0.0; params.synth.dim]);
    let mut out = Vec::new();
    for k in params.k_min..=params.k_max {
        let (model, _) = fit_lori(&train, k, &template, &fit_config)?;
        let metrics = eval_preference_metrics(&model, &test, &env.model)?;
        out.push((k, metrics));
    }
    Ok(out)
}

fn run_k_sweep(config: &ExperimentConfig, out_dir: &Path) -> Result<KSweepOutcome> {
    let params = &config.k_sweep;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        match run_k_sweep_seed(params, seed) {
            Ok(r) => results.push((seed, r)),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let provenance = config.provenance();
    let mut rows = Vec::new();
    for (seed, per_k) in &results {
        for (k, m) in per_k {
            rows.push(format!("{k},{seed},{},{}", m.rmse, m.accuracy));
        }
    }
    write_csv(
        &out_dir.join("rmse_by_k.csv"),
        &provenance,
        "k,seed,rmse,accuracy",
        &rows,
    )?;

    let mut rmse_by_k = Vec::new();
    let mut summary_by_k = Vec::new();
    let mut summary_rows = Vec::new();
    for k in params.k_min..=params.k_max {
        let values: Vec<f64> = results
            .iter()
            .flat_map(|(_, per_k)| {
                per_k
                    .iter()
                    .filter(|(kk, _)| *kk == k)
                    .map(|(_, m)| m.rmse)
            })
            .collect();
        if values.is_empty() {
            continue;
        }
        let s = summarize(&values);
        summary_rows.push(format!("{k},{},{},{}", s.mean, s.std, s.std_error));
        rmse_by_k.push((k, values));
        summary_by_k.push((k, s));
    }
    write_csv(
        &out_dir.join("rmse_summary.csv"),
        &provenance,
        "k,mean_rmse,std_rmse,stderr_rmse",
        &summary_rows,
    )?;
    if !failures.is_empty() {
        return Err(Error::invalid(format!(
            "{} of {} seeds failed: {}",
            failures.len(),
            config.seeds.len(),
            failures.join("; ")
        )));
    }
    Ok(KSweepOutcome {
        rmse_by_k,
        summary_by_k,
    })
}

// ---------------------------------------------------------------------------
// Age-gated priority recovery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AgeSeedOutcome {
    pub seed: u64,
    pub y_threshold: f64,
    pub y_sensitivity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgeOutcome {
    pub per_seed: Vec<AgeSeedOutcome>,
}

fn age_gate(y: f64, threshold: f64, sensitivity: f64) -> f64 {
    crate::prefmodel::logistic((y - threshold) / sensitivity)
}

fn run_age_seed(params: &AgeStudyParams, seed: u64) -> Result<(AgeSeedOutcome, LexRewardModel)> {
    let env = CancerEnv::default();
    let grid = StateGrid::default_cancer();
    // Demonstrations come from the same imperfect-clinician pipeline as the
    // treatment study, with ages attached to each simulated patient.
    let treatment_truth = cancer_ground_truth(params.pref_alpha, params.pref_epsilon);
    let rl_config = params.rl.to_config(params.horizon);
    let optimal = lex_q_learning(
        &treatment_truth,
        &env,
        &grid,
        &rl_config,
        &mut phase_rng(seed, "rl-optimal"),
    )?;
    let behavior = make_behavior_policy(optimal, params.behavior_mix)?;
    let mut demo_rng = phase_rng(seed, "demos");
    let demos: Vec<Trajectory> = (0..params.n_demos)
        .map(|_| env.rollout(&behavior, params.horizon, true, &mut demo_rng))
        .collect::<Result<_>>()?;
    let pool: Vec<Alternative> = demos.iter().cloned().map(Alternative::Traj).collect();

    let truth_family = |polarity| RewardFamily::AgeGated {
        y_threshold: params.y_threshold,
        y_sensitivity: params.y_sensitivity,
        polarity,
        age_loc: env.config.age_mean,
        age_scale: env.config.age_std,
    };
    let truth = LexRewardModel::new(vec![
        (
            truth_family(GatePolarity::EfficacyFirst),
            LevelParams {
                alpha: params.pref_alpha,
                epsilon: params.pref_epsilon,
            },
        ),
        (
            truth_family(GatePolarity::ToxicityFirst),
            LevelParams {
                alpha: params.pref_alpha,
                epsilon: params.pref_epsilon,
            },
        ),
    ])?;
    let prefs = gen_preference_dataset(&truth, &pool, params.n_prefs, &mut phase_rng(seed, "prefs"))?;

    // Unconstrained gate coordinates are zeroed at the empirical age
    // statistics of the demonstrations, so the fit starts where the data is.
    let ages: Vec<f64> = demos.iter().filter_map(|t| t.age).collect();
    let age_loc = ages.iter().sum::<f64>() / ages.len() as f64;
    let age_var =
        ages.iter().map(|a| (a - age_loc) * (a - age_loc)).sum::<f64>() / ages.len() as f64;
    let age_scale = age_var.sqrt().max(1.0);

    let template_family = |polarity| RewardFamily::AgeGated {
        y_threshold: age_loc,
        y_sensitivity: age_scale,
        polarity,
        age_loc,
        age_scale,
    };
    let template = LexRewardModel::new(vec![
        (
            template_family(GatePolarity::EfficacyFirst),
            LevelParams {
                alpha: 1.0,
                epsilon: 1.0,
            },
        ),
        (
            template_family(GatePolarity::ToxicityFirst),
            LevelParams {
                alpha: 1.0,
                epsilon: 1.0,
            },
        ),
    ])?;
    let fit_config = params.fit.to_config(phase_seed(seed, "fit"));
    let (fitted, _) = fit_model(&prefs, &template, &fit_config)?;
    let (y_threshold, y_sensitivity) = match &fitted.levels[0].0 {
        RewardFamily::AgeGated {
            y_threshold,
            y_sensitivity,
            ..
        } => (*y_threshold, *y_sensitivity),
        _ => unreachable!("template is age-gated"),
    };
    Ok((
        AgeSeedOutcome {
            seed,
            y_threshold,
            y_sensitivity,
        },
        fitted,
    ))
}

fn run_age(config: &ExperimentConfig, out_dir: &Path) -> Result<AgeOutcome> {
    let params = &config.age;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        match run_age_seed(params, seed) {
            Ok(r) => results.push(r),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let provenance = config.provenance();
    let mut fit_rows = Vec::new();
    let mut curve_rows = Vec::new();
    for (outcome, fitted) in &results {
        for (level, (family, params_l)) in fitted.levels.iter().enumerate() {
            if let RewardFamily::AgeGated {
                y_threshold,
                y_sensitivity,
                ..
            } = family
            {
                fit_rows.push(format!(
                    "{},{},{y_threshold},{y_sensitivity},{}",
                    outcome.seed,
                    level + 1,
                    params_l.epsilon
                ));
            }
        }
        let mut age = 0.0;
        while age <= params.curve_age_max {
            let fitted_gate = age_gate(age, outcome.y_threshold, outcome.y_sensitivity);
            let true_gate = age_gate(age, params.y_threshold, params.y_sensitivity);
            curve_rows.push(format!(
                "{},{age},{fitted_gate},{true_gate}",
                outcome.seed
            ));
            age += params.curve_age_step;
        }
    }
    write_csv(
        &out_dir.join("age_fits.csv"),
        &provenance,
        "seed,level,y_threshold,y_sensitivity,epsilon",
        &fit_rows,
    )?;
    write_csv(
        &out_dir.join("age_curve.csv"),
        &provenance,
        "seed,age,fitted_priority,true_priority",
        &curve_rows,
    )?;
    if !failures.is_empty() {
        return Err(Error::invalid(format!(
            "{} of {} seeds failed: {}",
            failures.len(),
            config.seeds.len(),
            failures.join("; ")
        )));
    }
    Ok(AgeOutcome {
        per_seed: results.into_iter().map(|(o, _)| o).collect(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic allocation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AllocationSeedOutcome {
    pub seed: u64,
    /// Per level: fitted (benefit, need) weights.
    pub weights: Vec<[f64; 2]>,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationOutcome {
    pub per_seed: Vec<AllocationSeedOutcome>,
}

fn allocation_truth(params: &AllocationStudyParams) -> Result<LexRewardModel> {
    LexRewardModel::new(vec![
        (
            RewardFamily::linear(params.truth_theta_1.to_vec()),
            LevelParams {
                alpha: params.truth_alpha,
                epsilon: params.truth_epsilon_1,
            },
        ),
        (
            RewardFamily::linear(params.truth_theta_2.to_vec()),
            LevelParams {
                alpha: params.truth_alpha,
                epsilon: params.truth_epsilon_2,
            },
        ),
    ])
}

/// Benefit difference that makes the fitted model indifferent to a given
/// need deficit; infinite when no finite benefit difference compensates.
fn benefit_to_offset_need(model: &LexRewardModel, need_diff: f64) -> Result<f64> {
    let indifferent = |benefit: f64| -> Result<f64> {
        let a = Alternative::features(vec![benefit, 0.0]);
        let b = Alternative::features(vec![0.0, need_diff]);
        Ok(model.pref_prob_tiebreak(&a, &b)? - 0.5)
    };
    let mut hi = 1.0;
    let cap = 1e7;
    while indifferent(hi)? < 0.0 {
        hi *= 2.0;
        if hi > cap {
            return Ok(f64::INFINITY);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if indifferent(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn run_allocation_seed(
    params: &AllocationStudyParams,
    seed: u64,
) -> Result<(AllocationSeedOutcome, LexRewardModel)> {
    let truth = allocation_truth(params)?;
    let data = gen_allocation_dataset(&truth, &params.gen, &mut phase_rng(seed, "events"))?;
    let fit_config = params.fit.to_config(phase_seed(seed, "fit"));
    let template = RewardFamily::Linear {
        theta: vec![1.0, 1.0],
        nonneg: true,
    };
    let (fitted, _) = fit_lori(&data, 2, &template, &fit_config)?;
    let mut weights = Vec::new();
    let mut epsilons = Vec::new();
    for (family, level_params) in &fitted.levels {
        match family {
            RewardFamily::Linear { theta, .. } => weights.push([theta[0], theta[1]]),
            _ => unreachable!("template is linear"),
        }
        epsilons.push(level_params.epsilon);
    }
    Ok((
        AllocationSeedOutcome {
            seed,
            weights,
            epsilons,
        },
        fitted,
    ))
}

fn run_allocation(config: &ExperimentConfig, out_dir: &Path) -> Result<AllocationOutcome> {
    let params = &config.allocation;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        match run_allocation_seed(params, seed) {
            Ok(r) => results.push(r),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let provenance = config.provenance();
    let mut fit_rows = Vec::new();
    let mut curve_rows = Vec::new();
    for (outcome, fitted) in &results {
        for (level, (w, eps)) in outcome.weights.iter().zip(&outcome.epsilons).enumerate() {
            fit_rows.push(format!(
                "{},{},{},{},{eps}",
                outcome.seed,
                level + 1,
                w[0],
                w[1]
            ));
        }
        let mut need = 0.0;
        while need <= params.curve_need_max {
            let benefit = benefit_to_offset_need(fitted, need)?;
            curve_rows.push(format!("{},{need},{benefit}", outcome.seed));
            need += params.curve_need_step;
        }
    }
    write_csv(
        &out_dir.join("allocation_fits.csv"),
        &provenance,
        "seed,level,theta_benefit,theta_need,epsilon",
        &fit_rows,
    )?;
    write_csv(
        &out_dir.join("tradeoff_curve.csv"),
        &provenance,
        "seed,need_diff,benefit_diff_to_indifference",
        &curve_rows,
    )?;
    if !failures.is_empty() {
        return Err(Error::invalid(format!(
            "{} of {} seeds failed: {}",
            failures.len(),
            config.seeds.len(),
            failures.join("; ")
        )));
    }
    Ok(AllocationOutcome {
        per_seed: results.into_iter().map(|(o, _)| o).collect(),
    })
}

// ---------------------------------------------------------------------------
// Dispatcher
// ---------------------------------------------------------------------------

/// Results of one study run, shaped per study.
#[derive(Debug, Clone, Serialize)]
pub enum StudyOutcome {
    Cancer(CancerOutcome),
    SingleReward(SingleRewardOutcome),
    KSweep(KSweepOutcome),
    Age(AgeOutcome),
    Allocation(AllocationOutcome),
}

/// Runs the configured study, writing its CSV outputs under `out_dir`.
/// Seeds run independently; if any seed fails the partial outputs are still
/// written and an error describing the failed seeds is returned.
pub fn run_study(config: &ExperimentConfig, out_dir: &Path) -> Result<StudyOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    match config.study {
        StudyName::Cancer => run_cancer(config, out_dir).map(StudyOutcome::Cancer),
        StudyName::SingleReward => {
            run_single_reward(config, out_dir).map(StudyOutcome::SingleReward)
        }
        StudyName::KSweep => run_k_sweep(config, out_dir).map(StudyOutcome::KSweep),
        StudyName::Age => run_age(config, out_dir).map(StudyOutcome::Age),
        StudyName::Allocation => run_allocation(config, out_dir).map(StudyOutcome::Allocation),
    }
}

/// Reads a JSON experiment config, or builds the default one for a study.
pub fn load_config(study: &str, path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let study = StudyName::parse(study)?;
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            let mut parsed: ExperimentConfig =
                serde_json::from_str(&text).map_err(|e| Error::Json {
                    path: p.display().to_string(),
                    source: e,
                })?;
            parsed.study = study;
            parsed
        }
        None => ExperimentConfig::new(study),
    };
    config.study = study;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_allocation_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::new(StudyName::Allocation);
        config.seeds = vec![1, 2];
        config.allocation.gen.n_events = 40;
        config.allocation.gen.waitlist_size = 4;
        config.allocation.fit.max_iters = 400;
        config.allocation.curve_need_step = 50.0;
        config
    }

    #[test]
    fn allocation_study_smoke_and_determinism() {
        let config = tiny_allocation_config();
        let dir1 = tempdir().unwrap();
        let dir2 = tempdir().unwrap();
        run_study(&config, dir1.path()).unwrap();
        run_study(&config, dir2.path()).unwrap();
        for name in ["allocation_fits.csv", "tradeoff_curve.csv"] {
            let a = fs::read(dir1.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn config_hash_changes_with_params() {
        let a = tiny_allocation_config();
        let mut b = a.clone();
        b.allocation.gen.n_events = 41;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn seeds_must_be_distinct_and_nonempty() {
        let mut config = ExperimentConfig::new(StudyName::Allocation);
        config.seeds = vec![];
        assert!(config.validate().is_err());
        config.seeds = vec![1, 1];
        assert!(config.validate().is_err());
        config.seeds = vec![1, 2];
        assert!(config.validate().is_ok());
    }

    #[test]
    fn study_names_round_trip() {
        for name in ["cancer", "single-reward", "k-sweep", "age", "allocation"] {
            assert_eq!(StudyName::parse(name).unwrap().as_str(), name);
        }
        assert!(StudyName::parse("nope").is_err());
    }

    #[test]
    fn provenance_header_present_in_outputs() {
        let config = tiny_allocation_config();
        let dir = tempdir().unwrap();
        run_study(&config, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("allocation_fits.csv")).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# study=allocation config_hash="));
        assert!(first.contains("seeds=1,2"));
    }

    #[test]
    fn ksweep_tiny_smoke() {
        let mut config = ExperimentConfig::new(StudyName::KSweep);
        config.seeds = vec![3];
        config.k_sweep.synth.k_true = 3;
        config.k_sweep.synth.dim = 3;
        config.k_sweep.n_train_pairs = 200;
        config.k_sweep.n_test_pairs = 200;
        config.k_sweep.k_min = 1;
        config.k_sweep.k_max = 2;
        config.k_sweep.fit.max_iters = 200;
        let dir = tempdir().unwrap();
        let outcome = run_study(&config, dir.path()).unwrap();
        match outcome {
            StudyOutcome::KSweep(o) => {
                assert_eq!(o.rmse_by_k.len(), 2);
                assert_eq!(o.rmse_by_k[0].1.len(), 1);
            }
            _ => panic!("wrong outcome kind"),
        }
        let text = fs::read_to_string(dir.path().join("rmse_by_k.csv")).unwrap();
        // Header plus one row per (k, seed).
        assert_eq!(text.lines().count(), 2 + 2);
    }
}
