//! Experiment CLI: simulate trajectories, generate preferences, fit reward
//! models, evaluate them, train policies, and run the scripted studies.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lexrank::bench::io;
use lexrank::bench::studies::{load_config, run_study, StudyOutcome};
use lexrank::bench::{eval_preference_metrics, summarize};
use lexrank::control::{
    behavioral_cloning, lex_q_learning, make_behavior_policy, BcConfig, Policy, RlConfig,
    StateGrid,
};
use lexrank::dataset::PreferenceDataset;
use lexrank::envs::{gen_preference_dataset, CancerEnv, CancerEnvConfig};
use lexrank::error::{Error, Result};
use lexrank::infer::birl::{fit_birl, BirlConfig};
use lexrank::infer::{fit_lori, fit_model, fit_trex, FitConfig};
use lexrank::prefmodel::LexRewardModel;
use lexrank::rewards::{Alternative, RewardFamily};

#[derive(Parser)]
#[command(
    name = "lexrank",
    about = "Lexicographically-ordered reward inference from pairwise preferences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a policy in the treatment simulator and write trajectories.
    Simulate(SimulateArgs),
    /// Label sampled pairs with a ground-truth model and write preferences.
    GenPrefs(GenPrefsArgs),
    /// Fit a reward model (or clone a policy) from data.
    Fit(FitArgs),
    /// Score a fitted model on test preferences.
    Eval(EvalArgs),
    /// Train a lexicographic Q-learning policy from a reward model.
    Rl(RlArgs),
    /// Run one of the scripted studies end to end.
    Study(StudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Policy JSON file; omit for the uniform-random policy.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Mix the policy with this much uniform noise before rolling out.
    #[arg(long, default_value_t = 0.0)]
    mix_uniform: f64,
    #[arg(short = 'n', long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Attach a sampled patient age to every trajectory.
    #[arg(long, default_value_t = false)]
    with_age: bool,
    #[arg(long, default_value_t = 0.5)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenPrefsArgs {
    /// Ground-truth model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Trajectory CSV pool (for trajectory rewards).
    #[arg(long, group = "pool")]
    trajs: Option<PathBuf>,
    /// Feature CSV pool (for linear rewards).
    #[arg(long, group = "pool")]
    alts: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMethod {
    Lori,
    Trex,
    Birl,
    Bc,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyKind {
    /// softmin-capped trajectory-linear reward
    ThresholdedLinear,
    /// plain trajectory-linear reward
    TrajLinear,
    /// unconstrained linear over features
    Linear,
    /// positivity-constrained linear over features
    LinearNonneg,
    /// age-gated efficacy/toxicity blend (level 1 efficacy-first)
    AgeGated,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: FitMethod,
    /// Training preferences CSV (lori/trex).
    #[arg(long)]
    prefs: Option<PathBuf>,
    /// Trajectory CSV: the preference pool for lori/trex, demonstrations
    /// for birl/bc.
    #[arg(long)]
    trajs: Option<PathBuf>,
    /// Feature CSV pool for linear families.
    #[arg(long)]
    alts: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, value_enum, default_value_t = FamilyKind::ThresholdedLinear)]
    family: FamilyKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output: model JSON (lori/trex/birl) or policy JSON (bc).
    #[arg(long)]
    out: PathBuf,
    /// Also write the fit report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Warm-start from this model JSON instead of the zero template.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 50000)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    /// Introduce lexicographic levels one at a time while fitting.
    #[arg(long, default_value_t = false)]
    stagewise: bool,
    #[arg(long, default_value_t = false)]
    learn_alpha: bool,
    #[arg(long, default_value_t = false)]
    freeze_epsilon: bool,
    /// Hidden width for behavioral cloning.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Fitted model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Test preferences CSV.
    #[arg(long)]
    prefs: PathBuf,
    #[arg(long)]
    trajs: Option<PathBuf>,
    #[arg(long)]
    alts: Option<PathBuf>,
    /// Ground-truth model JSON for the probability RMSE; defaults to the
    /// fitted model itself (RMSE 0).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RlArgs {
    /// Reward model JSON driving the Q-tables.
    #[arg(long)]
    rewards: PathBuf,
    #[arg(long, default_value_t = 50000)]
    episodes: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    learning_rate_end: Option<f64>,
    #[arg(long)]
    explore_end: Option<f64>,
    /// Comma-separated per-level filter thresholds.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mix this much uniform noise into the saved policy.
    #[arg(long)]
    mix_uniform: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// One of: cancer, single-reward, k-sweep, age, allocation.
    name: String,
    /// Base seed: the study runs seeds base..base+4 (default 1..5).
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment config JSON overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_pool(trajs: &Option<PathBuf>, alts: &Option<PathBuf>) -> Result<Vec<Alternative>> {
    match (trajs, alts) {
        (Some(path), None) => Ok(io::read_trajectories_csv(path)?
            .into_iter()
            .map(Alternative::Traj)
            .collect()),
        (None, Some(path)) => Ok(io::read_features_csv(path)?
            .into_iter()
            .map(Alternative::features)
            .collect()),
        _ => Err(Error::invalid(
            "exactly one of --trajs or --alts must be given",
        )),
    }
}

fn family_template(kind: FamilyKind, dim: usize) -> RewardFamily {
    match kind {
        FamilyKind::ThresholdedLinear => RewardFamily::TrajThresholdedLinear {
            theta_max: 0.0,
            theta_z: 1.0,
            theta_w: 1.0,
            softmin_beta: 10.0,
        },
        FamilyKind::TrajLinear => RewardFamily::TrajLinear {
            theta_z: 1.0,
            theta_w: 1.0,
        },
        FamilyKind::Linear => RewardFamily::linear(vec![0.0; dim]),
        FamilyKind::LinearNonneg => RewardFamily::Linear {
            theta: vec![1.0; dim],
            nonneg: true,
        },
        FamilyKind::AgeGated => RewardFamily::AgeGated {
            y_threshold: 35.0,
            y_sensitivity: 20.0,
            polarity: lexrank::rewards::GatePolarity::EfficacyFirst,
            age_loc: 35.0,
            age_scale: 20.0,
        },
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let env = CancerEnv::new(CancerEnvConfig {
        noise_std: args.noise_std,
        ..CancerEnvConfig::default()
    });
    let base = match &args.policy {
        Some(path) => io::read_policy_json(path)?,
        None => Policy::Uniform,
    };
    let policy = if args.mix_uniform > 0.0 {
        make_behavior_policy(base, args.mix_uniform)?
    } else {
        base
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let trajs: Result<Vec<_>> = (0..args.n)
        .map(|_| env.rollout(&policy, args.horizon, args.with_age, &mut rng))
        .collect();
    io::write_trajectories_csv(&args.out, &trajs?)?;
    eprintln!("wrote {} trajectories to {}", args.n, args.out.display());
    Ok(())
}

fn run_gen_prefs(args: GenPrefsArgs) -> Result<()> {
    let model = io::read_model_json(&args.model)?;
    let pool = load_pool(&args.trajs, &args.alts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let ds = gen_preference_dataset(&model, &pool, args.n_pairs, &mut rng)?;
    io::write_preferences_csv(&args.out, &ds)?;
    eprintln!(
        "wrote {} preference events over {} pairs to {}",
        ds.num_events(),
        ds.num_pairs(),
        args.out.display()
    );
    Ok(())
}

fn load_prefs(args: &FitArgs) -> Result<PreferenceDataset> {
    let prefs = args
        .prefs
        .as_ref()
        .ok_or_else(|| Error::invalid("--prefs is required for this method"))?;
    let pool = load_pool(&args.trajs, &args.alts)?;
    io::read_preferences_csv(prefs, pool)
}

fn run_fit(args: FitArgs) -> Result<()> {
    let fit_config = FitConfig {
        learning_rate: args.learning_rate,
        max_iters: args.max_iters,
        learn_alpha: args.learn_alpha,
        learn_epsilon: !args.freeze_epsilon,
        seed: args.seed,
        restarts: args.restarts,
        stagewise: args.stagewise,
        ..FitConfig::default()
    };
    match args.method {
        FitMethod::Lori | FitMethod::Trex => {
            let data = load_prefs(&args)?;
            let dim = match data.alternatives().first() {
                Some(Alternative::Features(f)) => f.len(),
                _ => 2,
            };
            let (model, report) = if let Some(init_path) = &args.init {
                let template = io::read_model_json(init_path)?;
                lexrank::infer::fit_model(&data, &template, &fit_config)?
            } else if args.method == FitMethod::Lori {
                let template = family_template(args.family, dim);
                fit_lori(&data, args.k, &template, &fit_config)?
            } else {
                let template = family_template(args.family, dim);
                fit_trex(&data, &template, &fit_config)?
            };
            io::write_model_json(&args.out, &model)?;
            if let Some(report_path) = &args.report {
                io::write_fit_report_json(report_path, &report)?;
            }
            eprintln!(
                "fit finished after {} iterations (converged: {}), model at {}",
                report.iterations,
                report.converged,
                args.out.display()
            );
        }
        FitMethod::Birl => {
            let trajs = args
                .trajs
                .as_ref()
                .ok_or_else(|| Error::invalid("--trajs is required for birl"))?;
            let demos = io::read_trajectories_csv(trajs)?;
            let env = CancerEnv::default();
            let grid = StateGrid::default_cancer();
            let config = BirlConfig {
                seed: args.seed,
                ..BirlConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let (family, diag) = fit_birl(&demos, &env, &grid, &config, &mut rng)?;
            let model = LexRewardModel::new(vec![(
                family,
                lexrank::prefmodel::LevelParams {
                    alpha: 1.0,
                    epsilon: 0.0,
                },
            )])?;
            io::write_model_json(&args.out, &model)?;
            eprintln!(
                "chain acceptance {:.3}, kept {} samples, model at {}",
                diag.acceptance_rate,
                diag.n_kept,
                args.out.display()
            );
        }
        FitMethod::Bc => {
            let trajs = args
                .trajs
                .as_ref()
                .ok_or_else(|| Error::invalid("--trajs is required for bc"))?;
            let demos = io::read_trajectories_csv(trajs)?;
            let config = BcConfig {
                hidden: args.hidden,
                learning_rate: args.learning_rate,
                seed: args.seed,
                ..BcConfig::default()
            };
            let (policy, trace) = behavioral_cloning(&demos, &config)?;
            io::write_policy_json(&args.out, &policy)?;
            eprintln!(
                "cloning loss {:.4} -> {:.4}, policy at {}",
                trace.first().unwrap_or(&f64::NAN),
                trace.last().unwrap_or(&f64::NAN),
                args.out.display()
            );
        }
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let model = io::read_model_json(&args.model)?;
    let pool = load_pool(&args.trajs, &args.alts)?;
    let data = io::read_preferences_csv(&args.prefs, pool)?;
    let truth = match &args.truth {
        Some(path) => io::read_model_json(path)?,
        None => model.clone(),
    };
    let metrics = eval_preference_metrics(&model, &data, &truth)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n").map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run_rl(args: RlArgs) -> Result<()> {
    let model = io::read_model_json(&args.rewards)?;
    let env = CancerEnv::default();
    let grid = StateGrid::default_cancer();
    let defaults = RlConfig::default();
    let config = RlConfig {
        episodes: args.episodes,
        horizon: args.horizon,
        discount: args.discount.unwrap_or(defaults.discount),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        learning_rate_end: args
            .learning_rate_end
            .unwrap_or(defaults.learning_rate_end),
        explore_end: args.explore_end.unwrap_or(defaults.explore_end),
        thresholds: args.thresholds,
        ..defaults
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let policy = lex_q_learning(&model, &env, &grid, &config, &mut rng)?;
    let policy = match args.mix_uniform {
        Some(eps) => make_behavior_policy(policy, eps)?,
        None => policy,
    };
    io::write_policy_json(&args.out, &policy)?;
    eprintln!("policy written to {}", args.out.display());
    Ok(())
}

fn run_study_cmd(args: StudyArgs) -> Result<()> {
    let mut config = load_config(&args.name, args.config.as_ref())?;
    if let Some(base) = args.seed {
        config.seeds = (base..base + 5).collect();
    }
    let outcome = run_study(&config, &args.out)?;
    match &outcome {
        StudyOutcome::Cancer(o) => {
            for m in &o.methods {
                eprintln!(
                    "{}: accuracy {:.3} +- {:.3}, rmse {:.3} +- {:.3}",
                    m.method, m.accuracy.mean, m.accuracy.std, m.rmse.mean, m.rmse.std
                );
            }
            for c in &o.policy_cells {
                eprintln!(
                    "{} vs {}: {:.3} +- {:.3}",
                    c.row, c.col, c.summary.mean, c.summary.std
                );
            }
        }
        StudyOutcome::SingleReward(o) => {
            for m in &o.methods {
                eprintln!(
                    "{}: accuracy {:.3} +- {:.3}, rmse {:.3} +- {:.3}",
                    m.method, m.accuracy.mean, m.accuracy.std, m.rmse.mean, m.rmse.std
                );
            }
        }
        StudyOutcome::KSweep(o) => {
            for (k, s) in &o.summary_by_k {
                eprintln!("k={k}: rmse {:.4} +- {:.4}", s.mean, s.std);
            }
        }
        StudyOutcome::Age(o) => {
            for s in &o.per_seed {
                eprintln!(
                    "seed {}: threshold {:.2}, sensitivity {:.3}",
                    s.seed, s.y_threshold, s.y_sensitivity
                );
            }
            let thresholds: Vec<f64> = o.per_seed.iter().map(|s| s.y_threshold).collect();
            let summary = summarize(&thresholds);
            eprintln!("threshold mean {:.2} +- {:.2}", summary.mean, summary.std);
        }
        StudyOutcome::Allocation(o) => {
            for s in &o.per_seed {
                eprintln!(
                    "seed {}: level1 (benefit {:.4}, need {:.4}), level2 (benefit {:.4}, need {:.4})",
                    s.seed, s.weights[0][0], s.weights[0][1], s.weights[1][0], s.weights[1][1]
                );
            }
        }
    }
    eprintln!("outputs in {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::GenPrefs(args) => run_gen_prefs(args),
        Command::Fit(args) => run_fit(args),
        Command::Eval(args) => run_eval(args),
        Command::Rl(args) => run_rl(args),
        Command::Study(args) => run_study_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::InvalidArgument(msg)) if msg.starts_with("unknown study") => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
