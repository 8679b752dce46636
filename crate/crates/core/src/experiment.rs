//! End-to-end experiment orchestration: the two-stage pipeline (stacking
//! gate → RL correction) plus every supporting stage as an independently
//! re-runnable unit over a shared output directory.
//!
//! One master seed fans out to per-stage seeds through a fixed counter
//! scheme (`stage_seed`), so re-seeding the RL stages never perturbs the ML
//! results. Stage artifacts are plain CSV/JSON files under the output
//! directory:
//!
//! ```text
//! out/
//!   datasets/{raw,augmented,train,test}.csv
//!   models/{stacking,oracle,policy_dqn,policy_a2c,policy_ppo}.json
//!   curves/{dqn,a2c,ppo}.csv
//!   {prep,ml_eval,oracle_eval,rl_train_*,rl_eval_*,hybrid_eval}.json
//!   report.json  report.txt  metrics.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    augment_permutations, check_label_consistency, load_csv, split, write_csv,
    GridRecord, Label,
};
use crate::datagen;
use crate::env::{
    fit_surrogate_oracle, run_episode, surrogate_rmse, EpisodeConfig,
    EpisodeOutcome, GridEnv, LinearOracle, StabilityOracle, SurrogateOracle,
};
use crate::forest::ForestParams;
use crate::gbt::{GbtConfig, SplitMode};
use crate::metrics::{classification_report, ClassificationReport};
use crate::mlp::AnnConfig;
use crate::rl::{
    episodes_to_convergence, evaluate_policy, train, write_learning_curve, AgentConfig,
    Algorithm, Convergence, EnvPool, EvalReport, Policy,
};
use crate::stacking::{fit_stacking, BaseConfig, LogisticConfig, StackingConfig, StackingModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const SEED_STRIDE: u64 = 0x9E3779B97F4A7C15;

/// Stage indices for the master-seed fanout. The numbers are part of the
/// reproducibility contract: stage N always derives the same seed from a
/// given master seed, regardless of which stages actually run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    DataGen = 1,
    Split = 2,
    Ml = 3,
    Oracle = 4,
    RlDqn = 5,
    RlA2c = 6,
    RlPpo = 7,
    Eval = 8,
    Hybrid = 9,
    /// Convergence-study seeds occupy 16.. in blocks of 16 per algorithm.
    Convergence = 16,
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    master.wrapping_add(SEED_STRIDE.wrapping_mul(stage as u64))
}

fn convergence_seed(master: u64, algo: Algorithm, run: usize) -> u64 {
    let slot = Stage::Convergence as u64 + 16 * (algo as u64) + run as u64;
    master.wrapping_add(SEED_STRIDE.wrapping_mul(slot))
}

#[derive(Debug, Error)]
#[error("stage {stage}: {message}")]
pub struct ExperimentError {
    pub stage: &'static str,
    pub message: String,
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError { stage, message: e.to_string() }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlSection {
    pub folds: usize,
    pub forest: ForestParams,
    pub gbt_exact: GbtConfig,
    pub gbt_histogram: GbtConfig,
    pub ann: AnnConfig,
    pub meta: LogisticConfig,
}

impl Default for MlSection {
    fn default() -> Self {
        MlSection {
            folds: 5,
            forest: ForestParams { n_trees: 100, max_depth: 14, ..Default::default() },
            gbt_exact: GbtConfig { n_stages: 200, ..Default::default() },
            gbt_histogram: GbtConfig {
                n_stages: 200,
                split_mode: SplitMode::Histogram { n_bins: 256 },
                ..Default::default()
            },
            ann: AnnConfig { epochs: 10, ..Default::default() },
            meta: LogisticConfig::default(),
        }
    }
}

impl MlSection {
    pub fn base_configs(&self) -> Vec<BaseConfig> {
        vec![
            BaseConfig::Forest(self.forest.clone()),
            BaseConfig::Gbt(self.gbt_exact.clone()),
            BaseConfig::Gbt(self.gbt_histogram.clone()),
            BaseConfig::Ann(self.ann.clone()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Surrogate,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSection {
    pub kind: OracleKind,
    /// Bias of the linear oracle (weight +1 on producer power).
    pub linear_bias: f64,
    /// Regressor for the surrogate oracle.
    pub gbt: GbtConfig,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            kind: OracleKind::Surrogate,
            linear_bias: -4.0,
            gbt: GbtConfig { n_stages: 100, ..Default::default() },
        }
    }
}

/// Start-state difficulty filter for the convergence study: keeping starts
/// that need a similar number of corrective steps makes trailing-window
/// reward means comparable across episodes, so the convergence metric
/// tracks learning instead of start-state luck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceSection {
    pub seeds: usize,
    pub window: usize,
    pub threshold_fraction: f64,
    pub min_greedy_steps: usize,
    pub max_greedy_steps: usize,
    pub pool_cap: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            seeds: 5,
            window: 15,
            threshold_fraction: 0.9,
            min_greedy_steps: 10,
            max_greedy_steps: 13,
            pool_cap: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    pub eval_episodes: usize,
    pub dqn: AgentConfig,
    pub a2c: AgentConfig,
    pub ppo: AgentConfig,
    pub convergence: ConvergenceSection,
}

impl Default for RlSection {
    fn default() -> Self {
        let mut dqn = AgentConfig::new(Algorithm::Dqn);
        dqn.epsilon_decay_fraction = 0.2;
        let mut a2c = AgentConfig::new(Algorithm::A2c);
        a2c.entropy_coef = 0.05;
        a2c.reward_scale = 40.0;
        let mut ppo = AgentConfig::new(Algorithm::Ppo);
        ppo.epochs_per_update = 20;
        RlSection {
            dqn,
            a2c,
            ppo,
            eval_episodes: 100,
            convergence: ConvergenceSection::default(),
        }
    }
}

impl RlSection {
    pub fn agent(&self, algo: Algorithm) -> &AgentConfig {
        match algo {
            Algorithm::Dqn => &self.dqn,
            Algorithm::A2c => &self.a2c,
            Algorithm::Ppo => &self.ppo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Raw dataset path; defaults to `<output_dir>/datasets/raw.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Rows to synthesize when the raw dataset is absent.
    pub generate_rows: usize,
    pub generate_if_missing: bool,
    pub test_fraction: f64,
    pub ml: MlSection,
    pub oracle: OracleSection,
    pub rl: RlSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            dataset: None,
            generate_rows: 10_000,
            generate_if_missing: true,
            test_fraction: 0.2,
            ml: MlSection::default(),
            oracle: OracleSection::default(),
            rl: RlSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, ExperimentError> {
        let text = fs::read_to_string(path).map_err(stage_err("config"))?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(stage_err("config"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |m: &str| ExperimentError { stage: "config", message: m.to_string() };
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(err("test_fraction must be in (0,1)"));
        }
        if self.ml.folds < 2 {
            return Err(err("folds must be at least 2"));
        }
        if self.generate_rows == 0 && self.dataset.is_none() {
            return Err(err("either a dataset path or generate_rows is required"));
        }
        for algo in Algorithm::ALL {
            let agent = self.rl.agent(algo);
            if agent.algorithm != algo {
                return Err(ExperimentError {
                    stage: "config",
                    message: format!(
                        "rl.{name} section must set algorithm = \"{name}\"",
                        name = algo.name()
                    ),
                });
            }
            agent.validate().map_err(stage_err("config"))?;
        }
        if self.rl.convergence.seeds == 0 || self.rl.convergence.window == 0 {
            return Err(err("convergence study needs seeds and a window"));
        }
        Ok(())
    }

    pub fn raw_dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output_dir.join("datasets/raw.csv"))
    }

    fn datasets_dir(&self) -> PathBuf {
        self.output_dir.join("datasets")
    }

    fn models_dir(&self) -> PathBuf {
        self.output_dir.join("models")
    }

    fn curves_dir(&self) -> PathBuf {
        self.output_dir.join("curves")
    }

    pub fn train_path(&self) -> PathBuf {
        self.datasets_dir().join("train.csv")
    }

    pub fn test_path(&self) -> PathBuf {
        self.datasets_dir().join("test.csv")
    }
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(stage_err("serialize"))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(stage_err("io"))?;
    }
    fs::write(path, text).map_err(stage_err("io"))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(
    path: &Path,
    stage: &'static str,
) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError { stage, message: format!("{}: {e}", path.display()) })?;
    serde_json::from_str(&text).map_err(stage_err(stage))
}

/// Single-instance guard: at most one process per output directory.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(output_dir: &Path) -> Result<DirLock, ExperimentError> {
        fs::create_dir_all(output_dir).map_err(stage_err("lock"))?;
        let path = output_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ExperimentError {
                stage: "lock",
                message: format!(
                    "{} exists; another run owns this output directory",
                    path.display()
                ),
            }),
            Err(e) => Err(stage_err("lock")(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Stage: prep-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub rows_raw: usize,
    pub rows_augmented: usize,
    pub rows_train: usize,
    pub rows_test: usize,
    pub label_mismatches: usize,
    pub augment_seconds: f64,
}

/// Load (or synthesize) the raw dataset, augment by consumer permutations,
/// and write the stratified train/test split.
pub fn prep_data(config: &ExperimentConfig) -> Result<PrepSummary, ExperimentError> {
    let raw_path = config.raw_dataset_path();
    if !raw_path.exists() {
        if !config.generate_if_missing {
            return Err(ExperimentError {
                stage: "load",
                message: format!("missing dataset file: {}", raw_path.display()),
            });
        }
        let ds = datagen::generate(config.generate_rows, stage_seed(config.seed, Stage::DataGen));
        if let Some(parent) = raw_path.parent() {
            fs::create_dir_all(parent).map_err(stage_err("prep"))?;
        }
        write_csv(&ds, &raw_path).map_err(stage_err("prep"))?;
    }
    let raw = load_csv(&raw_path).map_err(stage_err("load"))?;
    let label_mismatches = check_label_consistency(&raw);

    let started = Instant::now();
    let augmented = augment_permutations(&raw);
    let augment_seconds = started.elapsed().as_secs_f64();

    let (train, test) = split(&augmented, config.test_fraction, stage_seed(config.seed, Stage::Split))
        .map_err(stage_err("prep"))?;

    fs::create_dir_all(config.datasets_dir()).map_err(stage_err("prep"))?;
    write_csv(&augmented, config.datasets_dir().join("augmented.csv")).map_err(stage_err("prep"))?;
    write_csv(&train, config.train_path()).map_err(stage_err("prep"))?;
    write_csv(&test, config.test_path()).map_err(stage_err("prep"))?;

    let summary = PrepSummary {
        rows_raw: raw.len(),
        rows_augmented: augmented.len(),
        rows_train: train.len(),
        rows_test: test.len(),
        label_mismatches,
        augment_seconds,
    };
    write_json(&config.output_dir.join("prep.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: train-ml / eval-ml
// ---------------------------------------------------------------------------

/// Fit the stacking ensemble (OOF meta-learner plus full-data base refits)
/// on the train split.
pub fn train_ml(config: &ExperimentConfig) -> Result<StackingModel, ExperimentError> {
    let train = load_csv(config.train_path()).map_err(stage_err("train-ml"))?;
    let stacking_config = StackingConfig {
        base: config.ml.base_configs(),
        k: config.ml.folds,
        seed: stage_seed(config.seed, Stage::Ml),
        meta: config.ml.meta,
    };
    let model = fit_stacking(&train, &stacking_config).map_err(stage_err("train-ml"))?;
    write_json(&config.models_dir().join("stacking.json"), &model)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlEval {
    /// One report per model: the four standalone base learners plus the
    /// stacking ensemble, in training order.
    pub reports: Vec<ClassificationReport>,
}

/// Evaluate the refit base models and the stacked ensemble on the test
/// split.
pub fn eval_ml(config: &ExperimentConfig) -> Result<MlEval, ExperimentError> {
    let model: StackingModel =
        read_json(&config.models_dir().join("stacking.json"), "eval-ml")?;
    let test = load_csv(config.test_path()).map_err(stage_err("eval-ml"))?;
    let truth = test.labels();

    let mut reports = Vec::new();
    let names = ["random-forest", "gbt-exact", "gbt-histogram", "ann"];
    for (base, name) in model.base.iter().zip(names) {
        let pred: Vec<Label> = test
            .records()
            .iter()
            .map(|r| {
                if base.predict_proba_pos(&r.features()) > 0.5 {
                    Label::Unstable
                } else {
                    Label::Stable
                }
            })
            .collect();
        reports.push(classification_report(name, &truth, &pred).map_err(stage_err("eval-ml"))?);
    }
    let pred: Vec<Label> =
        test.records().iter().map(|r| model.predict(&r.features()).label).collect();
    reports
        .push(classification_report("stacking", &truth, &pred).map_err(stage_err("eval-ml"))?);

    let eval = MlEval { reports };
    write_json(&config.output_dir.join("ml_eval.json"), &eval)?;
    Ok(eval)
}

// ---------------------------------------------------------------------------
// Stage: fit-oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OracleArtifact {
    Surrogate(SurrogateOracle),
    Linear(LinearOracle),
}

impl OracleArtifact {
    pub fn as_dyn(&self) -> Arc<dyn StabilityOracle> {
        match self {
            OracleArtifact::Surrogate(o) => Arc::new(o.clone()),
            OracleArtifact::Linear(o) => Arc::new(o.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEval {
    pub kind: OracleKind,
    /// Held-out RMSE of the surrogate regressor; absent for the linear
    /// test oracle.
    pub rmse: Option<f64>,
}

/// Fit (or construct) the stability oracle that drives the environment.
pub fn fit_oracle(config: &ExperimentConfig) -> Result<OracleEval, ExperimentError> {
    let artifact = match config.oracle.kind {
        OracleKind::Linear => {
            OracleArtifact::Linear(LinearOracle::producer_power(config.oracle.linear_bias))
        }
        OracleKind::Surrogate => {
            let train = load_csv(config.train_path()).map_err(stage_err("fit-oracle"))?;
            let gbt = GbtConfig {
                seed: stage_seed(config.seed, Stage::Oracle),
                ..config.oracle.gbt.clone()
            };
            OracleArtifact::Surrogate(
                fit_surrogate_oracle(&train, &gbt).map_err(stage_err("fit-oracle"))?,
            )
        }
    };
    let rmse = match &artifact {
        OracleArtifact::Surrogate(o) => {
            let test = load_csv(config.test_path()).map_err(stage_err("fit-oracle"))?;
            Some(surrogate_rmse(o, &test))
        }
        OracleArtifact::Linear(_) => None,
    };
    write_json(&config.models_dir().join("oracle.json"), &artifact)?;
    let eval = OracleEval { kind: config.oracle.kind, rmse };
    write_json(&config.output_dir.join("oracle_eval.json"), &eval)?;
    Ok(eval)
}

fn load_oracle(config: &ExperimentConfig, stage: &'static str) -> Result<Arc<dyn StabilityOracle>, ExperimentError> {
    let artifact: OracleArtifact = read_json(&config.models_dir().join("oracle.json"), stage)?;
    Ok(artifact.as_dyn())
}

// ---------------------------------------------------------------------------
// Stage: train-rl / eval-rl
// ---------------------------------------------------------------------------

fn rl_stage(algo: Algorithm) -> Stage {
    match algo {
        Algorithm::Dqn => Stage::RlDqn,
        Algorithm::A2c => Stage::RlA2c,
        Algorithm::Ppo => Stage::RlPpo,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlTrainSummary {
    pub algorithm: Algorithm,
    pub episodes: usize,
    pub training_seconds: f64,
    pub convergence_episodes: Vec<Option<usize>>,
    pub convergence_median: Option<usize>,
    pub convergence_pool: usize,
}

/// Start states that an always-IncreasePower policy stabilizes in a narrow
/// step band; see [`ConvergenceSection`].
fn convergence_pool(
    oracle: &Arc<dyn StabilityOracle>,
    records: &[GridRecord],
    section: &ConvergenceSection,
    episode: EpisodeConfig,
) -> Vec<GridRecord> {
    let mut out = Vec::new();
    for r in records {
        if oracle.margin(&r.features()) > 0.0 {
            continue;
        }
        let mut env = match GridEnv::from_record(oracle.clone(), episode, r, false) {
            Ok(env) => env,
            Err(_) => continue,
        };
        let run = run_episode(&mut env, |_| crate::env::Action::IncreasePower)
            .expect("scripted episode");
        if run.success
            && (section.min_greedy_steps..=section.max_greedy_steps).contains(&run.steps)
        {
            out.push(r.clone());
        }
        if out.len() >= section.pool_cap {
            break;
        }
    }
    out
}

fn median_of(mut values: Vec<usize>) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    Some(values[values.len() / 2])
}

/// Train one agent on unstable train-split states, export its learning
/// curve, and run the 5-seed convergence study on the filtered pool.
pub fn train_rl(
    config: &ExperimentConfig,
    algo: Algorithm,
) -> Result<RlTrainSummary, ExperimentError> {
    let train_ds = load_csv(config.train_path()).map_err(stage_err("train-rl"))?;
    let oracle = load_oracle(config, "train-rl")?;
    let episode = EpisodeConfig::default();
    let pool = EnvPool::new(oracle.clone(), train_ds.records().to_vec(), episode);

    let mut agent = config.rl.agent(algo).clone();
    agent.seed = stage_seed(config.seed, rl_stage(algo));
    let started = Instant::now();
    let out = train(&pool, &agent).map_err(stage_err("train-rl"))?;
    let training_seconds = started.elapsed().as_secs_f64();

    fs::create_dir_all(config.curves_dir()).map_err(stage_err("train-rl"))?;
    write_learning_curve(&out.curve, config.curves_dir().join(format!("{}.csv", algo.name())))
        .map_err(stage_err("train-rl"))?;
    write_json(&config.models_dir().join(format!("policy_{}.json", algo.name())), &out.policy)?;

    let section = &config.rl.convergence;
    let filtered = convergence_pool(&oracle, train_ds.records(), section, episode);
    let conv_pool = EnvPool::new(oracle.clone(), filtered.clone(), episode);
    let mut convergence_episodes = Vec::with_capacity(section.seeds);
    for run in 0..section.seeds {
        let mut c = agent.clone();
        c.seed = convergence_seed(config.seed, algo, run);
        let study = train(&conv_pool, &c).map_err(stage_err("train-rl"))?;
        let conv =
            episodes_to_convergence(&study.curve, section.window, section.threshold_fraction)
                .map_err(stage_err("train-rl"))?;
        convergence_episodes.push(match conv {
            Convergence::At(i) => Some(i),
            Convergence::NotConverged => None,
        });
    }
    let convergence_median = median_of(convergence_episodes.iter().flatten().copied().collect());

    let summary = RlTrainSummary {
        algorithm: algo,
        episodes: out.curve.len(),
        training_seconds,
        convergence_episodes,
        convergence_median,
        convergence_pool: filtered.len(),
    };
    write_json(&config.output_dir.join(format!("rl_train_{}.json", algo.name())), &summary)?;
    Ok(summary)
}

/// Greedy evaluation of a trained policy over seeded episodes drawn from
/// unstable test-split states.
pub fn eval_rl(config: &ExperimentConfig, algo: Algorithm) -> Result<EvalReport, ExperimentError> {
    let policy: Policy =
        read_json(&config.models_dir().join(format!("policy_{}.json", algo.name())), "eval-rl")?;
    let oracle = load_oracle(config, "eval-rl")?;
    let test = load_csv(config.test_path()).map_err(stage_err("eval-rl"))?;
    let pool = EnvPool::new(oracle, test.records().to_vec(), EpisodeConfig::default());
    let report = evaluate_policy(
        &pool,
        &policy,
        config.rl.eval_episodes,
        stage_seed(config.seed, Stage::Eval).wrapping_add(algo as u64),
    )
    .map_err(stage_err("eval-rl"))?;
    write_json(&config.output_dir.join(format!("rl_eval_{}.json", algo.name())), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Stage: hybrid
// ---------------------------------------------------------------------------

/// The deployed two-stage pipeline: stacking gate plus a frozen greedy
/// policy over a shared oracle.
pub struct HybridModel {
    pub stacking: StackingModel,
    pub policy: Policy,
    pub oracle: Arc<dyn StabilityOracle>,
    pub episode: EpisodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridOutcome {
    pub gate_decision: Label,
    /// Absent when the gate classified the record as stable (pass-through).
    pub episode: Option<EpisodeOutcome>,
}

impl HybridOutcome {
    pub fn env_steps(&self) -> usize {
        self.episode.as_ref().map(|e| e.steps).unwrap_or(0)
    }
}

/// Gate first: stable-classified records pass through untouched; otherwise
/// one policy-controlled episode runs from the record.
pub fn run_hybrid(model: &HybridModel, record: &GridRecord) -> Result<HybridOutcome, ExperimentError> {
    let gate_decision = model.stacking.predict(&record.features()).label;
    if gate_decision == Label::Stable {
        return Ok(HybridOutcome { gate_decision, episode: None });
    }
    let mut env = GridEnv::from_record(model.oracle.clone(), model.episode, record, true)
        .map_err(stage_err("hybrid"))?;
    let outcome =
        run_episode(&mut env, |s| model.policy.act_greedy(s)).map_err(stage_err("hybrid"))?;
    Ok(HybridOutcome { gate_decision, episode: Some(outcome) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridEval {
    pub algorithm: Algorithm,
    pub gated_stable: usize,
    pub gated_unstable: usize,
    /// Environment steps taken on stable-gated records; the gate contract
    /// pins this to zero.
    pub stable_gate_steps: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridEvalSet {
    pub rows: Vec<HybridEval>,
}

/// Run the gate + policy pipeline over every test record for each trained
/// agent.
pub fn hybrid_eval(config: &ExperimentConfig) -> Result<HybridEvalSet, ExperimentError> {
    let stacking: StackingModel =
        read_json(&config.models_dir().join("stacking.json"), "hybrid")?;
    let oracle = load_oracle(config, "hybrid")?;
    let test = load_csv(config.test_path()).map_err(stage_err("hybrid"))?;
    let episode = EpisodeConfig::default();

    let mut rows = Vec::new();
    for algo in Algorithm::ALL {
        let policy: Policy = read_json(
            &config.models_dir().join(format!("policy_{}.json", algo.name())),
            "hybrid",
        )?;
        let model =
            HybridModel { stacking: stacking.clone(), policy, oracle: oracle.clone(), episode };
        let mut eval = HybridEval {
            algorithm: algo,
            gated_stable: 0,
            gated_unstable: 0,
            stable_gate_steps: 0,
            successes: 0,
            success_rate: 0.0,
            mean_steps: 0.0,
        };
        let mut steps = 0usize;
        for record in test.records() {
            let out = run_hybrid(&model, record)?;
            match out.gate_decision {
                Label::Stable => {
                    eval.gated_stable += 1;
                    eval.stable_gate_steps += out.env_steps();
                }
                Label::Unstable => {
                    eval.gated_unstable += 1;
                    let ep = out.episode.expect("unstable gate always runs an episode");
                    eval.successes += ep.success as usize;
                    steps += ep.steps;
                }
            }
        }
        if eval.gated_unstable > 0 {
            eval.success_rate = eval.successes as f64 / eval.gated_unstable as f64;
            eval.mean_steps = steps as f64 / eval.gated_unstable as f64;
        }
        rows.push(eval);
    }
    let set = HybridEvalSet { rows };
    write_json(&config.output_dir.join("hybrid_eval.json"), &set)?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSection {
    pub algorithm: Algorithm,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_reward: f64,
    pub convergence_median: Option<usize>,
    pub convergence_episodes: Vec<Option<usize>>,
    pub training_seconds: f64,
    pub curve_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridReport {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: PrepSummary,
    pub classifiers: Vec<ClassificationReport>,
    pub oracle: OracleEval,
    pub agents: Vec<AgentSection>,
    pub hybrids: Vec<HybridEval>,
}

impl HybridReport {
    /// Zero every wall-clock field; what remains is the deterministic
    /// content two equal-seed runs must agree on byte-for-byte.
    pub fn strip_timings(&self) -> HybridReport {
        let mut r = self.clone();
        r.dataset.augment_seconds = 0.0;
        for a in &mut r.agents {
            a.training_seconds = 0.0;
        }
        r
    }

    pub fn to_machine_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Assemble the report from stage artifacts. Missing RL artifacts are
/// tolerated (ML-only mode); missing ML artifacts are an error.
pub fn build_report(config: &ExperimentConfig) -> Result<HybridReport, ExperimentError> {
    let dataset: PrepSummary = read_json(&config.output_dir.join("prep.json"), "report")?;
    let ml: MlEval = read_json(&config.output_dir.join("ml_eval.json"), "report")?;
    let oracle: OracleEval = read_json(&config.output_dir.join("oracle_eval.json"), "report")?;

    let mut agents = Vec::new();
    for algo in Algorithm::ALL {
        let train_path = config.output_dir.join(format!("rl_train_{}.json", algo.name()));
        let eval_path = config.output_dir.join(format!("rl_eval_{}.json", algo.name()));
        if !train_path.exists() || !eval_path.exists() {
            continue;
        }
        let t: RlTrainSummary = read_json(&train_path, "report")?;
        let e: EvalReport = read_json(&eval_path, "report")?;
        agents.push(AgentSection {
            algorithm: algo,
            success_rate: e.success_rate,
            mean_steps: e.mean_steps,
            mean_reward: e.mean_reward,
            convergence_median: t.convergence_median,
            convergence_episodes: t.convergence_episodes,
            training_seconds: t.training_seconds,
            curve_file: format!("curves/{}.csv", algo.name()),
        });
    }
    let hybrids = {
        let path = config.output_dir.join("hybrid_eval.json");
        if path.exists() {
            read_json::<HybridEvalSet>(&path, "report")?.rows
        } else {
            Vec::new()
        }
    };
    // report completeness: every referenced curve file must exist
    for a in &agents {
        let p = config.output_dir.join(&a.curve_file);
        if !p.exists() {
            return Err(ExperimentError {
                stage: "report",
                message: format!("missing artifact {}", p.display()),
            });
        }
    }
    Ok(HybridReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.seed,
        dataset,
        classifiers: ml.reports,
        oracle,
        agents,
        hybrids,
    })
}

fn human_report(report: &HybridReport) -> String {
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "grid stability pipeline report (seed {})", report.seed);
    let _ = writeln!(
        s,
        "dataset: {} raw -> {} augmented ({} train / {} test)",
        report.dataset.rows_raw,
        report.dataset.rows_augmented,
        report.dataset.rows_train,
        report.dataset.rows_test
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "classifier performance (test split)");
    let _ = writeln!(
        s,
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "model", "acc", "prec(s)", "rec(s)", "f1(s)", "prec(u)", "rec(u)", "f1(u)"
    );
    for r in &report.classifiers {
        let _ = writeln!(
            s,
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.model,
            r.accuracy,
            r.stable.precision,
            r.stable.recall,
            r.stable.f1,
            r.unstable.precision,
            r.unstable.recall,
            r.unstable.f1
        );
    }
    let _ = writeln!(s);
    match report.oracle.rmse {
        Some(rmse) => {
            let _ = writeln!(s, "stability oracle: surrogate, held-out RMSE {rmse:.5}");
        }
        None => {
            let _ = writeln!(s, "stability oracle: linear test oracle");
        }
    }
    if !report.agents.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "rl agents (100-episode greedy evaluation)");
        let _ = writeln!(
            s,
            "{:<6} {:>9} {:>11} {:>12} {:>12} {:>12}",
            "agent", "success", "mean steps", "mean reward", "convergence", "train sec"
        );
        for a in &report.agents {
            let conv = a
                .convergence_median
                .map(|c| c.to_string())
                .unwrap_or_else(|| "n/a".to_string());
            let _ = writeln!(
                s,
                "{:<6} {:>9.2} {:>11.2} {:>12.1} {:>12} {:>12.2}",
                a.algorithm.name(),
                a.success_rate,
                a.mean_steps,
                a.mean_reward,
                conv,
                a.training_seconds
            );
        }
    }
    if !report.hybrids.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "hybrid pipelines (stacking gate + agent)");
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10} {:>10} {:>10} {:>11}",
            "pipeline", "stable", "unstable", "success", "rate", "mean steps"
        );
        for h in &report.hybrids {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>10} {:>10} {:>10.4} {:>11.2}",
                format!("stacking+{}", h.algorithm.name()),
                h.gated_stable,
                h.gated_unstable,
                h.successes,
                h.success_rate,
                h.mean_steps
            );
        }
    }
    s
}

fn metrics_csv(report: &HybridReport) -> String {
    let mut s = String::from("section,name,metric,value\n");
    use std::fmt::Write as _;
    for r in &report.classifiers {
        let _ = writeln!(s, "classifier,{},accuracy,{}", r.model, r.accuracy);
        for (cls, m) in [("stable", &r.stable), ("unstable", &r.unstable)] {
            let _ = writeln!(s, "classifier,{},precision_{cls},{}", r.model, m.precision);
            let _ = writeln!(s, "classifier,{},recall_{cls},{}", r.model, m.recall);
            let _ = writeln!(s, "classifier,{},f1_{cls},{}", r.model, m.f1);
        }
    }
    if let Some(rmse) = report.oracle.rmse {
        let _ = writeln!(s, "oracle,surrogate,rmse,{rmse}");
    }
    for a in &report.agents {
        let name = a.algorithm.name();
        let _ = writeln!(s, "agent,{name},success_rate,{}", a.success_rate);
        let _ = writeln!(s, "agent,{name},mean_steps,{}", a.mean_steps);
        let _ = writeln!(s, "agent,{name},mean_reward,{}", a.mean_reward);
        if let Some(c) = a.convergence_median {
            let _ = writeln!(s, "agent,{name},convergence_median,{c}");
        }
        let _ = writeln!(s, "agent,{name},training_seconds,{}", a.training_seconds);
    }
    for h in &report.hybrids {
        let name = h.algorithm.name();
        let _ = writeln!(s, "hybrid,{name},success_rate,{}", h.success_rate);
        let _ = writeln!(s, "hybrid,{name},mean_steps,{}", h.mean_steps);
        let _ = writeln!(s, "hybrid,{name},stable_gate_steps,{}", h.stable_gate_steps);
    }
    s
}

/// Write the machine report (schema-versioned JSON), the human tables, and
/// the flat metrics CSV.
pub fn emit_report(
    config: &ExperimentConfig,
    report: &HybridReport,
) -> Result<(), ExperimentError> {
    fs::create_dir_all(&config.output_dir).map_err(stage_err("report"))?;
    fs::write(config.output_dir.join("report.json"), report.to_machine_json())
        .map_err(stage_err("report"))?;
    let mut human = fs::File::create(config.output_dir.join("report.txt"))
        .map_err(stage_err("report"))?;
    human.write_all(human_report(report).as_bytes()).map_err(stage_err("report"))?;
    fs::write(config.output_dir.join("metrics.csv"), metrics_csv(report))
        .map_err(stage_err("report"))?;
    Ok(())
}

/// Every stage in order: prep → ML → oracle → RL (train + eval per agent)
/// → hybrid → report.
pub fn run_all(config: &ExperimentConfig) -> Result<HybridReport, ExperimentError> {
    config.validate()?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    prep_data(config)?;
    train_ml(config)?;
    eval_ml(config)?;
    fit_oracle(config)?;
    for algo in Algorithm::ALL {
        train_rl(config, algo)?;
        eval_rl(config, algo)?;
    }
    hybrid_eval(config)?;
    let report = build_report(config)?;
    emit_report(config, &report)?;
    Ok(report)
}
