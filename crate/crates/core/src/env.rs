//! The grid-control environment: 13-dimensional state (tau, p, g, stab),
//! three discrete power actions, and a ±20 reward on the change of the
//! stability margin. Transition dynamics come from a pluggable oracle
//! because the upstream physical simulation is out of scope.
//!
//! Sign convention: the dataset's `stab` is positive when unstable; the
//! environment works on the margin `m = -stab`, so rewards are positive
//! when an action moves the grid toward stability and an episode succeeds
//! once the margin is positive.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, GridRecord};
use crate::gbt::{fit_gbt_regression, GbtConfig, GbtModel};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("start record is not unstable under the oracle (margin {0})")]
    NotUnstable(f64),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("start pool has no unstable rows")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    DecreasePower = 0,
    MaintainPower = 1,
    IncreasePower = 2,
}

impl Action {
    pub const ALL: [Action; 3] =
        [Action::DecreasePower, Action::MaintainPower, Action::IncreasePower];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Action {
        Action::ALL[id]
    }
}

/// Environment state; flattened order is (tau1..4, p1..4, g1..4, stab).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub tau: [f64; 4],
    pub p: [f64; 4],
    pub g: [f64; 4],
    pub stab: f64,
}

impl EnvState {
    pub fn to_vec13(&self) -> [f64; 13] {
        let mut v = [0.0; 13];
        v[..4].copy_from_slice(&self.tau);
        v[4..8].copy_from_slice(&self.p);
        v[8..12].copy_from_slice(&self.g);
        v[12] = self.stab;
        v
    }

    pub fn features12(&self) -> [f64; 12] {
        let mut f = [0.0; 12];
        f[..4].copy_from_slice(&self.tau);
        f[4..8].copy_from_slice(&self.p);
        f[8..].copy_from_slice(&self.g);
        f
    }

    /// Margin under this crate's convention: positive means stable.
    pub fn margin(&self) -> f64 {
        -self.stab
    }
}

/// Map from 12 grid features to a stability margin (positive = stable).
pub trait StabilityOracle: Send + Sync {
    fn margin(&self, features: &[f64]) -> f64;
}

/// Deterministic linear oracle for unit-testing agents: margin = w·x + b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearOracle {
    pub weights: [f64; 12],
    pub bias: f64,
}

impl LinearOracle {
    pub fn new(weights: [f64; 12], bias: f64) -> Self {
        assert!(weights.iter().all(|w| w.is_finite()) && bias.is_finite());
        LinearOracle { weights, bias }
    }

    /// Weight +1 on producer power only: raising p1 is the uniquely
    /// optimal action.
    pub fn producer_power(bias: f64) -> Self {
        let mut w = [0.0; 12];
        w[4] = 1.0;
        LinearOracle::new(w, bias)
    }
}

/// Canonical test oracle: margin = p1 − 4. Raising producer power is the
/// uniquely optimal action, and stability is reachable from every dataset
/// row within the default step budget.
pub fn linear_test_oracle() -> LinearOracle {
    LinearOracle::producer_power(-4.0)
}

impl StabilityOracle for LinearOracle {
    fn margin(&self, features: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(features).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Surrogate dynamics: a GBT regressor over the dataset's stab column;
/// margin is the negated prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateOracle {
    pub model: GbtModel,
}

impl StabilityOracle for SurrogateOracle {
    fn margin(&self, features: &[f64]) -> f64 {
        -self.model.predict_value(features)
    }
}

/// Fit the surrogate regressor on a training set's stab values.
pub fn fit_surrogate_oracle(
    train: &Dataset,
    config: &GbtConfig,
) -> Result<SurrogateOracle, crate::error::ModelError> {
    let x = train.feature_matrix();
    let y = train.stab_values();
    Ok(SurrogateOracle { model: fit_gbt_regression(&x, &y, config)? })
}

/// Root-mean-square error of the surrogate on a held-out set.
pub fn surrogate_rmse(oracle: &SurrogateOracle, ds: &Dataset) -> f64 {
    let mse: f64 = ds
        .records()
        .iter()
        .map(|r| {
            let e = oracle.model.predict_value(&r.features()) - r.stab;
            e * e
        })
        .sum::<f64>()
        / ds.len() as f64;
    mse.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    /// Multiplicative producer-power step per action.
    pub power_step: f64,
    /// Near-equality band for the zero-reward case.
    pub stab_tolerance: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { max_steps: 50, power_step: 0.05, stab_tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: [f64; 13],
    pub action: Action,
    pub reward: f64,
    pub next_state: [f64; 13],
    pub done: bool,
}

pub struct GridEnv {
    oracle: Arc<dyn StabilityOracle>,
    pub config: EpisodeConfig,
    state: EnvState,
    steps: usize,
    done: bool,
}

const PRODUCER_MIN: f64 = 0.75;
const PRODUCER_MAX: f64 = 7.5;
const CONSUMER_MIN: f64 = -2.0;
const CONSUMER_MAX: f64 = -0.5;

impl GridEnv {
    /// Start an episode from an explicit record. Unless `allow_stable`,
    /// the record must be unstable under the oracle.
    pub fn from_record(
        oracle: Arc<dyn StabilityOracle>,
        config: EpisodeConfig,
        record: &GridRecord,
        allow_stable: bool,
    ) -> Result<GridEnv, EnvError> {
        let margin = oracle.margin(&record.features());
        if margin > 0.0 && !allow_stable {
            return Err(EnvError::NotUnstable(margin));
        }
        let state = EnvState {
            tau: record.tau,
            p: record.p,
            g: record.g,
            // oracle-refreshed stab, kept in the dataset convention
            stab: -margin,
        };
        // an already-stable start (allow_stable only) is terminal
        Ok(GridEnv { oracle, config, state, steps: 0, done: margin > 0.0 })
    }

    /// Start from a seeded draw over the pool's oracle-unstable rows.
    pub fn from_pool(
        oracle: Arc<dyn StabilityOracle>,
        config: EpisodeConfig,
        pool: &[GridRecord],
        seed: u64,
    ) -> Result<GridEnv, EnvError> {
        let unstable: Vec<&GridRecord> = pool
            .iter()
            .filter(|r| oracle.margin(&r.features()) <= 0.0)
            .collect();
        if unstable.is_empty() {
            return Err(EnvError::EmptyPool);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = unstable[rng.gen_range(0..unstable.len())];
        GridEnv::from_record(oracle, config, pick, false)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn done(&self) -> bool {
        self.done
    }

    /// Apply an action: scale producer power, rescale consumers to keep the
    /// balance, clamp, query the oracle, and emit the ±20/0 reward on the
    /// margin change.
    pub fn step(&mut self, action: Action) -> Result<Transition, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let before = self.state.to_vec13();
        let m_old = self.state.margin();

        let factor = match action {
            Action::DecreasePower => 1.0 - self.config.power_step,
            Action::MaintainPower => 1.0,
            Action::IncreasePower => 1.0 + self.config.power_step,
        };
        let p_old = self.state.p[0];
        let p_new = (p_old * factor).clamp(PRODUCER_MIN, PRODUCER_MAX);
        // consumers scale proportionally, then clamp, then re-balance
        let scale = p_new / p_old;
        for i in 1..4 {
            self.state.p[i] = (self.state.p[i] * scale).clamp(CONSUMER_MIN, CONSUMER_MAX);
        }
        self.state.p[0] = -(self.state.p[1] + self.state.p[2] + self.state.p[3]);

        let m_new = self.oracle.margin(&self.state.features12());
        self.state.stab = -m_new;
        self.steps += 1;

        let reward = if m_new > m_old + self.config.stab_tolerance {
            20.0
        } else if m_new < m_old - self.config.stab_tolerance {
            -20.0
        } else {
            0.0
        };
        let done = m_new > 0.0 || self.steps >= self.config.max_steps;
        self.done = done;

        Ok(Transition {
            state: before,
            action,
            reward,
            next_state: self.state.to_vec13(),
            done,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub total_reward: f64,
    pub trajectory: Vec<Transition>,
}

/// Run a policy until the episode ends. Success means the terminal margin
/// is positive within the step budget.
pub fn run_episode(
    env: &mut GridEnv,
    mut policy: impl FnMut(&EnvState) -> Action,
) -> Result<EpisodeOutcome, EnvError> {
    let mut trajectory = Vec::new();
    let mut total_reward = 0.0;
    while !env.done() {
        let action = policy(env.state());
        let t = env.step(action)?;
        total_reward += t.reward;
        trajectory.push(t);
    }
    Ok(EpisodeOutcome {
        success: env.state().margin() > 0.0,
        steps: env.steps(),
        total_reward,
        trajectory,
    })
}

/// Trajectory dump: CSV columns (episode, step, 13 state fields, action,
/// reward, done).
pub fn write_trajectories(
    episodes: &[EpisodeOutcome],
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "episode,step")?;
    for name in crate::data::FEATURE_NAMES {
        write!(f, ",{name}")?;
    }
    writeln!(f, ",stab,action,reward,done")?;
    for (e, ep) in episodes.iter().enumerate() {
        for (s, t) in ep.trajectory.iter().enumerate() {
            write!(f, "{e},{s}")?;
            for v in t.state {
                write!(f, ",{v}")?;
            }
            writeln!(f, ",{},{},{}", t.action.id(), t.reward, t.done)?;
        }
    }
    Ok(())
}
