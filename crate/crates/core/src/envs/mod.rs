//! Ground-truth simulators, behavior policies and batch collection.
//!
//! Policies and models always see actions in normalized units, `[-1, 1]`
//! per component. Each environment maps them to its own action scale.

mod batch;
mod grid2d;
mod surrogate;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::safety::clip_to_valid_range;

pub use batch::{history_state, Batch, Transition};
pub use grid2d::{
    grid2d_behavior_action, grid2d_reward, grid2d_transition, nearest_goal_step, Grid2dConfig,
    GridState, GRID_HIGH, GRID_LOW,
};
pub use surrogate::{
    ib_surrogate_step, medium_deterministic, medium_policy_action, steer, IndObservation,
    SurrogateConfig,
};

/// Which simulator a batch or config refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Grid2d,
    IbSurrogate,
}

impl EnvId {
    pub fn code(self) -> u8 {
        match self {
            EnvId::Grid2d => 1,
            EnvId::IbSurrogate => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(EnvId::Grid2d),
            2 => Some(EnvId::IbSurrogate),
            _ => None,
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::Grid2d => "grid2d",
            EnvId::IbSurrogate => "ib_surrogate",
        })
    }
}

impl FromStr for EnvId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grid2d" => Ok(EnvId::Grid2d),
            "ib_surrogate" => Ok(EnvId::IbSurrogate),
            other => Err(format!("unknown environment `{other}` (expected grid2d or ib_surrogate)")),
        }
    }
}

/// Observation columns that move linearly with the action:
/// `s[dims[i]]' = s[dims[i]] + coefficients[i] * a[i]`, clipped to `[low, high]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEffects {
    pub dims: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub low: f64,
    pub high: f64,
}

impl LinearEffects {
    /// The true next value of constrained column `i`, computed exactly as the
    /// simulator does.
    pub fn apply(&self, i: usize, s: f64, a: f64) -> f64 {
        (s + self.coefficients[i] * a).clamp(self.low, self.high)
    }
}

/// A simulator together with its constants.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Grid2d(Grid2dConfig),
    IbSurrogate(SurrogateConfig),
}

impl Env {
    pub fn id(&self) -> EnvId {
        match self {
            Env::Grid2d(_) => EnvId::Grid2d,
            Env::IbSurrogate(_) => EnvId::IbSurrogate,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Grid2d(_) => 2,
            Env::IbSurrogate(_) => surrogate::OBS_DIM,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::Grid2d(_) => 2,
            Env::IbSurrogate(_) => surrogate::ACTION_DIM,
        }
    }

    pub fn default_window(&self) -> usize {
        match self {
            Env::Grid2d(_) => 1,
            Env::IbSurrogate(_) => 15,
        }
    }

    pub fn episode_len(&self) -> usize {
        match self {
            Env::Grid2d(c) => c.episode_len,
            Env::IbSurrogate(c) => c.episode_len,
        }
    }

    /// Factor applied to rewards before model fitting and policy search.
    pub fn reward_scale(&self) -> f64 {
        match self {
            Env::Grid2d(c) => c.reward_scale,
            Env::IbSurrogate(c) => c.reward_scale,
        }
    }

    /// Declared `(low, high)` range of every observation column.
    pub fn obs_ranges(&self) -> Vec<(f64, f64)> {
        match self {
            Env::Grid2d(_) => vec![(GRID_LOW, GRID_HIGH); 2],
            Env::IbSurrogate(c) => {
                let (fat, con) = c.derived_maxima();
                vec![
                    (surrogate::BOUND_LOW, surrogate::BOUND_HIGH),
                    (surrogate::BOUND_LOW, surrogate::BOUND_HIGH),
                    (surrogate::BOUND_LOW, surrogate::BOUND_HIGH),
                    (surrogate::BOUND_LOW, surrogate::BOUND_HIGH),
                    (0.0, fat),
                    (0.0, con),
                ]
            }
        }
    }

    pub fn normalizer(&self, window: usize) -> Normalizer {
        Normalizer::new(self.obs_ranges(), window)
    }

    pub fn linear_effects(&self) -> LinearEffects {
        match self {
            Env::Grid2d(c) => LinearEffects {
                dims: vec![0, 1],
                coefficients: vec![c.max_step, c.max_step],
                low: GRID_LOW,
                high: GRID_HIGH,
            },
            Env::IbSurrogate(c) => LinearEffects {
                dims: surrogate::STEERED.to_vec(),
                coefficients: c.steering.to_vec(),
                low: surrogate::BOUND_LOW,
                high: surrogate::BOUND_HIGH,
            },
        }
    }

    /// Samples a start observation. With a bound, the linearly steered
    /// columns start uniformly inside it.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R, bound: Option<[f64; 2]>) -> Vec<f64> {
        match self {
            Env::Grid2d(_) => {
                let [lo, hi] = bound.unwrap_or([GRID_LOW, GRID_HIGH]);
                let s = GridState::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                s.as_array().to_vec()
            }
            Env::IbSurrogate(c) => {
                let [lo, hi] = bound.unwrap_or([c.start_low, c.start_high]);
                let v = rng.random_range(lo..=hi);
                let g = rng.random_range(lo..=hi);
                let h = rng.random_range(lo..=hi);
                c.observation(v, g, h).to_vec()
            }
        }
    }

    /// Applies a normalized action and returns `(next_obs, reward)`.
    /// The surrogate's reward is its negated cost.
    pub fn step<R: Rng + ?Sized>(&self, obs: &[f64], action: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        if action.len() != self.action_dim() {
            return Err(contract(format!(
                "{} expects {} action components, got {}",
                self.id(),
                self.action_dim(),
                action.len()
            )));
        }
        match self {
            Env::Grid2d(c) => {
                if obs.len() != 2 {
                    return Err(contract("grid2d observation has 2 entries"));
                }
                let s = GridState::new(obs[0], obs[1]);
                let a = [c.max_step * action[0], c.max_step * action[1]];
                let next = grid2d_transition(s, a, c.max_step);
                Ok((next.as_array().to_vec(), grid2d_reward(next, c)))
            }
            Env::IbSurrogate(c) => {
                let o = IndObservation::from_slice(obs)?;
                let (next, cost) = ib_surrogate_step(&o, action, c, rng)?;
                Ok((next.to_vec(), -cost))
            }
        }
    }
}

/// Affine map of every observation column onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    scale: Vec<f64>,
    shift: Vec<f64>,
    window: usize,
}

impl Normalizer {
    pub fn new(ranges: Vec<(f64, f64)>, window: usize) -> Self {
        let scale: Vec<f64> = ranges.iter().map(|(lo, hi)| 2.0 / (hi - lo)).collect();
        let shift = ranges
            .iter()
            .zip(&scale)
            .map(|((lo, _), s)| -1.0 - lo * s)
            .collect();
        Normalizer { scale, shift, window }
    }

    pub fn obs_dim(&self) -> usize {
        self.scale.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Per-column multipliers.
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Per-column offsets added after scaling.
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.scale.iter().zip(&self.shift))
            .map(|(x, (s, b))| x * s + b)
            .collect()
    }

    /// Normalizes each observation slot of a history state.
    pub fn normalize_history(&self, state: &[f64]) -> Vec<f64> {
        state
            .chunks(self.obs_dim())
            .flat_map(|o| self.normalize_obs(o))
            .collect()
    }
}

/// Anything that chooses normalized actions from raw history states.
pub trait Actor {
    fn act(&mut self, env: &Env, history: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Scripted data-collection policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorPolicy {
    /// Uniform random actions.
    Uniform,
    /// The surrogate's fixed-point controller with random exploration.
    Medium,
    /// The grid world's nearest-goal walker with random exploration.
    NearestGoal,
}

impl BehaviorPolicy {
    pub fn default_for(env: EnvId) -> Self {
        match env {
            EnvId::Grid2d => BehaviorPolicy::NearestGoal,
            EnvId::IbSurrogate => BehaviorPolicy::Uniform,
        }
    }
}

impl FromStr for BehaviorPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(BehaviorPolicy::Uniform),
            "medium" => Ok(BehaviorPolicy::Medium),
            "nearest_goal" => Ok(BehaviorPolicy::NearestGoal),
            other => Err(format!("unknown behavior policy `{other}`")),
        }
    }
}

impl Actor for BehaviorPolicy {
    fn act(&mut self, env: &Env, history: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let obs = &history[history.len() - env.obs_dim()..];
        match (*self, env) {
            (BehaviorPolicy::Uniform, _) => Ok((0..env.action_dim())
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect()),
            (BehaviorPolicy::Medium, Env::IbSurrogate(c)) => {
                let o = IndObservation::from_slice(obs)?;
                Ok(medium_policy_action(&o, c, rng).0.to_vec())
            }
            (BehaviorPolicy::NearestGoal, Env::Grid2d(c)) => {
                let (a, _) = grid2d_behavior_action(GridState::new(obs[0], obs[1]), c, rng);
                Ok(a.iter().map(|x| x / c.max_step).collect())
            }
            (p, e) => Err(contract(format!("behavior policy {p:?} is not defined for {}", e.id()))),
        }
    }
}

/// Provenance tags stamped on every recorded transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub iteration: u32,
    pub policy: u32,
}

/// Runs one episode of `horizon` steps and returns its transitions under
/// episode id `episode`. With a bound, each action is first clipped into
/// the range that keeps the steered columns inside it.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &Env,
    actor: &mut dyn Actor,
    horizon: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
    bound: Option<[f64; 2]>,
    episode: u64,
    tags: Provenance,
) -> Result<Vec<Transition>> {
    let start = env.reset(rng, bound);
    run_episode_from(env, actor, start, horizon, window, rng, bound, episode, tags)
}

/// As [`run_episode`], from a given start observation.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_from(
    env: &Env,
    actor: &mut dyn Actor,
    start: Vec<f64>,
    horizon: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
    bound: Option<[f64; 2]>,
    episode: u64,
    tags: Provenance,
) -> Result<Vec<Transition>> {
    let effects = env.linear_effects();
    let mut observations = vec![start];
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let state = history_state(&observations, t, window)?;
        let mut action = actor.act(env, &state, rng)?;
        if let Some(b) = bound {
            let obs = &observations[t];
            for (i, &d) in effects.dims.iter().enumerate() {
                action[i] = clip_to_valid_range(obs[d], effects.coefficients[i], b, [-1.0, 1.0], action[i]).0;
            }
        }
        let (next, reward) = env.step(&observations[t], &action, rng)?;
        out.push(Transition {
            state,
            action,
            reward,
            next_obs: next.clone(),
            episode,
            time: t as u64,
            iteration: tags.iteration,
            policy: tags.policy,
        });
        observations.push(next);
    }
    Ok(out)
}

/// Seeded, reproducible batch of `episodes` episodes of `horizon` steps.
pub fn collect_batch(
    env: &Env,
    policy: &mut dyn Actor,
    episodes: usize,
    horizon: usize,
    window: usize,
    seed: u64,
    bound: Option<[f64; 2]>,
) -> Result<Batch> {
    if episodes == 0 || horizon == 0 {
        return Err(contract("episodes and horizon must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Batch::new(env.id(), env.obs_dim(), env.action_dim(), window)?;
    for e in 0..episodes {
        for t in run_episode(env, policy, horizon, window, &mut rng, bound, e as u64, Provenance::default())? {
            batch.push(t)?;
        }
    }
    Ok(batch)
}
