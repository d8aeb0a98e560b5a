//! Two-dimensional navigation world on `[0, 10]^2` with a Gaussian reward bump.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const GRID_LOW: f64 = 0.0;
pub const GRID_HIGH: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid2dConfig {
    /// Largest per-axis displacement of one step, in grid units.
    pub max_step: f64,
    pub reward_mean: [f64; 2],
    pub reward_std: [f64; 2],
    pub goals: Vec<[f64; 2]>,
    /// Probability that the behavior policy takes a uniform random action.
    pub random_fraction: f64,
    pub episode_len: usize,
    /// Multiplier applied to rewards before they enter model training and
    /// policy search. Defaults to the inverse of the peak reward.
    pub reward_scale: f64,
}

impl Default for Grid2dConfig {
    fn default() -> Self {
        let mean = [3.0, 6.0];
        let std = [1.5, 1.5];
        Grid2dConfig {
            max_step: 0.5,
            reward_mean: mean,
            reward_std: std,
            goals: vec![[2.5, 2.5], [7.5, 7.5]],
            random_fraction: 0.1,
            episode_len: 30,
            reward_scale: 1.0 / gaussian_reward(&mean, &mean, &std),
        }
    }
}

/// Position on the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridState {
    pub x: f64,
    pub y: f64,
}

impl GridState {
    pub fn new(x: f64, y: f64) -> Self {
        GridState {
            x: x.clamp(GRID_LOW, GRID_HIGH),
            y: y.clamp(GRID_LOW, GRID_HIGH),
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// `s' = clip(s + a)` after limiting each action component to `max_step`.
pub fn grid2d_transition(s: GridState, a: [f64; 2], max_step: f64) -> GridState {
    let ax = a[0].clamp(-max_step, max_step);
    let ay = a[1].clamp(-max_step, max_step);
    GridState::new(s.x + ax, s.y + ay)
}

fn gaussian_reward(s: &[f64; 2], mean: &[f64; 2], std: &[f64; 2]) -> f64 {
    let det = (std[0] * std[0]) * (std[1] * std[1]);
    let q = ((s[0] - mean[0]) / std[0]).powi(2) + ((s[1] - mean[1]) / std[1]).powi(2);
    (2.0 * PI).powf(-1.5) * det.powf(-0.5) * (-0.5 * q).exp()
}

/// Gaussian likelihood reward, with the `(2 pi)^(3/2)` normaliser used by the
/// original experiments kept as is.
pub fn grid2d_reward(s: GridState, cfg: &Grid2dConfig) -> f64 {
    gaussian_reward(&s.as_array(), &cfg.reward_mean, &cfg.reward_std)
}

/// Step toward the nearest goal, capped at `max_step` in length.
pub fn nearest_goal_step(s: GridState, cfg: &Grid2dConfig) -> [f64; 2] {
    let p = s.as_array();
    let dist2 = |g: &[f64; 2]| (g[0] - p[0]).powi(2) + (g[1] - p[1]).powi(2);
    let Some(goal) = cfg
        .goals
        .iter()
        .min_by(|a, b| dist2(a).total_cmp(&dist2(b)))
    else {
        return [0.0, 0.0];
    };
    let d = [goal[0] - p[0], goal[1] - p[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if len <= cfg.max_step {
        d
    } else {
        [d[0] / len * cfg.max_step, d[1] / len * cfg.max_step]
    }
}

/// Behavior action in grid units, and whether the random branch was taken.
pub fn grid2d_behavior_action<R: Rng + ?Sized>(s: GridState, cfg: &Grid2dConfig, rng: &mut R) -> ([f64; 2], bool) {
    if rng.random::<f64>() < cfg.random_fraction {
        let m = cfg.max_step;
        ([rng.random_range(-m..=m), rng.random_range(-m..=m)], true)
    } else {
        (nearest_goal_step(s, cfg), false)
    }
}
