//! Industrial-control surrogate.
//!
//! Observation layout `(setpoint, velocity, gain, shift, fatigue, consumption)`.
//! The three actions steer velocity, gain and shift linearly; fatigue and
//! consumption are deterministic functions of the steered variables plus an
//! action-effort term, and the per-step cost adds Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const OBS_DIM: usize = 6;
pub const ACTION_DIM: usize = 3;
/// Observation columns of velocity, gain and shift.
pub const STEERED: [usize; 3] = [1, 2, 3];
pub const BOUND_LOW: f64 = 0.0;
pub const BOUND_HIGH: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub setpoint: f64,
    /// Change of velocity, gain and shift per unit action.
    pub steering: [f64; 3],
    pub fatigue_weight: f64,
    pub fatigue_offset: f64,
    pub fatigue_divisor: f64,
    pub consumption_divisor: f64,
    pub effort_weight: f64,
    /// Standard deviation of the additive cost noise; 0 disables it.
    pub noise_std: f64,
    /// Velocity, gain and shift of a fresh episode are uniform in this range.
    pub start_low: f64,
    pub start_high: f64,
    /// Fixed point the medium behavior policy steers toward.
    pub medium_target: f64,
    pub medium_random_fraction: f64,
    pub episode_len: usize,
    pub reward_scale: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            setpoint: 50.0,
            steering: [1.0, 10.0, 5.75],
            fatigue_weight: 3.0,
            fatigue_offset: 10.0,
            fatigue_divisor: 200.0,
            consumption_divisor: 10.0,
            effort_weight: 0.05,
            noise_std: 0.05,
            start_low: 30.0,
            start_high: 70.0,
            medium_target: 50.0,
            medium_random_fraction: 1.0 / 3.0,
            episode_len: 200,
            reward_scale: 0.1,
        }
    }
}

/// One surrogate observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndObservation {
    pub setpoint: f64,
    pub velocity: f64,
    pub gain: f64,
    pub shift: f64,
    pub fatigue: f64,
    pub consumption: f64,
}

impl IndObservation {
    pub fn to_vec(self) -> Vec<f64> {
        vec![
            self.setpoint,
            self.velocity,
            self.gain,
            self.shift,
            self.fatigue,
            self.consumption,
        ]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != OBS_DIM {
            return Err(contract(format!(
                "surrogate observation has {OBS_DIM} entries, got {}",
                s.len()
            )));
        }
        Ok(IndObservation {
            setpoint: s[0],
            velocity: s[1],
            gain: s[2],
            shift: s[3],
            fatigue: s[4],
            consumption: s[5],
        })
    }

    pub fn steered(&self) -> [f64; 3] {
        [self.velocity, self.gain, self.shift]
    }
}

impl SurrogateConfig {
    pub fn fatigue(&self, p: f64, v: f64, g: f64) -> f64 {
        let dv = v - (p - self.fatigue_offset);
        let dg = g - (p + self.fatigue_offset);
        (dv * dv + dg * dg) / self.fatigue_divisor
    }

    pub fn consumption(&self, p: f64, h: f64, action: &[f64]) -> f64 {
        let effort: f64 = action.iter().map(|a| a.abs()).sum();
        (h - (100.0 - p)).abs() / self.consumption_divisor + self.effort_weight * effort
    }

    /// Noise-free cost of arriving at `next` after `action`.
    pub fn deterministic_cost(&self, next: &IndObservation) -> f64 {
        self.fatigue_weight * next.fatigue + next.consumption
    }

    /// Observation with the given steered variables and no action effort.
    pub fn observation(&self, v: f64, g: f64, h: f64) -> IndObservation {
        let p = self.setpoint;
        IndObservation {
            setpoint: p,
            velocity: v,
            gain: g,
            shift: h,
            fatigue: self.fatigue(p, v, g),
            consumption: self.consumption(p, h, &[]),
        }
    }

    /// Upper ends of the fatigue and consumption ranges for this setpoint.
    pub fn derived_maxima(&self) -> (f64, f64) {
        let p = self.setpoint;
        let o = self.fatigue_offset;
        let dv = (p - o).abs().max((BOUND_HIGH - (p - o)).abs());
        let dg = (p + o).abs().max((BOUND_HIGH - (p + o)).abs());
        let fat = (dv * dv + dg * dg) / self.fatigue_divisor;
        let h = (100.0 - p).abs().max((BOUND_HIGH - (100.0 - p)).abs());
        let con = h / self.consumption_divisor + self.effort_weight * ACTION_DIM as f64;
        (fat, con)
    }
}

/// Applies `a` and returns the next observation and the (noisy) cost.
pub fn ib_surrogate_step<R: Rng + ?Sized>(
    obs: &IndObservation,
    a: &[f64],
    cfg: &SurrogateConfig,
    rng: &mut R,
) -> Result<(IndObservation, f64)> {
    if a.len() != ACTION_DIM {
        return Err(contract(format!(
            "surrogate action has {ACTION_DIM} components, got {}",
            a.len()
        )));
    }
    if let Some(bad) = a.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
        return Err(contract(format!("surrogate action component {bad} outside [-1, 1]")));
    }
    let [cv, cg, ch] = cfg.steering;
    let v = steer(obs.velocity, cv, a[0]);
    let g = steer(obs.gain, cg, a[1]);
    let h = steer(obs.shift, ch, a[2]);
    let p = obs.setpoint;
    let next = IndObservation {
        setpoint: p,
        velocity: v,
        gain: g,
        shift: h,
        fatigue: cfg.fatigue(p, v, g),
        consumption: cfg.consumption(p, h, a),
    };
    let noise = if cfg.noise_std > 0.0 {
        Normal::new(0.0, cfg.noise_std)
            .map_err(|e| contract(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    Ok((next, cfg.deterministic_cost(&next) + noise))
}

/// Linear steering rule, evaluated exactly as the action constraint checks it.
#[inline]
pub fn steer(x: f64, coef: f64, a: f64) -> f64 {
    (x + coef * a).clamp(BOUND_LOW, BOUND_HIGH)
}

/// Medium behavior policy: steer each variable toward the fixed target,
/// with a uniform random action some of the time. Returns the action and
/// whether the random branch was taken.
pub fn medium_policy_action<R: Rng + ?Sized>(
    obs: &IndObservation,
    cfg: &SurrogateConfig,
    rng: &mut R,
) -> ([f64; 3], bool) {
    if rng.random::<f64>() < cfg.medium_random_fraction {
        let mut a = [0.0; 3];
        a.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
        (a, true)
    } else {
        (medium_deterministic(obs, cfg), false)
    }
}

pub fn medium_deterministic(obs: &IndObservation, cfg: &SurrogateConfig) -> [f64; 3] {
    let x = obs.steered();
    let mut a = [0.0; 3];
    for i in 0..3 {
        a[i] = ((cfg.medium_target - x[i]) / cfg.steering[i]).clamp(-1.0, 1.0);
    }
    a
}
