//! Differentiable virtual rollouts through the learned models.
//!
//! A [`Trajectory`] holds `N` rollouts of one policy side by side, one per
//! row, all started from different history states.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::envs::{LinearEffects, Normalizer};
use crate::error::{contract, Result};
use crate::nets::{NetHandle, Network};
use crate::safety::{scaled_total, ActionConstraint};

/// Shape of one round of policy search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub horizon: usize,
    pub gamma: f64,
    /// Start states per policy.
    pub starts: usize,
    pub policies: usize,
}

impl RolloutPlan {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.starts == 0 || self.policies == 0 {
            return Err(contract("horizon, start count and policy count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(contract(format!("discount {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Rolled-out states, actions and rewards of one policy.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub policy: usize,
    /// Normalized history states `s_1..s_H`, each `[N, W * obs]`.
    pub states: Vec<Var>,
    /// Raw latest observation of every state, each `[N, obs]`.
    pub observations: Vec<Var>,
    /// Executed actions `a_1..a_{H-1}`, each `[N, A]`.
    pub actions: Vec<Var>,
    /// Scaled model rewards `e_1..e_{H-1}`, each `[N, 1]`.
    pub rewards: Vec<Var>,
    /// Constrained-policy columns that needed range recovery.
    pub recoveries: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

/// Learned transition and reward models plus everything a rollout needs to
/// move between raw and normalized observations.
///
/// The transition model maps `[normalized history, action]` to the
/// normalized next observation, which rollouts clamp to the observation
/// ranges. The reward model maps
/// `[normalized next observation, action]` to the scaled reward.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub transition: Network,
    pub reward: Network,
    pub normalizer: Normalizer,
    /// Columns whose next value follows the known linear rule instead of
    /// the transition model.
    pub known_effects: Option<LinearEffects>,
}

/// Graph registration of a [`ModelSet`].
#[derive(Clone, Debug)]
pub struct ModelHandles {
    transition: NetHandle,
    reward: NetHandle,
    scale: Var,
    inv_scale: Var,
    shift: Var,
}

impl ModelSet {
    /// Registers the models as frozen.
    pub fn register(&self, g: &mut Graph) -> ModelHandles {
        let n = &self.normalizer;
        let d = n.obs_dim();
        ModelHandles {
            transition: self.transition.register(g, false),
            reward: self.reward.register(g, false),
            scale: g.constant(1, d, n.scale().to_vec()),
            inv_scale: g.constant(1, d, n.scale().iter().map(|s| 1.0 / s).collect()),
            shift: g.constant(1, d, n.shift().to_vec()),
        }
    }

    fn check(&self, policy: &Network) -> Result<()> {
        let n = &self.normalizer;
        let state_dim = n.obs_dim() * n.window();
        let action_dim = policy.output_dim();
        if policy.input_dim() != state_dim {
            return Err(contract(format!(
                "policy expects {} inputs, history states have {state_dim}",
                policy.input_dim()
            )));
        }
        if self.transition.input_dim() != state_dim + action_dim || self.transition.output_dim() != n.obs_dim() {
            return Err(contract("transition model dimensions do not match state and action sizes"));
        }
        if self.reward.input_dim() != n.obs_dim() + action_dim || self.reward.output_dim() != 1 {
            return Err(contract("reward model dimensions do not match observation and action sizes"));
        }
        Ok(())
    }
}

fn normalize(g: &mut Graph, h: &ModelHandles, raw: Var) -> Var {
    let s = g.mul(raw, h.scale);
    g.add(s, h.shift)
}

fn denormalize(g: &mut Graph, h: &ModelHandles, norm: Var) -> Var {
    let s = g.sub(norm, h.shift);
    g.mul(s, h.inv_scale)
}

/// Unrolls `policy` for `plan.horizon` states from the raw history states
/// `starts`. With a constraint, every policy output is remapped before use.
#[allow(clippy::too_many_arguments)]
pub fn virtual_rollout(
    g: &mut Graph,
    models: &ModelSet,
    mh: &ModelHandles,
    policy: &Network,
    ph: &NetHandle,
    policy_index: usize,
    starts: &[Vec<f64>],
    horizon: usize,
    constraint: Option<&ActionConstraint>,
) -> Result<Trajectory> {
    models.check(policy)?;
    if horizon == 0 {
        return Err(contract("rollout horizon must be at least 1"));
    }
    let n = &models.normalizer;
    let (d, w) = (n.obs_dim(), n.window());
    if starts.is_empty() || starts.iter().any(|s| s.len() != d * w) {
        return Err(contract(format!("start states must be non-empty with {} entries", d * w)));
    }
    let rows = starts.len();
    let mut raw_slots: Vec<Var> = (0..w)
        .map(|slot| {
            let vals = starts
                .iter()
                .flat_map(|s| s[slot * d..(slot + 1) * d].iter().copied())
                .collect();
            g.constant(rows, d, vals)
        })
        .collect();
    let mut norm_slots: Vec<Var> = raw_slots.iter().map(|&r| normalize(g, mh, r)).collect();
    let join = |g: &mut Graph, slots: &[Var]| if slots.len() == 1 { slots[0] } else { g.concat_cols(slots) };

    let mut traj = Trajectory {
        policy: policy_index,
        states: vec![join(g, &norm_slots)],
        observations: vec![raw_slots[w - 1]],
        actions: Vec::with_capacity(horizon - 1),
        rewards: Vec::with_capacity(horizon - 1),
        recoveries: 0,
    };
    for _ in 1..horizon {
        let state = *traj.states.last().unwrap();
        let last_raw = raw_slots[w - 1];
        let raw_action = policy.graph_forward(g, ph, state);
        let action = match constraint {
            Some(c) => {
                let cols: Vec<Var> = c.dims.iter().map(|&j| g.slice_cols(last_raw, j, 1)).collect();
                let steered = g.concat_cols(&cols);
                let (a, rec) = c.graph_constrain(g, raw_action, steered);
                traj.recoveries += rec;
                a
            }
            None => raw_action,
        };
        let input = g.concat_cols(&[state, action]);
        let predicted = models.transition.graph_forward(g, &mh.transition, input);
        let predicted = g.min_scalar(predicted, 1.0);
        let predicted = g.max_scalar(predicted, -1.0);
        let mut next_raw = denormalize(g, mh, predicted);
        if let Some(fx) = &models.known_effects {
            let mut cols: Vec<Var> = (0..d).map(|j| g.slice_cols(next_raw, j, 1)).collect();
            for (i, &j) in fx.dims.iter().enumerate() {
                let s = g.slice_cols(last_raw, j, 1);
                let a = g.slice_cols(action, i, 1);
                let wa = g.scale(a, fx.coefficients[i]);
                let moved = g.add(s, wa);
                let moved = g.min_scalar(moved, fx.high);
                cols[j] = g.max_scalar(moved, fx.low);
            }
            next_raw = g.concat_cols(&cols);
        }
        let next_norm = normalize(g, mh, next_raw);
        let r_in = g.concat_cols(&[next_norm, action]);
        let reward = models.reward.graph_forward(g, &mh.reward, r_in);

        raw_slots.remove(0);
        raw_slots.push(next_raw);
        norm_slots.remove(0);
        norm_slots.push(next_norm);
        traj.actions.push(action);
        traj.rewards.push(reward);
        traj.observations.push(next_raw);
        traj.states.push(join(g, &norm_slots));
    }
    Ok(traj)
}

/// `sum_{t=1}^{H-1} gamma^t e_t`; the first reward carries `gamma^1`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards
        .iter()
        .enumerate()
        .map(|(t, e)| gamma.powi(t as i32 + 1) * e)
        .sum()
}

/// `-(1/(N K H)) sum_k sum_n sum_t gamma^t e`.
pub fn reward_loss(g: &mut Graph, trajectories: &[Trajectory], plan: &RolloutPlan) -> Result<Var> {
    let rows = check_horizons(g, trajectories, plan.horizon)?;
    let mut terms = Vec::new();
    for traj in trajectories {
        for (t, &e) in traj.rewards.iter().enumerate() {
            let s = g.sum(e);
            terms.push(g.scale(s, plan.gamma.powi(t as i32 + 1)));
        }
    }
    let k = trajectories.len();
    Ok(scaled_total(g, &terms, -1.0 / (rows * k * plan.horizon) as f64))
}

pub(crate) fn check_horizons(g: &Graph, trajectories: &[Trajectory], horizon: usize) -> Result<usize> {
    let first = trajectories.first().ok_or_else(|| contract("no trajectories"))?;
    let rows = g.shape(first.states[0]).rows;
    for t in trajectories {
        if t.states.len() != horizon || t.actions.len() + 1 != horizon || t.rewards.len() + 1 != horizon {
            return Err(contract(format!(
                "trajectory of policy {} has horizon {}, plan says {horizon}",
                t.policy,
                t.states.len()
            )));
        }
        if g.shape(t.states[0]).rows != rows {
            return Err(contract("trajectories do not share the start-state count"));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_traj(g: &mut Graph, rewards: &[f64]) -> Trajectory {
        let h = rewards.len() + 1;
        Trajectory {
            policy: 0,
            states: (0..h).map(|_| g.constant(1, 1, vec![0.0])).collect(),
            observations: (0..h).map(|_| g.constant(1, 1, vec![0.0])).collect(),
            actions: (1..h).map(|_| g.constant(1, 1, vec![0.0])).collect(),
            rewards: rewards.iter().map(|&r| g.constant(1, 1, vec![r])).collect(),
            recoveries: 0,
        }
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 1.0), 3.0);
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 0.875);
        assert_eq!(discounted_return(&[], 0.9), 0.0);
    }

    #[test]
    fn reward_loss_examples() {
        let mut g = Graph::new();
        let t = constant_traj(&mut g, &[2.0, 4.0]);
        let plan = RolloutPlan {
            horizon: 3,
            gamma: 1.0,
            starts: 1,
            policies: 1,
        };
        let l = reward_loss(&mut g, &[t.clone()], &plan).unwrap();
        assert!((g.scalar_value(l) + 2.0).abs() < 1e-15);
        let z = constant_traj(&mut g, &[0.0, 0.0]);
        let l = reward_loss(&mut g, &[z], &plan).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        let bad = RolloutPlan { horizon: 4, ..plan };
        assert!(reward_loss(&mut g, &[t], &bad).is_err());
    }
}
