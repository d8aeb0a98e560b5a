use serde::{Deserialize, Serialize};

use super::EnvId;
use crate::error::{contract, Result};

/// One recorded step. `state` is the raw history window ending at the
/// observation the action was taken in; `action` is in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Environment reward (negated cost for the surrogate), unscaled.
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub episode: u64,
    pub time: u64,
    pub iteration: u32,
    pub policy: u32,
}

/// Append-only collection of transitions from one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    env: EnvId,
    obs_dim: usize,
    action_dim: usize,
    window: usize,
    transitions: Vec<Transition>,
}

impl Batch {
    pub fn new(env: EnvId, obs_dim: usize, action_dim: usize, window: usize) -> Result<Self> {
        if obs_dim == 0 || action_dim == 0 || window == 0 {
            return Err(contract("batch dimensions must be positive"));
        }
        Ok(Batch {
            env,
            obs_dim,
            action_dim,
            window,
            transitions: Vec::new(),
        })
    }

    pub fn env(&self) -> EnvId {
        self.env
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn state_dim(&self) -> usize {
        self.obs_dim * self.window
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Adds one transition, enforcing shapes, finiteness and consecutive
    /// time indices within an episode.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim()
            || t.action.len() != self.action_dim
            || t.next_obs.len() != self.obs_dim
        {
            return Err(contract(format!(
                "transition shape ({}, {}, {}) does not match batch ({}, {}, {})",
                t.state.len(),
                t.action.len(),
                t.next_obs.len(),
                self.state_dim(),
                self.action_dim,
                self.obs_dim
            )));
        }
        if !t.reward.is_finite() {
            return Err(contract("transition reward is not finite"));
        }
        if let Some(prev) = self.transitions.iter().rev().find(|p| p.episode == t.episode) {
            if t.time != prev.time + 1 {
                return Err(contract(format!(
                    "episode {} jumps from time {} to {}",
                    t.episode, prev.time, t.time
                )));
            }
        }
        self.transitions.push(t);
        Ok(())
    }

    /// One past the largest episode id in use.
    pub fn next_episode_id(&self) -> u64 {
        self.transitions.iter().map(|t| t.episode + 1).max().unwrap_or(0)
    }

    /// Appends `other`, shifting its episode ids past the ones already used.
    pub fn append(&mut self, other: &Batch) -> Result<()> {
        if (other.env, other.obs_dim, other.action_dim, other.window)
            != (self.env, self.obs_dim, self.action_dim, self.window)
        {
            return Err(contract("cannot append a batch with a different layout"));
        }
        let offset = self.next_episode_id();
        for t in &other.transitions {
            let mut t = t.clone();
            t.episode += offset;
            self.push(t)?;
        }
        Ok(())
    }

    /// Latest observation of a transition's state.
    pub fn current_obs<'a>(&self, t: &'a Transition) -> &'a [f64] {
        &t.state[t.state.len() - self.obs_dim..]
    }

    /// Sum of rewards per episode, in order of first appearance.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut ids: Vec<u64> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for t in &self.transitions {
            match ids.iter().position(|&e| e == t.episode) {
                Some(i) => sums[i] += t.reward,
                None => {
                    ids.push(t.episode);
                    sums.push(t.reward);
                }
            }
        }
        sums
    }
}

/// The `window` most recent observations up to and including time `t`,
/// oldest first, padded at the front with observation 0.
pub fn history_state(observations: &[Vec<f64>], t: usize, window: usize) -> Result<Vec<f64>> {
    if t >= observations.len() {
        return Err(contract(format!(
            "time {t} outside an episode of {} observations",
            observations.len()
        )));
    }
    let mut out = Vec::with_capacity(window * observations[0].len());
    for slot in 0..window {
        let back = window - 1 - slot;
        let idx = t.saturating_sub(back);
        out.extend_from_slice(&observations[idx]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(episode: u64, time: u64) -> Transition {
        Transition {
            state: vec![0.0; 2],
            action: vec![0.0],
            reward: 1.0,
            next_obs: vec![0.0; 2],
            episode,
            time,
            iteration: 0,
            policy: 0,
        }
    }

    #[test]
    fn history_padding_and_window() {
        let obs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64; 6]).collect();
        let s = history_state(&obs, 0, 15).unwrap();
        assert_eq!(s.len(), 90);
        assert!(s.iter().all(|&x| x == 0.0));
        let s = history_state(&obs, 16, 15).unwrap();
        for slot in 0..15 {
            assert_eq!(s[slot * 6], (2 + slot) as f64);
        }
        let s = history_state(&obs, 3, 15).unwrap();
        assert_eq!(s[..6 * 12].iter().filter(|&&x| x == 0.0).count(), 72);
        assert_eq!(&s[84..], &[3.0; 6]);
    }

    #[test]
    fn push_rejects_gaps_and_bad_shapes() {
        let mut b = Batch::new(EnvId::Grid2d, 2, 1, 1).unwrap();
        b.push(tr(0, 0)).unwrap();
        b.push(tr(0, 1)).unwrap();
        assert!(b.push(tr(0, 3)).is_err());
        let mut bad = tr(1, 0);
        bad.action.push(1.0);
        assert!(b.push(bad).is_err());
        let mut nan = tr(1, 0);
        nan.reward = f64::NAN;
        assert!(b.push(nan).is_err());
    }

    #[test]
    fn append_renumbers_episodes() {
        let mut a = Batch::new(EnvId::Grid2d, 2, 1, 1).unwrap();
        a.push(tr(0, 0)).unwrap();
        a.push(tr(1, 0)).unwrap();
        let mut b = Batch::new(EnvId::Grid2d, 2, 1, 1).unwrap();
        b.push(tr(0, 0)).unwrap();
        b.push(tr(0, 1)).unwrap();
        a.append(&b).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.transitions()[2].episode, 2);
        assert_eq!(a.episode_returns(), vec![1.0, 1.0, 2.0]);
        let other = Batch::new(EnvId::IbSurrogate, 2, 1, 1).unwrap();
        assert!(a.append(&other).is_err());
    }
}
