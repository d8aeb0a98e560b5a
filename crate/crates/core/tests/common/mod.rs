#![allow(dead_code)]

use ibrl::diffcore::{collect, Graph};
use ibrl::diversity::{DiversityConfig, Measure, Norm, PairNormalization};
use ibrl::envs::Normalizer;
use ibrl::nets::{mlp_init, Head, NetHandle, Network, SIGMA_FLOOR};
use ibrl::rollout::{virtual_rollout, ModelSet, RolloutPlan, Trajectory};
use ibrl::safety::SafetySpec;
use ibrl::ibrl::combined_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random policy-search problem whose combined loss can be
/// evaluated at arbitrary policy parameters.
#[derive(Clone, Debug)]
pub struct Problem {
    pub models: ModelSet,
    pub behavior: Network,
    pub policies: Vec<Network>,
    pub starts: Vec<Vec<f64>>,
    pub plan: RolloutPlan,
    pub safety: SafetySpec,
    pub diversity: DiversityConfig,
}

pub fn hidden_sizes(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=20)).collect()
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Adds noise to every parameter, biases included, then scales the last
/// weight and bias segments by `last_scale`.
pub fn jitter(net: &mut Network, rng: &mut ChaCha8Rng, amount: f64, last_scale: f64) {
    let layout = net.params().layout().to_vec();
    let tail: usize = layout[layout.len() - 2..].iter().map(|s| s.len()).sum();
    let values = net.params_mut().values_mut();
    let n = values.len();
    for (i, v) in values.iter_mut().enumerate() {
        *v += rng.random_range(-amount..=amount);
        if i >= n - tail {
            *v *= last_scale;
        }
    }
}

pub fn random_problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = rng.random_range(1..=3);
    let window = rng.random_range(1..=2);
    let act = rng.random_range(1..=2);
    let k = rng.random_range(1..=4);
    let horizon = rng.random_range(1..=4);
    let n = rng.random_range(1..=3);
    let state = obs * window;
    let ranges: Vec<(f64, f64)> = (0..obs)
        .map(|_| {
            let lo = rng.random_range(-5.0..5.0);
            (lo, lo + rng.random_range(0.5..10.0))
        })
        .collect();
    let normalizer = Normalizer::new(ranges.clone(), window);

    let mut transition = mlp_init(&sizes(state + act, &hidden_sizes(&mut rng), obs), Head::Linear, rng.random()).unwrap();
    // Keep predictions away from the rollout's clamp at the range edges.
    jitter(&mut transition, &mut rng, 0.1, 0.3);
    let mut reward = mlp_init(&sizes(obs + act, &hidden_sizes(&mut rng), 1), Head::Linear, rng.random()).unwrap();
    jitter(&mut reward, &mut rng, 0.1, 1.0);
    let mut behavior = mlp_init(
        &sizes(state, &hidden_sizes(&mut rng), 2 * act),
        Head::Gaussian { sigma_floor: SIGMA_FLOOR },
        rng.random(),
    )
    .unwrap();
    jitter(&mut behavior, &mut rng, 0.1, 1.0);
    let policy_hidden = hidden_sizes(&mut rng);
    let policies = (0..k)
        .map(|_| {
            let mut p = mlp_init(
                &sizes(state, &policy_hidden, act),
                Head::Bounded { lower: -1.0, upper: 1.0 },
                rng.random(),
            )
            .unwrap();
            jitter(&mut p, &mut rng, 0.2, 1.0);
            p
        })
        .collect();
    let starts = (0..n)
        .map(|_| {
            (0..window)
                .flat_map(|_| ranges.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect::<Vec<_>>())
                .collect()
        })
        .collect();
    let safety = if rng.random_bool(0.5) {
        SafetySpec::Objective { lambda: rng.random_range(0.0..=1.0) }
    } else {
        SafetySpec::SoftConstraint {
            alpha_s: rng.random_range(0.0..30.0),
            delta: rng.random_range(0.0..=1.0),
        }
    };
    let diversity = DiversityConfig {
        measure: if rng.random_bool(0.5) { Measure::MinLsed } else { Measure::Lsed },
        norm: if rng.random_bool(0.5) { Norm::L2 } else { Norm::L1 },
        alpha_d: rng.random_range(0.0..1.0),
        exclude_first: rng.random_bool(0.5),
        normalization: if rng.random_bool(0.5) {
            PairNormalization::Factorial
        } else {
            PairNormalization::PairAverage
        },
    };
    Problem {
        models: ModelSet {
            transition,
            reward,
            normalizer,
            known_effects: None,
        },
        behavior,
        policies,
        starts,
        plan: RolloutPlan {
            horizon,
            gamma: rng.random_range(0.5..=1.0),
            starts: n,
            policies: k,
        },
        safety,
        diversity,
    }
}

impl Problem {
    pub fn param_count(&self) -> usize {
        self.policies.iter().map(|p| p.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.policies.iter().flat_map(|p| p.params().values().to_vec()).collect()
    }

    pub fn with_params(&self, flat: &[f64]) -> Problem {
        let mut out = self.clone();
        let mut offset = 0;
        for p in &mut out.policies {
            let n = p.param_count();
            p.params_mut().values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        out
    }

    pub fn rollouts(&self, g: &mut Graph, handles: &[NetHandle]) -> Vec<Trajectory> {
        let mh = self.models.register(g);
        self.policies
            .iter()
            .zip(handles)
            .enumerate()
            .map(|(k, (p, h))| {
                virtual_rollout(g, &self.models, &mh, p, h, k, &self.starts, self.plan.horizon, None).unwrap()
            })
            .collect()
    }

    /// Combined loss and its gradient with respect to all policy parameters.
    pub fn loss_and_grad(&self) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let bh = self.behavior.register(&mut g, false);
        let handles: Vec<NetHandle> = self.policies.iter().map(|p| p.register(&mut g, true)).collect();
        let trajs = self.rollouts(&mut g, &handles);
        let parts = combined_loss(
            &mut g,
            &trajs,
            Some((&self.behavior, &bh)),
            &self.safety,
            &self.diversity,
            &self.plan,
        )
        .unwrap();
        let grads = g.backward(parts.total).unwrap();
        let grad = handles.iter().flat_map(|h| collect(&grads, h.params())).collect();
        (g.scalar_value(parts.total), grad)
    }

    pub fn loss(&self) -> f64 {
        self.loss_and_grad().0
    }
}

/// Central differences of `f` over the listed coordinates of `params`.
pub fn partial_fd(f: impl Fn(&[f64]) -> f64, params: &[f64], coords: &[usize], step: f64) -> Vec<f64> {
    let sub: Vec<f64> = coords.iter().map(|&i| params[i]).collect();
    ibrl::diffcore::finite_diff_grad(
        |s| {
            let mut full = params.to_vec();
            for (&i, &v) in coords.iter().zip(s) {
                full[i] = v;
            }
            Ok(f(&full))
        },
        &sub,
        step,
    )
    .unwrap()
}

/// Up to `max` distinct coordinates out of `n`, drawn with `rng`.
pub fn sample_coords(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, max).into_vec()
}
