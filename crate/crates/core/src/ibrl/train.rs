use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{combined_loss, FittedModels, IbrlConfig, PolicyEnsemble};
use crate::diffcore::{adam_step, clip_grad_norm, collect, Graph, OptimState};
use crate::envs::Batch;
use crate::error::{contract, Error, Result};
use crate::nets::NetHandle;
use crate::rollout::{virtual_rollout, Trajectory};
use crate::safety::ActionConstraint;

/// What happened while training one ensemble.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs_run: usize,
    pub steps: usize,
    pub early_stopped: bool,
    /// Held-out combined loss after every epoch.
    pub validation_losses: Vec<f64>,
    pub best_validation_loss: f64,
    /// Diversity of the pool on the held-out starts, before and after.
    pub initial_diversity: f64,
    pub final_diversity: f64,
    /// Model-predicted accumulated cost per policy on the held-out starts,
    /// in environment units.
    pub virtual_costs: Vec<f64>,
    /// Range recoveries in the final held-out rollouts.
    pub recoveries: usize,
}

struct Evaluation {
    loss: f64,
    diversity: f64,
    virtual_costs: Vec<f64>,
    recoveries: usize,
}

fn rollouts(
    g: &mut Graph,
    fitted: &FittedModels,
    ensemble: &PolicyEnsemble,
    handles: &[NetHandle],
    starts: &[Vec<f64>],
    horizon: usize,
    constraint: Option<&ActionConstraint>,
) -> Result<Vec<Trajectory>> {
    let mh = fitted.models.register(g);
    ensemble
        .members
        .iter()
        .zip(handles)
        .enumerate()
        .map(|(k, (net, h))| virtual_rollout(g, &fitted.models, &mh, net, h, k, starts, horizon, constraint))
        .collect()
}

fn evaluate(
    fitted: &FittedModels,
    ensemble: &PolicyEnsemble,
    cfg: &IbrlConfig,
    starts: &[Vec<f64>],
    constraint: Option<&ActionConstraint>,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let bh = fitted.behavior.as_ref().map(|b| b.register(&mut g, false));
    let handles: Vec<NetHandle> = ensemble.members.iter().map(|m| m.register(&mut g, false)).collect();
    let trajs = rollouts(&mut g, fitted, ensemble, &handles, starts, cfg.search.horizon, constraint)?;
    let plan = cfg.search.plan();
    let parts = combined_loss(
        &mut g,
        &trajs,
        fitted.behavior.as_ref().zip(bh.as_ref()),
        &cfg.safety,
        &cfg.diversity,
        &plan,
    )?;
    let rows = starts.len() as f64;
    let scale = cfg.env.reward_scale();
    let virtual_costs = trajs
        .iter()
        .map(|t| {
            let total: f64 = t
                .rewards
                .iter()
                .enumerate()
                .map(|(i, &e)| plan.gamma.powi(i as i32 + 1) * g.value(e).iter().sum::<f64>())
                .sum();
            -total / rows / scale
        })
        .collect();
    Ok(Evaluation {
        loss: g.scalar_value(parts.total),
        diversity: parts.diversity.map_or(0.0, |d| g.scalar_value(d)),
        virtual_costs,
        recoveries: trajs.iter().map(|t| t.recoveries).sum(),
    })
}

/// Optimizes all members jointly on the combined loss over minibatches of
/// batch start states, stopping on the held-out loss and restoring the best
/// ensemble seen.
pub fn train_policies(
    batch: &Batch,
    fitted: &FittedModels,
    mut ensemble: PolicyEnsemble,
    cfg: &IbrlConfig,
    seed: u64,
) -> Result<(PolicyEnsemble, TrainingLog)> {
    if batch.is_empty() {
        return Err(contract("cannot train policies on an empty batch"));
    }
    if ensemble.is_empty() {
        return Err(contract("empty policy ensemble"));
    }
    let search = &cfg.search;
    search.plan().validate()?;
    let constraint = cfg.constraint()?;
    let constraint = constraint.as_ref();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut rng);
    let n_val = search.validation_starts.min(batch.len().div_ceil(2));
    let state_of = |i: &usize| batch.transitions()[*i].state.clone();
    let validation: Vec<Vec<f64>> = order[..n_val].iter().map(state_of).collect();
    let pool: Vec<usize> = if order.len() > n_val {
        order[n_val..].to_vec()
    } else {
        order.clone()
    };
    let n = search.starts.min(pool.len());

    let mut optim: Vec<OptimState> = ensemble
        .members
        .iter()
        .map(|m| OptimState::new(m.param_count(), search.optimizer))
        .collect();
    let initial = evaluate(fitted, &ensemble, cfg, &validation, constraint)?;
    let mut log = TrainingLog {
        best_validation_loss: initial.loss,
        initial_diversity: initial.diversity,
        ..TrainingLog::default()
    };
    let mut best = ensemble.clone();
    let mut since_best = 0;
    let plan = search.plan();

    for _epoch in 0..search.max_epochs {
        for _ in 0..search.steps_per_epoch {
            let picks: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, pool.len(), n)
                .iter()
                .map(|i| state_of(&pool[i]))
                .collect();
            let mut g = Graph::new();
            let bh = fitted.behavior.as_ref().map(|b| b.register(&mut g, false));
            let handles: Vec<NetHandle> = ensemble.members.iter().map(|m| m.register(&mut g, true)).collect();
            let trajs = rollouts(&mut g, fitted, &ensemble, &handles, &picks, search.horizon, constraint)?;
            let parts = combined_loss(
                &mut g,
                &trajs,
                fitted.behavior.as_ref().zip(bh.as_ref()),
                &cfg.safety,
                &cfg.diversity,
                &plan,
            )?;
            let loss = g.scalar_value(parts.total);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("policy loss {loss} at step {}", log.steps)));
            }
            let grads = g.backward(parts.total)?;
            for ((net, h), opt) in ensemble.members.iter_mut().zip(&handles).zip(&mut optim) {
                let mut grad = collect(&grads, h.params());
                if let Some(c) = search.grad_clip {
                    clip_grad_norm(&mut grad, c);
                }
                adam_step(opt, net.params_mut().values_mut(), &grad)?;
            }
            log.steps += 1;
        }
        log.epochs_run += 1;
        let val = evaluate(fitted, &ensemble, cfg, &validation, constraint)?.loss;
        log.validation_losses.push(val);
        if val < log.best_validation_loss {
            log.best_validation_loss = val;
            best = ensemble.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= search.patience {
                log.early_stopped = true;
                break;
            }
        }
    }

    let fin = evaluate(fitted, &best, cfg, &validation, constraint)?;
    log.final_diversity = fin.diversity;
    log.virtual_costs = fin.virtual_costs;
    log.recoveries = fin.recoveries;
    Ok((best, log))
}
