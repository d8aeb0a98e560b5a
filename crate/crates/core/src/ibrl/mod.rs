//! Ensemble policy search on the combined loss, and the
//! train, deploy, append cycle around it.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Graph, Var};
use crate::diversity::{diversity_term, DiversityConfig};
use crate::envs::{run_episode, Actor, Batch, Env, Normalizer, Provenance};
use crate::error::{contract, Result};
use crate::nets::{fit_behavior_policy, fit_regression, mlp_init, FitConfig, FitReport, Head, NetHandle, Network};
use crate::rollout::{reward_loss, ModelSet, RolloutPlan, Trajectory};
use crate::safety::{safety_objective_loss, soft_constraint_loss, ActionConstraint, SafetySpec};

pub use train::{train_policies, TrainingLog};

/// Policy-search settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySearchConfig {
    /// Ensemble size `K`.
    pub policies: usize,
    /// Rollout horizon `H`.
    pub horizon: usize,
    pub gamma: f64,
    /// Start states per gradient step `N`.
    pub starts: usize,
    pub hidden: Vec<usize>,
    pub optimizer: AdamConfig,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    /// Epochs without improvement of the held-out loss before stopping.
    pub patience: usize,
    /// Held-out start states used for the stopping rule and for reports.
    pub validation_starts: usize,
    /// Per-policy gradient norm cap.
    pub grad_clip: Option<f64>,
}

impl Default for PolicySearchConfig {
    fn default() -> Self {
        PolicySearchConfig {
            policies: 10,
            horizon: 100,
            gamma: 1.0,
            starts: 32,
            hidden: vec![50, 50],
            optimizer: AdamConfig::default(),
            steps_per_epoch: 10,
            max_epochs: 500,
            patience: 20,
            validation_starts: 64,
            grad_clip: None,
        }
    }
}

impl PolicySearchConfig {
    pub fn plan(&self) -> RolloutPlan {
        RolloutPlan {
            horizon: self.horizon,
            gamma: self.gamma,
            starts: self.starts,
            policies: self.policies,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.policies == 0 {
            v.push("search.policies must be at least 1".to_string());
        }
        if self.horizon == 0 {
            v.push("search.horizon must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            v.push(format!("search.gamma = {} must lie in [0, 1]", self.gamma));
        }
        if self.starts == 0 {
            v.push("search.starts must be at least 1".to_string());
        }
        if self.hidden.contains(&0) {
            v.push("search.hidden sizes must be positive".to_string());
        }
        if self.steps_per_epoch == 0 {
            v.push("search.steps_per_epoch must be at least 1".to_string());
        }
        if self.validation_starts == 0 {
            v.push("search.validation_starts must be at least 1".to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                v.push(format!("search.grad_clip = {c} must be positive"));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            v.push(format!("search.optimizer.lr = {} must be positive", self.optimizer.lr));
        }
        v
    }
}

/// Supervised fitting of the transition, reward and behavior models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelFitConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
}

impl Default for ModelFitConfig {
    fn default() -> Self {
        ModelFitConfig {
            hidden: vec![50, 50],
            fit: FitConfig::default(),
        }
    }
}

/// Seeded evaluation of the first policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Steps per episode; the environment's episode length when absent.
    pub horizon: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            horizon: None,
            seed: 12345,
        }
    }
}

/// Everything one iteration needs.
#[derive(Clone, Debug, PartialEq)]
pub struct IbrlConfig {
    pub env: Env,
    pub window: usize,
    pub safety: SafetySpec,
    pub diversity: DiversityConfig,
    pub search: PolicySearchConfig,
    pub models: ModelFitConfig,
    /// True-environment steps per deployed policy.
    pub deploy_steps: usize,
    pub eval: EvalConfig,
}

impl IbrlConfig {
    pub fn constraint(&self) -> Result<Option<ActionConstraint>> {
        self.safety.action_constraint(&self.env.linear_effects())
    }

    pub fn eval_horizon(&self) -> usize {
        self.eval.horizon.unwrap_or_else(|| self.env.episode_len())
    }
}

/// Deterministic seed stream: `splitmix64` over the base seed, a stream tag
/// and an index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `K` policies with a shared architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEnsemble {
    pub members: Vec<Network>,
    pub seeds: Vec<u64>,
}

impl PolicyEnsemble {
    /// Bounded-head policies over `state_dim` inputs, one seed per member.
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], seeds: &[u64]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(contract("an ensemble needs at least one member"));
        }
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let head = Head::Bounded {
            lower: -1.0,
            upper: 1.0,
        };
        let members = seeds
            .iter()
            .map(|&s| mlp_init(&sizes, head, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyEnsemble {
            members,
            seeds: seeds.to_vec(),
        })
    }

    /// Members seeded from `derive_seed(seed, 2, k)`.
    pub fn seeded(state_dim: usize, action_dim: usize, hidden: &[usize], k: usize, seed: u64) -> Result<Self> {
        let seeds: Vec<u64> = (0..k as u64).map(|i| derive_seed(seed, 2, i)).collect();
        Self::new(state_dim, action_dim, hidden, &seeds)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The designated evaluation policy.
    pub fn first(&self) -> &Network {
        &self.members[0]
    }
}

/// Learned models for one iteration plus their fit reports.
#[derive(Clone, Debug)]
pub struct FittedModels {
    pub models: ModelSet,
    pub behavior: Option<Network>,
    pub reports: Vec<FitReport>,
}

fn with_seed(fit: &FitConfig, seed: u64) -> FitConfig {
    FitConfig { seed, ..fit.clone() }
}

/// Fits the transition and reward models, and the behavior policy when the
/// safety variant uses it, on the whole batch.
pub fn fit_models(batch: &Batch, cfg: &IbrlConfig, seed: u64) -> Result<FittedModels> {
    if batch.is_empty() {
        return Err(contract("cannot fit models on an empty batch"));
    }
    let env = &cfg.env;
    let normalizer = env.normalizer(batch.window());
    let scale = env.reward_scale();
    let a_dim = batch.action_dim();
    let o_dim = batch.obs_dim();
    let mut t_in = Vec::with_capacity(batch.len());
    let mut t_out = Vec::with_capacity(batch.len());
    let mut r_in = Vec::with_capacity(batch.len());
    let mut r_out = Vec::with_capacity(batch.len());
    for t in batch.transitions() {
        let next = normalizer.normalize_obs(&t.next_obs);
        let mut x = normalizer.normalize_history(&t.state);
        x.extend_from_slice(&t.action);
        t_in.push(x);
        t_out.push(next.clone());
        let mut rx = next;
        rx.extend_from_slice(&t.action);
        r_in.push(rx);
        r_out.push(vec![t.reward * scale]);
    }
    let sizes = |input: usize, output: usize| {
        let mut s = vec![input];
        s.extend_from_slice(&cfg.models.hidden);
        s.push(output);
        s
    };
    let transition = mlp_init(&sizes(batch.state_dim() + a_dim, o_dim), Head::Linear, derive_seed(seed, 10, 0))?;
    let (transition, t_rep) = fit_regression(transition, &t_in, &t_out, &with_seed(&cfg.models.fit, derive_seed(seed, 11, 0)))?;
    let reward = mlp_init(&sizes(o_dim + a_dim, 1), Head::Linear, derive_seed(seed, 10, 1))?;
    let (reward, r_rep) = fit_regression(reward, &r_in, &r_out, &with_seed(&cfg.models.fit, derive_seed(seed, 11, 1)))?;
    let mut reports = vec![t_rep, r_rep];
    let behavior = match cfg.safety {
        SafetySpec::ConstrainedPolicy { .. } => None,
        _ => {
            let fit = FitConfig {
                seed: derive_seed(seed, 11, 2),
                ..cfg.models.fit.clone()
            };
            let (b, rep) = fit_behavior_policy(batch, &normalizer, &cfg.models.hidden, &fit)?;
            reports.push(rep);
            Some(b)
        }
    };
    let known_effects = matches!(cfg.safety, SafetySpec::ConstrainedPolicy { .. }).then(|| env.linear_effects());
    Ok(FittedModels {
        models: ModelSet {
            transition,
            reward,
            normalizer,
            known_effects,
        },
        behavior,
        reports,
    })
}

/// The scalar terms of the combined loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// Reward term, or the behavior-deviation objective.
    pub objective: Var,
    pub safety: Option<Var>,
    pub diversity: Option<Var>,
}

/// Reward loss plus the safety term minus `alpha_d` times the diversity of
/// policies `2..K`. The objective variant replaces reward and penalty with
/// its own trade-off; the constrained policy adds no loss term.
pub fn combined_loss(
    g: &mut Graph,
    trajectories: &[Trajectory],
    behavior: Option<(&Network, &NetHandle)>,
    safety: &SafetySpec,
    div: &DiversityConfig,
    plan: &RolloutPlan,
) -> Result<LossParts> {
    let need_behavior = || contract("this safety variant needs a fitted behavior policy");
    let (objective, safety_term) = match *safety {
        SafetySpec::Objective { lambda } => {
            let (b, bh) = behavior.ok_or_else(need_behavior)?;
            let l = safety_objective_loss(g, trajectories, b, bh, lambda, plan.gamma, plan.horizon)?;
            (l, None)
        }
        SafetySpec::SoftConstraint { alpha_s, delta } => {
            let r = reward_loss(g, trajectories, plan)?;
            if alpha_s == 0.0 {
                (r, None)
            } else {
                let (b, bh) = behavior.ok_or_else(need_behavior)?;
                let s = soft_constraint_loss(g, trajectories, b, bh, alpha_s, delta, plan.horizon)?;
                (r, Some(s))
            }
        }
        SafetySpec::ConstrainedPolicy { .. } => (reward_loss(g, trajectories, plan)?, None),
    };
    let mut total = objective;
    if let Some(s) = safety_term {
        total = g.add(total, s);
    }
    let diversity = diversity_term(g, trajectories, div)?;
    if let Some(d) = diversity {
        if div.alpha_d != 0.0 {
            let scaled = g.scale(d, -div.alpha_d);
            total = g.add(total, scaled);
        }
    }
    Ok(LossParts {
        total,
        objective,
        safety: safety_term,
        diversity,
    })
}

/// A trained policy acting in the true environment, deterministically.
#[derive(Clone, Debug)]
pub struct PolicyActor {
    pub net: Network,
    pub normalizer: Normalizer,
    pub constraint: Option<ActionConstraint>,
    /// Constrained columns that needed range recovery so far.
    pub recoveries: usize,
}

impl PolicyActor {
    pub fn new(net: Network, normalizer: Normalizer, constraint: Option<ActionConstraint>) -> Self {
        PolicyActor {
            net,
            normalizer,
            constraint,
            recoveries: 0,
        }
    }
}

impl Actor for PolicyActor {
    fn act(&mut self, env: &Env, history: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let raw = self.net.forward(&self.normalizer.normalize_history(history))?;
        match &self.constraint {
            Some(c) => {
                let obs = &history[history.len() - env.obs_dim()..];
                let (a, rec) = c.constrain_action(&raw, obs)?;
                self.recoveries += rec;
                Ok(a)
            }
            None => Ok(raw),
        }
    }
}

/// Accumulated true cost (negated reward) of every seeded evaluation episode.
pub fn evaluate_costs(
    actor: &mut dyn Actor,
    env: &Env,
    episodes: usize,
    horizon: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 || horizon == 0 {
        return Err(contract("evaluation needs at least one episode of at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|e| {
            let steps = run_episode(env, actor, horizon, window, &mut rng, None, e as u64, Provenance::default())?;
            Ok(-steps.iter().map(|t| t.reward).sum::<f64>())
        })
        .collect()
}

/// Mean accumulated true cost over seeded evaluation episodes.
pub fn evaluate_policy(
    actor: &mut dyn Actor,
    env: &Env,
    episodes: usize,
    horizon: usize,
    window: usize,
    seed: u64,
) -> Result<f64> {
    let costs = evaluate_costs(actor, env, episodes, horizon, window, seed)?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every member for `steps` deterministic steps from a seeded start and
/// returns the new transitions, tagged with `iteration` and the member index.
pub fn deploy(
    ensemble: &PolicyEnsemble,
    cfg: &IbrlConfig,
    normalizer: &Normalizer,
    iteration: u32,
    seed: u64,
) -> Result<(Batch, Vec<f64>, usize)> {
    let env = &cfg.env;
    let constraint = cfg.constraint()?;
    let mut out = Batch::new(env.id(), env.obs_dim(), env.action_dim(), cfg.window)?;
    let mut costs = Vec::with_capacity(ensemble.len());
    let mut recoveries = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, net) in ensemble.members.iter().enumerate() {
        let mut actor = PolicyActor::new(net.clone(), normalizer.clone(), constraint.clone());
        let tags = Provenance {
            iteration,
            policy: k as u32,
        };
        let steps = run_episode(env, &mut actor, cfg.deploy_steps, cfg.window, &mut rng, None, k as u64, tags)?;
        costs.push(-steps.iter().map(|t| t.reward).sum::<f64>());
        recoveries += actor.recoveries;
        for t in steps {
            out.push(t)?;
        }
    }
    Ok((out, costs, recoveries))
}

/// One row of the per-iteration report.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: u32,
    /// Model-predicted accumulated cost of each policy on the held-out starts.
    pub virtual_costs: Vec<f64>,
    /// True accumulated cost of each policy's deployment episode.
    pub deployed_costs: Vec<f64>,
    /// Seeded evaluation of policy 1.
    pub true_cost_mean: f64,
    pub true_cost_stderr: f64,
    pub diversity: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Range recoveries during training rollouts and deployment.
    pub recoveries: usize,
}

/// Result of one iteration.
#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub batch: Batch,
    pub report: IterationReport,
    pub ensemble: PolicyEnsemble,
    pub fitted: FittedModels,
    pub log: TrainingLog,
}

/// Refit models on the accumulated batch, train a fresh ensemble, deploy it
/// and append the new data.
pub fn run_iteration(batch: &Batch, cfg: &IbrlConfig, iteration: u32, seed: u64) -> Result<IterationOutcome> {
    if batch.is_empty() {
        return Err(contract("the accumulated batch is empty"));
    }
    if batch.window() != cfg.window || batch.env() != cfg.env.id() {
        return Err(contract("batch layout does not match the configuration"));
    }
    let it = u64::from(iteration);
    let fitted = fit_models(batch, cfg, derive_seed(seed, 1, it))?;
    let ensemble = PolicyEnsemble::seeded(
        batch.state_dim(),
        batch.action_dim(),
        &cfg.search.hidden,
        cfg.search.policies,
        derive_seed(seed, 3, it),
    )?;
    let (ensemble, log) = train_policies(batch, &fitted, ensemble, cfg, derive_seed(seed, 4, it))?;
    let (new, deployed_costs, deploy_rec) =
        deploy(&ensemble, cfg, &fitted.models.normalizer, iteration, derive_seed(seed, 5, it))?;
    let mut next = batch.clone();
    next.append(&new)?;

    let mut actor = PolicyActor::new(ensemble.first().clone(), fitted.models.normalizer.clone(), cfg.constraint()?);
    let costs = evaluate_costs(&mut actor, &cfg.env, cfg.eval.episodes, cfg.eval_horizon(), cfg.window, cfg.eval.seed)?;
    let (mean, stderr) = mean_and_stderr(&costs);
    let report = IterationReport {
        iteration,
        virtual_costs: log.virtual_costs.clone(),
        deployed_costs,
        true_cost_mean: mean,
        true_cost_stderr: stderr,
        diversity: log.final_diversity,
        batch_size: next.len(),
        epochs: log.epochs_run,
        recoveries: log.recoveries + deploy_rec + actor.recoveries,
    };
    Ok(IterationOutcome {
        batch: next,
        report,
        ensemble,
        fitted,
        log,
    })
}
