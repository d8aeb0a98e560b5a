use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mlp_init, Head, NetHandle, Network, SIGMA_FLOOR};
use crate::diffcore::{adam_step, collect, AdamConfig, Graph, OptimState, Var};
use crate::envs::{Batch, Normalizer};
use crate::error::{contract, Error, Result};

/// Supervised training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Fraction of samples held out for early stopping.
    pub validation_split: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 500,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            validation_split: 0.1,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    /// Mean training loss of every epoch that ran.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub best_validation_loss: Option<f64>,
}

type LossFn = fn(&mut Graph, &Network, &NetHandle, Var, Var) -> Var;

fn mse_loss(g: &mut Graph, net: &Network, h: &NetHandle, x: Var, y: Var) -> Var {
    let pred = net.graph_forward(g, h, x);
    let d = g.sub(pred, y);
    let sq = g.square(d);
    g.mean(sq)
}

/// Mean over samples of the diagonal Gaussian negative log-likelihood
/// (constant term dropped).
fn gaussian_nll(g: &mut Graph, net: &Network, h: &NetHandle, x: Var, y: Var) -> Var {
    let (mean, sigma) = net.graph_gaussian(g, h, x);
    let d = g.sub(y, mean);
    let z = g.div(d, sigma);
    let z2 = g.square(z);
    let half = g.scale(z2, 0.5);
    let log_sigma = g.ln(sigma);
    let per = g.add(half, log_sigma);
    let total = g.sum(per);
    let rows = g.shape(x).rows as f64;
    g.scale(total, 1.0 / rows)
}

fn check_data(net: &Network, inputs: &[Vec<f64>], targets: &[Vec<f64>], target_dim: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(contract("cannot fit on an empty dataset"));
    }
    if inputs.len() != targets.len() {
        return Err(contract(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != net.input_dim()) {
        return Err(contract(format!(
            "input width {} does not match network input {}",
            bad.len(),
            net.input_dim()
        )));
    }
    if let Some(bad) = targets.iter().find(|y| y.len() != target_dim) {
        return Err(contract(format!(
            "target width {} does not match expected {target_dim}",
            bad.len()
        )));
    }
    Ok(())
}

fn gather(rows: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| rows[i].iter().copied()).collect()
}

fn batch_loss(
    net: &Network,
    loss: LossFn,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    idx: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let h = net.register(&mut g, want_grad);
    let x = g.constant(idx.len(), net.input_dim(), gather(inputs, idx));
    let y = g.constant(idx.len(), targets[0].len(), gather(targets, idx));
    let l = loss(&mut g, net, &h, x, y);
    let value = g.scalar_value(l);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss became {value}")));
    }
    let grad = if want_grad {
        Some(collect(&g.backward(l)?, h.params()))
    } else {
        None
    };
    Ok((value, grad))
}

fn evaluate(net: &Network, loss: LossFn, inputs: &[Vec<f64>], targets: &[Vec<f64>], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        let (l, _) = batch_loss(net, loss, inputs, targets, chunk, false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

fn train(
    mut net: Network,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &FitConfig,
    loss: LossFn,
) -> Result<(Network, FitReport)> {
    if cfg.batch_size == 0 {
        return Err(contract("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * cfg.validation_split).floor() as usize;
    let n_val = if n_val >= n { 0 } else { n_val };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut report = FitReport::default();
    let mut opt = OptimState::new(net.param_count(), cfg.optimizer);
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;

    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (l, grad) = batch_loss(&net, loss, inputs, targets, chunk, true)?;
            adam_step(&mut opt, net.params_mut().values_mut(), &grad.unwrap())?;
            sum += l * chunk.len() as f64;
        }
        let epoch_loss = sum / train_idx.len() as f64;
        report.epoch_losses.push(epoch_loss);
        report.epochs_run += 1;

        let monitor = if val_idx.is_empty() {
            epoch_loss
        } else {
            evaluate(&net, loss, inputs, targets, &val_idx)?
        };
        match &best {
            Some((b, _)) if monitor >= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    report.early_stopped = true;
                    break;
                }
            }
            _ => {
                best = Some((monitor, net.clone()));
                since_best = 0;
            }
        }
    }
    if let Some((b, best_net)) = best {
        report.best_validation_loss = (!val_idx.is_empty()).then_some(b);
        net = best_net;
    }
    report.final_loss = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((net, report))
}

/// Mean-squared-error regression with Adam and validation early stopping.
/// The returned network is the best one seen on the validation split.
pub fn fit_regression(
    net: Network,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<(Network, FitReport)> {
    if matches!(net.head(), Head::Gaussian { .. }) {
        return Err(contract("fit_regression needs a linear or bounded head"));
    }
    check_data(&net, inputs, targets, net.output_dim())?;
    train(net, inputs, targets, cfg, mse_loss)
}

/// Gaussian negative log-likelihood fit of a gaussian-head network.
pub fn fit_gaussian(
    net: Network,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<(Network, FitReport)> {
    if !matches!(net.head(), Head::Gaussian { .. }) {
        return Err(contract("fit_gaussian needs a gaussian head"));
    }
    check_data(&net, inputs, targets, net.output_dim() / 2)?;
    train(net, inputs, targets, cfg, gaussian_nll)
}

/// Fits the state-conditioned Gaussian behavior policy on the batch's
/// normalized history states and recorded actions.
pub fn fit_behavior_policy(
    batch: &Batch,
    normalizer: &Normalizer,
    hidden: &[usize],
    cfg: &FitConfig,
) -> Result<(Network, FitReport)> {
    if batch.is_empty() {
        return Err(contract("cannot fit a behavior policy on an empty batch"));
    }
    let inputs: Vec<Vec<f64>> = batch
        .transitions()
        .iter()
        .map(|t| normalizer.normalize_history(&t.state))
        .collect();
    let targets: Vec<Vec<f64>> = batch.transitions().iter().map(|t| t.action.clone()).collect();
    let mut sizes = vec![inputs[0].len()];
    sizes.extend_from_slice(hidden);
    sizes.push(2 * batch.action_dim());
    let net = mlp_init(
        &sizes,
        Head::Gaussian {
            sigma_floor: SIGMA_FLOOR,
        },
        cfg.seed,
    )?;
    fit_gaussian(net, &inputs, &targets, cfg)
}
