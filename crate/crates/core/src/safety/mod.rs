//! Behavior-deviation objective, likelihood soft constraint and the
//! constrained policy.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::envs::LinearEffects;
use crate::error::{contract, Result};
use crate::nets::{NetHandle, Network};
use crate::rollout::{check_horizons, Trajectory};

/// The safety mechanism used during policy search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SafetySpec {
    /// Trade reward (weight `lambda`) against distance to the behavior mean.
    Objective { lambda: f64 },
    /// Penalize actions outside the behavior policy's likelihood zone.
    SoftConstraint {
        #[serde(default = "default_alpha_s")]
        alpha_s: f64,
        #[serde(default = "default_delta")]
        delta: f64,
    },
    /// Remap policy outputs so the linearly steered state columns stay in
    /// `bounds` after every step.
    ConstrainedPolicy {
        #[serde(default = "default_bounds")]
        bounds: [f64; 2],
        #[serde(default = "default_action_bounds")]
        action_bounds: [f64; 2],
        /// Per-action effect on its state column; the environment's own
        /// coefficients when absent.
        #[serde(default)]
        coefficients: Option<Vec<f64>>,
    },
}

fn default_alpha_s() -> f64 {
    20.0
}

fn default_delta() -> f64 {
    0.5
}

fn default_bounds() -> [f64; 2] {
    [30.0, 70.0]
}

fn default_action_bounds() -> [f64; 2] {
    [-1.0, 1.0]
}

impl Default for SafetySpec {
    fn default() -> Self {
        SafetySpec::SoftConstraint {
            alpha_s: default_alpha_s(),
            delta: default_delta(),
        }
    }
}

impl SafetySpec {
    /// Every range violation, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            SafetySpec::Objective { lambda } => {
                if !(0.0..=1.0).contains(lambda) {
                    v.push(format!("safety.lambda = {lambda} must lie in [0, 1]"));
                }
            }
            SafetySpec::SoftConstraint { alpha_s, delta } => {
                if !(*alpha_s >= 0.0 && alpha_s.is_finite()) {
                    v.push(format!("safety.alpha_s = {alpha_s} must be finite and >= 0"));
                }
                if !(0.0..=1.0).contains(delta) {
                    v.push(format!("safety.delta = {delta} must lie in [0, 1]"));
                }
            }
            SafetySpec::ConstrainedPolicy {
                bounds,
                action_bounds,
                coefficients,
            } => {
                if !(bounds[0] < bounds[1]) {
                    v.push(format!("safety.bounds {bounds:?} must satisfy B1 < B2"));
                }
                if !(action_bounds[0] < action_bounds[1]) {
                    v.push(format!(
                        "safety.action_bounds {action_bounds:?} must satisfy lower < upper"
                    ));
                }
                if let Some(c) = coefficients {
                    if c.iter().any(|w| *w == 0.0 || !w.is_finite()) {
                        v.push("safety.coefficients must be finite and non-zero".to_string());
                    }
                }
            }
        }
        v
    }

    /// The per-step action remapping, for the constrained-policy variant.
    pub fn action_constraint(&self, effects: &LinearEffects) -> Result<Option<ActionConstraint>> {
        let SafetySpec::ConstrainedPolicy {
            bounds,
            action_bounds,
            coefficients,
        } = self
        else {
            return Ok(None);
        };
        let coefficients = coefficients.clone().unwrap_or_else(|| effects.coefficients.clone());
        if coefficients.len() != effects.dims.len() {
            return Err(contract(format!(
                "{} constraint coefficients for {} steered columns",
                coefficients.len(),
                effects.dims.len()
            )));
        }
        Ok(Some(ActionConstraint {
            bounds: *bounds,
            action_bounds: *action_bounds,
            dims: effects.dims.clone(),
            coefficients,
        }))
    }
}

/// `||a - a_beta||_2`.
pub fn behavior_penalty(a: &[f64], a_beta: &[f64]) -> Result<f64> {
    if a.len() != a_beta.len() {
        return Err(contract(format!(
            "action has {} components, behavior action {}",
            a.len(),
            a_beta.len()
        )));
    }
    Ok(a.iter()
        .zip(a_beta)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Negated geometric mean of the per-dimension unnormalized Gaussian
/// likelihood factors. Lies in `[-1, 0)`; the factor is floored at the
/// smallest normal float so far-away actions never round to zero.
pub fn geo_mean_penalty(a: &[f64], mean: &[f64], sigma: &[f64]) -> Result<f64> {
    if a.len() != mean.len() || a.len() != sigma.len() || a.is_empty() {
        return Err(contract("action, mean and sigma must share a positive length"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(contract(format!("sigma {s} must be positive")));
    }
    let q: f64 = a
        .iter()
        .zip(mean.iter().zip(sigma))
        .map(|(x, (m, s))| ((x - m) / s).powi(2))
        .sum();
    Ok(-(-0.5 * q / a.len() as f64).exp().max(f64::MIN_POSITIVE))
}

/// `max(G + delta, 0)`, with derivative 0 at the kink.
pub fn soft_zone_term(g: f64, delta: f64) -> f64 {
    (g + delta).max(0.0)
}

fn reaches(s: f64, w: f64, a: f64, bounds: [f64; 2]) -> bool {
    let next = s + w * a;
    next >= bounds[0] && next <= bounds[1]
}

/// Actions in `action_bounds` whose linear effect `s + w * a` stays in
/// `bounds`, as a closed interval. The endpoints are checked in floating
/// point, so every action inside the returned interval keeps the bound
/// exactly. `None` when no such action exists.
pub fn valid_action_range(s: f64, w: f64, bounds: [f64; 2], action_bounds: [f64; 2]) -> Option<(f64, f64)> {
    if !(s.is_finite() && w.is_finite()) || w == 0.0 {
        return None;
    }
    let t1 = (bounds[0] - s) / w;
    let t2 = (bounds[1] - s) / w;
    let mut lo = t1.min(t2).max(action_bounds[0]);
    let mut hi = t1.max(t2).min(action_bounds[1]);
    for _ in 0..64 {
        if lo > hi || reaches(s, w, lo, bounds) {
            break;
        }
        lo = lo.next_up();
    }
    for _ in 0..64 {
        if lo > hi || reaches(s, w, hi, bounds) {
            break;
        }
        hi = hi.next_down();
    }
    (lo <= hi && reaches(s, w, lo, bounds) && reaches(s, w, hi, bounds)).then_some((lo, hi))
}

/// Action bound whose effect lands closest to `bounds`; ties go to the lower.
fn recovery_action(s: f64, w: f64, bounds: [f64; 2], action_bounds: [f64; 2]) -> f64 {
    let miss = |a: f64| {
        let n = s + w * a;
        (bounds[0] - n).max(n - bounds[1]).max(0.0)
    };
    if miss(action_bounds[1]) < miss(action_bounds[0]) {
        action_bounds[1]
    } else {
        action_bounds[0]
    }
}

/// Clamps `a` into the valid range. Returns the recovery action and `true`
/// when the range is empty.
pub fn clip_to_valid_range(s: f64, w: f64, bounds: [f64; 2], action_bounds: [f64; 2], a: f64) -> (f64, bool) {
    match valid_action_range(s, w, bounds, action_bounds) {
        Some((lo, hi)) => (a.clamp(lo, hi), false),
        None => (recovery_action(s, w, bounds, action_bounds), true),
    }
}

/// Constrained-policy remapping for every steered state column.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionConstraint {
    pub bounds: [f64; 2],
    pub action_bounds: [f64; 2],
    /// Observation column steered by each action component.
    pub dims: Vec<usize>,
    pub coefficients: Vec<f64>,
}

impl ActionConstraint {
    /// Maps `raw` affinely onto `[a_min, a_max]` for one column.
    pub fn constrain_one(&self, i: usize, raw: f64, s: f64) -> (f64, bool) {
        let w = self.coefficients[i];
        let [al, au] = self.action_bounds;
        match valid_action_range(s, w, self.bounds, self.action_bounds) {
            Some((lo, hi)) => {
                let a = lo + (hi - lo) * (raw - al) / (au - al);
                (a.clamp(lo, hi), false)
            }
            None => (recovery_action(s, w, self.bounds, self.action_bounds), true),
        }
    }

    /// Constrains a full action given the current observation. Returns the
    /// action and the number of columns that needed recovery.
    pub fn constrain_action(&self, raw: &[f64], obs: &[f64]) -> Result<(Vec<f64>, usize)> {
        if raw.len() != self.dims.len() {
            return Err(contract(format!(
                "raw action has {} components, constraint expects {}",
                raw.len(),
                self.dims.len()
            )));
        }
        let mut out = Vec::with_capacity(raw.len());
        let mut recoveries = 0;
        for (i, (&r, &d)) in raw.iter().zip(&self.dims).enumerate() {
            let s = *obs
                .get(d)
                .ok_or_else(|| contract(format!("observation has no column {d}")))?;
            let (a, rec) = self.constrain_one(i, r, s);
            out.push(a);
            recoveries += rec as usize;
        }
        Ok((out, recoveries))
    }

    /// Graph form over `[rows, A]` raw actions and `[rows, A]` current values
    /// of the steered columns. The gradient is that of the affine map; the
    /// value is the exactly verified one from [`Self::constrain_action`].
    pub fn graph_constrain(&self, g: &mut Graph, raw: Var, steered: Var) -> (Var, usize) {
        let shape = g.shape(raw);
        let [b1, b2] = self.bounds;
        let [al, au] = self.action_bounds;
        let inv_w = g.constant(1, shape.cols, self.coefficients.iter().map(|w| 1.0 / w).collect());
        let neg = g.neg(steered);
        let d1 = g.add_scalar(neg, b1);
        let d2 = g.add_scalar(neg, b2);
        let t1 = g.mul(d1, inv_w);
        let t2 = g.mul(d2, inv_w);
        let low = g.minimum(t1, t2);
        let high = g.maximum(t1, t2);
        let a_min = g.max_scalar(low, al);
        let a_max = g.min_scalar(high, au);
        let width = g.sub(a_max, a_min);
        let frac = g.add_scalar(raw, -al);
        let frac = g.scale(frac, 1.0 / (au - al));
        let span = g.mul(width, frac);
        let mapped = g.add(a_min, span);

        let raw_v = g.value(raw).to_vec();
        let s_v = g.value(steered).to_vec();
        let mut exact = Vec::with_capacity(raw_v.len());
        let mut recoveries = 0;
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let k = r * shape.cols + c;
                let (a, rec) = self.constrain_one(c, raw_v[k], s_v[k]);
                exact.push(a);
                recoveries += rec as usize;
            }
        }
        (g.straight_through(mapped, exact), recoveries)
    }
}

/// Row-wise `||a - mu||_2` as `[rows, 1]`.
pub fn graph_behavior_penalty(g: &mut Graph, a: Var, mu: Var) -> Var {
    let d = g.sub(a, mu);
    g.row_norm_l2(d)
}

/// Row-wise geometric-mean likelihood penalty as `[rows, 1]`.
pub fn graph_geo_mean_penalty(g: &mut Graph, a: Var, mu: Var, sigma: Var) -> Var {
    let dim = g.shape(a).cols as f64;
    let d = g.sub(a, mu);
    let z = g.div(d, sigma);
    let z2 = g.square(z);
    let q = g.sum_cols(z2);
    let e = g.scale(q, -0.5 / dim);
    let e = g.exp(e);
    g.neg(e)
}

/// Row-wise `max(G + delta, 0)`.
pub fn graph_soft_zone_term(g: &mut Graph, geo: Var, delta: f64) -> Var {
    let shifted = g.add_scalar(geo, delta);
    g.max_scalar(shifted, 0.0)
}

/// `(1/(N K H)) sum [-gamma^t lambda e + (1 - lambda) ||a - mu_beta||]`,
/// the penalty left undiscounted.
pub fn safety_objective_loss(
    g: &mut Graph,
    trajectories: &[Trajectory],
    behavior: &Network,
    bh: &NetHandle,
    lambda: f64,
    gamma: f64,
    horizon: usize,
) -> Result<Var> {
    let rows = check_horizons(g, trajectories, horizon)?;
    let mut terms = Vec::new();
    for traj in trajectories {
        for (t, (&s, (&a, &e))) in traj
            .states
            .iter()
            .zip(traj.actions.iter().zip(&traj.rewards))
            .enumerate()
        {
            let (mu, _) = behavior.graph_gaussian(g, bh, s);
            let p = graph_behavior_penalty(g, a, mu);
            let p = g.scale(p, 1.0 - lambda);
            let r = g.scale(e, -gamma.powi(t as i32 + 1) * lambda);
            let both = g.add(r, p);
            terms.push(g.sum(both));
        }
    }
    Ok(scaled_total(g, &terms, 1.0 / (rows * trajectories.len() * horizon) as f64))
}

/// `alpha_s (1/(N K H)) sum max(G(s, a) + delta, 0)`.
pub fn soft_constraint_loss(
    g: &mut Graph,
    trajectories: &[Trajectory],
    behavior: &Network,
    bh: &NetHandle,
    alpha_s: f64,
    delta: f64,
    horizon: usize,
) -> Result<Var> {
    let rows = check_horizons(g, trajectories, horizon)?;
    let mut terms = Vec::new();
    for traj in trajectories {
        for (&s, &a) in traj.states.iter().zip(&traj.actions) {
            let (mu, sigma) = behavior.graph_gaussian(g, bh, s);
            let geo = graph_geo_mean_penalty(g, a, mu, sigma);
            let zone = graph_soft_zone_term(g, geo, delta);
            terms.push(g.sum(zone));
        }
    }
    Ok(scaled_total(g, &terms, alpha_s / (rows * trajectories.len() * horizon) as f64))
}

pub(crate) fn scaled_total(g: &mut Graph, terms: &[Var], factor: f64) -> Var {
    let Some((&first, rest)) = terms.split_first() else {
        return g.scalar(0.0);
    };
    let total = rest.iter().fold(first, |acc, &t| g.add(acc, t));
    g.scale(total, factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surrogate_constraint() -> ActionConstraint {
        ActionConstraint {
            bounds: [30.0, 70.0],
            action_bounds: [-1.0, 1.0],
            dims: vec![1, 2, 3],
            coefficients: vec![1.0, 10.0, 5.75],
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(behavior_penalty(&[0.2, 0.3], &[0.2, 0.3]).unwrap(), 0.0);
        assert_eq!(behavior_penalty(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(behavior_penalty(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(behavior_penalty(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn geo_mean_examples() {
        assert_eq!(geo_mean_penalty(&[0.3, -0.2], &[0.3, -0.2], &[0.5, 0.1]).unwrap(), -1.0);
        let g = geo_mean_penalty(&[0.7, 0.0], &[0.2, 0.0], &[0.5, 0.3]).unwrap();
        assert!((g + (-0.25f64).exp()).abs() < 1e-15);
        assert!((g + 0.7788).abs() < 1e-4);
        let far = geo_mean_penalty(&[1e3, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(far, -f64::MIN_POSITIVE);
        assert!(geo_mean_penalty(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn soft_zone_examples() {
        assert_eq!(soft_zone_term(-1.0, 0.5), 0.0);
        assert!((soft_zone_term(-0.2, 0.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn constrain_examples() {
        let c = surrogate_constraint();
        assert_eq!(c.constrain_one(1, 0.5, 50.0), (0.5, false));
        assert_eq!(c.constrain_one(1, 1.0, 65.0), (0.5, false));
        assert_eq!(valid_action_range(65.0, 10.0, [30.0, 70.0], [-1.0, 1.0]), Some((-1.0, 0.5)));
        assert_eq!(c.constrain_one(1, -1.0, 65.0), (-1.0, false));
        assert_eq!(c.constrain_one(0, -1.0, 30.4), (30.0 - 30.4, false));
    }

    #[test]
    fn recovery_moves_toward_violated_bound() {
        let c = surrogate_constraint();
        assert_eq!(c.constrain_one(0, 1.0, 75.0), (-1.0, true));
        assert_eq!(c.constrain_one(0, -1.0, 20.0), (1.0, true));
        let neg = ActionConstraint {
            coefficients: vec![-1.0, 10.0, 5.75],
            ..surrogate_constraint()
        };
        assert_eq!(neg.constrain_one(0, 0.0, 75.0), (1.0, true));
    }

    #[test]
    fn negative_coefficient_range() {
        let r = valid_action_range(65.0, -10.0, [30.0, 70.0], [-1.0, 1.0]).unwrap();
        assert_eq!(r, (-0.5, 1.0));
    }

    #[test]
    fn graph_constrain_matches_plain_and_has_affine_gradient() {
        let c = surrogate_constraint();
        let mut g = Graph::new();
        let raw = g.leaf(2, 3, vec![0.5, 1.0, -0.3, -1.0, 0.2, 0.9]);
        let s = g.constant(2, 3, vec![50.0, 65.0, 40.0, 30.5, 50.0, 69.0]);
        let (out, rec) = c.graph_constrain(&mut g, raw, s);
        assert_eq!(rec, 0);
        let obs0 = [50.0, 50.0, 65.0, 40.0];
        let obs1 = [50.0, 30.5, 50.0, 69.0];
        let (p0, _) = c.constrain_action(&[0.5, 1.0, -0.3], &obs0).unwrap();
        let (p1, _) = c.constrain_action(&[-1.0, 0.2, 0.9], &obs1).unwrap();
        assert_eq!(&g.value(out)[..3], &p0[..]);
        assert_eq!(&g.value(out)[3..], &p1[..]);
        let total = g.sum(out);
        let grads = g.backward(total).unwrap();
        let d = grads.wrt(raw);
        // Unconstrained column: identity map.
        assert!((d[0] - 1.0).abs() < 1e-12);
        // s = 65, w = 10: range [-1, 0.5], slope 0.75.
        assert!((d[1] - 0.75).abs() < 1e-12);
    }
}
