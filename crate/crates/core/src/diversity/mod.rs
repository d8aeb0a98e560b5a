//! Lock-step distances between trajectories and the set diversity measures
//! built from them.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{contract, Result};
use crate::rollout::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Lsed,
    MinLsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    L1,
}

/// Normalization of the ordered-pair sum in [`lsed_all`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNormalization {
    /// Divide by `K!`.
    Factorial,
    /// Divide by the number of ordered pairs, `K (K - 1)`.
    PairAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityConfig {
    pub measure: Measure,
    pub norm: Norm,
    pub alpha_d: f64,
    /// Leave the first (evaluation) policy out of the diversity pool.
    pub exclude_first: bool,
    pub normalization: PairNormalization,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            measure: Measure::MinLsed,
            norm: Norm::L2,
            alpha_d: 0.0,
            exclude_first: true,
            normalization: PairNormalization::Factorial,
        }
    }
}

impl DiversityConfig {
    pub fn violations(&self) -> Vec<String> {
        if self.alpha_d.is_finite() && self.alpha_d >= 0.0 {
            Vec::new()
        } else {
            vec![format!("diversity.alpha_d = {} must be finite and >= 0", self.alpha_d)]
        }
    }
}

fn norm_of(diff: impl Iterator<Item = f64>, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => diff.map(|x| x * x).sum::<f64>().sqrt(),
        Norm::L1 => diff.map(f64::abs).sum(),
    }
}

/// Mean over time of the norm of time-aligned state differences.
pub fn lsed_pair(a: &[Vec<f64>], b: &[Vec<f64>], norm: Norm) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract(format!(
            "lock-step distance needs equal non-zero horizons, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(contract("state dimensions differ"));
        }
        total += norm_of(x.iter().zip(y).map(|(p, q)| p - q), norm);
    }
    Ok(total / a.len() as f64)
}

fn factorial(k: usize) -> f64 {
    (2..=k).map(|i| i as f64).product()
}

/// Sum of [`lsed_pair`] over ordered pairs, divided by `K!` or by the pair count.
pub fn lsed_all(trajectories: &[Vec<Vec<f64>>], norm: Norm, normalization: PairNormalization) -> Result<f64> {
    let k = trajectories.len();
    if k < 2 {
        return Err(contract(format!("lsed_all needs at least 2 trajectories, got {k}")));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += lsed_pair(&trajectories[i], &trajectories[j], norm)?;
            }
        }
    }
    Ok(total / pair_divisor(k, normalization))
}

fn pair_divisor(k: usize, normalization: PairNormalization) -> f64 {
    match normalization {
        PairNormalization::Factorial => factorial(k),
        PairNormalization::PairAverage => (k * (k - 1)) as f64,
    }
}

/// `(1/H)` times the smallest pairwise [`lsed_pair`].
pub fn min_lsed(trajectories: &[Vec<Vec<f64>>], norm: Norm) -> Result<f64> {
    let k = trajectories.len();
    if k < 2 {
        return Err(contract(format!("min_lsed needs at least 2 trajectories, got {k}")));
    }
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            best = best.min(lsed_pair(&trajectories[i], &trajectories[j], norm)?);
        }
    }
    Ok(best / trajectories[0].len() as f64)
}

fn graph_row_norm(g: &mut Graph, a: Var, norm: Norm) -> Var {
    match norm {
        Norm::L2 => g.row_norm_l2(a),
        Norm::L1 => g.row_norm_l1(a),
    }
}

/// Row-wise lock-step distance between two state sequences, `[rows, 1]`.
pub fn graph_lsed_pair(g: &mut Graph, a: &[Var], b: &[Var], norm: Norm) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract("lock-step distance needs equal non-zero horizons"));
    }
    let mut total = None;
    for (&x, &y) in a.iter().zip(b) {
        let d = g.sub(x, y);
        let n = graph_row_norm(g, d, norm);
        total = Some(match total {
            None => n,
            Some(t) => g.add(t, n),
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / a.len() as f64))
}

/// Row-wise [`lsed_all`] over state sequences.
pub fn graph_lsed_all(g: &mut Graph, sets: &[&[Var]], norm: Norm, normalization: PairNormalization) -> Result<Var> {
    let k = sets.len();
    if k < 2 {
        return Err(contract("lsed_all needs at least 2 trajectories"));
    }
    let mut total = None;
    for i in 0..k {
        for j in i + 1..k {
            let d = graph_lsed_pair(g, sets[i], sets[j], norm)?;
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d),
            });
        }
    }
    // Each unordered pair appears twice in the ordered sum.
    Ok(g.scale(total.unwrap(), 2.0 / pair_divisor(k, normalization)))
}

/// Row-wise [`min_lsed`]. Ties send the gradient to the first pair in
/// lexicographic order.
pub fn graph_min_lsed(g: &mut Graph, sets: &[&[Var]], norm: Norm) -> Result<Var> {
    let k = sets.len();
    if k < 2 {
        return Err(contract("min_lsed needs at least 2 trajectories"));
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            pairs.push(graph_lsed_pair(g, sets[i], sets[j], norm)?);
        }
    }
    let all = if pairs.len() == 1 { pairs[0] } else { g.concat_cols(&pairs) };
    let m = g.row_min(all);
    Ok(g.scale(m, 1.0 / sets[0].len() as f64))
}

/// Diversity of the policy pool's state trajectories, averaged over start
/// states. `None` when the pool has fewer than two members.
pub fn diversity_term(g: &mut Graph, trajectories: &[Trajectory], cfg: &DiversityConfig) -> Result<Option<Var>> {
    let skip = usize::from(cfg.exclude_first);
    let pool: Vec<&[Var]> = trajectories.iter().skip(skip).map(|t| t.states.as_slice()).collect();
    if pool.len() < 2 {
        return Ok(None);
    }
    let per_row = match cfg.measure {
        Measure::MinLsed => graph_min_lsed(g, &pool, cfg.norm)?,
        Measure::Lsed => graph_lsed_all(g, &pool, cfg.norm, cfg.normalization)?,
    };
    Ok(Some(g.mean(per_row)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset(h: usize, dx: f64, dy: f64) -> Vec<Vec<f64>> {
        (0..h).map(|t| vec![t as f64 + dx, dy]).collect()
    }

    #[test]
    fn pair_examples() {
        let a = offset(4, 0.0, 0.0);
        assert_eq!(lsed_pair(&a, &a, Norm::L2).unwrap(), 0.0);
        let b = offset(4, 3.0, 4.0);
        assert_eq!(lsed_pair(&a, &b, Norm::L2).unwrap(), 5.0);
        assert_eq!(lsed_pair(&a, &b, Norm::L1).unwrap(), 7.0);
        assert!(lsed_pair(&a, &offset(3, 0.0, 0.0), Norm::L2).is_err());
    }

    /// Three one-dimensional trajectories at 0, 5 and 7 give pairwise
    /// distances 5, 7 and 2.
    fn triple(h: usize) -> Vec<Vec<Vec<f64>>> {
        [0.0, 5.0, 7.0]
            .iter()
            .map(|&x| vec![vec![x]; h])
            .collect()
    }

    #[test]
    fn set_examples() {
        let two = vec![offset(3, 0.0, 0.0), offset(3, 3.0, 4.0)];
        assert_eq!(lsed_all(&two, Norm::L2, PairNormalization::Factorial).unwrap(), 5.0);
        let t = triple(2);
        let all = lsed_all(&t, Norm::L2, PairNormalization::Factorial).unwrap();
        assert!((all - 28.0 / 6.0).abs() < 1e-12);
        assert_eq!(min_lsed(&t, Norm::L2).unwrap(), 1.0);
        let same = vec![offset(3, 1.0, 1.0); 4];
        assert_eq!(min_lsed(&same, Norm::L2).unwrap(), 0.0);
        assert_eq!(lsed_all(&same, Norm::L1, PairNormalization::Factorial).unwrap(), 0.0);
        assert!(min_lsed(&two[..1], Norm::L2).is_err());
        assert!(lsed_all(&two[..1], Norm::L2, PairNormalization::Factorial).is_err());
    }

    #[test]
    fn pair_average_option() {
        let t = triple(2);
        let avg = lsed_all(&t, Norm::L2, PairNormalization::PairAverage).unwrap();
        assert!((avg - 28.0 / 6.0).abs() < 1e-12);
        let mut four = triple(2);
        four.push(vec![vec![0.0]; 2]);
        let f = lsed_all(&four, Norm::L2, PairNormalization::Factorial).unwrap();
        let p = lsed_all(&four, Norm::L2, PairNormalization::PairAverage).unwrap();
        assert!((f * 24.0 - p * 12.0).abs() < 1e-12);
    }

    #[test]
    fn graph_versions_match() {
        let t = triple(3);
        let mut g = Graph::new();
        let vars: Vec<Vec<Var>> = t
            .iter()
            .map(|tr| tr.iter().map(|s| g.constant(1, 1, s.clone())).collect())
            .collect();
        let sets: Vec<&[Var]> = vars.iter().map(|v| v.as_slice()).collect();
        let m = graph_min_lsed(&mut g, &sets, Norm::L2).unwrap();
        assert_eq!(g.value(m)[0], min_lsed(&t, Norm::L2).unwrap());
        let a = graph_lsed_all(&mut g, &sets, Norm::L1, PairNormalization::Factorial).unwrap();
        let plain = lsed_all(&t, Norm::L1, PairNormalization::Factorial).unwrap();
        assert!((g.value(a)[0] - plain).abs() < 1e-12);
    }
}
