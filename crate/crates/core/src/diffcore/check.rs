use crate::error::{contract, Error, Result};

/// Central-difference gradient estimate of `f` at `params`.
///
/// Used as an oracle for the reverse-mode gradients; never on a training path.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(contract(format!("finite difference step must be > 0, got {step}")));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = finite(f(&p)?, i)?;
        p[i] = orig - step;
        let down = finite(f(&p)?, i)?;
        p[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

fn finite(v: f64, i: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "objective evaluated to {v} while perturbing coordinate {i}"
        )))
    }
}

/// Largest relative error between two gradients, with `floor` guarding
/// against division by near-zero magnitudes.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
