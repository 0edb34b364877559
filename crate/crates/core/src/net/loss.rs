use crate::error::{Error, Result};

/// Probabilities are clamped to [EPS, 1 − EPS] before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy of a predicted probability against a {0, 1} (or
/// soft) target.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d bce(sigmoid(z), target) / dz, evaluated from the probability.
pub fn bce_logit_grad(p: f64, target: f64) -> f64 {
    p - target
}

/// Smooth-L1 on a residual: `0.5·d²` when `|d| < 1`, else `|d| − 0.5`.
/// Returns the value and its derivative.
pub fn smooth_l1(diff: f64) -> (f64, f64) {
    if diff.abs() < 1.0 {
        (0.5 * diff * diff, diff)
    } else {
        (diff.abs() - 0.5, diff.signum())
    }
}

/// Cosine similarity with gradients `(cos, d/du, d/dv)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("cosine of {} vs {} dims", u.len(), v.len())));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::InvalidInput("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - cos * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / (nu * nv) - cos * b / (nv * nv))
        .collect();
    Ok((cos, du, dv))
}
