//! Logit-space losses. Each `*_grad` returns the value and its gradient with
//! respect to the logits.

use crate::autodiff::softmax;
use crate::error::{Error, Result};

const DLR_FLOOR: f64 = 1e-12;

/// Largest logit other than `y`; ties go to the smallest index.
pub fn runner_up(z: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in z.iter().enumerate() {
        if i != y && (best == usize::MAX || v > z[best]) {
            best = i;
        }
    }
    best
}

/// Indices of `z` sorted by decreasing value, ties by index.
fn ranking(z: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx
}

pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    cross_entropy_grad(z, y).0
}

pub fn cross_entropy_grad(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut p = softmax(z);
    p[y] -= 1.0;
    (lse - z[y], p)
}

/// `max(z_y − max_{i≠y} z_i, −κ)`.
pub fn cw_margin_loss(z: &[f64], y: usize, kappa: f64) -> f64 {
    let j = runner_up(z, y);
    (z[y] - z[j]).max(-kappa)
}

pub fn cw_margin_grad(z: &[f64], y: usize, kappa: f64) -> (f64, Vec<f64>) {
    let j = runner_up(z, y);
    let m = z[y] - z[j];
    let mut g = vec![0.0; z.len()];
    if m > -kappa {
        g[y] = 1.0;
        g[j] = -1.0;
    }
    (m.max(-kappa), g)
}

fn require_three(z: &[f64]) -> Result<()> {
    if z.len() < 3 {
        return Err(Error::UnsupportedLoss(format!(
            "DLR needs at least 3 classes, model has {}",
            z.len()
        )));
    }
    Ok(())
}

/// `−(z_y − max_{i≠y} z_i) / (z_π1 − z_π3)` with the denominator floored.
pub fn dlr_loss(z: &[f64], y: usize) -> Result<f64> {
    Ok(dlr_grad(z, y)?.0)
}

pub fn dlr_grad(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    require_three(z)?;
    let pi = ranking(z);
    let j = runner_up(z, y);
    let m = z[y] - z[j];
    let raw = z[pi[0]] - z[pi[2]];
    let d = raw.max(DLR_FLOOR);
    let mut g = vec![0.0; z.len()];
    g[y] -= 1.0 / d;
    g[j] += 1.0 / d;
    if raw > DLR_FLOOR {
        g[pi[0]] += m / (d * d);
        g[pi[2]] -= m / (d * d);
    }
    Ok((-m / d, g))
}

/// Targeted DLR `−(z_y − z_t) / (z_π1 − (z_π3 + z_π4)/2)`; with three
/// classes the denominator falls back to `z_π1 − z_π3`.
pub fn dlr_targeted_grad(z: &[f64], y: usize, target: usize) -> Result<(f64, Vec<f64>)> {
    require_three(z)?;
    let pi = ranking(z);
    let m = z[y] - z[target];
    let mut g = vec![0.0; z.len()];
    let (raw, tail): (f64, Vec<(usize, f64)>) = if z.len() >= 4 {
        (
            z[pi[0]] - 0.5 * (z[pi[2]] + z[pi[3]]),
            vec![(pi[2], 0.5), (pi[3], 0.5)],
        )
    } else {
        (z[pi[0]] - z[pi[2]], vec![(pi[2], 1.0)])
    };
    let d = raw.max(DLR_FLOOR);
    g[y] -= 1.0 / d;
    g[target] += 1.0 / d;
    if raw > DLR_FLOOR {
        g[pi[0]] += m / (d * d);
        for (i, w) in tail {
            g[i] -= w * m / (d * d);
        }
    }
    Ok((-m / d, g))
}
