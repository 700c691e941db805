//! Fast adaptive boundary attack (untargeted).
//!
//! Each iteration linearizes the classifier at the current point, picks the
//! closest linearized decision boundary, and projects both the current point
//! and the original input onto it under the box constraint. The next point is
//! a convex combination biased towards the original input. The smallest
//! misclassifying perturbation seen is kept and finally clipped into the
//! threat ball.

use serde::{Deserialize, Serialize};

use super::engine::sign;
use super::{finish, AttackConfig, Classifier, Norm, Raw, SampleOutcome, ThreatModel};
use crate::error::{Error, Result};
use crate::heads::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FabParams {
    /// Upper bound on the weight of the projection of the original input.
    pub alpha_max: f64,
    /// Overshoot factor applied to both projections.
    pub eta: f64,
    /// Interpolation towards the input after a successful step.
    pub beta: f64,
}

impl Default for FabParams {
    fn default() -> Self {
        Self {
            alpha_max: 0.1,
            eta: 1.05,
            beta: 0.9,
        }
    }
}

/// One FAB iteration: the candidate point, the boundary it aimed for and
/// whether it is misclassified.
#[derive(Debug, Clone, PartialEq)]
pub struct FabStep {
    pub point: Vec<f64>,
    pub target: usize,
    pub adversarial: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum-norm `δ` with `w·δ = r` and `lo ≤ δ ≤ hi` (or the closest
/// reachable point when the box forbids equality).
pub fn box_hyperplane(w: &[f64], r: f64, lo: &[f64], hi: &[f64], norm: Norm) -> Vec<f64> {
    let n = w.len();
    if r == 0.0 {
        return vec![0.0; n];
    }
    let s = sign(r);
    let dir: Vec<f64> = match norm {
        Norm::Linf => w.iter().map(|v| sign(*v) * s).collect(),
        Norm::L2 => w.iter().map(|v| v * s).collect(),
    };
    let gain = s * dot(w, &dir);
    if gain <= 0.0 {
        return vec![0.0; n];
    }
    let at = |tau: f64| -> Vec<f64> {
        (0..n)
            .map(|i| (tau * dir[i]).clamp(lo[i], hi[i]))
            .collect()
    };
    let target = r.abs();
    let tau0 = target / gain;
    let free: Vec<f64> = dir.iter().map(|d| tau0 * d).collect();
    if free.iter().zip(lo).zip(hi).all(|((d, l), h)| d >= l && d <= h) {
        return free;
    }
    let reach = |tau: f64| s * dot(w, &at(tau));
    let min_dir = dir.iter().filter(|d| **d != 0.0).fold(f64::INFINITY, |m, d| m.min(d.abs()));
    let cap = 1.0 / min_dir;
    if reach(cap) < target {
        return at(cap);
    }
    let (mut a, mut b) = (tau0, cap);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if reach(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    at(b)
}

fn dual(norm: Norm, v: &[f64]) -> f64 {
    match norm {
        Norm::Linf => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => Norm::L2.of(v),
    }
}

/// Runs FAB and returns every iterate along with the final raw result.
pub fn fab_trace(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<(Vec<FabStep>, SampleOutcome)> {
    super::check_input(model, x, y)?;
    let p = cfg.fab;
    if !(p.alpha_max >= 0.0 && p.alpha_max <= 1.0 && p.eta > 0.0 && (0.0..=1.0).contains(&p.beta)) {
        return Err(Error::Config("invalid FAB parameters".into()));
    }
    let mut queries = 1;
    if model.predict(id, x)? != y || cfg.steps == 0 {
        let raw = Raw {
            queries,
            ..Raw::unchanged(x)
        };
        return Ok((Vec::new(), finish(model, id, x, y, tm, raw)?));
    }
    let c = model.num_classes();
    let lo_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let hi_x: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    let mut u = x.to_vec();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut trace = Vec::new();
    for _ in 0..cfg.steps {
        let (z, jac) = model.jacobian(id, &u)?;
        queries += c;
        if jac.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Attack("non-finite gradient".into()));
        }
        let mut pick: Option<(f64, usize)> = None;
        for k in (0..c).filter(|&k| k != y) {
            let f = z[k] - z[y];
            let w: Vec<f64> = jac[k].iter().zip(&jac[y]).map(|(a, b)| a - b).collect();
            let score = f.abs() / (dual(tm.norm, &w) + 1e-12);
            if pick.is_none_or(|(s, _)| score < s) {
                pick = Some((score, k));
            }
        }
        let (_, k) = pick.expect("at least two classes");
        let f = z[k] - z[y];
        let w: Vec<f64> = jac[k].iter().zip(&jac[y]).map(|(a, b)| a - b).collect();
        // Boundary of the linearization at u: f + w·(v − u) = 0.
        let lo_u: Vec<f64> = u.iter().map(|v| -v).collect();
        let hi_u: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
        let d_u = box_hyperplane(&w, -f, &lo_u, &hi_u, tm.norm);
        let shift: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - b).collect();
        let d_x = box_hyperplane(&w, -f - dot(&w, &shift), &lo_x, &hi_x, tm.norm);
        let (a1, a2) = (tm.norm.of(&d_u), tm.norm.of(&d_x));
        let mix = if a1 + a2 > 0.0 { (a1 / (a1 + a2)).min(p.alpha_max) } else { 0.0 };
        let cand: Vec<f64> = (0..x.len())
            .map(|i| ((1.0 - mix) * (u[i] + p.eta * d_u[i]) + mix * (x[i] + p.eta * d_x[i])).clamp(0.0, 1.0))
            .collect();
        let adversarial = argmax(&model.logits(id, &cand)?) != y;
        queries += 1;
        if adversarial {
            let dist = tm.distance(x, &cand);
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, cand.clone()));
            }
            u = x
                .iter()
                .zip(&cand)
                .map(|(a, b)| ((1.0 - p.beta) * a + p.beta * b).clamp(0.0, 1.0))
                .collect();
        } else {
            u = cand.clone();
        }
        if let Some((d, _)) = &best {
            trace.push(*d);
        }
        steps.push(FabStep {
            point: cand,
            target: k,
            adversarial,
        });
    }
    let out = match best {
        Some((_, b)) => {
            let delta: Vec<f64> = b.iter().zip(x).map(|(a, c)| a - c).collect();
            super::engine::apply(x, &delta, tm)
        }
        None => x.to_vec(),
    };
    let raw = Raw {
        x: out,
        iterations: cfg.steps,
        queries,
        trace,
    };
    Ok((steps, finish(model, id, x, y, tm, raw)?))
}

pub fn fab(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    fab_trace(model, id, x, y, tm, cfg).map(|(_, o)| o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_projection_matches_closed_form() {
        let w = [1.0, -2.0, 0.5];
        let lo = [-10.0; 3];
        let hi = [10.0; 3];
        let d = box_hyperplane(&w, 0.7, &lo, &hi, Norm::L2);
        let nn: f64 = w.iter().map(|v| v * v).sum();
        for (di, wi) in d.iter().zip(&w) {
            assert!((di - 0.7 * wi / nn).abs() < 1e-15);
        }
        let d = box_hyperplane(&w, 0.7, &lo, &hi, Norm::Linf);
        for (di, wi) in d.iter().zip(&w) {
            assert!((di - 0.7 / 3.5 * wi.signum()).abs() < 1e-15);
        }
    }

    #[test]
    fn box_constrained_projection_hits_the_plane() {
        let w = [1.0, 1.0, 1.0];
        let lo = [-0.1, -0.5, -0.5];
        let hi = [0.05, 0.5, 0.5];
        for norm in [Norm::L2, Norm::Linf] {
            let d = box_hyperplane(&w, 0.6, &lo, &hi, norm);
            assert!((dot(&w, &d) - 0.6).abs() < 1e-9, "{norm:?} {d:?}");
            assert!((d[0] - 0.05).abs() < 1e-12);
        }
        let unreachable = box_hyperplane(&w, 5.0, &lo, &hi, Norm::L2);
        assert_eq!(unreachable, vec![0.05, 0.5, 0.5]);
    }
}
