//! Projected ascent machinery shared by the gradient attacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{losses, ApgdParams, Classifier, Norm, Raw, ThreatModel};
use crate::error::{Error, Result};
use crate::heads::argmax;

/// `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ball(delta: &[f64], tm: &ThreatModel) -> Vec<f64> {
    let eps = tm.epsilon;
    match tm.norm {
        Norm::Linf => delta.iter().map(|d| d.clamp(-eps, eps)).collect(),
        Norm::L2 => {
            let n = Norm::L2.of(delta);
            if n > eps {
                let s = eps / n;
                delta.iter().map(|d| d * s).collect()
            } else {
                delta.to_vec()
            }
        }
    }
}

/// The adversarial point `clip(x + Π_ε(δ), 0, 1)`.
pub fn apply(x: &[f64], delta: &[f64], tm: &ThreatModel) -> Vec<f64> {
    ball(delta, tm)
        .iter()
        .zip(x)
        .map(|(d, xi)| (xi + d).clamp(0.0, 1.0))
        .collect()
}

/// Projection of `δ` onto the threat ball, then onto the pixel box around
/// `x`; returns the adjusted `δ`.
pub fn project(delta: &[f64], x: &[f64], tm: &ThreatModel) -> Vec<f64> {
    ball(delta, tm)
        .into_iter()
        .zip(x)
        .map(|(d, xi)| {
            let v = xi + d;
            if (0.0..=1.0).contains(&v) {
                d
            } else {
                v.clamp(0.0, 1.0) - xi
            }
        })
        .collect()
}

/// Uniform draw from the threat ball.
pub(crate) fn random_delta(n: usize, tm: &ThreatModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let eps = tm.epsilon;
    match tm.norm {
        Norm::Linf => (0..n).map(|_| eps * rng.random_range(-1.0..=1.0)).collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let len = Norm::L2.of(&dir).max(1e-300);
            let r = eps * rng.random::<f64>().powf(1.0 / n.max(1) as f64);
            dir.iter().map(|d| d * r / len).collect()
        }
    }
}

/// Ascent direction: signed gradient (L∞) or unit gradient (L2).
fn direction(g: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => g.iter().map(|v| sign(*v)).collect(),
        Norm::L2 => {
            let n = Norm::L2.of(g);
            if n > 0.0 {
                g.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; g.len()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Value to maximize.
    pub value: f64,
    pub grad: Vec<f64>,
    /// Whether the point already meets the attack goal.
    pub adversarial: bool,
}

pub trait Objective {
    fn evaluate(&self, x: &[f64]) -> Result<Evaluation>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LossSpec {
    Ce,
    /// Negated CW margin with confidence κ.
    Cw(f64),
    Dlr,
    DlrTargeted(usize),
}

pub(crate) struct ClassifierObjective<'m> {
    pub model: &'m dyn Classifier,
    pub id: u64,
    pub y: usize,
    pub loss: LossSpec,
}

impl Objective for ClassifierObjective<'_> {
    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let y = self.y;
        let loss = self.loss;
        let f = move |z: &[f64]| -> (f64, Vec<f64>) {
            match loss {
                LossSpec::Ce => losses::cross_entropy_grad(z, y),
                LossSpec::Cw(kappa) => {
                    let (v, g) = losses::cw_margin_grad(z, y, kappa);
                    (-v, g.iter().map(|d| -d).collect())
                }
                LossSpec::Dlr => losses::dlr_grad(z, y).expect("class count checked by caller"),
                LossSpec::DlrTargeted(t) => losses::dlr_targeted_grad(z, y, t).expect("class count checked by caller"),
            }
        };
        let lg = self.model.loss_grad(self.id, x, &f)?;
        if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Attack("non-finite loss or gradient".into()));
        }
        Ok(Evaluation {
            value: lg.loss,
            grad: lg.grad,
            adversarial: argmax(&lg.logits) != y,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdParams {
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub restarts: usize,
}

/// Result of an ascent run.
#[derive(Debug, Clone, PartialEq)]
pub struct Ascent {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub best_adversarial: bool,
    /// Value of the retained iterate after each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
}

impl Ascent {
    pub(crate) fn into_raw(self) -> Raw {
        Raw {
            x: self.best,
            iterations: self.iterations,
            queries: self.evaluations,
            trace: self.trace,
        }
    }
}

/// Retained iterate: adversarial points beat non-adversarial ones, then the
/// larger objective wins; ties keep the earlier iterate.
#[derive(Default)]
struct Best {
    point: Option<(bool, f64, Vec<f64>)>,
}

impl Best {
    fn offer(&mut self, x: &[f64], e: &Evaluation) {
        let better = match &self.point {
            None => true,
            Some((adv, v, _)) => (e.adversarial && !adv) || (e.adversarial == *adv && e.value > *v),
        };
        if better {
            self.point = Some((e.adversarial, e.value, x.to_vec()));
        }
    }

    fn value(&self) -> f64 {
        self.point.as_ref().map(|p| p.1).unwrap_or(f64::NEG_INFINITY)
    }

    fn finish(self, trace: Vec<f64>, iterations: usize, evaluations: usize) -> Ascent {
        let (adv, v, x) = self.point.expect("at least one candidate");
        Ascent {
            best: x,
            best_value: v,
            best_adversarial: adv,
            trace,
            iterations,
            evaluations,
        }
    }
}

/// `δ_{k+1} = Π(δ_k + α·dir(∇f(x + δ_k)))` for `steps` iterations per
/// restart. The retained point is chosen among iterates `1..=steps` of all
/// restarts (the starting point only when `steps = 0`).
pub fn pgd_maximize(
    obj: &dyn Objective,
    x: &[f64],
    tm: &ThreatModel,
    p: &PgdParams,
    rng: &mut ChaCha8Rng,
) -> Result<Ascent> {
    let mut best = Best::default();
    let mut trace = Vec::new();
    let mut evaluations = 0;
    for _ in 0..p.restarts.max(1) {
        let mut xa = if p.random_start {
            apply(x, &random_delta(x.len(), tm, rng), tm)
        } else {
            x.to_vec()
        };
        let mut e = obj.evaluate(&xa)?;
        evaluations += 1;
        if p.steps == 0 {
            best.offer(&xa, &e);
            continue;
        }
        for _ in 0..p.steps {
            let dir = direction(&e.grad, tm.norm);
            let delta: Vec<f64> = xa
                .iter()
                .zip(x)
                .zip(&dir)
                .map(|((a, xi), d)| (a - xi) + p.step_size * d)
                .collect();
            xa = apply(x, &delta, tm);
            e = obj.evaluate(&xa)?;
            evaluations += 1;
            best.offer(&xa, &e);
            trace.push(best.value());
        }
    }
    Ok(best.finish(trace, p.steps * p.restarts.max(1), evaluations))
}

/// Iterations after which APGD runs its step-size test, for budget `n`:
/// `w_j = ⌈p_j·n⌉` with `p_0 = 0`, `p_1 = 0.22`,
/// `p_{j+1} = p_j + max(p_j − p_{j−1} − 0.03, 0.06)`.
pub fn apgd_checkpoints(n: usize) -> Vec<usize> {
    let mut p = vec![0.0f64, 0.22];
    while *p.last().unwrap() < 1.0 {
        let j = p.len() - 1;
        let next = p[j] + (p[j] - p[j - 1] - 0.03).max(0.06);
        p.push(next);
    }
    let mut out: Vec<usize> = Vec::new();
    for &pj in &p {
        let w = (pj * n as f64 - 1e-9).ceil().max(0.0) as usize;
        if w <= n && out.last().is_none_or(|&l| w > l) {
            out.push(w);
        }
    }
    out
}

/// Auto-PGD: momentum ascent with step size `η₀ = 2ε`, halved at a
/// checkpoint when fewer than `ρ` of the steps since the last checkpoint
/// improved the objective, or when neither the step size nor the best value
/// changed since then. After halving the iterate restarts from the best
/// point. The step size never increases.
pub fn apgd_maximize(
    obj: &dyn Objective,
    x: &[f64],
    tm: &ThreatModel,
    n: usize,
    random_start: bool,
    params: &ApgdParams,
    rng: &mut ChaCha8Rng,
) -> Result<Ascent> {
    if n == 0 {
        return Err(Error::Config("APGD needs at least one step".into()));
    }
    let checkpoints = apgd_checkpoints(n);
    let mut eta = 2.0 * tm.epsilon;
    let step = |from: &[f64], g: &[f64], eta: f64| -> Vec<f64> {
        let dir = direction(g, tm.norm);
        let delta: Vec<f64> = from
            .iter()
            .zip(x)
            .zip(&dir)
            .map(|((a, xi), d)| (a - xi) + eta * d)
            .collect();
        apply(x, &delta, tm)
    };
    let x0 = if random_start {
        apply(x, &random_delta(x.len(), tm, rng), tm)
    } else {
        x.to_vec()
    };
    let e0 = obj.evaluate(&x0)?;
    let mut evaluations = 1;
    let mut best = Best::default();
    let mut trace = Vec::with_capacity(n);

    let mut prev = x0.clone();
    let mut cur = step(&x0, &e0.grad, eta);
    let mut e = obj.evaluate(&cur)?;
    evaluations += 1;
    best.offer(&cur, &e);
    trace.push(best.value());
    let mut values = vec![e0.value, e.value];

    let mut last_check = 0usize;
    let mut eta_at_check = eta;
    let mut best_at_check = f64::NEG_INFINITY;
    for k in 1..n {
        let z = step(&cur, &e.grad, eta);
        let a = params.momentum;
        let delta: Vec<f64> = cur
            .iter()
            .zip(&z)
            .zip(&prev)
            .zip(x)
            .map(|(((c, zi), p), xi)| (c - xi) + a * (zi - c) + (1.0 - a) * (c - p))
            .collect();
        let next = apply(x, &delta, tm);
        let e_next = obj.evaluate(&next)?;
        evaluations += 1;
        best.offer(&next, &e_next);
        trace.push(best.value());
        values.push(e_next.value);
        prev = cur;
        cur = next;
        e = e_next;

        let iter = k + 1;
        if iter < n && checkpoints.contains(&iter) {
            let span = iter - last_check;
            let improved = (last_check..iter).filter(|&i| values[i + 1] > values[i]).count();
            let oscillating = (improved as f64) < params.rho * span as f64;
            let stalled = eta_at_check == eta && best_at_check == best.value();
            eta_at_check = eta;
            best_at_check = best.value();
            last_check = iter;
            if oscillating || stalled {
                eta /= 2.0;
                let (_, _, xb) = best.point.as_ref().expect("iterate recorded");
                cur = xb.clone();
                prev = cur.clone();
                e = obj.evaluate(&cur)?;
                evaluations += 1;
            }
        }
    }
    Ok(best.finish(trace, n, evaluations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn projection_hand_values() {
        let tm = ThreatModel::linf(8.0 / 255.0);
        let x = [0.5, 0.5];
        assert_eq!(project(&[0.01, -0.02], &x, &tm), vec![0.01, -0.02]);
        let d = project(&[0.05, 0.0], &x, &tm);
        assert!((d[0] - 8.0 / 255.0).abs() < 1e-15);
        let l2 = ThreatModel::l2(0.1);
        let d = project(&[0.12, 0.16], &[0.5, 0.5], &l2);
        assert!((d[0] - 0.06).abs() < 1e-15 && (d[1] - 0.08).abs() < 1e-15);
        let boxed = project(&[0.02, -0.02], &[0.99, 0.01], &tm);
        assert!((0.99 + boxed[0] - 1.0).abs() < 1e-15);
        assert!((0.01 + boxed[1]).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_schedule_for_100_steps() {
        assert_eq!(apgd_checkpoints(100), vec![0, 22, 41, 57, 70, 80, 87, 93, 99]);
        assert_eq!(apgd_checkpoints(1), vec![0, 1]);
    }

    #[test]
    fn random_start_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for tm in [ThreatModel::linf(0.1), ThreatModel::l2(0.3)] {
            for _ in 0..20 {
                let d = random_delta(50, &tm, &mut rng);
                assert!(tm.norm.of(&d) <= tm.epsilon + 1e-12);
            }
        }
    }
}
