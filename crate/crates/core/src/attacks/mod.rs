//! Norm-bounded evasion attacks against any differentiable classifier.
//!
//! Everything works one sample at a time on flat `[C·H·W]` inputs in `[0, 1]`;
//! [`attack_set`] fans samples out over the [`Parallelism`] mode. Every attack
//! owns a ChaCha8 stream keyed by `(cfg.seed, sample_id)`, so results are
//! reproducible and independent of scheduling.

mod autoattack;
pub mod engine;
pub mod fab;
pub mod losses;
pub mod models;
pub mod square;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::heads::argmax;
use crate::parallel::Parallelism;

pub use autoattack::autoattack;
pub use engine::{apply, project, Ascent, Evaluation, Objective};
pub use fab::{fab, fab_trace, FabParams};
pub use square::square_attack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "linf", alias = "Linf", alias = "inf")]
    Linf,
    #[serde(rename = "l2", alias = "L2")]
    L2,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Perturbation set `{δ : ‖δ‖ ≤ ε, x + δ ∈ [0,1]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
}

impl Default for ThreatModel {
    fn default() -> Self {
        Self::linf(8.0 / 255.0)
    }
}

impl ThreatModel {
    pub fn new(norm: Norm, epsilon: f64) -> Result<Self> {
        let tm = Self { norm, epsilon };
        tm.validate()?;
        Ok(tm)
    }

    pub fn linf(epsilon: f64) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self { norm: Norm::L2, epsilon }
    }

    /// `ε = 0` is accepted: the ball is `{0}` and every attack returns `x`.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("invalid budget ε = {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn distance(&self, x: &[f64], x_adv: &[f64]) -> f64 {
        let d: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
        self.norm.of(&d)
    }

    /// Ball and box membership with tolerance `tol` on the norm.
    pub fn admits(&self, x: &[f64], x_adv: &[f64], tol: f64) -> bool {
        x.len() == x_adv.len()
            && x_adv.iter().all(|v| (0.0..=1.0).contains(v))
            && self.distance(x, x_adv) <= self.epsilon + tol
    }
}

/// What the classifier exposes to attacks. Implementations must be
/// re-entrant: attacks on different samples run concurrently.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// `[C, H, W]`; inputs are flat in that order.
    fn input_shape(&self) -> [usize; 3];

    fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// `sample_id` selects per-sample randomness inside the model (the
    /// diffusion noise draw); models without any may ignore it.
    fn logits(&self, sample_id: u64, x: &[f64]) -> Result<Vec<f64>>;

    /// Logits at `x` plus the input gradient of `loss(logits)`, where `loss`
    /// returns its value and gradient with respect to the logits.
    fn loss_grad(&self, sample_id: u64, x: &[f64], loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> Result<LossGrad>;

    /// Logits and the `[classes][input]` Jacobian.
    fn jacobian(&self, sample_id: u64, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = self.num_classes();
        let mut rows = Vec::with_capacity(c);
        let mut logits = Vec::new();
        for k in 0..c {
            let lg = self.loss_grad(sample_id, x, &|z: &[f64]| {
                let mut g = vec![0.0; z.len()];
                g[k] = 1.0;
                (z[k], g)
            })?;
            logits = lg.logits;
            rows.push(lg.grad);
        }
        Ok((logits, rows))
    }

    fn predict(&self, sample_id: u64, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(sample_id, x)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub logits: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Cw,
    Dlr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Cw,
    Apgd,
    ApgdT,
    Fab,
    Square,
    #[serde(alias = "aa")]
    Autoattack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApgdParams {
    pub momentum: f64,
    /// Fraction of improving steps below which the step size is halved.
    pub rho: f64,
}

impl Default for ApgdParams {
    fn default() -> Self {
        Self {
            momentum: 0.75,
            rho: 0.75,
        }
    }
}

/// One attack and its hyper-parameters. Unset optional fields take
/// kind-dependent defaults (see the accessor methods).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Column name in reports.
    pub label: Option<String>,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub random_start: Option<bool>,
    pub loss: Option<LossKind>,
    pub kappa: f64,
    /// Query budget for black-box search.
    pub queries: usize,
    /// Initial patch fraction for the square schedule.
    pub p_init: f64,
    /// Target classes for targeted APGD.
    pub targets: usize,
    pub fab: FabParams,
    pub apgd: ApgdParams,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub norm: Option<Norm>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            label: None,
            steps: 10,
            step_size: None,
            restarts: 1,
            random_start: None,
            loss: None,
            kappa: 0.0,
            queries: 5000,
            p_init: 0.8,
            targets: 9,
            fab: FabParams::default(),
            apgd: ApgdParams::default(),
            seed: 0,
            epsilon: None,
            norm: None,
        }
    }
}

impl AttackConfig {
    fn of(kind: AttackKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn fgsm() -> Self {
        Self::of(AttackKind::Fgsm)
    }

    pub fn pgd(steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size: Some(step_size),
            ..Self::of(AttackKind::Pgd)
        }
    }

    pub fn bim(steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size: Some(step_size),
            ..Self::of(AttackKind::Bim)
        }
    }

    pub fn cw(steps: usize, step_size: f64, kappa: f64) -> Self {
        Self {
            steps,
            step_size: Some(step_size),
            kappa,
            ..Self::of(AttackKind::Cw)
        }
    }

    pub fn apgd(steps: usize, loss: LossKind) -> Self {
        Self {
            steps,
            loss: Some(loss),
            ..Self::of(AttackKind::Apgd)
        }
    }

    pub fn apgd_targeted(steps: usize, targets: usize) -> Self {
        Self {
            steps,
            targets,
            ..Self::of(AttackKind::ApgdT)
        }
    }

    pub fn fab(steps: usize) -> Self {
        Self {
            steps,
            ..Self::of(AttackKind::Fab)
        }
    }

    pub fn square(queries: usize) -> Self {
        Self {
            queries,
            ..Self::of(AttackKind::Square)
        }
    }

    /// Standard ensemble: 100-step APGD runs and FAB, 5000-query square.
    pub fn autoattack() -> Self {
        Self {
            steps: 100,
            ..Self::of(AttackKind::Autoattack)
        }
    }

    /// PGD-10 with `ε = α = 1/255`.
    pub fn pgd10() -> Self {
        Self {
            label: Some("PGD-10".into()),
            epsilon: Some(1.0 / 255.0),
            ..Self::pgd(10, 1.0 / 255.0)
        }
    }

    /// PGD-20 with `ε = 8/255`, `α = 2/255`.
    pub fn pgd20() -> Self {
        Self {
            label: Some("PGD-20".into()),
            epsilon: Some(8.0 / 255.0),
            ..Self::pgd(20, 2.0 / 255.0)
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn name(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.kind {
            AttackKind::Fgsm => "FGSM".into(),
            AttackKind::Bim => format!("BIM-{}", self.steps),
            AttackKind::Pgd => format!("PGD-{}", self.steps),
            AttackKind::Cw => format!("CW-{}", self.steps),
            AttackKind::Apgd => match self.loss_kind() {
                LossKind::Ce => "APGD-CE".into(),
                LossKind::Dlr => "APGD-DLR".into(),
                LossKind::Cw => "APGD-CW".into(),
            },
            AttackKind::ApgdT => "APGD-T".into(),
            AttackKind::Fab => "FAB".into(),
            AttackKind::Square => "Square".into(),
            AttackKind::Autoattack => "AA".into(),
        }
    }

    /// The threat model after this attack's overrides.
    pub fn threat(&self, base: &ThreatModel) -> Result<ThreatModel> {
        ThreatModel::new(self.norm.unwrap_or(base.norm), self.epsilon.unwrap_or(base.epsilon))
    }

    /// Step size; defaults to `ε/4`.
    pub fn alpha(&self, tm: &ThreatModel) -> f64 {
        self.step_size.unwrap_or(tm.epsilon / 4.0)
    }

    pub fn uses_random_start(&self) -> bool {
        self.random_start.unwrap_or(matches!(
            self.kind,
            AttackKind::Pgd | AttackKind::Apgd | AttackKind::ApgdT
        ))
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(match self.kind {
            AttackKind::Cw => LossKind::Cw,
            AttackKind::ApgdT => LossKind::Dlr,
            _ => LossKind::Ce,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("step size must be positive, got {a}")));
            }
        }
        if self.kappa < 0.0 {
            return Err(Error::Config("kappa must be non-negative".into()));
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) {
            return Err(Error::Config("p_init must lie in (0, 1]".into()));
        }
        if matches!(self.kind, AttackKind::Apgd | AttackKind::ApgdT) && self.steps == 0 {
            return Err(Error::Config("APGD needs at least one step".into()));
        }
        Ok(())
    }

    /// The ensemble members, in execution order. Each entry is exactly the
    /// configuration a standalone run of that component would use.
    pub fn autoattack_components(&self) -> Vec<AttackConfig> {
        let base = |kind| AttackConfig {
            kind,
            seed: self.seed,
            epsilon: self.epsilon,
            norm: self.norm,
            steps: self.steps,
            apgd: self.apgd,
            fab: self.fab,
            queries: self.queries,
            p_init: self.p_init,
            targets: self.targets,
            restarts: 1,
            ..Default::default()
        };
        vec![
            AttackConfig {
                loss: Some(LossKind::Ce),
                ..base(AttackKind::Apgd)
            },
            base(AttackKind::ApgdT),
            base(AttackKind::Fab),
            base(AttackKind::Square),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub name: String,
    pub queries: usize,
    pub success: bool,
    pub error: Option<String>,
}

/// Result of attacking one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: u64,
    pub label: usize,
    pub adversarial: Vec<f64>,
    pub predicted: usize,
    /// `predicted != label`.
    pub success: bool,
    pub norm: f64,
    pub iterations: usize,
    /// Model evaluations spent (forward or forward+backward).
    pub queries: usize,
    /// Objective value of the retained iterate after each iteration.
    pub loss_trace: Vec<f64>,
    pub error: Option<String>,
    pub components: Vec<ComponentRecord>,
}

impl SampleOutcome {
    /// Re-checks the attack contract against the clean input: `x̂` lies in
    /// the threat ball (up to `tol`) and the box, and `success` agrees with a
    /// fresh prediction on `x̂`.
    pub fn verify(&self, model: &dyn Classifier, x: &[f64], tm: &ThreatModel, tol: f64) -> Result<()> {
        if !tm.admits(x, &self.adversarial, tol) {
            return Err(Error::Attack(format!(
                "sample {}: {:?} perturbation {} exceeds ε = {}",
                self.id,
                tm.norm,
                tm.distance(x, &self.adversarial),
                tm.epsilon
            )));
        }
        let fresh = model.predict(self.id, &self.adversarial)?;
        if (fresh != self.label) != self.success || fresh != self.predicted {
            return Err(Error::Attack(format!(
                "sample {}: recorded prediction {} (success {}), fresh prediction {fresh}",
                self.id, self.predicted, self.success
            )));
        }
        Ok(())
    }
}

/// What an attack produced before the final evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Raw {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub queries: usize,
    pub trace: Vec<f64>,
}

impl Raw {
    pub fn unchanged(x: &[f64]) -> Self {
        Self {
            x: x.to_vec(),
            ..Default::default()
        }
    }
}

pub(crate) fn rng_for(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

fn check_input(model: &dyn Classifier, x: &[f64], y: usize) -> Result<()> {
    if x.len() != model.input_len() {
        return Err(Error::Shape(format!(
            "attack input has {} values, model expects {}",
            x.len(),
            model.input_len()
        )));
    }
    if y >= model.num_classes() {
        return Err(Error::Attack(format!("label {y} out of range")));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Attack("input outside the [0, 1] box".into()));
    }
    Ok(())
}

pub(crate) fn finish(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    raw: Raw,
) -> Result<SampleOutcome> {
    let predicted = model.predict(id, &raw.x)?;
    Ok(SampleOutcome {
        id,
        label: y,
        norm: tm.distance(x, &raw.x),
        adversarial: raw.x,
        predicted,
        success: predicted != y,
        iterations: raw.iterations,
        queries: raw.queries,
        loss_trace: raw.trace,
        error: None,
        components: Vec::new(),
    })
}

/// Single signed-gradient step `x̂ = clip(x + ε·sign(∇ₓ CE))`.
pub fn fgsm(model: &dyn Classifier, id: u64, x: &[f64], y: usize, tm: &ThreatModel) -> Result<SampleOutcome> {
    check_input(model, x, y)?;
    if tm.norm != Norm::Linf {
        return Err(Error::Attack("FGSM is defined for the L∞ threat model".into()));
    }
    let lg = model.loss_grad(id, x, &|z: &[f64]| losses::cross_entropy_grad(z, y))?;
    if lg.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Attack("non-finite gradient".into()));
    }
    let adv: Vec<f64> = x
        .iter()
        .zip(&lg.grad)
        .map(|(xi, g)| (xi + tm.epsilon * engine::sign(*g)).clamp(0.0, 1.0))
        .collect();
    finish(
        model,
        id,
        x,
        y,
        tm,
        Raw {
            x: adv,
            iterations: 1,
            queries: 1,
            trace: vec![lg.loss],
        },
    )
}

fn objective_for<'m>(model: &'m dyn Classifier, id: u64, y: usize, cfg: &AttackConfig) -> engine::ClassifierObjective<'m> {
    let loss = match cfg.loss_kind() {
        LossKind::Ce => engine::LossSpec::Ce,
        LossKind::Cw => engine::LossSpec::Cw(cfg.kappa),
        LossKind::Dlr => engine::LossSpec::Dlr,
    };
    engine::ClassifierObjective { model, id, y, loss }
}

/// Projected gradient ascent with best-iterate tracking.
pub fn pgd(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    check_input(model, x, y)?;
    cfg.validate()?;
    if cfg.loss_kind() == LossKind::Dlr && model.num_classes() < 3 {
        return Err(Error::UnsupportedLoss("DLR needs at least 3 classes".into()));
    }
    let obj = objective_for(model, id, y, cfg);
    let params = engine::PgdParams {
        steps: cfg.steps,
        step_size: cfg.alpha(tm),
        random_start: cfg.uses_random_start(),
        restarts: cfg.restarts.max(1),
    };
    let mut rng = rng_for(cfg.seed, id);
    let a = engine::pgd_maximize(&obj, x, tm, &params, &mut rng)?;
    finish(model, id, x, y, tm, a.into_raw())
}

/// PGD from `δ₀ = 0` with a single run.
pub fn bim(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    let cfg = AttackConfig {
        random_start: Some(false),
        restarts: 1,
        ..cfg.clone()
    };
    pgd(model, id, x, y, tm, &cfg)
}

/// PGD on the negated CW margin; exits immediately if `x` is already
/// misclassified.
pub fn cw_attack(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    check_input(model, x, y)?;
    if model.predict(id, x)? != y {
        let mut raw = Raw::unchanged(x);
        raw.queries = 1;
        return finish(model, id, x, y, tm, raw);
    }
    let cfg = AttackConfig {
        loss: Some(LossKind::Cw),
        ..cfg.clone()
    };
    let mut out = pgd(model, id, x, y, tm, &cfg)?;
    out.queries += 1;
    // Report the margin itself rather than its negation.
    out.loss_trace.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

/// Auto-PGD with cross-entropy, CW or DLR loss.
pub fn apgd(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    check_input(model, x, y)?;
    cfg.validate()?;
    if cfg.steps == 0 {
        return Err(Error::Config("APGD needs at least one step".into()));
    }
    if cfg.loss_kind() == LossKind::Dlr && model.num_classes() < 3 {
        return Err(Error::UnsupportedLoss("DLR needs at least 3 classes".into()));
    }
    let obj = objective_for(model, id, y, cfg);
    let mut rng = rng_for(cfg.seed, id);
    let a = engine::apgd_maximize(&obj, x, tm, cfg.steps, cfg.uses_random_start(), &cfg.apgd, &mut rng)?;
    finish(model, id, x, y, tm, a.into_raw())
}

/// Targeted APGD on the targeted DLR loss, one run per target class in
/// decreasing order of the clean logits, stopping at the first success.
pub fn apgd_targeted(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<SampleOutcome> {
    check_input(model, x, y)?;
    cfg.validate()?;
    let c = model.num_classes();
    if c < 3 {
        return Err(Error::UnsupportedLoss("targeted DLR needs at least 3 classes".into()));
    }
    let z = model.logits(id, x)?;
    let mut order: Vec<usize> = (0..c).filter(|&k| k != y).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(cfg.targets.max(1));
    let mut rng = rng_for(cfg.seed, id);
    let mut best: Option<engine::Ascent> = None;
    let mut queries = 1;
    for target in order {
        let obj = engine::ClassifierObjective {
            model,
            id,
            y,
            loss: engine::LossSpec::DlrTargeted(target),
        };
        let a = engine::apgd_maximize(&obj, x, tm, cfg.steps, cfg.uses_random_start(), &cfg.apgd, &mut rng)?;
        queries += a.evaluations;
        let done = a.best_adversarial;
        let replace = match &best {
            None => true,
            Some(b) => a.best_adversarial && !b.best_adversarial,
        };
        if replace {
            best = Some(a);
        }
        if done {
            break;
        }
    }
    let mut raw = best.expect("at least one target").into_raw();
    raw.queries = queries;
    finish(model, id, x, y, tm, raw)
}

/// Runs `cfg` on one sample. Failures are recorded in the outcome (with
/// `x̂ = x`) rather than returned.
pub fn run_attack(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> SampleOutcome {
    let result = cfg.threat(tm).and_then(|tm| {
        let tm = &tm;
        match cfg.kind {
            AttackKind::Fgsm => fgsm(model, id, x, y, tm),
            AttackKind::Bim => bim(model, id, x, y, tm, cfg),
            AttackKind::Pgd => pgd(model, id, x, y, tm, cfg),
            AttackKind::Cw => cw_attack(model, id, x, y, tm, cfg),
            AttackKind::Apgd => apgd(model, id, x, y, tm, cfg),
            AttackKind::ApgdT => apgd_targeted(model, id, x, y, tm, cfg),
            AttackKind::Fab => fab(model, id, x, y, tm, cfg),
            AttackKind::Square => square_attack(model, id, x, y, tm, cfg),
            AttackKind::Autoattack => autoattack(model, id, x, y, tm, cfg),
        }
    });
    match result {
        Ok(o) => o,
        Err(e) => failed(model, id, x, y, e.to_string()),
    }
}

fn failed(model: &dyn Classifier, id: u64, x: &[f64], y: usize, error: String) -> SampleOutcome {
    let predicted = model.predict(id, x).unwrap_or(usize::MAX);
    SampleOutcome {
        id,
        label: y,
        adversarial: x.to_vec(),
        predicted,
        success: predicted != y,
        norm: 0.0,
        iterations: 0,
        queries: 0,
        loss_trace: Vec::new(),
        error: Some(error),
        components: Vec::new(),
    }
}

/// One coordinate of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    /// `|a − n| / max(|a|, |n|, floor)`; the floor keeps vanishing
    /// components from dividing round-off by zero.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares `∂CE/∂x` from the model against central differences with step
/// `h` at the given coordinates. Coordinates are not clamped to the box.
pub fn check_gradient(
    model: &dyn Classifier,
    id: u64,
    x: &[f64],
    y: usize,
    coordinates: &[usize],
    h: f64,
) -> Result<Vec<GradientProbe>> {
    check_input(model, x, y)?;
    let lg = model.loss_grad(id, x, &|z: &[f64]| losses::cross_entropy_grad(z, y))?;
    let ce = |x: &[f64]| -> Result<f64> { Ok(losses::cross_entropy(&model.logits(id, x)?, y)) };
    coordinates
        .iter()
        .map(|&i| {
            if i >= x.len() {
                return Err(Error::Shape(format!("coordinate {i} out of range")));
            }
            let mut xp = x.to_vec();
            xp[i] += h;
            let up = ce(&xp)?;
            xp[i] = x[i] - h;
            let down = ce(&xp)?;
            Ok(GradientProbe {
                coordinate: i,
                analytic: lg.grad[i],
                numeric: (up - down) / (2.0 * h),
            })
        })
        .collect()
}

/// Per-sample outcomes for one attack over a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub threat: ThreatModel,
    pub samples: Vec<SampleOutcome>,
}

impl AttackOutcome {
    pub fn success_mask(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.success).collect()
    }

    /// Fraction of samples still classified correctly.
    pub fn robust_accuracy(&self) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::Evaluation("no samples were attacked".into()));
        }
        let kept = self.samples.iter().filter(|s| s.predicted == s.label).count();
        Ok(kept as f64 / self.samples.len() as f64)
    }

    pub fn errors(&self) -> usize {
        self.samples.iter().filter(|s| s.error.is_some()).count()
    }
}

/// Attacks every sample of `set`.
pub fn attack_set(
    model: &dyn Classifier,
    set: &LabeledImageSet,
    tm: &ThreatModel,
    cfg: &AttackConfig,
    par: Parallelism,
) -> Result<AttackOutcome> {
    if set.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, model expects {:?}",
            set.shape(),
            model.input_shape()
        )));
    }
    let threat = cfg.threat(tm)?;
    cfg.validate()?;
    let samples = par.map_range(set.len(), |i| run_attack(model, set.id(i), set.image(i), set.label(i), tm, cfg));
    Ok(AttackOutcome {
        attack: cfg.name(),
        threat,
        samples,
    })
}

/// Fraction of `set` classified correctly after `cfg`.
pub fn robust_accuracy(
    model: &dyn Classifier,
    set: &LabeledImageSet,
    cfg: &AttackConfig,
    tm: &ThreatModel,
    par: Parallelism,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    attack_set(model, set, tm, cfg, par)?.robust_accuracy()
}

/// Fraction of `set` classified correctly without perturbation.
pub fn clean_accuracy(model: &dyn Classifier, set: &LabeledImageSet, par: Parallelism) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    let preds = par.map_range(set.len(), |i| model.predict(set.id(i), set.image(i)));
    let mut correct = 0;
    for (i, p) in preds.into_iter().enumerate() {
        correct += usize::from(p? == set.label(i));
    }
    Ok(correct as f64 / set.len() as f64)
}
