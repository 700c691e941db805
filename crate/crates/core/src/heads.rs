//! Trainable classifiers on top of pooled feature vectors.
//!
//! Both heads start with a frozen per-feature standardization fitted on the
//! training features, then either an affine map (linear head) or a token
//! self-attention block over the `k×k` pooled positions (attention head).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::params::{uniform, ParamStore, ParamView, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Attention,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Attention => "attention",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "attention" => Ok(HeadKind::Attention),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Token width; `None` means `min(C, 256)`.
    pub embed_dim: Option<usize>,
    /// Requested head count, reduced to the largest divisor of the width.
    pub heads: usize,
    pub positional: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            embed_dim: None,
            heads: 4,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub standardize: bool,
    pub attention: AttentionConfig,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            decay: 0.1,
            decay_every: 7,
            val_fraction: 0.1,
            seed: 0,
            standardize: true,
            attention: AttentionConfig::default(),
        }
    }
}

impl HeadTrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.learning_rate * self.decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadInfo {
    kind: HeadKind,
    channels: usize,
    grid: usize,
    classes: usize,
    embed_dim: usize,
    heads: usize,
    positional: bool,
    log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    info: HeadInfo,
    params: ParamStore,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.max(1).min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

impl ProbeHead {
    /// Untrained head for `[channels · grid²]` inputs.
    pub fn init(
        kind: HeadKind,
        channels: usize,
        grid: usize,
        classes: usize,
        attention: &AttentionConfig,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || grid == 0 {
            return Err(Error::Config("head input must be non-empty".into()));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let d = channels * grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert("input.shift", Tensor::zeros(&[d]));
        p.insert("input.scale", Tensor::full(&[d], 1.0));
        let (embed_dim, heads) = match kind {
            HeadKind::Linear => {
                p.insert("fc.weight", uniform(&mut rng, &[classes, d], 1.0 / (d as f64).sqrt()));
                p.insert("fc.bias", Tensor::zeros(&[classes]));
                (0, 0)
            }
            HeadKind::Attention => {
                let e = attention.embed_dim.unwrap_or(channels.min(256));
                if e == 0 {
                    return Err(Error::Config("attention embed_dim must be positive".into()));
                }
                let h = largest_divisor_at_most(e, attention.heads);
                let dh = e / h;
                let n = grid * grid;
                p.insert("embed.weight", uniform(&mut rng, &[channels, e], 1.0 / (channels as f64).sqrt()));
                p.insert("embed.bias", Tensor::zeros(&[e]));
                if attention.positional {
                    p.insert("embed.position", uniform(&mut rng, &[n, e], 0.02));
                }
                let b = 1.0 / (e as f64).sqrt();
                for i in 0..h {
                    for part in ["q", "k", "v"] {
                        p.insert(format!("attn{i}.{part}"), uniform(&mut rng, &[e, dh], b));
                    }
                }
                p.insert("attn.out.weight", uniform(&mut rng, &[e, e], b));
                p.insert("attn.out.bias", Tensor::zeros(&[e]));
                p.insert("fc.weight", uniform(&mut rng, &[classes, e], b));
                p.insert("fc.bias", Tensor::zeros(&[classes]));
                (e, h)
            }
        };
        p.round_to_f32();
        Ok(Self {
            info: HeadInfo {
                kind,
                channels,
                grid,
                classes,
                embed_dim,
                heads,
                positional: kind == HeadKind::Attention && attention.positional,
                log: Vec::new(),
            },
            params: p,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.info.kind
    }

    pub fn classes(&self) -> usize {
        self.info.classes
    }

    pub fn channels(&self) -> usize {
        self.info.channels
    }

    pub fn grid(&self) -> usize {
        self.info.grid
    }

    pub fn input_dim(&self) -> usize {
        self.info.channels * self.info.grid * self.info.grid
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn training_log(&self) -> &[EpochLog] {
        &self.info.log
    }

    /// Logits as a graph node, differentiable with respect to `f`.
    pub fn logits_var<'g>(&self, view: &ParamView<'g, '_>, f: Var<'g>) -> Var<'g> {
        let x = f.sub(view.get("input.shift")).mul(view.get("input.scale"));
        match self.info.kind {
            HeadKind::Linear => x.linear(view.get("fc.weight"), view.get("fc.bias")),
            HeadKind::Attention => {
                let (c, n) = (self.info.channels, self.info.grid * self.info.grid);
                let tokens = x.reshape(&[c, n]).transpose();
                let mut h = tokens
                    .matmul(view.get("embed.weight"))
                    .add_row_bias(view.get("embed.bias"));
                if self.info.positional {
                    h = h.add(view.get("embed.position"));
                }
                let dh = self.info.embed_dim / self.info.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let outs: Vec<Var<'g>> = (0..self.info.heads)
                    .map(|i| {
                        let q = h.matmul(view.get(&format!("attn{i}.q")));
                        let k = h.matmul(view.get(&format!("attn{i}.k")));
                        let v = h.matmul(view.get(&format!("attn{i}.v")));
                        q.matmul(k.transpose()).scale(scale).softmax_rows().matmul(v)
                    })
                    .collect();
                let mixed = Var::concat_cols(&outs)
                    .matmul(view.get("attn.out.weight"))
                    .add_row_bias(view.get("attn.out.bias"));
                h.add(mixed)
                    .mean_rows()
                    .linear(view.get("fc.weight"), view.get("fc.bias"))
            }
        }
    }

    fn check_input(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.input_dim(),
                f.len()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_input(f)?;
        let g = Graph::new();
        let view = ParamView::new(&g, &self.params, false);
        let x = g.constant(Tensor::from_parts(vec![f.len()], f.to_vec()));
        Ok(self.logits_var(&view, x).value().into_vec())
    }

    pub fn predict(&self, f: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(f)?))
    }

    /// Loss and parameter gradients for one example.
    fn loss_grad(&self, f: &[f64], label: usize) -> (f64, usize, ParamStore) {
        let g = Graph::new();
        let view = ParamView::new(&g, &self.params, true);
        let x = g.constant(Tensor::from_parts(vec![f.len()], f.to_vec()));
        let z = self.logits_var(&view, x);
        let pred = argmax(z.value().data());
        let loss = z.cross_entropy(label);
        let value = loss.value().data()[0];
        let mut grads = g.backward(loss);
        let mut out = view.collect(&mut grads);
        // The standardization is frozen.
        for name in ["input.shift", "input.scale"] {
            if let Some(t) = out.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        (value, pred, out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_checkpoint(dir, "head", serde_json::to_value(&self.info)?, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = read_checkpoint(dir, "head")?;
        let info: HeadInfo = serde_json::from_value(manifest.info)?;
        let attention = AttentionConfig {
            embed_dim: (info.embed_dim > 0).then_some(info.embed_dim),
            heads: info.heads.max(1),
            positional: info.positional,
        };
        let fresh = Self::init(info.kind, info.channels, info.grid, info.classes, &attention, 0)?;
        let layout_ok = fresh.params.len() == params.len()
            && fresh
                .params
                .iter()
                .all(|(n, t)| params.get(n).map(|p| p.shape() == t.shape()).unwrap_or(false));
        if !layout_ok {
            return Err(Error::Checkpoint("head parameters do not match the recorded layout".into()));
        }
        Ok(Self { info, params })
    }
}

/// Features and labels for head training; rows are pooled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub channels: usize,
    pub grid: usize,
    pub classes: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn evaluate(head: &ProbeHead, set: &FeatureSet, idx: &[usize], par: Parallelism) -> (f64, f64) {
    let results = par.map(idx, |_, &i| {
        let z = head.logits(&set.rows[i]).expect("validated row width");
        let lse = {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        (lse - z[set.labels[i]], argmax(&z) == set.labels[i])
    });
    let n = idx.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    (loss, acc)
}

/// Trains a head with cross-entropy and SGD with momentum. A seeded
/// `val_fraction` of the rows is held out for per-epoch validation. With
/// `epochs = 0` the initialized head is returned with an empty log.
pub fn train_head(set: &FeatureSet, kind: HeadKind, cfg: &HeadTrainConfig, par: Parallelism) -> Result<ProbeHead> {
    if set.is_empty() {
        return Err(Error::Data("no training features".into()));
    }
    if set.labels.len() != set.len() {
        return Err(Error::Data("feature rows and labels differ in length".into()));
    }
    if let Some(&l) = set.labels.iter().find(|&&l| l >= set.classes) {
        return Err(Error::Data(format!("label {l} out of range for {} classes", set.classes)));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config("invalid head training configuration".into()));
    }
    let mut head = ProbeHead::init(kind, set.channels, set.grid, set.classes, &cfg.attention, cfg.seed)?;
    for row in &set.rows {
        head.check_input(row)?;
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let n_val = (set.len() as f64 * cfg.val_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    if train_idx.is_empty() {
        return Err(Error::Data("validation split leaves no training rows".into()));
    }

    if cfg.standardize {
        let d = head.input_dim();
        let mut mean = vec![0.0; d];
        for &i in &train_idx {
            mean.iter_mut().zip(&set.rows[i]).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
        let mut var = vec![0.0; d];
        for &i in &train_idx {
            var.iter_mut()
                .zip(&set.rows[i])
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / train_idx.len() as f64).sqrt().max(1e-6))
            .collect();
        head.params.insert("input.shift", Tensor::from_parts(vec![d], mean));
        head.params.insert("input.scale", Tensor::from_parts(vec![d], scale));
    }

    let mut opt = Sgd::new(&head.params, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut perm = train_idx.clone();
        perm.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in perm.chunks(cfg.batch_size) {
            let per_sample = par.map(batch, |_, &i| head.loss_grad(&set.rows[i], set.labels[i]));
            let mut total = head.params.zeros_like();
            for ((l, pred, g), &i) in per_sample.iter().zip(batch) {
                loss_sum += l;
                correct += usize::from(*pred == set.labels[i]);
                total.accumulate(g);
            }
            total.scale_all(1.0 / batch.len() as f64);
            if !total.is_finite() {
                return Err(Error::Data(format!("non-finite head gradient in epoch {epoch}")));
            }
            opt.step(&mut head.params, &total, lr);
        }
        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&head, set, &val_idx, par);
            (Some(l), Some(a))
        };
        let entry = EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / perm.len() as f64,
            train_accuracy: correct as f64 / perm.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::debug!(
            "{} head epoch {epoch}: train loss {:.4} acc {:.3}",
            kind.name(),
            entry.train_loss,
            entry.train_accuracy
        );
        log.push(entry);
    }
    head.info.log = log;
    // Stored checkpoints are f32; round now so a reloaded head is identical.
    head.params.round_to_f32();
    Ok(head)
}

/// Fraction of rows whose prediction matches the label.
pub fn accuracy(head: &ProbeHead, set: &FeatureSet, par: Parallelism) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    for row in &set.rows {
        head.check_input(row)?;
    }
    Ok(evaluate(head, set, &idx, par).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, classes: usize, dim: usize, seed: u64) -> FeatureSet {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % classes;
            rows.push(
                (0..dim)
                    .map(|j| if j % classes == y { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
                    .collect(),
            );
            labels.push(y);
        }
        FeatureSet {
            rows,
            labels,
            ids: (0..n as u64).collect(),
            channels: dim,
            grid: 1,
            classes,
        }
    }

    #[test]
    fn argmax_ties_take_smallest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = HeadTrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-2);
        assert_eq!(cfg.lr_at(6), 1e-2);
        assert!((cfg.lr_at(7) - 1e-3).abs() < 1e-18);
        assert!((cfg.lr_at(14) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn both_heads_fit_separable_blobs() {
        let set = blobs(120, 3, 6, 1);
        for kind in [HeadKind::Linear, HeadKind::Attention] {
            let cfg = HeadTrainConfig {
                epochs: 10,
                ..Default::default()
            };
            let head = train_head(&set, kind, &cfg, Parallelism::Sequential).unwrap();
            assert_eq!(head.training_log().len(), 10);
            assert!(accuracy(&head, &set, Parallelism::Sequential).unwrap() > 0.95, "{kind:?}");
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_head() {
        let set = blobs(20, 2, 4, 2);
        let cfg = HeadTrainConfig {
            epochs: 0,
            standardize: false,
            ..Default::default()
        };
        let head = train_head(&set, HeadKind::Linear, &cfg, Parallelism::Sequential).unwrap();
        let fresh = ProbeHead::init(HeadKind::Linear, 4, 1, 2, &cfg.attention, cfg.seed).unwrap();
        assert!(head.training_log().is_empty());
        assert_eq!(head.params(), fresh.params());
    }

    #[test]
    fn head_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = ProbeHead::init(HeadKind::Attention, 8, 2, 3, &AttentionConfig::default(), 5).unwrap();
        head.save(dir.path()).unwrap();
        let back = ProbeHead::load(dir.path()).unwrap();
        let f: Vec<f64> = (0..32).map(|i| i as f64 / 32.0).collect();
        let (a, b) = (head.logits(&f).unwrap(), back.logits(&f).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
