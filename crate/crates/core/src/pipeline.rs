//! The composed classifier `x ↦ head(pool(block_b(UNet(q_sample(x, t, ε)))))`
//! and feature-set construction for head training.

use crate::attacks::{Classifier, LossGrad};
use crate::autodiff::{Graph, Var};
use crate::backbone::{BackboneCheckpoint, FeatureProvenance, FeatureVector, ProbeSpec};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::heads::{FeatureSet, ProbeHead};
use crate::parallel::Parallelism;
use crate::params::ParamView;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Frozen backbone plus trained head. Gradients flow through the whole
/// chain; the noise draw for each sample is fixed by the probe spec.
pub struct DiffusionClassifier<'a> {
    backbone: &'a BackboneCheckpoint,
    head: &'a ProbeHead,
    spec: ProbeSpec,
    schedule: &'a NoiseSchedule,
}

impl<'a> DiffusionClassifier<'a> {
    pub fn new(
        backbone: &'a BackboneCheckpoint,
        head: &'a ProbeHead,
        spec: ProbeSpec,
        schedule: &'a NoiseSchedule,
    ) -> Result<Self> {
        spec.validate(backbone, schedule)?;
        let block = &backbone.blocks()[spec.block];
        if head.channels() != block.channels || head.grid() != spec.pool {
            return Err(Error::Config(format!(
                "head expects {}×{}² features, block {} gives {}×{}²",
                head.channels(),
                head.grid(),
                spec.block,
                block.channels,
                spec.pool
            )));
        }
        Ok(Self {
            backbone,
            head,
            spec,
            schedule,
        })
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }

    fn logits_var<'g>(&self, g: &'g Graph, id: u64, x: Var<'g>) -> Result<Var<'g>> {
        let shape = self.backbone.input_shape();
        let eps = self.spec.noise_for(id, &shape)?;
        let bview = ParamView::new(g, self.backbone.params(), false);
        let fm = self
            .backbone
            .features_var(&bview, x, &eps, self.spec.timestep, self.spec.block, self.schedule)?;
        let c = fm.shape()[0];
        let k = self.spec.pool;
        let pooled = fm.adaptive_avg_pool(k).reshape(&[c * k * k]);
        let hview = ParamView::new(g, self.head.params(), false);
        Ok(self.head.logits_var(&hview, pooled))
    }

    fn input(&self, x: &[f64]) -> Result<Tensor> {
        Tensor::new(&self.backbone.input_shape(), x.to_vec())
    }
}

impl Classifier for DiffusionClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.head.classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.backbone.input_shape()
    }

    fn logits(&self, sample_id: u64, x: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let z = self.logits_var(&g, sample_id, g.constant(self.input(x)?))?;
        Ok(z.value().into_vec())
    }

    fn loss_grad(&self, sample_id: u64, x: &[f64], loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> Result<LossGrad> {
        let g = Graph::new();
        let xv = g.leaf(self.input(x)?);
        let z = self.logits_var(&g, sample_id, xv)?;
        let logits = z.value().into_vec();
        let (l, gz) = loss(&logits);
        let grads = g.backward_with(z, Tensor::new(&[gz.len()], gz)?);
        let grad = grads
            .get(xv)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        Ok(LossGrad { logits, loss: l, grad })
    }

    fn jacobian(&self, sample_id: u64, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let g = Graph::new();
        let xv = g.leaf(self.input(x)?);
        let z = self.logits_var(&g, sample_id, xv)?;
        let logits = z.value().into_vec();
        let c = logits.len();
        let rows = (0..c)
            .map(|k| {
                let mut seed = vec![0.0; c];
                seed[k] = 1.0;
                let grads = g.backward_with(z, Tensor::from_parts(vec![c], seed));
                grads
                    .get(xv)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; x.len()])
            })
            .collect();
        Ok((logits, rows))
    }
}

/// Pooled feature vector of one image with its provenance attached.
pub fn feature_vector(
    ckpt: &BackboneCheckpoint,
    x0: &Tensor,
    sample_id: u64,
    spec: &ProbeSpec,
    schedule: &NoiseSchedule,
) -> Result<FeatureVector> {
    let fm = crate::backbone::extract_features(ckpt, x0, sample_id, spec, schedule)?;
    let mut fv = crate::backbone::pool_flatten(&fm, spec.pool)?;
    fv.provenance = Some(FeatureProvenance {
        block: spec.block,
        timestep: spec.timestep,
        pool: spec.pool,
        sample_id,
        noise_seed: spec.noise_seed(),
    });
    Ok(fv)
}

/// Features of every image in `set`, in order.
pub fn build_feature_set(
    ckpt: &BackboneCheckpoint,
    set: &LabeledImageSet,
    spec: &ProbeSpec,
    schedule: &NoiseSchedule,
    par: Parallelism,
) -> Result<FeatureSet> {
    spec.validate(ckpt, schedule)?;
    if set.shape() != ckpt.input_shape() {
        return Err(Error::Config(format!(
            "dataset images are {:?}, backbone expects {:?}",
            set.shape(),
            ckpt.input_shape()
        )));
    }
    let rows = par.map_range(set.len(), |i| {
        feature_vector(ckpt, &set.tensor(i), set.id(i), spec, schedule).map(|f| f.values)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        rows,
        labels: set.labels().to_vec(),
        ids: set.ids().to_vec(),
        channels: ckpt.blocks()[spec.block].channels,
        grid: spec.pool,
        classes: set.classes(),
    })
}
