//! Small closed-form classifiers with exact input gradients, used to check
//! the attacks against analytic answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Classifier, LossGrad};
use crate::error::{Error, Result};

/// `z = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub shape: [usize; 3],
}

impl LinearModel {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, shape: [usize; 3]) -> Result<Self> {
        let d: usize = shape.iter().product();
        if weights.len() < 2 || weights.len() != bias.len() || weights.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("inconsistent linear model".into()));
        }
        Ok(Self { weights, bias, shape })
    }

    /// Two classes with `z_0 = 0` and `z_1 = w·x + b`.
    pub fn binary(w: Vec<f64>, b: f64) -> Self {
        let d = w.len();
        Self {
            weights: vec![vec![0.0; d], w],
            bias: vec![0.0, b],
            shape: [1, 1, d],
        }
    }

    pub fn random(classes: usize, shape: [usize; 3], seed: u64) -> Self {
        let d: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..classes)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bias = (0..classes).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self { weights, bias, shape }
    }
}

impl Classifier for LinearModel {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn logits(&self, _: u64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect())
    }

    fn loss_grad(&self, id: u64, x: &[f64], loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> Result<LossGrad> {
        let logits = self.logits(id, x)?;
        let (l, gz) = loss(&logits);
        let mut grad = vec![0.0; x.len()];
        for (w, g) in self.weights.iter().zip(&gz) {
            grad.iter_mut().zip(w).for_each(|(o, wi)| *o += g * wi);
        }
        Ok(LossGrad { logits, loss: l, grad })
    }
}

/// `z = W₂ tanh(W₁ x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerModel {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub shape: [usize; 3],
}

impl TwoLayerModel {
    pub fn random(classes: usize, hidden: usize, shape: [usize; 3], scale: f64, seed: u64) -> Self {
        let d: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, s: f64| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| s * rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let w1 = mat(hidden, d, scale);
        let w2 = mat(classes, hidden, 1.0);
        let b1 = mat(1, hidden, 0.5).remove(0);
        let b2 = mat(1, classes, 0.1).remove(0);
        Self { w1, b1, w2, b2, shape }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(w, b)| (b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).tanh())
            .collect()
    }
}

impl Classifier for TwoLayerModel {
    fn num_classes(&self) -> usize {
        self.w2.len()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn logits(&self, _: u64, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.hidden(x);
        Ok(self
            .w2
            .iter()
            .zip(&self.b2)
            .map(|(w, b)| b + w.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>())
            .collect())
    }

    fn loss_grad(&self, id: u64, x: &[f64], loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> Result<LossGrad> {
        let h = self.hidden(x);
        let logits = self.logits(id, x)?;
        let (l, gz) = loss(&logits);
        let mut gh = vec![0.0; h.len()];
        for (w, g) in self.w2.iter().zip(&gz) {
            gh.iter_mut().zip(w).for_each(|(o, wi)| *o += g * wi);
        }
        let mut grad = vec![0.0; x.len()];
        for ((w, g), hv) in self.w1.iter().zip(&gh).zip(&h) {
            let ga = g * (1.0 - hv * hv);
            grad.iter_mut().zip(w).for_each(|(o, wi)| *o += ga * wi);
        }
        Ok(LossGrad { logits, loss: l, grad })
    }
}
