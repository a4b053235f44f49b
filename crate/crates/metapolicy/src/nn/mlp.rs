//! Feed-forward categorical policy: two tanh hidden layers and a softmax head.

use rand_chacha::ChaCha8Rng;

use super::math::{matvec, matvec_acc, matvec_t_acc, outer_acc};
use super::{xavier_fill, CategoricalDist, ObsNormalizer, ParamBundle, OUTPUT_SCALE};
use crate::error::{Error, Result};

/// MLP policy parameters. Layout order: w1, b1, w2, b2, w3, b3.
#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub input_dim: usize,
    pub hidden_dims: (usize, usize),
    pub output_dim: usize,
    pub normalizer: ObsNormalizer,
    pub params: ParamBundle,
}

/// Intermediate activations for one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl MlpPolicy {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        normalizer: ObsNormalizer,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_hidden(input_dim, (32, 32), output_dim, normalizer, rng)
    }

    pub fn with_hidden(
        input_dim: usize,
        hidden_dims: (usize, usize),
        output_dim: usize,
        normalizer: ObsNormalizer,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (h1, h2) = hidden_dims;
        let mut params = ParamBundle::new();
        params.push("w1", vec![h1, input_dim], xavier_fill(h1, input_dim, 1.0, rng));
        params.push("b1", vec![h1], vec![0.0; h1]);
        params.push("w2", vec![h2, h1], xavier_fill(h2, h1, 1.0, rng));
        params.push("b2", vec![h2], vec![0.0; h2]);
        params.push(
            "w3",
            vec![output_dim, h2],
            xavier_fill(output_dim, h2, OUTPUT_SCALE, rng),
        );
        params.push("b3", vec![output_dim], vec![0.0; output_dim]);
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            normalizer,
            params,
        }
    }

    /// Construct with an explicit parameter bundle (checkpoint load path).
    pub fn from_parts(
        input_dim: usize,
        hidden_dims: (usize, usize),
        output_dim: usize,
        normalizer: ObsNormalizer,
        params: ParamBundle,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            normalizer,
            params,
        }
    }

    pub fn forward(&self, obs: &[f64]) -> Result<(CategoricalDist, MlpCache)> {
        if obs.len() != self.input_dim {
            return Err(Error::config(format!(
                "observation dim {} does not match policy input dim {}",
                obs.len(),
                self.input_dim
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite observation"));
        }
        let (n1, n2) = self.hidden_dims;
        let x = self.normalizer.normalize(obs);

        let mut h1 = vec![0.0; n1];
        matvec(self.params.get("w1"), n1, self.input_dim, &x, &mut h1);
        for (v, b) in h1.iter_mut().zip(self.params.get("b1")) {
            *v = (*v + b).tanh();
        }

        let mut h2 = vec![0.0; n2];
        matvec(self.params.get("w2"), n2, n1, &h1, &mut h2);
        for (v, b) in h2.iter_mut().zip(self.params.get("b2")) {
            *v = (*v + b).tanh();
        }

        let mut logits = vec![0.0; self.output_dim];
        matvec(self.params.get("w3"), self.output_dim, n2, &h2, &mut logits);
        for (v, b) in logits.iter_mut().zip(self.params.get("b3")) {
            *v += b;
        }

        Ok((CategoricalDist::from_logits(&logits), MlpCache { x, h1, h2 }))
    }

    /// Accumulate parameter gradients given dLoss/dLogits for one step.
    pub fn backward(&self, cache: &MlpCache, dlogits: &[f64], grad: &mut ParamBundle) {
        let (n1, n2) = self.hidden_dims;

        outer_acc(grad.get_mut("w3"), dlogits, &cache.h2);
        for (g, d) in grad.get_mut("b3").iter_mut().zip(dlogits) {
            *g += d;
        }

        let mut dh2 = vec![0.0; n2];
        matvec_t_acc(self.params.get("w3"), self.output_dim, n2, dlogits, &mut dh2);
        for (d, h) in dh2.iter_mut().zip(&cache.h2) {
            *d *= 1.0 - h * h; // through tanh
        }

        outer_acc(grad.get_mut("w2"), &dh2, &cache.h1);
        for (g, d) in grad.get_mut("b2").iter_mut().zip(&dh2) {
            *g += d;
        }

        let mut dh1 = vec![0.0; n1];
        matvec_t_acc(self.params.get("w2"), n2, n1, &dh2, &mut dh1);
        for (d, h) in dh1.iter_mut().zip(&cache.h1) {
            *d *= 1.0 - h * h;
        }

        outer_acc(grad.get_mut("w1"), &dh1, &cache.x);
        for (g, d) in grad.get_mut("b1").iter_mut().zip(&dh1) {
            *g += d;
        }
    }

    /// Directional derivative of the logits along a parameter tangent.
    pub fn jvp(&self, cache: &MlpCache, tangent: &ParamBundle) -> Vec<f64> {
        let (n1, n2) = self.hidden_dims;

        let mut da1 = vec![0.0; n1];
        matvec(tangent.get("w1"), n1, self.input_dim, &cache.x, &mut da1);
        for (d, b) in da1.iter_mut().zip(tangent.get("b1")) {
            *d += b;
        }
        let dh1: Vec<f64> = da1
            .iter()
            .zip(&cache.h1)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();

        let mut da2 = vec![0.0; n2];
        matvec(tangent.get("w2"), n2, n1, &cache.h1, &mut da2);
        matvec_acc(self.params.get("w2"), n2, n1, &dh1, &mut da2);
        for (d, b) in da2.iter_mut().zip(tangent.get("b2")) {
            *d += b;
        }
        let dh2: Vec<f64> = da2
            .iter()
            .zip(&cache.h2)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();

        let mut dlogits = vec![0.0; self.output_dim];
        matvec(tangent.get("w3"), self.output_dim, n2, &cache.h2, &mut dlogits);
        matvec_acc(self.params.get("w3"), self.output_dim, n2, &dh2, &mut dlogits);
        for (d, b) in dlogits.iter_mut().zip(tangent.get("b3")) {
            *d += b;
        }
        dlogits
    }
}
