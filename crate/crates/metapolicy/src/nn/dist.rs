//! Categorical action distributions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Probability vector over a discrete action set.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Softmax with max subtraction; output is strictly positive and sums to 1.
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Self { probs }
    }

    /// Construct from an existing probability vector (assumed on the simplex).
    pub fn from_probs(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Inverse-CDF sample over the fixed action order.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.probs[action].max(f64::MIN_POSITIVE).ln()
    }

    /// KL(self || q) with the 0 ln 0 := 0 convention.
    pub fn kl(&self, q: &CategoricalDist) -> f64 {
        debug_assert_eq!(self.len(), q.len());
        self.probs
            .iter()
            .zip(&q.probs)
            .map(|(&p, &qv)| {
                if p == 0.0 {
                    0.0
                } else {
                    p * (p.max(f64::MIN_POSITIVE) / qv.max(f64::MIN_POSITIVE)).ln()
                }
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .map(|&p| if p == 0.0 { 0.0 } else { p * p.ln() })
            .sum::<f64>()
    }
}
