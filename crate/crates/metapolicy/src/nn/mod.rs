//! Differentiable policy networks (MLP and GRU) with exact hand-written
//! gradients: reverse mode for parameter gradients, forward mode (JVP) for
//! the Fisher-vector products the trust-region optimizer needs.

mod dist;
mod gru;
mod math;
mod mlp;
mod params;

pub use dist::CategoricalDist;
pub use gru::{GruPolicy, GruStepCache};
pub use mlp::{MlpCache, MlpPolicy};
pub use params::{ParamBundle, ParamEntry};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Output layers start near zero so initial policies are near uniform.
pub(crate) const OUTPUT_SCALE: f64 = 0.01;

/// Uniform Xavier/Glorot fill, optionally scaled down.
pub(crate) fn xavier_fill(
    fan_out: usize,
    fan_in: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let limit = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

/// Fixed per-dimension observation scaling to roughly [-1, 1].
///
/// Ranges are part of the policy (and its checkpoint) rather than running
/// statistics, so the same parameters always see the same inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNormalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ObsNormalizer {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| h > l));
        Self { lo, hi }
    }

    /// Passthrough normalizer ([-1, 1] ranges).
    pub fn identity(dim: usize) -> Self {
        Self {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&x, (&l, &h))| 2.0 * (x - l) / (h - l) - 1.0)
            .collect()
    }
}

/// A differentiable policy network of either architecture.
#[derive(Debug, Clone)]
pub enum NetPolicy {
    Mlp(MlpPolicy),
    Gru(GruPolicy),
}

/// Cached activations for a whole observation sequence.
pub enum SeqCache {
    Mlp(Vec<MlpCache>),
    Gru(Vec<GruStepCache>),
}

impl NetPolicy {
    pub fn input_dim(&self) -> usize {
        match self {
            NetPolicy::Mlp(p) => p.input_dim,
            NetPolicy::Gru(p) => p.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            NetPolicy::Mlp(p) => p.output_dim,
            NetPolicy::Gru(p) => p.output_dim,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, NetPolicy::Gru(_))
    }

    pub fn params(&self) -> &ParamBundle {
        match self {
            NetPolicy::Mlp(p) => &p.params,
            NetPolicy::Gru(p) => &p.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamBundle {
        match self {
            NetPolicy::Mlp(p) => &mut p.params,
            NetPolicy::Gru(p) => &mut p.params,
        }
    }

    /// Recurrent memory at episode start (`None` for the MLP).
    pub fn initial_memory(&self) -> Option<Vec<f64>> {
        match self {
            NetPolicy::Mlp(_) => None,
            NetPolicy::Gru(p) => Some(p.initial_hidden()),
        }
    }

    /// Single-step action distribution, advancing recurrent memory in place.
    pub fn act_dist(&self, memory: &mut Option<Vec<f64>>, obs: &[f64]) -> Result<CategoricalDist> {
        match self {
            NetPolicy::Mlp(p) => Ok(p.forward(obs)?.0),
            NetPolicy::Gru(p) => {
                let h = memory.get_or_insert_with(|| p.initial_hidden());
                let (h_next, dist) = p.step(h, obs)?;
                *h = h_next;
                Ok(dist)
            }
        }
    }

    /// Per-step distributions over one episode's observations.
    pub fn sequence_dists(&self, obs_seq: &[Vec<f64>]) -> Result<Vec<CategoricalDist>> {
        Ok(self.sequence_forward(obs_seq)?.0)
    }

    pub fn sequence_forward(
        &self,
        obs_seq: &[Vec<f64>],
    ) -> Result<(Vec<CategoricalDist>, SeqCache)> {
        match self {
            NetPolicy::Mlp(p) => {
                let mut dists = Vec::with_capacity(obs_seq.len());
                let mut caches = Vec::with_capacity(obs_seq.len());
                for obs in obs_seq {
                    let (d, c) = p.forward(obs)?;
                    dists.push(d);
                    caches.push(c);
                }
                Ok((dists, SeqCache::Mlp(caches)))
            }
            NetPolicy::Gru(p) => {
                let (dists, caches) = p.sequence_forward(obs_seq)?;
                Ok((dists, SeqCache::Gru(caches)))
            }
        }
    }

    /// Accumulate parameter gradients from per-step logit cotangents.
    pub fn sequence_backward(
        &self,
        cache: &SeqCache,
        dlogits_seq: &[Vec<f64>],
        grad: &mut ParamBundle,
    ) {
        match (self, cache) {
            (NetPolicy::Mlp(p), SeqCache::Mlp(caches)) => {
                for (c, d) in caches.iter().zip(dlogits_seq) {
                    p.backward(c, d, grad);
                }
            }
            (NetPolicy::Gru(p), SeqCache::Gru(caches)) => {
                p.backward_sequence(caches, dlogits_seq, grad);
            }
            _ => panic!("cache does not match policy architecture"),
        }
    }

    /// Per-step logit tangents along a parameter tangent.
    pub fn sequence_jvp(&self, cache: &SeqCache, tangent: &ParamBundle) -> Vec<Vec<f64>> {
        match (self, cache) {
            (NetPolicy::Mlp(p), SeqCache::Mlp(caches)) => {
                caches.iter().map(|c| p.jvp(c, tangent)).collect()
            }
            (NetPolicy::Gru(p), SeqCache::Gru(caches)) => p.jvp_sequence(caches, tangent),
            _ => panic!("cache does not match policy architecture"),
        }
    }
}

/// One episode's gradient inputs: observations, chosen actions, and per-step
/// loss weights.
pub struct WeightedEpisode<'a> {
    pub observations: &'a [Vec<f64>],
    pub actions: &'a [usize],
    pub weights: &'a [f64],
}

/// Weighted negative log-likelihood and its exact parameter gradient:
/// loss = -sum_t w_t log pi(a_t | obs_t), summed over episodes.
///
/// Recurrent policies are unrolled per episode from a zero hidden state, so
/// the gradient includes full backpropagation through time.
pub fn episode_log_prob_grad(
    policy: &NetPolicy,
    episodes: &[WeightedEpisode<'_>],
) -> Result<(f64, ParamBundle)> {
    let mut grad = policy.params().zeros_like();
    let mut loss = 0.0;
    for ep in episodes {
        assert_eq!(ep.observations.len(), ep.actions.len());
        assert_eq!(ep.actions.len(), ep.weights.len());
        let (dists, cache) = policy.sequence_forward(ep.observations)?;
        let mut dlogits_seq = Vec::with_capacity(dists.len());
        for ((dist, &a), &w) in dists.iter().zip(ep.actions).zip(ep.weights) {
            loss -= w * dist.log_prob(a);
            // d(-w log softmax_a)/dz_j = w (p_j - [j == a])
            let mut dl: Vec<f64> = dist.probs().iter().map(|&p| w * p).collect();
            dl[a] -= w;
            dlogits_seq.push(dl);
        }
        policy.sequence_backward(&cache, &dlogits_seq, &mut grad);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_weights_give_zero_loss_and_grad() {
        let mut rng = rng_from_seed(5);
        let p = NetPolicy::Mlp(MlpPolicy::new(3, 4, ObsNormalizer::identity(3), &mut rng));
        let obs = vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.4]];
        let (loss, grad) = episode_log_prob_grad(
            &p,
            &[WeightedEpisode {
                observations: &obs,
                actions: &[1, 3],
                weights: &[0.0, 0.0],
            }],
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_policy_single_step_loss_is_ln_k() {
        let mut rng = rng_from_seed(6);
        let mut mlp = MlpPolicy::new(2, 9, ObsNormalizer::identity(2), &mut rng);
        let zeros = vec![0.0; mlp.params.total_dim()];
        mlp.params.unflatten(&zeros).unwrap();
        let p = NetPolicy::Mlp(mlp);
        let obs = vec![vec![0.3, -0.3]];
        let (loss, _) = episode_log_prob_grad(
            &p,
            &[WeightedEpisode {
                observations: &obs,
                actions: &[2],
                weights: &[1.0],
            }],
        )
        .unwrap();
        assert!((loss - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn normalizer_maps_ranges_to_unit_box() {
        let n = ObsNormalizer::new(vec![0.0, -2.0], vec![4.0, 2.0]);
        assert_eq!(n.normalize(&[0.0, -2.0]), vec![-1.0, -1.0]);
        assert_eq!(n.normalize(&[4.0, 2.0]), vec![1.0, 1.0]);
        assert_eq!(n.normalize(&[2.0, 0.0]), vec![0.0, 0.0]);
    }
}
