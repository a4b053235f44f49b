//! Shared oracles for integration tests: finite-difference gradients and
//! random episode builders, kept independent of the library's own gradient
//! path.

use metapolicy::nn::{
    episode_log_prob_grad, GruPolicy, MlpPolicy, NetPolicy, ObsNormalizer, WeightedEpisode,
};
use metapolicy::rng::rng_from_seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct EpisodeData {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn random_episodes(
    rng: &mut ChaCha8Rng,
    n_episodes: usize,
    len: usize,
    obs_dim: usize,
    n_actions: usize,
) -> Vec<EpisodeData> {
    (0..n_episodes)
        .map(|_| EpisodeData {
            observations: (0..len)
                .map(|_| (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..len).map(|_| rng.gen_range(0..n_actions)).collect(),
            weights: (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        })
        .collect()
}

pub fn episode_views<'a>(episodes: &'a [EpisodeData]) -> Vec<WeightedEpisode<'a>> {
    episodes
        .iter()
        .map(|e| WeightedEpisode {
            observations: &e.observations,
            actions: &e.actions,
            weights: &e.weights,
        })
        .collect()
}

pub fn loss_of(policy: &NetPolicy, episodes: &[EpisodeData]) -> f64 {
    episode_log_prob_grad(policy, &episode_views(episodes))
        .unwrap()
        .0
}

/// Central finite differences of the weighted log-prob loss.
pub fn fd_gradient(policy: &NetPolicy, episodes: &[EpisodeData], eps: f64) -> Vec<f64> {
    let theta = policy.params().flatten();
    let mut policy = policy.clone();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += eps;
        policy.params_mut().unflatten(&plus).unwrap();
        let lp = loss_of(&policy, episodes);
        let mut minus = theta.clone();
        minus[i] -= eps;
        policy.params_mut().unflatten(&minus).unwrap();
        let lm = loss_of(&policy, episodes);
        grad[i] = (lp - lm) / (2.0 * eps);
    }
    policy.params_mut().unflatten(&theta).unwrap();
    grad
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A small random MLP policy with randomized biases (so no activation sits at
/// an exact symmetry point).
pub fn random_mlp(seed: u64, obs_dim: usize, n_actions: usize) -> NetPolicy {
    let mut rng = rng_from_seed(seed);
    let mut p = MlpPolicy::with_hidden(obs_dim, (6, 5), n_actions, ObsNormalizer::identity(obs_dim), &mut rng);
    perturb(&mut p.params, &mut rng);
    NetPolicy::Mlp(p)
}

pub fn random_gru(seed: u64, obs_dim: usize, n_actions: usize) -> NetPolicy {
    let mut rng = rng_from_seed(seed);
    let mut p = GruPolicy::with_hidden(obs_dim, 6, n_actions, ObsNormalizer::identity(obs_dim), &mut rng);
    perturb(&mut p.params, &mut rng);
    NetPolicy::Gru(p)
}

fn perturb(params: &mut metapolicy::nn::ParamBundle, rng: &mut ChaCha8Rng) {
    let mut flat = params.flatten();
    for v in flat.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    params.unflatten(&flat).unwrap();
}
