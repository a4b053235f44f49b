//! Basis-policy training: RBF-feature Q-learning with eligibility traces.
//!
//! Features are normalized Gaussian kernels (a partition of unity), which
//! makes the large per-step learning rate from the experiment settings a
//! stable interpolation rather than an extrapolating jump.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, ActionSpace, Env};
use crate::error::{Error, Result};
use crate::rng::{mix, rng_from_seed, STREAM_ENV};

/// Squared-distance cutoff beyond which a kernel is treated as zero
/// (exp(-30) ~ 1e-13, far below the feature normalization's resolution).
const KERNEL_CUTOFF: f64 = 30.0;

/// Randomly placed Gaussian kernels over a normalized state box.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfFeatureMap {
    /// Kernel centers in normalized [0, 1]^dim coordinates, row-major.
    pub centers: Vec<f64>,
    pub n_centers: usize,
    pub dim: usize,
    /// Per-dimension kernel widths in normalized units.
    pub bandwidths: Vec<f64>,
    /// Raw-state box mapped onto [0, 1]^dim.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RbfFeatureMap {
    /// Sample `n_centers` kernels uniformly over the normalized box, with
    /// bandwidth `bandwidth_frac` of the normalized range in each dimension.
    pub fn sample(
        n_centers: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        bandwidth_frac: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dim = lo.len();
        assert_eq!(dim, hi.len());
        let centers: Vec<f64> = (0..n_centers * dim).map(|_| rng.gen::<f64>()).collect();
        Self {
            centers,
            n_centers,
            dim,
            bandwidths: vec![bandwidth_frac; dim],
            lo,
            hi,
        }
    }

    /// Clamp a raw state into the box and map it to [0, 1]^dim.
    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&s, (&l, &h))| ((s - l) / (h - l)).clamp(0.0, 1.0))
            .collect()
    }

    /// Normalized feature vector for a state already in [0, 1]^dim:
    /// phi_i = exp(-sum_d ((s_d - c_id)/h_d)^2) / sum_j phi_j.
    ///
    /// Computed with the max-shift identity (dividing by the sum cancels a
    /// common factor), so the nearest kernel always contributes exactly 1
    /// before normalization and the sum can never underflow to zero.
    pub fn features_normalized(&self, s: &[f64]) -> Vec<f64> {
        debug_assert_eq!(s.len(), self.dim);
        let mut d2 = vec![0.0f64; self.n_centers];
        for (i, d2i) in d2.iter_mut().enumerate() {
            let center = &self.centers[i * self.dim..(i + 1) * self.dim];
            let mut acc = 0.0;
            for d in 0..self.dim {
                let z = (s[d] - center[d]) / self.bandwidths[d];
                acc += z * z;
            }
            *d2i = acc;
        }
        let min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut phi = vec![0.0f64; self.n_centers];
        let mut sum = 0.0;
        for (p, &v) in phi.iter_mut().zip(&d2) {
            let shifted = v - min;
            if shifted <= KERNEL_CUTOFF {
                *p = (-shifted).exp();
                sum += *p;
            }
        }
        let sum = sum.max(1e-300);
        for p in &mut phi {
            *p /= sum;
        }
        phi
    }

    /// Features for a raw (unnormalized) state.
    pub fn features(&self, state: &[f64]) -> Vec<f64> {
        self.features_normalized(&self.normalize(state))
    }
}

/// Linear Q-function over RBF features: Q(s, a) = w_a . phi(s).
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub features: RbfFeatureMap,
    /// n_actions x n_centers, row-major.
    pub weights: Vec<f64>,
    pub n_actions: usize,
}

impl QFunction {
    pub fn zeros(features: RbfFeatureMap, n_actions: usize) -> Self {
        let weights = vec![0.0; n_actions * features.n_centers];
        Self {
            features,
            weights,
            n_actions,
        }
    }

    pub fn q_values_from_features(&self, phi: &[f64]) -> Vec<f64> {
        let n = self.features.n_centers;
        (0..self.n_actions)
            .map(|a| {
                let row = &self.weights[a * n..(a + 1) * n];
                row.iter().zip(phi).map(|(w, p)| w * p).sum()
            })
            .collect()
    }

    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.q_values_from_features(&self.features.features(state))
    }

    /// Greedy action with ties resolved to the lowest index.
    pub fn greedy_action(&self, state: &[f64]) -> usize {
        argmax_lowest(&self.q_values(state))
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLearningConfig {
    /// Learning rate applied to partition-of-unity features.
    pub alpha: f64,
    /// Eligibility-trace decay.
    pub lambda: f64,
    pub gamma: f64,
    /// Linear exploration schedule over episodes.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub episodes: usize,
    pub n_centers: usize,
    pub bandwidth_frac: f64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            lambda: 0.4,
            gamma: 0.995,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            episodes: 1000,
            n_centers: 2000,
            bandwidth_frac: 0.15,
        }
    }
}

impl QLearningConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn epsilon(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.epsilon_end;
        }
        let t = episode as f64 / (self.episodes - 1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// Q-learning output: the trained function plus the per-episode return curve.
#[derive(Debug, Clone)]
pub struct QTrainResult {
    pub q: QFunction,
    pub episode_returns: Vec<f64>,
}

/// Watkins Q(lambda) with accumulating traces cut on exploratory actions.
///
/// `obs_lo`/`obs_hi` define the feature normalization box (the environment's
/// observation ranges). Fully deterministic given `seed`.
pub fn q_learning_train<E: Env>(
    env: &E,
    obs_lo: Vec<f64>,
    obs_hi: Vec<f64>,
    cfg: &QLearningConfig,
    seed: u64,
) -> Result<QTrainResult> {
    cfg.validate()?;
    let n_actions = match env.action_space() {
        ActionSpace::Discrete(k) => k,
        ActionSpace::Continuous(_) => {
            return Err(Error::config(
                "Q-learning requires a discrete action space",
            ))
        }
    };

    let mut feat_rng = rng_from_seed(mix(seed, 0xfea7));
    let features = RbfFeatureMap::sample(cfg.n_centers, obs_lo, obs_hi, cfg.bandwidth_frac, &mut feat_rng);
    let mut q = QFunction::zeros(features, n_actions);

    let n_weights = q.weights.len();
    let n = q.features.n_centers;
    let mut behavior_rng = rng_from_seed(mix(seed, 0xbe4a));
    let mut trace = vec![0.0f64; n_weights];
    let mut episode_returns = Vec::with_capacity(cfg.episodes);
    let mut local_env = env.clone();

    for episode in 0..cfg.episodes {
        let epsilon = cfg.epsilon(episode);
        let obs = local_env.reset(mix(mix(seed, episode as u64), STREAM_ENV));
        let mut phi = q.features.features(&obs);
        trace.iter_mut().for_each(|t| *t = 0.0);
        let mut episode_return = 0.0;

        for _ in 0..local_env.horizon() {
            let q_s = q.q_values_from_features(&phi);
            let greedy = argmax_lowest(&q_s);
            let action = if behavior_rng.gen::<f64>() < epsilon {
                behavior_rng.gen_range(0..n_actions)
            } else {
                greedy
            };
            let took_greedy = q_s[action] == q_s[greedy];

            let out = local_env.step(&Action::Discrete(action));
            episode_return += out.reward;
            let done = out.terminal;

            // Accumulate the trace on the taken action's features.
            for (t, p) in trace[action * n..(action + 1) * n].iter_mut().zip(&phi) {
                *t += p;
            }

            let next_phi = q.features.features(&out.obs);
            let target = if done {
                out.reward
            } else {
                let q_next = q.q_values_from_features(&next_phi);
                out.reward + cfg.gamma * q_next[argmax_lowest(&q_next)]
            };
            let delta = target - q_s[action];
            for (w, t) in q.weights.iter_mut().zip(&trace) {
                *w += cfg.alpha * delta * t;
            }

            if done {
                break;
            }
            if took_greedy {
                let decay = cfg.gamma * cfg.lambda;
                trace.iter_mut().for_each(|t| *t *= decay);
            } else {
                trace.iter_mut().for_each(|t| *t = 0.0);
            }
            phi = next_phi;
        }

        episode_returns.push(episode_return);
        let w_max = q.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        if w_max > 1e6 {
            return Err(Error::numeric(format!(
                "Q-learning diverged: max |w| = {w_max:e} after episode {episode}"
            )));
        }
    }

    Ok(QTrainResult {
        q,
        episode_returns,
    })
}
