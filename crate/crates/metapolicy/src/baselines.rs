//! Passive and bandit composition baselines: voting ensembles, transition
//! density (KDE) confidence switching, and UCB best-in-set selection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{ActPolicy, Action, ActionSpace, Env, PolicyMemory};
use crate::error::{Error, Result};
use crate::policy::PolicyHandle;
use crate::rng::mix;
use crate::env::rollout;

/// Sample an action in proportion to how many members chose it. A unanimous
/// vote short-circuits without consuming randomness, so an ensemble of k
/// copies of one deterministic policy behaves exactly like that policy.
pub fn vote_among(actions: &[usize], rng: &mut ChaCha8Rng) -> usize {
    assert!(!actions.is_empty());
    let first = actions[0];
    if actions.iter().all(|&a| a == first) {
        return first;
    }
    let pick: usize = rng.gen_range(0..actions.len());
    actions[pick]
}

/// Query every member each step and draw among their chosen actions.
#[derive(Debug, Clone)]
pub struct VotingEnsemble {
    pub policies: Vec<PolicyHandle>,
}

impl VotingEnsemble {
    pub fn new(policies: Vec<PolicyHandle>) -> Self {
        assert!(!policies.is_empty());
        let space = policies[0].action_space();
        assert!(policies.iter().all(|p| p.action_space() == space));
        Self { policies }
    }
}

impl ActPolicy for VotingEnsemble {
    fn obs_dim(&self) -> usize {
        self.policies
            .iter()
            .map(|p| p.obs_dim())
            .find(|&d| d != usize::MAX)
            .unwrap_or(usize::MAX)
    }

    fn action_space(&self) -> ActionSpace {
        self.policies[0].action_space()
    }

    fn init_memory(&self, episode_seed: u64) -> PolicyMemory {
        PolicyMemory::Many(
            self.policies
                .iter()
                .enumerate()
                .map(|(i, p)| p.init_memory(mix(episode_seed, 0x766f + i as u64)))
                .collect(),
        )
    }

    fn act(
        &self,
        obs: &[f64],
        memory: &mut PolicyMemory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action> {
        let PolicyMemory::Many(mems) = memory else {
            return Err(Error::config("voting ensemble expects composite memory"));
        };
        let mut votes = Vec::with_capacity(self.policies.len());
        for (p, mem) in self.policies.iter().zip(mems.iter_mut()) {
            let action = p
                .tick(obs, mem, rng, true)?
                .ok_or_else(|| Error::config("ensemble member produced no action"))?;
            votes.push(action.index());
        }
        Ok(Action::Discrete(vote_among(&votes, rng)))
    }
}

/// Embeds (s, a, s') transition tuples as real vectors: normalized state,
/// one-hot action, normalized next state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEmbedder {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_actions: usize,
}

impl TransitionEmbedder {
    pub fn dim(&self) -> usize {
        2 * self.lo.len() + self.n_actions
    }

    pub fn embed(&self, s: &[f64], action: usize, s_next: &[f64]) -> Vec<f64> {
        let norm = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(&v, (&l, &h))| ((v - l) / (h - l)).clamp(0.0, 1.0))
                .collect()
        };
        let mut out = Vec::with_capacity(self.dim());
        out.extend(norm(s));
        let mut one_hot = vec![0.0; self.n_actions];
        one_hot[action] = 1.0;
        out.extend(one_hot);
        out.extend(norm(s_next));
        out
    }
}

/// Gaussian-kernel density estimate with per-dimension Scott bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKde {
    /// n x dim sample matrix, row-major.
    pub samples: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub bandwidths: Vec<f64>,
    /// Sum over dims of -ln(sqrt(2 pi) h_d), precomputed.
    log_norm: f64,
}

/// Bandwidth floor as a fraction of each (normalized) dimension's unit range.
const BANDWIDTH_FLOOR: f64 = 1e-3;

impl TransitionKde {
    /// Fit on embedded tuples: Scott's rule h_d = sigma_d n^(-1/(d+4)),
    /// floored for degenerate (zero-variance) dimensions.
    pub fn fit(samples: Vec<f64>, dim: usize) -> Result<Self> {
        if samples.is_empty() || samples.len() % dim != 0 {
            return Err(Error::config("KDE samples must be a whole number of rows"));
        }
        let n = samples.len() / dim;
        if n < 2 {
            // A single sample still defines a density (one kernel at the
            // floor bandwidth).
        }
        let scott = (n as f64).powf(-1.0 / (dim as f64 + 4.0));
        let mut bandwidths = vec![0.0; dim];
        for d in 0..dim {
            let mean: f64 = (0..n).map(|i| samples[i * dim + d]).sum::<f64>() / n as f64;
            let var: f64 = (0..n)
                .map(|i| (samples[i * dim + d] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            bandwidths[d] = (var.sqrt() * scott).max(BANDWIDTH_FLOOR);
        }
        let log_norm: f64 = bandwidths
            .iter()
            .map(|h| -(h * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum();
        Ok(Self {
            samples,
            n,
            dim,
            bandwidths,
            log_norm,
        })
    }

    /// Mixture density: (1/n) sum_i prod_d N(x_d; s_id, h_d^2).
    pub fn density(&self, query: &[f64]) -> f64 {
        debug_assert_eq!(query.len(), self.dim);
        let mut total = 0.0;
        for i in 0..self.n {
            let row = &self.samples[i * self.dim..(i + 1) * self.dim];
            let mut quad = 0.0;
            for d in 0..self.dim {
                let z = (query[d] - row[d]) / self.bandwidths[d];
                quad += z * z;
            }
            total += (self.log_norm - 0.5 * quad).exp();
        }
        total / self.n as f64
    }
}

/// Fit one KDE per basis policy from that policy's rollouts on its training
/// environment.
pub fn fit_transition_kde<E: Env>(
    env: &E,
    policy: &PolicyHandle,
    embedder: &TransitionEmbedder,
    n_rollouts: usize,
    seed: u64,
) -> Result<TransitionKde> {
    let mut samples = Vec::new();
    let mut local = env.clone();
    for i in 0..n_rollouts {
        let traj = rollout(&mut local, policy, mix(seed, i as u64))?;
        for t in 0..traj.len() {
            let tuple = embedder.embed(
                &traj.observations[t],
                traj.actions[t].index(),
                &traj.observations[t + 1],
            );
            samples.extend(tuple);
        }
    }
    TransitionKde::fit(samples, embedder.dim())
}

/// Draw a policy index proportional to each KDE's density at the previous
/// transition (uniform before any transition exists).
pub fn confidence_select(
    kdes: &[TransitionKde],
    prev_transition: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let k = kdes.len();
    match prev_transition {
        None => rng.gen_range(0..k),
        Some(query) => {
            let confidences: Vec<f64> = kdes
                .iter()
                .map(|kde| kde.density(query) + 1e-12)
                .collect();
            let total: f64 = confidences.iter().sum();
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            for (i, c) in confidences.iter().enumerate() {
                acc += c;
                if u < acc {
                    return i;
                }
            }
            k - 1
        }
    }
}

/// Confidence-switched composition: each step the member whose transition
/// density best explains the latest observed transition is (stochastically)
/// chosen to act.
#[derive(Debug, Clone)]
pub struct ConfidencePolicy {
    pub members: Vec<PolicyHandle>,
    pub kdes: Vec<TransitionKde>,
    pub embedder: TransitionEmbedder,
}

impl ConfidencePolicy {
    pub fn new(
        members: Vec<PolicyHandle>,
        kdes: Vec<TransitionKde>,
        embedder: TransitionEmbedder,
    ) -> Self {
        assert_eq!(members.len(), kdes.len());
        assert!(!members.is_empty());
        Self {
            members,
            kdes,
            embedder,
        }
    }
}

impl ActPolicy for ConfidencePolicy {
    fn obs_dim(&self) -> usize {
        self.members
            .iter()
            .map(|p| p.obs_dim())
            .find(|&d| d != usize::MAX)
            .unwrap_or(usize::MAX)
    }

    fn action_space(&self) -> ActionSpace {
        self.members[0].action_space()
    }

    fn init_memory(&self, episode_seed: u64) -> PolicyMemory {
        PolicyMemory::Confidence {
            pending: None,
            members: self
                .members
                .iter()
                .enumerate()
                .map(|(i, p)| p.init_memory(mix(episode_seed, 0x636f + i as u64)))
                .collect(),
        }
    }

    fn act(
        &self,
        obs: &[f64],
        memory: &mut PolicyMemory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action> {
        let PolicyMemory::Confidence { pending, members } = memory else {
            return Err(Error::config("confidence policy expects its own memory"));
        };
        let query = pending
            .as_ref()
            .map(|(s, a)| self.embedder.embed(s, *a, obs));
        let choice = confidence_select(&self.kdes, query.as_deref(), rng);
        let mut action = None;
        for (i, (p, mem)) in self.members.iter().zip(members.iter_mut()).enumerate() {
            if let Some(a) = p.tick(obs, mem, rng, i == choice)? {
                action = Some(a);
            }
        }
        let action = action.ok_or_else(|| Error::config("no member produced an action"))?;
        *pending = Some((obs.to_vec(), action.index()));
        Ok(action)
    }
}

/// UCB1 state over a fixed arm set with min-max reward normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct UcbState {
    pub pulls: Vec<u64>,
    pub means: Vec<f64>,
    pub total: u64,
    lo: f64,
    hi: f64,
}

impl UcbState {
    pub fn new(n_arms: usize, reward_lo: f64, reward_hi: f64) -> Result<Self> {
        if reward_hi <= reward_lo {
            return Err(Error::config(format!(
                "degenerate reward normalization bounds [{reward_lo}, {reward_hi}]"
            )));
        }
        Ok(Self {
            pulls: vec![0; n_arms],
            means: vec![0.0; n_arms],
            total: 0,
            lo: reward_lo,
            hi: reward_hi,
        })
    }

    fn update(&mut self, arm: usize, raw_return: f64) {
        let r = ((raw_return - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        self.pulls[arm] += 1;
        self.total += 1;
        // Incremental mean (Welford for the first moment).
        let n = self.pulls[arm] as f64;
        self.means[arm] += (r - self.means[arm]) / n;
    }

    pub fn most_pulled(&self) -> usize {
        let mut best = 0;
        for (i, &n) in self.pulls.iter().enumerate().skip(1) {
            if n > self.pulls[best] {
                best = i;
            }
        }
        best
    }
}

/// One UCB1 round: fold in the last (arm, episode return) observation, then
/// pick the next arm — lowest-index unpulled arm first, otherwise
/// argmax of mean + sqrt(2 ln t / n), ties to the lowest index.
pub fn ucb_round(state: &mut UcbState, last_result: Option<(usize, f64)>) -> usize {
    if let Some((arm, reward)) = last_result {
        state.update(arm, reward);
    }
    if let Some(unpulled) = state.pulls.iter().position(|&n| n == 0) {
        return unpulled;
    }
    let t = state.total as f64;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..state.pulls.len() {
        let score = state.means[i] + (2.0 * t.ln() / state.pulls[i] as f64).sqrt();
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    best
}

/// Outcome of a best-in-set UCB run.
#[derive(Debug, Clone)]
pub struct UcbRun {
    pub state: UcbState,
    /// (arm, episode return) per pull, in order.
    pub history: Vec<(usize, f64)>,
    pub env_steps: usize,
}

/// Treat each candidate policy as a bandit arm; pulling an arm rolls one
/// episode and scores its return. Stops once the next episode would exceed
/// `max_env_steps`.
pub fn run_ucb_best_in_set<E: Env>(
    env: &E,
    arms: &[PolicyHandle],
    reward_bounds: (f64, f64),
    max_env_steps: usize,
    seed: u64,
) -> Result<UcbRun> {
    let mut state = UcbState::new(arms.len(), reward_bounds.0, reward_bounds.1)?;
    let mut history = Vec::new();
    let mut env_steps = 0usize;
    let mut last = None;
    let mut local = env.clone();
    for pull in 0.. {
        let arm = ucb_round(&mut state, last);
        if env_steps + local.horizon() > max_env_steps {
            break;
        }
        let traj = rollout(&mut local, &arms[arm], mix(seed, pull as u64))?;
        env_steps += traj.env_steps;
        let ret = traj.episode_return();
        history.push((arm, ret));
        last = Some((arm, ret));
    }
    // Fold in the final pull so the state reflects the full history.
    if let Some((arm, ret)) = last {
        state.update(arm, ret);
    }
    Ok(UcbRun {
        state,
        history,
        env_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn vote_probabilities_follow_counts() {
        let mut rng = rng_from_seed(2);
        let votes = [2usize, 2, 5];
        let n = 30_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[vote_among(&votes, &mut rng)] += 1;
        }
        let f2 = counts[2] as f64 / n as f64;
        let f5 = counts[5] as f64 / n as f64;
        assert!((f2 - 2.0 / 3.0).abs() < 0.01, "P(2) = {f2}");
        assert!((f5 - 1.0 / 3.0).abs() < 0.01, "P(5) = {f5}");
    }

    #[test]
    fn unanimous_vote_consumes_no_randomness() {
        let mut rng = rng_from_seed(3);
        let before = rng.clone();
        assert_eq!(vote_among(&[4, 4, 4], &mut rng), 4);
        let mut b = before;
        assert_eq!(rng.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn kde_single_sample_is_one_kernel() {
        let kde = TransitionKde::fit(vec![0.3, 0.7], 2).unwrap();
        // Degenerate variance: floor bandwidths.
        assert!(kde.bandwidths.iter().all(|&h| h == 1e-3));
        let at_sample = kde.density(&[0.3, 0.7]);
        let expected = 1.0 / (2.0 * std::f64::consts::PI * 1e-3 * 1e-3);
        assert!((at_sample - expected).abs() / expected < 1e-12);
        // Far away: essentially zero.
        assert!(kde.density(&[0.5, 0.5]) < 1e-30);
    }

    #[test]
    fn kde_constant_data_uses_floor_bandwidths() {
        let mut samples = Vec::new();
        for _ in 0..50 {
            samples.extend([0.2, 0.9]);
        }
        let kde = TransitionKde::fit(samples, 2).unwrap();
        assert!(kde.bandwidths.iter().all(|&h| h == 1e-3));
        // Density concentrates at the sample point.
        assert!(kde.density(&[0.2, 0.9]) > kde.density(&[0.21, 0.9]) * 1e3);
    }

    #[test]
    fn kde_density_matches_brute_force_product_form() {
        let mut rng = rng_from_seed(4);
        let dim = 5;
        let n = 400;
        let samples: Vec<f64> = (0..n * dim).map(|_| rng.gen::<f64>()).collect();
        let kde = TransitionKde::fit(samples.clone(), dim).unwrap();
        for _ in 0..200 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
            // Independent route: product of per-dimension normal pdfs.
            let mut brute = 0.0;
            for i in 0..n {
                let mut kernel = 1.0;
                for d in 0..dim {
                    let h = kde.bandwidths[d];
                    let z = (q[d] - samples[i * dim + d]) / h;
                    kernel *= (-0.5 * z * z).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
                }
                brute += kernel;
            }
            brute /= n as f64;
            let fast = kde.density(&q);
            let scale = fast.abs().max(brute.abs()).max(1.0);
            assert!(
                (fast - brute).abs() / scale < 1e-10,
                "fast {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn confidence_uniform_before_first_transition_and_on_identical_kdes() {
        let mut rng = rng_from_seed(5);
        let kde = TransitionKde::fit(vec![0.5, 0.5, 0.4, 0.6], 2).unwrap();
        let kdes = vec![kde.clone(), kde];
        let n = 10_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            counts[confidence_select(&kdes, None, &mut rng)] += 1;
        }
        let p = 0.5;
        let std = (p * (1.0 - p) / n as f64).sqrt();
        assert!((counts[0] as f64 / n as f64 - p).abs() < 3.0 * std);

        // Identical KDEs with a query: still uniform.
        let mut counts = [0usize; 2];
        for _ in 0..n {
            counts[confidence_select(&kdes, Some(&[0.45, 0.55]), &mut rng)] += 1;
        }
        assert!((counts[0] as f64 / n as f64 - p).abs() < 3.0 * std);
    }

    #[test]
    fn confidence_prefers_the_matching_regime() {
        // Two KDEs trained on separated clusters; queries near one cluster
        // select that index nearly always.
        let mut rng = rng_from_seed(6);
        let near: Vec<f64> = (0..200)
            .flat_map(|_| vec![0.1 + 0.01 * rng.gen::<f64>(), 0.1 + 0.01 * rng.gen::<f64>()])
            .collect();
        let far: Vec<f64> = (0..200)
            .flat_map(|_| vec![0.9 + 0.01 * rng.gen::<f64>(), 0.9 + 0.01 * rng.gen::<f64>()])
            .collect();
        let kdes = vec![
            TransitionKde::fit(near, 2).unwrap(),
            TransitionKde::fit(far, 2).unwrap(),
        ];
        let mut zero_count = 0;
        let n = 2000;
        for _ in 0..n {
            if confidence_select(&kdes, Some(&[0.105, 0.105]), &mut rng) == 0 {
                zero_count += 1;
            }
        }
        assert!(
            zero_count as f64 / n as f64 > 0.999,
            "matching KDE selected only {zero_count}/{n}"
        );
    }

    #[test]
    fn confidence_degrades_to_uniform_at_the_floor() {
        // Densities at the epsilon floor for all members: uniform selection.
        let mut rng = rng_from_seed(7);
        let kdes = vec![
            TransitionKde::fit(vec![0.0, 0.0], 2).unwrap(),
            TransitionKde::fit(vec![0.0, 0.0], 2).unwrap(),
            TransitionKde::fit(vec![0.0, 0.0], 2).unwrap(),
        ];
        let query = [50.0, 50.0]; // all densities underflow to 0 + epsilon
        let n = 9000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[confidence_select(&kdes, Some(&query), &mut rng)] += 1;
        }
        for &c in &counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn ucb_initial_sweep_and_dominant_arm() {
        let mut state = UcbState::new(3, 0.0, 1.0).unwrap();
        assert_eq!(ucb_round(&mut state, None), 0);
        assert_eq!(ucb_round(&mut state, Some((0, 0.0))), 1);
        assert_eq!(ucb_round(&mut state, Some((1, 1.0))), 2);
        // One pull each with rewards [0, 1, 0]: equal bonuses, arm 1 leads.
        assert_eq!(ucb_round(&mut state, Some((2, 0.0))), 1);
    }

    #[test]
    fn ucb_rejects_degenerate_bounds() {
        assert!(UcbState::new(2, 1.0, 1.0).is_err());
        assert!(UcbState::new(2, 2.0, 1.0).is_err());
    }

    #[test]
    fn ucb_regret_sanity_on_bernoulli_arms() {
        let mut rng = rng_from_seed(8);
        let mut state = UcbState::new(2, 0.0, 1.0).unwrap();
        let probs = [0.9, 0.1];
        let mut last = None;
        for _ in 0..10_000 {
            let arm = ucb_round(&mut state, last);
            let reward = if rng.gen::<f64>() < probs[arm] { 1.0 } else { 0.0 };
            last = Some((arm, reward));
        }
        let inferior_fraction = state.pulls[1] as f64 / state.total as f64;
        assert!(
            inferior_fraction < 0.05,
            "inferior arm pulled {inferior_fraction} of the time"
        );
    }
}
