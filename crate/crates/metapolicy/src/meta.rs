//! The meta-MDP wrapper (one-step options over a basis set) and the
//! trust-region policy optimizer used for meta-policies and from-scratch
//! baselines alike.
//!
//! The optimizer is natural-gradient TRPO: the surrogate gradient is
//! preconditioned by the inverse Fisher matrix (applied via conjugate
//! gradient), the step is scaled to the KL trust region, and a backtracking
//! line search accepts the first candidate that improves the surrogate while
//! keeping the measured mean KL within bounds.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{
    batch_rollouts, ActPolicy, Action, ActionSpace, Env, PolicyMemory, RolloutBatch, StepOutcome,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::nn::{CategoricalDist, NetPolicy, SeqCache};
use crate::policy::{PolicyHandle, PolicyKind};
use crate::rng::{mix, rng_from_seed};

/// One-step options over a basis set: each meta action applies one basis
/// policy for a single inner time-step. Observations, rewards, and the
/// horizon pass through from the inner environment.
///
/// Recurrent basis memories (and distractor generators) tick every step
/// whether or not their policy is selected, so each basis policy's state
/// stays coherent with the episode it is watching.
#[derive(Clone)]
pub struct MetaEnv<E: Env> {
    inner: E,
    basis: Arc<Vec<PolicyHandle>>,
    memories: Vec<PolicyMemory>,
    rng: ChaCha8Rng,
    cur_obs: Vec<f64>,
}

impl<E: Env> MetaEnv<E> {
    pub fn new(inner: E, basis: Arc<Vec<PolicyHandle>>) -> Self {
        assert!(!basis.is_empty(), "meta environment needs at least one basis policy");
        let space = basis[0].action_space();
        assert!(
            basis.iter().all(|b| b.action_space() == space),
            "basis policies must share one action space"
        );
        Self {
            inner,
            basis,
            memories: Vec::new(),
            rng: rng_from_seed(0),
            cur_obs: Vec::new(),
        }
    }

    pub fn basis_count(&self) -> usize {
        self.basis.len()
    }
}

impl<E: Env> Env for MetaEnv<E> {
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.basis.len())
    }

    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        // The inner environment sees the seed unchanged, so a meta rollout
        // over "constant" bases replays the primitive MDP exactly.
        let obs = self.inner.reset(seed);
        self.memories = self
            .basis
            .iter()
            .enumerate()
            .map(|(i, b)| b.init_memory(mix(seed, 0x6261 + i as u64)))
            .collect();
        self.rng = rng_from_seed(mix(seed, 0x4d45));
        self.cur_obs = obs.clone();
        obs
    }

    fn step(&mut self, action: &Action) -> StepOutcome {
        let choice = action.index();
        assert!(
            choice < self.basis.len(),
            "meta action {choice} out of range for {} basis policies",
            self.basis.len()
        );
        let mut primitive = None;
        for (i, (b, mem)) in self.basis.iter().zip(self.memories.iter_mut()).enumerate() {
            let out = b
                .tick(&self.cur_obs, mem, &mut self.rng, i == choice)
                .expect("basis policy failed during meta step");
            if i == choice {
                primitive = out;
            }
        }
        let outcome = self
            .inner
            .step(&primitive.expect("selected basis produced no action"));
        self.cur_obs = outcome.obs.clone();
        outcome
    }
}

/// Trust-region optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrpoConfig {
    /// Environment steps collected per iteration.
    pub batch_size: usize,
    pub gamma: f64,
    /// KL trust-region radius (step size).
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub iterations: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            gamma: 0.995,
            max_kl: 0.001,
            cg_iters: 10,
            cg_damping: 1e-5,
            backtrack_ratio: 0.8,
            max_backtracks: 15,
            iterations: 100,
        }
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub min_return: f64,
    pub max_return: f64,
    /// Measured mean KL between the pre- and post-step policies (0 when the
    /// step was rejected).
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
    pub env_steps: usize,
    /// Fraction of batch trajectories that reached a terminal condition.
    pub success_rate: f64,
    pub accepted: bool,
}

/// Least-squares value predictor over fixed features of observation and
/// normalized time: [obs, obs^2, tau, tau^2, tau^3, 1] with tau = t / horizon.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    pub coefficients: Vec<f64>,
    pub obs_dim: usize,
    pub horizon: usize,
}

const BASELINE_RIDGE: f64 = 1e-5;

impl LinearBaseline {
    fn feature_dim(obs_dim: usize) -> usize {
        2 * obs_dim + 4
    }

    fn features(obs: &[f64], t: usize, horizon: usize, out: &mut [f64]) {
        let d = obs.len();
        for (i, &o) in obs.iter().enumerate() {
            out[i] = o;
            out[d + i] = o * o;
        }
        let tau = t as f64 / horizon as f64;
        out[2 * d] = tau;
        out[2 * d + 1] = tau * tau;
        out[2 * d + 2] = tau * tau * tau;
        out[2 * d + 3] = 1.0;
    }

    pub fn predict(&self, obs: &[f64], t: usize) -> f64 {
        let mut f = vec![0.0; Self::feature_dim(self.obs_dim)];
        Self::features(obs, t, self.horizon, &mut f);
        f.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum()
    }
}

/// Fit the baseline on a batch by ridge-regularized normal equations against
/// per-step discounted returns.
pub fn fit_baseline(batch: &RolloutBatch, gamma: f64, horizon: usize) -> Result<LinearBaseline> {
    let obs_dim = batch
        .trajectories
        .first()
        .and_then(|t| t.observations.first())
        .map(|o| o.len())
        .ok_or_else(|| Error::config("cannot fit a baseline on an empty batch"))?;
    let dim = LinearBaseline::feature_dim(obs_dim);

    let mut xtx = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut xty = nalgebra::DVector::<f64>::zeros(dim);
    let mut f = vec![0.0; dim];
    for traj in &batch.trajectories {
        let returns = crate::env::discounted_returns(&traj.rewards, gamma)?;
        for (t, &g) in returns.iter().enumerate() {
            LinearBaseline::features(&traj.observations[t], t, horizon, &mut f);
            for i in 0..dim {
                xty[i] += f[i] * g;
                for j in 0..dim {
                    xtx[(i, j)] += f[i] * f[j];
                }
            }
        }
    }
    for i in 0..dim {
        xtx[(i, i)] += BASELINE_RIDGE;
    }
    let coefficients = nalgebra::linalg::Cholesky::new(xtx.clone())
        .map(|ch| ch.solve(&xty))
        .or_else(|| xtx.lu().solve(&xty))
        .ok_or_else(|| Error::numeric("baseline normal equations are singular"))?;
    Ok(LinearBaseline {
        coefficients: coefficients.iter().cloned().collect(),
        obs_dim,
        horizon,
    })
}

/// Per-trajectory, per-step advantages: discounted return minus baseline,
/// then centered and scaled to unit standard deviation across the batch
/// (scaling skipped for zero-variance advantages).
pub fn compute_advantages(
    batch: &RolloutBatch,
    baseline: &LinearBaseline,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut advantages: Vec<Vec<f64>> = Vec::with_capacity(batch.trajectories.len());
    for traj in &batch.trajectories {
        let returns = crate::env::discounted_returns(&traj.rewards, gamma)?;
        advantages.push(
            returns
                .iter()
                .enumerate()
                .map(|(t, &g)| g - baseline.predict(&traj.observations[t], t))
                .collect(),
        );
    }
    let n: usize = advantages.iter().map(Vec::len).sum();
    let mean: f64 = advantages.iter().flatten().sum::<f64>() / n as f64;
    let var: f64 = advantages
        .iter()
        .flatten()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    for row in &mut advantages {
        for a in row.iter_mut() {
            *a -= mean;
            if std > 1e-8 {
                *a /= std;
            }
        }
    }
    Ok(advantages)
}

/// A collected batch frozen into gradient-ready form: per-episode observation
/// sequences with actions, advantages, cached activations, and the acting
/// policy's distributions.
pub struct GradBatch {
    episodes: Vec<GradEpisode>,
    total_steps: usize,
}

struct GradEpisode {
    observations: Vec<Vec<f64>>,
    actions: Vec<usize>,
    advantages: Vec<f64>,
    old_dists: Vec<CategoricalDist>,
    old_log_probs: Vec<f64>,
    cache: SeqCache,
}

impl GradBatch {
    pub fn new(
        policy: &NetPolicy,
        batch: &RolloutBatch,
        advantages: &[Vec<f64>],
    ) -> Result<Self> {
        let mut episodes = Vec::with_capacity(batch.trajectories.len());
        let mut total_steps = 0;
        for (traj, adv) in batch.trajectories.iter().zip(advantages) {
            let observations: Vec<Vec<f64>> = traj.observations[..traj.len()].to_vec();
            let actions: Vec<usize> = traj.actions.iter().map(Action::index).collect();
            let (old_dists, cache) = policy.sequence_forward(&observations)?;
            let old_log_probs = old_dists
                .iter()
                .zip(&actions)
                .map(|(d, &a)| d.log_prob(a))
                .collect();
            total_steps += actions.len();
            episodes.push(GradEpisode {
                observations,
                actions,
                advantages: adv.clone(),
                old_dists,
                old_log_probs,
                cache,
            });
        }
        Ok(Self {
            episodes,
            total_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

/// Surrogate loss at the collection policy plus its exact gradient:
/// loss = -(1/T) sum_t ratio_t * adv_t, which at theta_old (ratio = 1)
/// has gradient -(1/T) sum_t adv_t grad log pi(a_t).
pub fn surrogate_and_grad(policy: &NetPolicy, batch: &GradBatch) -> (f64, Vec<f64>) {
    let t_inv = 1.0 / batch.total_steps as f64;
    let mut grad = policy.params().zeros_like();
    let mut loss = 0.0;
    for ep in &batch.episodes {
        let mut dlogits_seq = Vec::with_capacity(ep.actions.len());
        for ((dist, &a), &adv) in ep.old_dists.iter().zip(&ep.actions).zip(&ep.advantages) {
            loss -= t_inv * adv; // ratio = 1 at theta_old
            let w = t_inv * adv;
            let mut dl: Vec<f64> = dist.probs().iter().map(|&p| w * p).collect();
            dl[a] -= w;
            dlogits_seq.push(dl);
        }
        policy.sequence_backward(&ep.cache, &dlogits_seq, &mut grad);
    }
    (loss, grad.flatten())
}

/// Surrogate loss for a candidate parameter vector (forward passes only).
fn surrogate_at(policy: &NetPolicy, batch: &GradBatch) -> Result<f64> {
    let t_inv = 1.0 / batch.total_steps as f64;
    let losses: Vec<f64> = batch
        .episodes
        .par_iter()
        .map(|ep| -> Result<f64> {
            let dists = policy.sequence_dists(&ep.observations)?;
            let mut loss = 0.0;
            for (((dist, &a), &adv), &old_lp) in dists
                .iter()
                .zip(&ep.actions)
                .zip(&ep.advantages)
                .zip(&ep.old_log_probs)
            {
                let ratio = (dist.log_prob(a) - old_lp).exp();
                loss -= t_inv * ratio * adv;
            }
            Ok(loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum())
}

/// Mean KL(pi_old || pi_candidate) over every step of the batch.
fn mean_kl_at(policy: &NetPolicy, batch: &GradBatch) -> Result<f64> {
    let kls: Vec<f64> = batch
        .episodes
        .par_iter()
        .map(|ep| -> Result<f64> {
            let dists = policy.sequence_dists(&ep.observations)?;
            Ok(ep
                .old_dists
                .iter()
                .zip(&dists)
                .map(|(old, new)| old.kl(new))
                .sum())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(kls.iter().sum::<f64>() / batch.total_steps as f64)
}

/// Damped Fisher-vector product H v + damping v, where H is the Hessian of
/// the mean KL(pi_old || pi_theta) at theta_old. For categorical outputs this
/// is the exact Gauss-Newton form J' (diag(p) - p p') J per step, computed as
/// a forward-mode pass (J v) followed by a reverse pass (J' u); no
/// second-order graph is needed.
pub fn fisher_vector_product(
    policy: &NetPolicy,
    batch: &GradBatch,
    v: &[f64],
    damping: f64,
) -> Vec<f64> {
    let mut tangent = policy.params().zeros_like();
    tangent
        .unflatten(v)
        .expect("tangent dimension mismatch");
    let t_inv = 1.0 / batch.total_steps as f64;

    let partials: Vec<Vec<f64>> = batch
        .episodes
        .par_iter()
        .map(|ep| {
            let dlogits = policy.sequence_jvp(&ep.cache, &tangent);
            let mut cotangents = Vec::with_capacity(dlogits.len());
            for (dist, dl) in ep.old_dists.iter().zip(&dlogits) {
                let p = dist.probs();
                let pdl: f64 = p.iter().zip(dl).map(|(pi, di)| pi * di).sum();
                cotangents.push(
                    p.iter()
                        .zip(dl)
                        .map(|(pi, di)| t_inv * pi * (di - pdl))
                        .collect::<Vec<f64>>(),
                );
            }
            let mut grad = policy.params().zeros_like();
            policy.sequence_backward(&ep.cache, &cotangents, &mut grad);
            grad.flatten()
        })
        .collect();

    let mut out = vec![0.0; v.len()];
    for part in &partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    for (o, vi) in out.iter_mut().zip(v) {
        *o += damping * vi;
    }
    out
}

/// Conjugate gradient for symmetric positive-definite operators, from x0 = 0.
pub fn conjugate_gradient(
    apply_a: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    iters: usize,
    tol: f64,
) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rdotr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..iters {
        if rdotr < tol {
            break;
        }
        let ap = apply_a(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rdotr / pap;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, api) in r.iter_mut().zip(&ap) {
            *ri -= alpha * api;
        }
        let new_rdotr: f64 = r.iter().map(|v| v * v).sum();
        let beta = new_rdotr / rdotr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rdotr = new_rdotr;
    }
    x
}

/// Outcome of one trust-region update.
pub struct StepReport {
    pub accepted: bool,
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
}

/// Natural-gradient trust-region update on `policy` in place.
///
/// Computes the surrogate gradient g, solves H s = g by conjugate gradient,
/// scales to the trust region via sqrt(2 max_kl / s'Hs), then backtracks
/// (ratio^j, j = 0..=max_backtracks) until the surrogate improves and the
/// measured mean KL stays within max_kl. If no candidate passes, parameters
/// are restored bit-identically and the step reports `accepted = false`.
pub fn trust_region_step(
    policy: &mut NetPolicy,
    batch: &GradBatch,
    cfg: &TrpoConfig,
) -> Result<StepReport> {
    let (loss_old, grad) = surrogate_and_grad(policy, batch);
    let grad_norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if grad_norm == 0.0 {
        // Nothing to improve; by convention this counts as an accepted
        // zero-length step.
        return Ok(StepReport {
            accepted: true,
            mean_kl: 0.0,
            surrogate_improvement: 0.0,
        });
    }

    let step_dir = conjugate_gradient(
        |v| fisher_vector_product(policy, batch, v, cfg.cg_damping),
        &grad,
        cfg.cg_iters,
        1e-10,
    );
    let hs = fisher_vector_product(policy, batch, &step_dir, cfg.cg_damping);
    let shs: f64 = step_dir.iter().zip(&hs).map(|(a, b)| a * b).sum();
    if !(shs > 0.0) || !shs.is_finite() {
        return Ok(StepReport {
            accepted: false,
            mean_kl: 0.0,
            surrogate_improvement: 0.0,
        });
    }
    let full_scale = (2.0 * cfg.max_kl / shs).sqrt();
    let theta_old = policy.params().flatten();

    let mut scale = full_scale;
    for _ in 0..=cfg.max_backtracks {
        let candidate: Vec<f64> = theta_old
            .iter()
            .zip(&step_dir)
            .map(|(t, s)| t - scale * s)
            .collect();
        policy.params_mut().unflatten(&candidate)?;
        let loss_new = surrogate_at(policy, batch)?;
        let kl = mean_kl_at(policy, batch)?;
        let improvement = loss_old - loss_new;
        if improvement.is_finite() && improvement > 0.0 && kl <= cfg.max_kl {
            return Ok(StepReport {
                accepted: true,
                mean_kl: kl,
                surrogate_improvement: improvement,
            });
        }
        scale *= cfg.backtrack_ratio;
    }

    policy.params_mut().unflatten(&theta_old)?;
    Ok(StepReport {
        accepted: false,
        mean_kl: 0.0,
        surrogate_improvement: 0.0,
    })
}

/// Wrap a net policy as a rollout-ready handle.
pub fn net_handle(policy: &NetPolicy) -> PolicyHandle {
    PolicyHandle::new(match policy.clone() {
        NetPolicy::Mlp(p) => PolicyKind::Mlp(p),
        NetPolicy::Gru(p) => PolicyKind::Gru(p),
    })
}

/// Full training loop: collect batch, fit baseline, compute advantages, take
/// one trust-region step, record stats; deterministic given `seed`.
pub fn train<E: Env>(
    env: &E,
    policy: &mut NetPolicy,
    cfg: &TrpoConfig,
    seed: u64,
) -> Result<Vec<IterationStats>> {
    train_with(env, policy, cfg, seed, |_, _| true)
}

/// [`train`] with a per-iteration observer; return `false` to stop early.
pub fn train_with<E: Env>(
    env: &E,
    policy: &mut NetPolicy,
    cfg: &TrpoConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&NetPolicy, &IterationStats) -> bool,
) -> Result<Vec<IterationStats>> {
    let mut stats = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let handle = net_handle(policy);
        let batch = batch_rollouts(env, &handle, cfg.batch_size, mix(seed, iteration as u64))?;

        let baseline = fit_baseline(&batch, cfg.gamma, env.horizon())?;
        let advantages = compute_advantages(&batch, &baseline, cfg.gamma)?;
        let grad_batch = GradBatch::new(policy, &batch, &advantages)?;
        let report = trust_region_step(policy, &grad_batch, cfg)?;

        let returns: Vec<f64> = batch
            .trajectories
            .iter()
            .map(Trajectory::episode_return)
            .collect();
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let successes = batch.trajectories.iter().filter(|t| t.terminal).count();
        let record = IterationStats {
            iteration,
            mean_return: mean,
            std_return: var.sqrt(),
            min_return: returns.iter().cloned().fold(f64::INFINITY, f64::min),
            max_return: returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean_kl: report.mean_kl,
            surrogate_improvement: report.surrogate_improvement,
            env_steps: batch.total_steps,
            success_rate: successes as f64 / n,
            accepted: report.accepted,
        };
        let keep_going = on_iteration(policy, &record);
        stats.push(record);
        if !keep_going {
            break;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, StepInfo};
    use crate::nn::{MlpPolicy, ObsNormalizer};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[derive(Clone)]
    struct GridEnv {
        pos: f64,
        steps: usize,
        finished: bool,
        horizon: usize,
    }

    impl GridEnv {
        fn new(horizon: usize) -> Self {
            Self {
                pos: 0.0,
                steps: 0,
                finished: true,
                horizon,
            }
        }
    }

    impl Env for GridEnv {
        fn obs_dim(&self) -> usize {
            1
        }
        fn action_space(&self) -> ActionSpace {
            ActionSpace::Discrete(3)
        }
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn reset(&mut self, _seed: u64) -> Vec<f64> {
            self.pos = 0.0;
            self.steps = 0;
            self.finished = false;
            vec![0.0]
        }
        fn step(&mut self, action: &Action) -> StepOutcome {
            assert!(!self.finished);
            self.steps += 1;
            let delta = match action.index() {
                0 => -1.0,
                1 => 0.0,
                _ => 1.0,
            };
            self.pos += delta;
            let terminal = self.pos >= 3.0;
            self.finished = terminal || self.steps >= self.horizon;
            StepOutcome {
                obs: vec![self.pos],
                reward: delta,
                terminal,
                info: StepInfo::default(),
            }
        }
    }

    fn constant_q(n_actions: usize, favored: usize) -> PolicyHandle {
        use crate::basis::{QFunction, RbfFeatureMap};
        let features = RbfFeatureMap {
            centers: vec![0.5],
            n_centers: 1,
            dim: 1,
            bandwidths: vec![0.15],
            lo: vec![0.0],
            hi: vec![1.0],
        };
        let mut q = QFunction::zeros(features, n_actions);
        let n = q.features.n_centers;
        for w in q.weights[favored * n..(favored + 1) * n].iter_mut() {
            *w = 1.0;
        }
        PolicyHandle::new(PolicyKind::GreedyQ(q))
    }

    #[test]
    fn meta_env_delegates_selected_basis_action() {
        let basis = Arc::new(vec![constant_q(3, 0), constant_q(3, 2)]);
        let mut env = MetaEnv::new(GridEnv::new(5), basis);
        env.reset(0);
        let out = env.step(&Action::Discrete(1));
        assert_eq!(out.obs, vec![1.0]); // basis 1 always moves right
        let out = env.step(&Action::Discrete(0));
        assert_eq!(out.obs, vec![0.0]); // basis 0 always moves left
    }

    #[test]
    fn one_step_option_equivalence_with_constant_bases() {
        // Meta over {always-a : a in A} replays the primitive MDP exactly.
        let mut rng = rng_from_seed(3);
        let net = NetPolicy::Mlp(MlpPolicy::new(1, 3, ObsNormalizer::identity(1), &mut rng));
        let handle = net_handle(&net);

        let mut direct_env = GridEnv::new(20);
        let basis: Arc<Vec<PolicyHandle>> =
            Arc::new((0..3).map(|a| constant_q(3, a)).collect());
        let mut meta_env = MetaEnv::new(GridEnv::new(20), basis);

        for seed in [0u64, 1, 42, 99] {
            let direct = rollout(&mut direct_env, &handle, seed).unwrap();
            let meta = rollout(&mut meta_env, &handle, seed).unwrap();
            assert_eq!(direct.observations, meta.observations);
            assert_eq!(direct.rewards, meta.rewards);
            assert_eq!(direct.actions, meta.actions);
        }
    }

    #[test]
    fn single_basis_meta_matches_basis_returns() {
        let basis = Arc::new(vec![constant_q(3, 2)]);
        let mut meta_env = MetaEnv::new(GridEnv::new(10), basis.clone());
        let mut rng = rng_from_seed(5);
        let mut selector = MlpPolicy::new(1, 1, ObsNormalizer::identity(1), &mut rng);
        selector
            .params
            .unflatten(&vec![0.0; selector.params.total_dim()])
            .unwrap();
        let net = NetPolicy::Mlp(selector);
        let meta_traj = rollout(&mut meta_env, &net_handle(&net), 7).unwrap();

        let mut direct_env = GridEnv::new(10);
        let direct_traj = rollout(&mut direct_env, &basis[0], 7).unwrap();
        assert_eq!(meta_traj.rewards, direct_traj.rewards);
    }

    #[test]
    fn cg_identity_solves_in_one_iteration() {
        let b = vec![0.3, -1.2, 4.5];
        let x = conjugate_gradient(|v| v.to_vec(), &b, 1, 1e-12);
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_diagonal_solution_is_exact() {
        let b = vec![1.0, 2.0];
        let x = conjugate_gradient(
            |v| vec![v[0], 2.0 * v[1]],
            &b,
            10,
            1e-14,
        );
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cg_matches_dense_solver_on_random_spd() {
        use nalgebra::{DMatrix, DVector};
        let mut rng = rng_from_seed(13);
        for _ in 0..5 {
            let n = 50;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            // SPD with eigenvalues in [1, ~1 + sigma_max^2].
            let a = &m * m.transpose() * (4.0 / n as f64) + DMatrix::identity(n, n);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = conjugate_gradient(
                |v| {
                    let dv = DVector::from_row_slice(v);
                    (&a * dv).iter().cloned().collect()
                },
                &b,
                50,
                1e-24,
            );
            let dense = a
                .clone()
                .lu()
                .solve(&DVector::from_row_slice(&b))
                .unwrap();
            let xv = DVector::from_row_slice(&x);
            let rel = (&a * &xv - DVector::from_row_slice(&b)).norm()
                / DVector::from_row_slice(&b).norm();
            assert!(rel < 1e-6, "relative residual {rel}");
            assert!((xv - dense).amax() < 1e-6);
        }
    }

    fn tiny_grad_batch(seed: u64) -> (NetPolicy, GradBatch) {
        let mut rng = rng_from_seed(seed);
        let policy = NetPolicy::Mlp(MlpPolicy::with_hidden(
            2,
            (6, 5),
            3,
            ObsNormalizer::identity(2),
            &mut rng,
        ));
        let mut trajectories = Vec::new();
        for _ in 0..3 {
            let len = 5;
            let observations: Vec<Vec<f64>> = (0..=len)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let actions: Vec<Action> = (0..len)
                .map(|_| Action::Discrete(rng.gen_range(0..3)))
                .collect();
            let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            trajectories.push(Trajectory {
                observations,
                actions,
                rewards,
                infos: vec![StepInfo::default(); len],
                terminal: false,
                env_steps: len,
            });
        }
        let batch = RolloutBatch {
            total_steps: trajectories.iter().map(|t| t.env_steps).sum(),
            trajectories,
            seed_base: 0,
        };
        let advantages: Vec<Vec<f64>> = batch
            .trajectories
            .iter()
            .map(|t| t.rewards.iter().map(|r| r * 2.0).collect())
            .collect();
        let gb = GradBatch::new(&policy, &batch, &advantages).unwrap();
        (policy, gb)
    }

    #[test]
    fn fisher_operator_is_symmetric_and_positive() {
        let (policy, batch) = tiny_grad_batch(21);
        let dim = policy.params().total_dim();
        let mut rng = rng_from_seed(55);
        for _ in 0..5 {
            let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hu = fisher_vector_product(&policy, &batch, &u, 1e-5);
            let hv = fisher_vector_product(&policy, &batch, &v, 1e-5);
            let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
            assert!((uhv - vhu).abs() < 1e-8, "asymmetry {uhv} vs {vhu}");
            let vhv: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let vnorm: f64 = v.iter().map(|x| x * x).sum();
            assert!(vhv + 1e-5 * vnorm > 0.0);
        }
        let zero = fisher_vector_product(&policy, &batch, &vec![0.0; dim], 1e-5);
        assert!(zero.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let (policy, _) = tiny_grad_batch(33);
        let mut rng = rng_from_seed(2);
        let observations: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let traj = Trajectory {
            observations: observations.clone(),
            actions: vec![Action::Discrete(0); 3],
            rewards: vec![1.0; 3],
            infos: vec![StepInfo::default(); 3],
            terminal: false,
            env_steps: 3,
        };
        let batch = RolloutBatch {
            trajectories: vec![traj],
            total_steps: 3,
            seed_base: 0,
        };
        let gb = GradBatch::new(&policy, &batch, &[vec![0.0; 3]]).unwrap();
        let (loss, grad) = surrogate_and_grad(&policy, &gb);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn baseline_fits_constant_returns() {
        let mut rng = rng_from_seed(8);
        let make_traj = |rng: &mut ChaCha8Rng| {
            let len = 6;
            Trajectory {
                observations: (0..=len)
                    .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                actions: vec![Action::Discrete(0); len],
                rewards: vec![0.0; len],
                infos: vec![StepInfo::default(); len],
                terminal: false,
                env_steps: len,
            }
        };
        // Constant returns c: rewards all zero except a trick - instead use
        // gamma = 0 with constant rewards c so G_t = c exactly.
        let mut trajectories = Vec::new();
        for _ in 0..4 {
            let mut t = make_traj(&mut rng);
            t.rewards = vec![2.5; t.env_steps];
            trajectories.push(t);
        }
        let batch = RolloutBatch {
            total_steps: 24,
            trajectories,
            seed_base: 0,
        };
        let baseline = fit_baseline(&batch, 0.0, 6).unwrap();
        for traj in &batch.trajectories {
            for t in 0..traj.env_steps {
                let p = baseline.predict(&traj.observations[t], t);
                assert!((p - 2.5).abs() < 1e-3, "prediction {p}");
            }
        }

        // Zero rewards -> zero predictions.
        let mut zero_traj = make_traj(&mut rng);
        zero_traj.rewards = vec![0.0; zero_traj.env_steps];
        let zero_batch = RolloutBatch {
            total_steps: 6,
            trajectories: vec![zero_traj],
            seed_base: 0,
        };
        let zb = fit_baseline(&zero_batch, 0.995, 6).unwrap();
        for t in 0..6 {
            assert!(zb.predict(&zero_batch.trajectories[0].observations[t], t).abs() < 1e-6);
        }
    }

    #[test]
    fn baseline_reduces_return_variance() {
        let mut rng = rng_from_seed(14);
        let mut trajectories = Vec::new();
        for _ in 0..6 {
            let len = 8;
            let observations: Vec<Vec<f64>> = (0..=len)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let rewards: Vec<f64> = observations[..len]
                .iter()
                .map(|o| o[0] + 0.3 * rng.gen_range(-1.0..1.0))
                .collect();
            trajectories.push(Trajectory {
                observations,
                actions: vec![Action::Discrete(0); len],
                rewards,
                infos: vec![StepInfo::default(); len],
                terminal: false,
                env_steps: len,
            });
        }
        let batch = RolloutBatch {
            total_steps: 48,
            trajectories,
            seed_base: 0,
        };
        let gamma = 0.9;
        let baseline = fit_baseline(&batch, gamma, 8).unwrap();
        let mut residuals = Vec::new();
        let mut raw = Vec::new();
        for traj in &batch.trajectories {
            let g = crate::env::discounted_returns(&traj.rewards, gamma).unwrap();
            for (t, &gt) in g.iter().enumerate() {
                raw.push(gt);
                residuals.push(gt - baseline.predict(&traj.observations[t], t));
            }
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        assert!(var(&residuals) <= var(&raw) + 1e-9);
    }

    #[test]
    fn advantages_are_centered_and_scaled() {
        let (policy, _) = tiny_grad_batch(40);
        let _ = policy;
        let mut rng = rng_from_seed(41);
        let len = 10;
        let traj = Trajectory {
            observations: (0..=len)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            actions: vec![Action::Discrete(0); len],
            rewards: (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            infos: vec![StepInfo::default(); len],
            terminal: false,
            env_steps: len,
        };
        let batch = RolloutBatch {
            trajectories: vec![traj],
            total_steps: len,
            seed_base: 0,
        };
        let baseline = fit_baseline(&batch, 0.99, 10).unwrap();
        let adv = compute_advantages(&batch, &baseline, 0.99).unwrap();
        let flat: Vec<f64> = adv.into_iter().flatten().collect();
        let mean: f64 = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 1e-10);
        let var: f64 = flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / flat.len() as f64;
        // Either unit variance or degenerate all-zero.
        assert!((var - 1.0).abs() < 1e-8 || var < 1e-16);
    }

    #[test]
    fn trust_region_training_improves_grid_task() {
        let mut rng = rng_from_seed(77);
        let mut policy =
            NetPolicy::Mlp(MlpPolicy::new(1, 3, ObsNormalizer::new(vec![-5.0], vec![5.0]), &mut rng));
        let env = GridEnv::new(12);
        let cfg = TrpoConfig {
            batch_size: 240,
            gamma: 0.99,
            max_kl: 0.01,
            iterations: 30,
            ..TrpoConfig::default()
        };
        let stats = train(&env, &mut policy, &cfg, 5).unwrap();
        let first = stats[0].mean_return;
        let last = stats.last().unwrap().mean_return;
        assert!(
            last > first + 0.5,
            "no improvement: first {first}, last {last}"
        );
        // Accepted steps respect the KL bound with measurement slack.
        for s in &stats {
            if s.accepted {
                assert!(s.mean_kl <= 1.01 * cfg.max_kl);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let make_policy = || {
            let mut rng = rng_from_seed(9);
            NetPolicy::Mlp(MlpPolicy::new(
                1,
                3,
                ObsNormalizer::new(vec![-5.0], vec![5.0]),
                &mut rng,
            ))
        };
        let env = GridEnv::new(10);
        let cfg = TrpoConfig {
            batch_size: 100,
            iterations: 5,
            ..TrpoConfig::default()
        };
        let mut p1 = make_policy();
        let mut p2 = make_policy();
        let s1 = train(&env, &mut p1, &cfg, 3).unwrap();
        let s2 = train(&env, &mut p2, &cfg, 3).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(p1.params().flatten(), p2.params().flatten());
    }
}
