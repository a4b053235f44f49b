//! Environment and policy contracts plus the rollout engine.
//!
//! Everything stochastic in a rollout (environment noise, policy sampling,
//! recurrent-memory seeding) derives from a single `u64` seed, so a rollout is
//! a pure function of `(env config, policy, seed)`. Batches assign trajectory
//! `i` the seed `mix(seed_base, i)` and collect in waves, which keeps results
//! bit-identical no matter how many threads participate.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::car::{CarBarrierEnv, CarSdEnv};
use crate::error::{Error, Result};
use crate::hybrid::HybridEnv;
use crate::rng::{mix, rng_from_seed, STREAM_ENV, STREAM_POLICY};

/// An action record: discrete index or continuous control vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> usize {
        match self {
            Action::Discrete(i) => *i,
            Action::Continuous(_) => panic!("expected a discrete action"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

/// Per-step annotations used by trace exports and diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepInfo {
    /// Planar position after the step, when the environment has one.
    pub position: Option<(f64, f64)>,
    pub collided: bool,
}

/// Result of advancing an environment by one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// True when the environment reached a terminal condition (not mere
    /// horizon exhaustion).
    pub terminal: bool,
    pub info: StepInfo,
}

/// A finite-horizon MDP instance. Implementations own their mutable state;
/// configs stay immutable and shareable.
pub trait Env: Clone + Send + Sync {
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
    /// Start a new episode. The seed drives all environment-internal noise
    /// for the episode; the same seed yields the identical initial state.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advance one step. Implementations must reject (panic on) calls after a
    /// terminal step or beyond the horizon until `reset` is called.
    fn step(&mut self, action: &Action) -> StepOutcome;
}

/// Opaque per-episode policy state: recurrent hidden vectors, private action
/// generators, or a combination for composite policies.
#[derive(Debug, Clone)]
pub enum PolicyMemory {
    None,
    Hidden(Vec<f64>),
    Rng(ChaCha8Rng),
    Many(Vec<PolicyMemory>),
    /// Pending (observation, primitive action) from the previous step plus
    /// member memories, for confidence-based switching.
    Confidence {
        pending: Option<(Vec<f64>, usize)>,
        members: Vec<PolicyMemory>,
    },
}

/// Uniform acting contract over every policy kind.
pub trait ActPolicy: Send + Sync {
    /// Expected observation dimension; `usize::MAX` means "any" (policies
    /// that ignore the observation, like distractors).
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Fresh per-episode memory. `episode_seed` seeds any policy-private
    /// randomness so rollouts stay reproducible.
    fn init_memory(&self, episode_seed: u64) -> PolicyMemory;
    fn act(
        &self,
        obs: &[f64],
        memory: &mut PolicyMemory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action>;
}

/// One episode: initial observation plus one (action, reward, observation,
/// info) record per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// len == actions.len() + 1 (initial observation included).
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub infos: Vec<StepInfo>,
    /// Ended on a terminal condition rather than horizon truncation.
    pub terminal: bool,
    pub env_steps: usize,
}

impl Trajectory {
    /// Undiscounted episode return.
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub total_steps: usize,
    pub seed_base: u64,
}

/// Tagged union over the concrete task environments, so experiment configs
/// can carry "an environment" uniformly.
#[derive(Debug, Clone)]
pub enum EnvInstance {
    CarSd(CarSdEnv),
    CarBarrier(CarBarrierEnv),
    Hybrid(HybridEnv),
}

impl Env for EnvInstance {
    fn obs_dim(&self) -> usize {
        match self {
            EnvInstance::CarSd(e) => e.obs_dim(),
            EnvInstance::CarBarrier(e) => e.obs_dim(),
            EnvInstance::Hybrid(e) => e.obs_dim(),
        }
    }

    fn action_space(&self) -> ActionSpace {
        match self {
            EnvInstance::CarSd(e) => e.action_space(),
            EnvInstance::CarBarrier(e) => e.action_space(),
            EnvInstance::Hybrid(e) => e.action_space(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            EnvInstance::CarSd(e) => e.horizon(),
            EnvInstance::CarBarrier(e) => e.horizon(),
            EnvInstance::Hybrid(e) => e.horizon(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            EnvInstance::CarSd(e) => e.reset(seed),
            EnvInstance::CarBarrier(e) => e.reset(seed),
            EnvInstance::Hybrid(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &Action) -> StepOutcome {
        match self {
            EnvInstance::CarSd(e) => e.step(action),
            EnvInstance::CarBarrier(e) => e.step(action),
            EnvInstance::Hybrid(e) => e.step(action),
        }
    }
}

fn check_compat<E: Env, P: ActPolicy + ?Sized>(env: &E, policy: &P) -> Result<()> {
    if policy.obs_dim() != usize::MAX && env.obs_dim() != policy.obs_dim() {
        return Err(Error::config(format!(
            "environment emits {}-dim observations, policy expects {}",
            env.obs_dim(),
            policy.obs_dim()
        )));
    }
    if env.action_space() != policy.action_space() {
        return Err(Error::config(format!(
            "environment action space {:?} does not match policy {:?}",
            env.action_space(),
            policy.action_space()
        )));
    }
    Ok(())
}

/// Roll one episode. All stochasticity derives from `seed`: environment noise
/// uses the `STREAM_ENV` child seed, policy sampling the `STREAM_POLICY` one,
/// and recurrent/private policy memory is reset for the episode.
pub fn rollout<E: Env, P: ActPolicy + ?Sized>(
    env: &mut E,
    policy: &P,
    seed: u64,
) -> Result<Trajectory> {
    check_compat(env, policy)?;
    let horizon = env.horizon();
    let mut policy_rng = rng_from_seed(mix(seed, STREAM_POLICY));
    let mut memory = policy.init_memory(seed);

    let mut obs = env.reset(mix(seed, STREAM_ENV));
    let mut traj = Trajectory {
        observations: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        infos: Vec::with_capacity(horizon),
        terminal: false,
        env_steps: 0,
    };
    traj.observations.push(obs.clone());

    for _ in 0..horizon {
        let action = policy.act(&obs, &mut memory, &mut policy_rng)?;
        let outcome = env.step(&action);
        obs = outcome.obs;
        traj.observations.push(obs.clone());
        traj.actions.push(action);
        traj.rewards.push(outcome.reward);
        traj.infos.push(outcome.info);
        traj.env_steps += 1;
        if outcome.terminal {
            traj.terminal = true;
            break;
        }
    }
    Ok(traj)
}

/// Collect trajectories until the cumulative step count reaches
/// `min_total_steps`. Trajectory `i` uses seed `mix(seed_base, i)`; collection
/// runs in fixed-size waves evaluated in parallel and then consumed in index
/// order, so the result is independent of thread count.
pub fn batch_rollouts<E: Env, P: ActPolicy + Sync + ?Sized>(
    env: &E,
    policy: &P,
    min_total_steps: usize,
    seed_base: u64,
) -> Result<RolloutBatch> {
    if min_total_steps == 0 {
        return Err(Error::config("min_total_steps must be at least 1"));
    }
    check_compat(env, policy)?;

    let wave = min_total_steps.div_ceil(env.horizon()).max(1);
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut total_steps = 0usize;
    let mut next_index = 0u64;

    while total_steps < min_total_steps {
        let indices: Vec<u64> = (next_index..next_index + wave as u64).collect();
        next_index += wave as u64;
        let mut collected: Vec<Result<Trajectory>> = indices
            .par_iter()
            .map(|&i| {
                let mut local_env = env.clone();
                rollout(&mut local_env, policy, mix(seed_base, i))
            })
            .collect();
        for traj in collected.drain(..) {
            let traj = traj?;
            if total_steps >= min_total_steps {
                break;
            }
            total_steps += traj.env_steps;
            trajectories.push(traj);
        }
    }

    Ok(RolloutBatch {
        trajectories,
        total_steps,
        seed_base,
    })
}

/// Suffix sums of rewards discounted by `gamma`, computed backward:
/// out[t] = rewards[t] + gamma * out[t + 1].
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!(
            "discount factor {gamma} outside [0, 1]"
        )));
    }
    assert!(!rewards.is_empty(), "rewards must be non-empty");
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Mean undiscounted episode return over a batch.
pub fn mean_return(batch: &RolloutBatch) -> Result<f64> {
    if batch.trajectories.is_empty() {
        return Err(Error::config("cannot average an empty batch"));
    }
    Ok(batch
        .trajectories
        .iter()
        .map(Trajectory::episode_return)
        .sum::<f64>()
        / batch.trajectories.len() as f64)
}
