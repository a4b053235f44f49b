//! The uniform policy handle: every policy kind behind one acting contract.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::basis::QFunction;
use crate::env::{ActPolicy, Action, ActionSpace, PolicyMemory};
use crate::error::{Error, Result};
use crate::hybrid::LqrPolicy;
use crate::nn::{CategoricalDist, GruPolicy, MlpPolicy, NetPolicy};
use crate::rng::{mix, rng_from_seed};

/// A trained policy plus provenance metadata.
#[derive(Debug, Clone)]
pub struct PolicyHandle {
    pub kind: PolicyKind,
    /// Free-form identifier of the environment the policy was trained on.
    pub trained_on: String,
    /// Training seed (also the private-randomness seed for distractors).
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    Mlp(MlpPolicy),
    Gru(GruPolicy),
    GreedyQ(QFunction),
    Lqr(LqrPolicy),
    Distractor { action_count: usize },
    Meta(MetaPolicy),
}

/// A selector network over a basis set, packaged to act directly on the
/// primitive environment.
#[derive(Debug, Clone)]
pub struct MetaPolicy {
    pub selector: NetPolicy,
    pub basis: Vec<PolicyHandle>,
}

impl PolicyHandle {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            trained_on: String::new(),
            seed: 0,
        }
    }

    pub fn with_provenance(kind: PolicyKind, trained_on: &str, seed: u64) -> Self {
        Self {
            kind,
            trained_on: trained_on.to_string(),
            seed,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            PolicyKind::Mlp(_) => "mlp",
            PolicyKind::Gru(_) => "gru",
            PolicyKind::GreedyQ(_) => "greedy-q",
            PolicyKind::Lqr(_) => "lqr",
            PolicyKind::Distractor { .. } => "distractor",
            PolicyKind::Meta(_) => "meta",
        }
    }
}

/// Greedy wrapper over a trained Q-function (deterministic, ties to the
/// lowest action index).
pub fn greedy_policy(q: QFunction) -> PolicyHandle {
    PolicyHandle::new(PolicyKind::GreedyQ(q))
}

/// Uniform-random policy drawing from its own seeded generator.
pub fn make_distractor(action_count: usize, seed: u64) -> PolicyHandle {
    assert!(action_count >= 1);
    PolicyHandle {
        kind: PolicyKind::Distractor { action_count },
        trained_on: String::new(),
        seed,
    }
}

/// Run one net-policy step against a [`PolicyMemory`] slot.
fn net_dist(net: &NetPolicy, memory: &mut PolicyMemory, obs: &[f64]) -> Result<CategoricalDist> {
    match (net, memory) {
        (NetPolicy::Mlp(p), _) => Ok(p.forward(obs)?.0),
        (NetPolicy::Gru(p), PolicyMemory::Hidden(h)) => {
            let (h_next, dist) = p.step(h, obs)?;
            *h = h_next;
            Ok(dist)
        }
        (NetPolicy::Gru(_), _) => Err(Error::config(
            "recurrent policy received a non-hidden memory slot",
        )),
    }
}

fn net_memory(net: &NetPolicy) -> PolicyMemory {
    match net.initial_memory() {
        Some(h) => PolicyMemory::Hidden(h),
        None => PolicyMemory::None,
    }
}

impl PolicyHandle {
    /// Advance this policy one step as a member of a basis set.
    ///
    /// Stateful parts (recurrent hidden vectors, private generators) tick
    /// every step so each basis policy stays coherent with the episode;
    /// the action is materialized only when `selected`.
    pub fn tick(
        &self,
        obs: &[f64],
        memory: &mut PolicyMemory,
        rng: &mut ChaCha8Rng,
        selected: bool,
    ) -> Result<Option<Action>> {
        match (&self.kind, memory) {
            (PolicyKind::Mlp(p), _) => {
                if selected {
                    let dist = p.forward(obs)?.0;
                    Ok(Some(Action::Discrete(dist.sample(rng))))
                } else {
                    Ok(None)
                }
            }
            (PolicyKind::Gru(p), PolicyMemory::Hidden(h)) => {
                let (h_next, dist) = p.step(h, obs)?;
                *h = h_next;
                if selected {
                    Ok(Some(Action::Discrete(dist.sample(rng))))
                } else {
                    Ok(None)
                }
            }
            (PolicyKind::GreedyQ(q), _) => {
                if selected {
                    Ok(Some(Action::Discrete(q.greedy_action(obs))))
                } else {
                    Ok(None)
                }
            }
            (PolicyKind::Lqr(k), _) => {
                if selected {
                    Ok(Some(Action::Continuous(k.control(obs))))
                } else {
                    Ok(None)
                }
            }
            (PolicyKind::Distractor { action_count }, PolicyMemory::Rng(own)) => {
                // Draw every step so the stream does not depend on when this
                // policy happens to be selected.
                let a = own.gen_range(0..*action_count);
                Ok(selected.then_some(Action::Discrete(a)))
            }
            (PolicyKind::Meta(m), mem) => {
                if selected {
                    Ok(Some(meta_act(m, obs, mem, rng)?))
                } else {
                    meta_tick_only(m, obs, mem, rng)?;
                    Ok(None)
                }
            }
            (kind, mem) => Err(Error::config(format!(
                "policy {:?} received an incompatible memory slot {:?}",
                std::mem::discriminant(kind),
                std::mem::discriminant(mem),
            ))),
        }
    }
}

fn meta_memory(m: &MetaPolicy, episode_seed: u64) -> PolicyMemory {
    let mut slots = Vec::with_capacity(m.basis.len() + 1);
    slots.push(net_memory(&m.selector));
    for (i, b) in m.basis.iter().enumerate() {
        slots.push(b.init_memory(mix(episode_seed, 0x6261 + i as u64)));
    }
    PolicyMemory::Many(slots)
}

fn meta_act(
    m: &MetaPolicy,
    obs: &[f64],
    memory: &mut PolicyMemory,
    rng: &mut ChaCha8Rng,
) -> Result<Action> {
    let PolicyMemory::Many(slots) = memory else {
        return Err(Error::config("meta policy expects a composite memory"));
    };
    let (sel_mem, basis_mems) = slots.split_first_mut().expect("selector slot");
    let dist = net_dist(&m.selector, sel_mem, obs)?;
    let choice = dist.sample(rng);
    let mut action = None;
    for (i, (b, mem)) in m.basis.iter().zip(basis_mems.iter_mut()).enumerate() {
        if let Some(a) = b.tick(obs, mem, rng, i == choice)? {
            action = Some(a);
        }
    }
    action.ok_or_else(|| Error::config("meta selector index out of range"))
}

fn meta_tick_only(
    m: &MetaPolicy,
    obs: &[f64],
    memory: &mut PolicyMemory,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let PolicyMemory::Many(slots) = memory else {
        return Err(Error::config("meta policy expects a composite memory"));
    };
    let (sel_mem, basis_mems) = slots.split_first_mut().expect("selector slot");
    // Keep the selector's own recurrent state ticking too.
    let _ = net_dist(&m.selector, sel_mem, obs)?;
    for (b, mem) in m.basis.iter().zip(basis_mems.iter_mut()) {
        b.tick(obs, mem, rng, false)?;
    }
    Ok(())
}

impl ActPolicy for PolicyHandle {
    fn obs_dim(&self) -> usize {
        match &self.kind {
            PolicyKind::Mlp(p) => p.input_dim,
            PolicyKind::Gru(p) => p.input_dim,
            PolicyKind::GreedyQ(q) => q.features.dim,
            PolicyKind::Lqr(k) => k.gain.ncols(),
            // Distractors ignore the observation entirely.
            PolicyKind::Distractor { .. } => usize::MAX,
            PolicyKind::Meta(m) => m.selector.input_dim(),
        }
    }

    fn action_space(&self) -> ActionSpace {
        match &self.kind {
            PolicyKind::Mlp(p) => ActionSpace::Discrete(p.output_dim),
            PolicyKind::Gru(p) => ActionSpace::Discrete(p.output_dim),
            PolicyKind::GreedyQ(q) => ActionSpace::Discrete(q.n_actions),
            PolicyKind::Lqr(k) => ActionSpace::Continuous(k.gain.nrows()),
            PolicyKind::Distractor { action_count } => ActionSpace::Discrete(*action_count),
            PolicyKind::Meta(m) => m.basis[0].action_space(),
        }
    }

    fn init_memory(&self, episode_seed: u64) -> PolicyMemory {
        match &self.kind {
            PolicyKind::Mlp(_) | PolicyKind::GreedyQ(_) | PolicyKind::Lqr(_) => PolicyMemory::None,
            PolicyKind::Gru(p) => PolicyMemory::Hidden(p.initial_hidden()),
            PolicyKind::Distractor { .. } => {
                PolicyMemory::Rng(rng_from_seed(mix(self.seed, episode_seed)))
            }
            PolicyKind::Meta(m) => meta_memory(m, episode_seed),
        }
    }

    fn act(
        &self,
        obs: &[f64],
        memory: &mut PolicyMemory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action> {
        self.tick(obs, memory, rng, true)?
            .ok_or_else(|| Error::config("selected policy produced no action"))
    }
}
