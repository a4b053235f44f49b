//! RC-car kinematics and the two car tasks.
//!
//! Car-SD: drive to a goal across two dynamics regimes (position drift near
//! the goal, steering bias elsewhere). Car-Barrier: drive around a rectangular
//! obstacle under uniform dynamics. Both use a bicycle model over a
//! four-dimensional state (x, y, v, theta) and the same 9-action set of
//! (velocity delta, steering) pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionSpace, Env, StepInfo, StepOutcome};
use crate::rng::{rng_from_seed, standard_normal};

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl CarState {
    pub fn observation(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }

    pub fn distance_to(&self, point: (f64, f64)) -> f64 {
        (self.x - point.0).hypot(self.y - point.1)
    }
}

/// Discrete action: 3 velocity deltas x 3 steering angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarAction {
    pub index: usize,
}

pub const CAR_ACTION_COUNT: usize = 9;
const DV_TABLE: [f64; 3] = [0.03, 0.0, -0.03];
const STEER_TABLE: [f64; 3] = [
    std::f64::consts::FRAC_PI_6,
    0.0,
    -std::f64::consts::FRAC_PI_6,
];

impl CarAction {
    pub fn new(index: usize) -> Self {
        assert!(index < CAR_ACTION_COUNT, "car action index out of range");
        Self { index }
    }

    /// (velocity delta, steering angle in radians).
    pub fn decode(self) -> (f64, f64) {
        (DV_TABLE[self.index / 3], STEER_TABLE[self.index % 3])
    }

    /// Inverse of [`decode`]; the pair must match table entries exactly.
    pub fn encode(dv: f64, steer: f64) -> Option<Self> {
        let di = DV_TABLE.iter().position(|&d| d == dv)?;
        let si = STEER_TABLE.iter().position(|&s| s == steer)?;
        Some(Self::new(di * 3 + si))
    }
}

/// Constant biases defining a dynamics regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarDynamics {
    /// Drift added to (x, y) every step (slippage).
    pub position_bias: (f64, f64),
    /// Offset added to the commanded steering angle (alignment issues).
    pub steer_bias: f64,
}

impl CarDynamics {
    pub fn nominal() -> Self {
        Self {
            position_bias: (0.0, 0.0),
            steer_bias: 0.0,
        }
    }
}

/// Axis-aligned rectangle (closed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= self.min_x && p.0 <= self.max_x && p.1 >= self.min_y && p.1 <= self.max_y
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Bicycle-model integration constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarKinematics {
    pub dt: f64,
    pub length: f64,
    pub v_max: f64,
}

impl Default for CarKinematics {
    fn default() -> Self {
        Self {
            dt: 0.1,
            length: 0.3,
            v_max: 0.3,
        }
    }
}

/// One bicycle-model step under a dynamics regime, clamped to the map.
///
///   v' = clip(v + dv)
///   theta' = wrap(theta + (v'/L) tan(steer + steer_bias) dt)
///   (x', y') = (x, y) + v' (cos theta', sin theta') dt + position_bias
pub fn car_step(
    state: &CarState,
    action: CarAction,
    dynamics: &CarDynamics,
    kin: &CarKinematics,
    bounds: &Rect,
) -> (CarState, bool) {
    let (dv, steer) = action.decode();
    let v = (state.v + dv).clamp(-kin.v_max, kin.v_max);
    let theta = wrap_angle(state.theta + v / kin.length * (steer + dynamics.steer_bias).tan() * kin.dt);
    let mut x = state.x + v * theta.cos() * kin.dt + dynamics.position_bias.0;
    let mut y = state.y + v * theta.sin() * kin.dt + dynamics.position_bias.1;
    let mut collided = false;
    if x < bounds.min_x || x > bounds.max_x || y < bounds.min_y || y > bounds.max_y {
        collided = true;
        x = x.clamp(bounds.min_x, bounds.max_x);
        y = y.clamp(bounds.min_y, bounds.max_y);
    }
    (CarState { x, y, v, theta }, collided)
}

/// Earliest parameter t in [0, 1] at which the segment p0 -> p1 meets the
/// closed rectangle, if any (slab test, inclusive boundaries).
fn segment_rect_entry(p0: (f64, f64), p1: (f64, f64), rect: &Rect) -> Option<f64> {
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let mut t_min = 0.0f64;
    let mut t_max = 1.0f64;
    for (start, delta, lo, hi) in [
        (p0.0, d.0, rect.min_x, rect.max_x),
        (p0.1, d.1, rect.min_y, rect.max_y),
    ] {
        if delta.abs() < 1e-300 {
            if start < lo || start > hi {
                return None;
            }
        } else {
            let mut t1 = (lo - start) / delta;
            let mut t2 = (hi - start) / delta;
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            t_min = t_min.max(t1);
            t_max = t_max.min(t2);
            if t_min > t_max {
                return None;
            }
        }
    }
    Some(t_min)
}

/// Whether the swept segment p0 -> p1 touches the closed rectangle.
pub fn barrier_collision(p0: (f64, f64), p1: (f64, f64), rect: &Rect) -> bool {
    segment_rect_entry(p0, p1, rect).is_some()
}

/// Reward-shaping variants for Car-SD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardShaping {
    /// -c * distance each step.
    DistanceProportional,
    /// -1 each step regardless of position.
    ConstantMinusOne,
    /// Alias of the proportional-distance penalty.
    NegativeLinear,
    /// -c * distance^2 each step.
    NegativeQuadratic,
}

/// Sensing-noise settings: with probability `probability` per step, every
/// observation component receives zero-mean Gaussian noise with standard
/// deviation `scale` times that dimension's configured span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoiseConfig {
    pub probability: f64,
    pub scale: f64,
}

impl ObservationNoiseConfig {
    pub fn none() -> Self {
        Self {
            probability: 0.0,
            scale: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.probability > 0.0 && self.scale > 0.0
    }
}

/// Corrupt a state observation without touching the underlying state.
pub fn noisy_observe(
    state: &CarState,
    cfg: &ObservationNoiseConfig,
    ranges: &[f64; 4],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut obs = state.observation().to_vec();
    if !cfg.is_active() {
        return obs;
    }
    let corrupted: f64 = rng.gen();
    if corrupted < cfg.probability {
        for (o, range) in obs.iter_mut().zip(ranges) {
            *o += cfg.scale * range * standard_normal(rng);
        }
    }
    obs
}

/// Which dynamics regimes are present on the Car-SD map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeLayout {
    /// D1 inside the disk around the goal, D2 elsewhere (the target task).
    Mixed,
    /// D1 everywhere (basis-training duplicate).
    OnlyD1,
    /// D2 everywhere (basis-training duplicate).
    OnlyD2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarSdConfig {
    pub bounds: Rect,
    pub start: CarState,
    pub goal: (f64, f64),
    pub goal_radius: f64,
    pub goal_speed_limit: f64,
    /// Radius of the D1 disk around the goal.
    pub regime_radius: f64,
    pub d1: CarDynamics,
    pub d2: CarDynamics,
    pub layout: RegimeLayout,
    pub horizon: usize,
    pub shaping: RewardShaping,
    /// Multiplier on the distance penalty terms (the shaped penalties are
    /// -distance_cost * dist or -distance_cost * dist^2 per step).
    pub distance_cost: f64,
    pub wall_penalty: f64,
    pub goal_bonus: f64,
    pub kinematics: CarKinematics,
    pub noise: ObservationNoiseConfig,
}

impl Default for CarSdConfig {
    fn default() -> Self {
        Self {
            bounds: Rect::new(0.0, 0.0, 7.0, 4.0),
            start: CarState {
                x: 1.0,
                y: 2.0,
                v: 0.0,
                theta: 0.0,
            },
            goal: (4.0, 2.0),
            goal_radius: 0.2,
            goal_speed_limit: 0.2,
            regime_radius: 1.0,
            d1: CarDynamics {
                position_bias: (0.005, 0.005),
                steer_bias: 0.0,
            },
            d2: CarDynamics {
                position_bias: (0.0, 0.0),
                steer_bias: 10.0f64.to_radians(),
            },
            layout: RegimeLayout::Mixed,
            horizon: 500,
            shaping: RewardShaping::DistanceProportional,
            distance_cost: 1.0,
            wall_penalty: -10.0,
            goal_bonus: 100.0,
            kinematics: CarKinematics::default(),
            noise: ObservationNoiseConfig::none(),
        }
    }
}

impl CarSdConfig {
    /// Regime lookup: inside the disk around the goal is D1; the rest is D2.
    pub fn regime_at(&self, x: f64, y: f64) -> &CarDynamics {
        match self.layout {
            RegimeLayout::OnlyD1 => &self.d1,
            RegimeLayout::OnlyD2 => &self.d2,
            RegimeLayout::Mixed => {
                if (x - self.goal.0).hypot(y - self.goal.1) < self.regime_radius {
                    &self.d1
                } else {
                    &self.d2
                }
            }
        }
    }

    pub fn reached_goal(&self, state: &CarState) -> bool {
        state.distance_to(self.goal) < self.goal_radius && state.v.abs() < self.goal_speed_limit
    }

    pub fn observation_ranges(&self) -> [f64; 4] {
        [
            self.bounds.width(),
            self.bounds.height(),
            2.0 * self.kinematics.v_max,
            std::f64::consts::TAU,
        ]
    }

    pub fn observation_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![
                self.bounds.min_x,
                self.bounds.min_y,
                -self.kinematics.v_max,
                -std::f64::consts::PI,
            ],
            vec![
                self.bounds.max_x,
                self.bounds.max_y,
                self.kinematics.v_max,
                std::f64::consts::PI,
            ],
        )
    }
}

/// Per-step Car-SD reward: shaped position penalty plus collision and goal
/// event terms.
pub fn car_sd_reward(
    cfg: &CarSdConfig,
    state_after: &CarState,
    collided: bool,
    reached_goal: bool,
) -> f64 {
    let dist = state_after.distance_to(cfg.goal);
    let mut reward = match cfg.shaping {
        RewardShaping::DistanceProportional | RewardShaping::NegativeLinear => {
            -cfg.distance_cost * dist
        }
        RewardShaping::ConstantMinusOne => -1.0,
        RewardShaping::NegativeQuadratic => -cfg.distance_cost * dist * dist,
    };
    if collided {
        reward += cfg.wall_penalty;
    }
    if reached_goal {
        reward += cfg.goal_bonus;
    }
    reward
}

/// Car with split dynamics.
#[derive(Debug, Clone)]
pub struct CarSdEnv {
    pub cfg: CarSdConfig,
    state: CarState,
    steps: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

impl CarSdEnv {
    pub fn new(cfg: CarSdConfig) -> Self {
        let state = cfg.start;
        Self {
            cfg,
            state,
            steps: 0,
            finished: true, // require reset before stepping
            rng: rng_from_seed(0),
        }
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    fn observe(&mut self) -> Vec<f64> {
        noisy_observe(
            &self.state,
            &self.cfg.noise,
            &self.cfg.observation_ranges(),
            &mut self.rng,
        )
    }
}

impl Env for CarSdEnv {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(CAR_ACTION_COUNT)
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.state = self.cfg.start;
        self.steps = 0;
        self.finished = false;
        self.rng = rng_from_seed(seed);
        self.observe()
    }

    fn step(&mut self, action: &Action) -> StepOutcome {
        assert!(!self.finished, "step on a finished episode");
        let action = CarAction::new(action.index());
        let dynamics = *self.cfg.regime_at(self.state.x, self.state.y);
        let (next, collided) = car_step(
            &self.state,
            action,
            &dynamics,
            &self.cfg.kinematics,
            &self.cfg.bounds,
        );
        let reached = self.cfg.reached_goal(&next);
        let reward = car_sd_reward(&self.cfg, &next, collided, reached);
        self.state = next;
        self.steps += 1;
        self.finished = reached || self.steps >= self.cfg.horizon;
        StepOutcome {
            obs: self.observe(),
            reward,
            terminal: reached,
            info: StepInfo {
                position: Some((next.x, next.y)),
                collided,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarBarrierConfig {
    pub bounds: Rect,
    pub start: CarState,
    pub goal: (f64, f64),
    pub goal_radius: f64,
    pub barrier: Rect,
    pub horizon: usize,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub barrier_penalty: f64,
    pub wall_penalty: f64,
    pub dynamics: CarDynamics,
    pub kinematics: CarKinematics,
}

impl Default for CarBarrierConfig {
    fn default() -> Self {
        Self {
            bounds: Rect::new(0.0, 0.0, 5.0, 4.0),
            start: CarState {
                x: 1.0,
                y: 2.0,
                v: 0.0,
                theta: 0.0,
            },
            goal: (4.0, 2.0),
            goal_radius: 0.4,
            barrier: Rect::new(2.4, 1.2, 2.6, 2.8),
            horizon: 200,
            step_penalty: -1.0,
            goal_reward: 500.0,
            barrier_penalty: -100.0,
            wall_penalty: -100.0,
            dynamics: CarDynamics::nominal(),
            kinematics: CarKinematics::default(),
        }
    }
}

impl CarBarrierConfig {
    pub fn reached_goal(&self, state: &CarState) -> bool {
        state.distance_to(self.goal) < self.goal_radius
    }

    pub fn observation_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![
                self.bounds.min_x,
                self.bounds.min_y,
                -self.kinematics.v_max,
                -std::f64::consts::PI,
            ],
            vec![
                self.bounds.max_x,
                self.bounds.max_y,
                self.kinematics.v_max,
                std::f64::consts::PI,
            ],
        )
    }
}

/// Car with a rectangular obstacle between start and goal.
#[derive(Debug, Clone)]
pub struct CarBarrierEnv {
    pub cfg: CarBarrierConfig,
    state: CarState,
    steps: usize,
    finished: bool,
}

impl CarBarrierEnv {
    pub fn new(cfg: CarBarrierConfig) -> Self {
        let state = cfg.start;
        Self {
            cfg,
            state,
            steps: 0,
            finished: true,
        }
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }
}

impl Env for CarBarrierEnv {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(CAR_ACTION_COUNT)
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.state = self.cfg.start;
        self.steps = 0;
        self.finished = false;
        self.state.observation().to_vec()
    }

    fn step(&mut self, action: &Action) -> StepOutcome {
        assert!(!self.finished, "step on a finished episode");
        let action = CarAction::new(action.index());
        let from = (self.state.x, self.state.y);
        let (mut next, wall_hit) = car_step(
            &self.state,
            action,
            &self.cfg.dynamics,
            &self.cfg.kinematics,
            &self.cfg.bounds,
        );

        // Barrier blocks motion: stop just short of the contact point.
        let barrier_hit =
            match segment_rect_entry(from, (next.x, next.y), &self.cfg.barrier) {
                Some(t) => {
                    let t = (t - 1e-6).max(0.0);
                    next.x = from.0 + t * (next.x - from.0);
                    next.y = from.1 + t * (next.y - from.1);
                    true
                }
                None => false,
            };

        let reached = self.cfg.reached_goal(&next);
        let mut reward = self.cfg.step_penalty;
        if barrier_hit {
            reward += self.cfg.barrier_penalty;
        }
        if wall_hit {
            reward += self.cfg.wall_penalty;
        }
        if reached {
            reward += self.cfg.goal_reward;
        }

        self.state = next;
        self.steps += 1;
        self.finished = reached || self.steps >= self.cfg.horizon;
        StepOutcome {
            obs: next.observation().to_vec(),
            reward,
            terminal: reached,
            info: StepInfo {
                position: Some((next.x, next.y)),
                collided: barrier_hit || wall_hit,
            },
        }
    }
}
