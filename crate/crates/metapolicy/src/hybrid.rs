//! Hybrid-control task: random linear systems tiled over a map by a Voronoi
//! partition, with LQR controllers as basis policies.
//!
//! Dynamics act on the offset from the goal state, so the goal is the
//! equilibrium every controller regulates toward: e' = A e + B u + w, with
//! the map-frame state s = e + goal used for observations and region lookup.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::car::Rect;
use crate::env::{Action, ActionSpace, Env, StepInfo, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::{mix, rng_from_seed, standard_normal};

/// Discrete-time linear system x' = A x + B u.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration
/// from P0 = Q:
///   P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA
/// until the max-norm update falls below `tol`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let riccati_map = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let atp = a.transpose() * p;
        let btp = b.transpose() * p;
        let gain_den = r + &btp * b;
        let inv = gain_den
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numeric("singular R + B'PB in Riccati iteration"))?;
        Ok(q + &atp * a - &atp * b * inv * &btp * a)
    };

    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..max_iter {
        let next = riccati_map(&p)?;
        let delta = (&next - &p).abs().max();
        // Re-symmetrize to keep roundoff from accumulating.
        p = 0.5 * (&next + next.transpose());
        if delta < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Riccati iteration did not converge in {max_iter} iterations"
        )));
    }
    let residual = (&p - riccati_map(&p)?).abs().max();
    if residual >= 10.0 * tol {
        return Err(Error::numeric(format!(
            "Riccati residual {residual:e} exceeds {:e}",
            10.0 * tol
        )));
    }
    Ok(p)
}

/// LQR gain K = (R + B'PB)^-1 B'PA; the control law is u = -K (x - goal).
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = solve_dare(a, b, q, r, 1e-10, 10_000)?;
    let btp = b.transpose() * &p;
    let inv = (r + &btp * b)
        .try_inverse()
        .ok_or_else(|| Error::numeric("singular R + B'PB in gain computation"))?;
    Ok(inv * btp * a)
}

/// State-feedback controller driving toward a goal state.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrPolicy {
    pub gain: DMatrix<f64>,
    pub goal: DVector<f64>,
}

impl LqrPolicy {
    pub fn control(&self, state: &[f64]) -> Vec<f64> {
        let e = DVector::from_iterator(
            state.len(),
            state.iter().zip(self.goal.iter()).map(|(s, g)| s - g),
        );
        let u = -&self.gain * e;
        u.iter().cloned().collect()
    }
}

/// Nominal input map: bottom m x m block is the identity; when d = 2m the top
/// block is 0.5 I (double-integrator style position coupling).
pub fn nominal_input_map(d: usize, m: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(d, m);
    for j in 0..m {
        b[(d - m + j, j)] = 1.0;
    }
    if d == 2 * m {
        for j in 0..m {
            b[(j, j)] = 0.5;
        }
    }
    b
}

/// Sample a stabilizable linear system: A = I + E, B = B0 + F with uniform
/// entry perturbations, resampling until the Riccati iteration converges.
pub fn sample_linear_system(
    rng: &mut ChaCha8Rng,
    d: usize,
    m: usize,
    a_width: f64,
    b_width: f64,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LinearSystem> {
    assert!(d >= 1 && m >= 1);
    let b0 = nominal_input_map(d, m);
    for _ in 0..100 {
        let mut a = DMatrix::identity(d, d);
        for v in a.iter_mut() {
            *v += rng.gen_range(-1.0..1.0) * a_width;
        }
        let mut b = b0.clone();
        for v in b.iter_mut() {
            *v += rng.gen_range(-1.0..1.0) * b_width;
        }
        if let Ok(k) = lqr_gain(&a, &b, q, r) {
            if spectral_radius(&(&a - &b * &k)) < 1.0 {
                return Ok(LinearSystem { a, b });
            }
        }
    }
    Err(Error::numeric(
        "no stabilizable system found in 100 attempts",
    ))
}

/// Voronoi tiling: each map point takes the label of its nearest seed
/// (squared Euclidean distance, ties to the lowest seed index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiPartition {
    pub seeds: Vec<(f64, f64)>,
    pub labels: Vec<usize>,
}

impl VoronoiPartition {
    pub fn assign(&self, point: (f64, f64)) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, s) in self.seeds.iter().enumerate() {
            let d = (point.0 - s.0).powi(2) + (point.1 - s.1).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.labels[best]
    }

    /// Sample `n_seeds` uniform seeds labeled uniformly over `n_labels`,
    /// regenerating until a 120x120 grid over the map touches every label.
    pub fn generate(
        rng: &mut ChaCha8Rng,
        map: &Rect,
        n_seeds: usize,
        n_labels: usize,
    ) -> Self {
        loop {
            let seeds: Vec<(f64, f64)> = (0..n_seeds)
                .map(|_| {
                    (
                        rng.gen_range(map.min_x..map.max_x),
                        rng.gen_range(map.min_y..map.max_y),
                    )
                })
                .collect();
            let labels: Vec<usize> = (0..n_seeds).map(|_| rng.gen_range(0..n_labels)).collect();
            let part = Self { seeds, labels };
            let mut seen = vec![false; n_labels];
            for i in 0..120 {
                for j in 0..120 {
                    let p = (
                        map.min_x + (i as f64 + 0.5) / 120.0 * map.width(),
                        map.min_y + (j as f64 + 0.5) / 120.0 * map.height(),
                    );
                    seen[part.assign(p)] = true;
                }
            }
            if seen.iter().all(|&s| s) {
                return part;
            }
        }
    }
}

/// Scalar configuration for the hybrid-control task; the sampled world
/// (systems, gains, partition) derives deterministically from `world_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub map: Rect,
    pub start: [f64; 4],
    pub goal: [f64; 4],
    pub goal_radius: f64,
    pub horizon: usize,
    pub process_noise_std: f64,
    pub q_diag: [f64; 4],
    pub r_diag: [f64; 2],
    pub n_seeds: usize,
    pub n_regions: usize,
    pub a_perturbation: f64,
    pub b_perturbation: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            map: Rect::new(0.0, 0.0, 12.0, 12.0),
            start: [1.0, 1.0, 0.0, 0.0],
            goal: [10.0, 10.0, 0.0, 0.0],
            goal_radius: 0.4,
            horizon: 100,
            process_noise_std: 0.01,
            q_diag: [1.0; 4],
            r_diag: [0.1; 2],
            n_seeds: 100,
            n_regions: 4,
            a_perturbation: 0.1,
            b_perturbation: 0.05,
        }
    }
}

impl HybridConfig {
    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.q_diag))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.r_diag))
    }

    pub fn observation_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![self.map.min_x, self.map.min_y, -3.0, -3.0],
            vec![self.map.max_x, self.map.max_y, 3.0, 3.0],
        )
    }
}

/// A sampled hybrid world: the region systems plus any extra systems whose
/// controllers act as additional basis policies.
#[derive(Debug, Clone)]
pub struct HybridWorld {
    pub cfg: HybridConfig,
    pub systems: Vec<LinearSystem>,
    pub controllers: Vec<LqrPolicy>,
    pub partition: VoronoiPartition,
    pub world_seed: u64,
}

impl HybridWorld {
    /// Deterministically sample `n_controllers >= cfg.n_regions` systems and
    /// their LQR controllers; the first `n_regions` tile the map.
    pub fn generate(cfg: &HybridConfig, n_controllers: usize, world_seed: u64) -> Result<Self> {
        assert!(n_controllers >= cfg.n_regions);
        let q = cfg.q_matrix();
        let r = cfg.r_matrix();
        let mut sys_rng = rng_from_seed(mix(world_seed, 0x5953));
        let mut systems = Vec::with_capacity(n_controllers);
        let mut controllers = Vec::with_capacity(n_controllers);
        for _ in 0..n_controllers {
            let sys = sample_linear_system(
                &mut sys_rng,
                4,
                2,
                cfg.a_perturbation,
                cfg.b_perturbation,
                &q,
                &r,
            )?;
            let gain = lqr_gain(&sys.a, &sys.b, &q, &r)?;
            controllers.push(LqrPolicy {
                gain,
                goal: DVector::from_row_slice(&cfg.goal),
            });
            systems.push(sys);
        }
        let mut part_rng = rng_from_seed(mix(world_seed, 0x7061));
        let partition =
            VoronoiPartition::generate(&mut part_rng, &cfg.map, cfg.n_seeds, cfg.n_regions);
        Ok(Self {
            cfg: cfg.clone(),
            systems,
            controllers,
            partition,
            world_seed,
        })
    }

    pub fn env(&self) -> HybridEnv {
        HybridEnv::new(
            self.cfg.clone(),
            self.systems[..self.cfg.n_regions].to_vec(),
            self.partition.clone(),
        )
    }
}

/// The hybrid-control environment: per-region linear dynamics with process
/// noise, quadratic cost, and a position goal.
#[derive(Debug, Clone)]
pub struct HybridEnv {
    pub cfg: HybridConfig,
    region_systems: Vec<LinearSystem>,
    partition: VoronoiPartition,
    /// Offset from the goal state.
    error: DVector<f64>,
    steps: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

impl HybridEnv {
    pub fn new(
        cfg: HybridConfig,
        region_systems: Vec<LinearSystem>,
        partition: VoronoiPartition,
    ) -> Self {
        assert_eq!(region_systems.len(), cfg.n_regions);
        let error = DVector::from_row_slice(&cfg.start) - DVector::from_row_slice(&cfg.goal);
        Self {
            cfg,
            region_systems,
            partition,
            error,
            steps: 0,
            finished: true,
            rng: rng_from_seed(0),
        }
    }

    /// Map-frame state s = e + goal.
    fn map_state(&self) -> Vec<f64> {
        self.error
            .iter()
            .zip(&self.cfg.goal)
            .map(|(e, g)| e + g)
            .collect()
    }
}

impl Env for HybridEnv {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.error = DVector::from_row_slice(&self.cfg.start)
            - DVector::from_row_slice(&self.cfg.goal);
        self.steps = 0;
        self.finished = false;
        self.rng = rng_from_seed(seed);
        self.map_state()
    }

    fn step(&mut self, action: &Action) -> StepOutcome {
        assert!(!self.finished, "step on a finished episode");
        let u = match action {
            Action::Continuous(u) => DVector::from_row_slice(u),
            Action::Discrete(_) => panic!("hybrid control expects continuous actions"),
        };
        assert!(u.iter().all(|v| v.is_finite()), "non-finite control input");

        let s = self.map_state();
        let label = self.partition.assign((s[0], s[1]));
        let sys = &self.region_systems[label];

        // Quadratic cost at the pre-step state.
        let q = self.cfg.q_matrix();
        let r = self.cfg.r_matrix();
        let reward = -(self.error.transpose() * &q * &self.error)[(0, 0)]
            - (u.transpose() * &r * &u)[(0, 0)];

        let mut next = &sys.a * &self.error + &sys.b * &u;
        if self.cfg.process_noise_std > 0.0 {
            for v in next.iter_mut() {
                *v += self.cfg.process_noise_std * standard_normal(&mut self.rng);
            }
        }
        self.error = next;
        self.steps += 1;

        let s = self.map_state();
        let dist = (s[0] - self.cfg.goal[0]).hypot(s[1] - self.cfg.goal[1]);
        let terminal = dist < self.cfg.goal_radius;
        self.finished = terminal || self.steps >= self.cfg.horizon;

        StepOutcome {
            obs: s.clone(),
            reward,
            terminal,
            info: StepInfo {
                position: Some((s[0], s[1])),
                collided: false,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_matrix(v: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 1, &[v])
    }

    #[test]
    fn scalar_dare_closed_form() {
        // A = B = Q = R = 1: P solves P^2 - P - 1 = 0, the golden ratio.
        let p = solve_dare(
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
            1e-10,
            10_000,
        )
        .unwrap();
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-6, "P = {}", p[(0, 0)]);

        let k = lqr_gain(
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
        )
        .unwrap();
        assert!((k[(0, 0)] - 0.6180340).abs() < 1e-6, "K = {}", k[(0, 0)]);
    }

    #[test]
    fn zero_dynamics_matrix_gives_p_equals_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_dare(
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &q,
            &DMatrix::identity(2, 2),
            1e-12,
            100,
        )
        .unwrap();
        assert_eq!(p, q);
        let k = lqr_gain(
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &q,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(k.abs().max() < 1e-12);
    }

    #[test]
    fn cheap_control_limit() {
        // A = I, B = I, Q = I, R = r: scalar closed form P = (1 + sqrt(1+4r))/2
        // per coordinate; P approaches Q as r -> 0.
        let r: f64 = 1e-6;
        let p = solve_dare(
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
            &(r * DMatrix::identity(2, 2)),
            1e-12,
            100_000,
        )
        .unwrap();
        let expected = (1.0 + (1.0 + 4.0 * r).sqrt()) / 2.0;
        for i in 0..2 {
            assert!((p[(i, i)] - expected).abs() < 1e-9);
        }
        assert!((p[(0, 0)] - 1.0).abs() < 1e-5, "P should be close to Q");
    }

    #[test]
    fn degenerate_sampler_returns_nominal_system() {
        let mut rng = rng_from_seed(0);
        let sys = sample_linear_system(
            &mut rng,
            1,
            1,
            0.0,
            0.0,
            &scalar_matrix(1.0),
            &scalar_matrix(1.0),
        )
        .unwrap();
        assert_eq!(sys.a[(0, 0)], 1.0);
        assert_eq!(sys.b[(0, 0)], 1.0);
    }

    #[test]
    fn sampled_systems_are_stabilized_by_their_gains() {
        let cfg = HybridConfig::default();
        let q = cfg.q_matrix();
        let r = cfg.r_matrix();
        let mut rng = rng_from_seed(99);
        for _ in 0..100 {
            let sys = sample_linear_system(&mut rng, 4, 2, 0.1, 0.05, &q, &r).unwrap();
            let k = lqr_gain(&sys.a, &sys.b, &q, &r).unwrap();
            let rho = spectral_radius(&(&sys.a - &sys.b * &k));
            assert!(rho < 1.0, "spectral radius {rho}");
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let cfg = HybridConfig::default();
        let (q, r) = (cfg.q_matrix(), cfg.r_matrix());
        let mut r1 = rng_from_seed(5);
        let mut r2 = rng_from_seed(5);
        let a = sample_linear_system(&mut r1, 4, 2, 0.1, 0.05, &q, &r).unwrap();
        let b = sample_linear_system(&mut r2, 4, 2, 0.1, 0.05, &q, &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn voronoi_nearest_and_tie_rules() {
        let part = VoronoiPartition {
            seeds: vec![(0.0, 0.0), (10.0, 10.0)],
            labels: vec![3, 1],
        };
        assert_eq!(part.assign((1.0, 1.0)), 3);
        assert_eq!(part.assign((9.0, 9.5)), 1);
        // Exactly equidistant: lowest seed index wins.
        assert_eq!(part.assign((5.0, 5.0)), 3);
    }

    #[test]
    fn voronoi_matches_brute_force_scan() {
        let mut rng = rng_from_seed(31);
        let map = Rect::new(0.0, 0.0, 12.0, 12.0);
        let part = VoronoiPartition::generate(&mut rng, &map, 100, 4);
        for _ in 0..10_000 {
            let p = (rng.gen_range(0.0..12.0), rng.gen_range(0.0..12.0));
            // Independent argmin with the same tie rule.
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (i, s) in part.seeds.iter().enumerate() {
                let d = (p.0 - s.0) * (p.0 - s.0) + (p.1 - s.1) * (p.1 - s.1);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(part.assign(p), part.labels[best]);
        }
    }

    #[test]
    fn partition_covers_all_labels() {
        let mut rng = rng_from_seed(8);
        let map = Rect::new(0.0, 0.0, 12.0, 12.0);
        let part = VoronoiPartition::generate(&mut rng, &map, 100, 4);
        let mut seen = [false; 4];
        for i in 0..120 {
            for j in 0..120 {
                seen[part.assign((0.05 + i as f64 * 0.1, 0.05 + j as f64 * 0.1))] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn identity_world(cfg: &HybridConfig) -> HybridEnv {
        let sys = LinearSystem {
            a: DMatrix::identity(4, 4),
            b: nominal_input_map(4, 2),
        };
        let partition = VoronoiPartition {
            seeds: vec![(6.0, 6.0)],
            labels: vec![0],
        };
        HybridEnv::new(cfg.clone(), vec![sys], partition)
    }

    #[test]
    fn zero_control_identity_dynamics_is_fixed_point() {
        let mut cfg = HybridConfig::default();
        cfg.process_noise_std = 0.0;
        cfg.n_regions = 1;
        let mut env = identity_world(&cfg);
        let obs0 = env.reset(0);
        let out = env.step(&Action::Continuous(vec![0.0, 0.0]));
        assert_eq!(out.obs, obs0);
        // Reward is the quadratic cost at the pre-step error.
        let e: Vec<f64> = cfg.start.iter().zip(&cfg.goal).map(|(s, g)| s - g).collect();
        let expected: f64 = -e.iter().map(|v| v * v).sum::<f64>();
        assert!((out.reward - expected).abs() < 1e-9);
    }

    #[test]
    fn at_goal_zero_cost_and_done() {
        let mut cfg = HybridConfig::default();
        cfg.process_noise_std = 0.0;
        cfg.n_regions = 1;
        cfg.start = cfg.goal;
        let mut env = identity_world(&cfg);
        env.reset(0);
        let out = env.step(&Action::Continuous(vec![0.0, 0.0]));
        assert_eq!(out.reward, 0.0);
        assert!(out.terminal);
    }

    #[test]
    fn lqr_reaches_goal_in_single_region_world() {
        let mut cfg = HybridConfig::default();
        cfg.n_regions = 1;
        cfg.n_seeds = 1;
        let world = HybridWorld::generate(&cfg, 1, 7).unwrap();
        let mut env = world.env();
        let mut obs = env.reset(123);
        let controller = &world.controllers[0];
        let mut reached = false;
        for _ in 0..cfg.horizon {
            let u = controller.control(&obs);
            let out = env.step(&Action::Continuous(u));
            obs = out.obs;
            if out.terminal {
                reached = true;
                break;
            }
        }
        assert!(reached, "LQR failed to reach the goal within the horizon");
    }

    #[test]
    fn zero_noise_steps_are_deterministic() {
        let mut cfg = HybridConfig::default();
        cfg.process_noise_std = 0.0;
        cfg.n_regions = 1;
        let mut e1 = identity_world(&cfg);
        let mut e2 = identity_world(&cfg);
        e1.reset(1);
        e2.reset(2); // different seeds: no noise means identical behavior
        let u = Action::Continuous(vec![0.3, -0.2]);
        for _ in 0..10 {
            let a = e1.step(&u);
            let b = e2.step(&u);
            assert_eq!(a.obs, b.obs);
            assert_eq!(a.reward, b.reward);
        }
    }
}
