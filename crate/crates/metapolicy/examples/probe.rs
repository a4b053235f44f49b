//! Calibration probe for the Car-SD pipeline (scratch tool, not shipped).

use std::sync::Arc;
use std::time::Instant;

use metapolicy::basis::{q_learning_train, QLearningConfig};
use metapolicy::car::{CarSdConfig, CarSdEnv, RegimeLayout};
use metapolicy::env::{batch_rollouts, mean_return, Env};
use metapolicy::meta::{net_handle, train, MetaEnv, TrpoConfig};
use metapolicy::nn::{MlpPolicy, NetPolicy, ObsNormalizer};
use metapolicy::policy::{greedy_policy, PolicyHandle};
use metapolicy::rng::rng_from_seed;

fn eval_policy<E: Env, P: metapolicy::env::ActPolicy + Sync>(
    env: &E,
    policy: &P,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let batch = batch_rollouts(env, policy, n * env.horizon() - 1, seed).unwrap();
    let succ = batch.trajectories.iter().filter(|t| t.terminal).count() as f64
        / batch.trajectories.len() as f64;
    (mean_return(&batch).unwrap(), succ)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let distance_cost: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let episodes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let bandwidth: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let quick: bool = args.get(5).map(|s| s == "quick").unwrap_or(false);

    let mut cfg = CarSdConfig::default();
    cfg.distance_cost = distance_cost;
    println!("distance_cost = {distance_cost}, episodes = {episodes}, seed = {seed}, bandwidth = {bandwidth}");

    // Train one basis per regime on single-regime duplicates.
    let t0 = Instant::now();
    let qcfg = QLearningConfig {
        episodes,
        bandwidth_frac: bandwidth,
        ..QLearningConfig::default()
    };
    let curve = |name: &str, returns: &[f64]| {
        let window = 100.min(returns.len());
        for chunk_start in (0..returns.len()).step_by(window) {
            let end = (chunk_start + window).min(returns.len());
            let slice = &returns[chunk_start..end];
            let mean = slice.iter().sum::<f64>() / slice.len() as f64;
            let best = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("  {name} eps {chunk_start:4}..{end:4}: mean {mean:9.2} best {best:9.2}");
        }
    };
    let (lo, hi) = cfg.observation_bounds();
    let mut d1_cfg = cfg.clone();
    d1_cfg.layout = RegimeLayout::OnlyD1;
    let d1_env = CarSdEnv::new(d1_cfg.clone());
    let r1 = q_learning_train(&d1_env, lo.clone(), hi.clone(), &qcfg, seed).unwrap();
    println!("D1 basis trained in {:.1}s", t0.elapsed().as_secs_f64());
    curve("D1", &r1.episode_returns);
    let t0 = Instant::now();
    let mut d2_cfg = cfg.clone();
    d2_cfg.layout = RegimeLayout::OnlyD2;
    let d2_env = CarSdEnv::new(d2_cfg.clone());
    let r2 = q_learning_train(&d2_env, lo.clone(), hi.clone(), &qcfg, seed + 1).unwrap();
    println!("D2 basis trained in {:.1}s", t0.elapsed().as_secs_f64());
    curve("D2", &r2.episode_returns);

    let b1 = greedy_policy(r1.q);
    let b2 = greedy_policy(r2.q);

    // Evaluate on own regimes and the mixed map.
    let mixed_env = CarSdEnv::new(cfg.clone());
    for (name, b) in [("D1-basis", &b1), ("D2-basis", &b2)] {
        let own_env = if name == "D1-basis" {
            CarSdEnv::new(d1_cfg.clone())
        } else {
            CarSdEnv::new(d2_cfg.clone())
        };
        let (own_ret, own_succ) = eval_policy(&own_env, b, 50, 100);
        let (mix_ret, mix_succ) = eval_policy(&mixed_env, b, 50, 200);
        println!(
            "{name}: own return {own_ret:8.2} (succ {own_succ:.2}) | mixed return {mix_ret:8.2} (succ {mix_succ:.2})"
        );
    }

    if quick {
        return;
    }

    // Voting.
    let voting = metapolicy::baselines::VotingEnsemble::new(vec![b1.clone(), b2.clone()]);
    let (v_ret, v_succ) = eval_policy(&mixed_env, &voting, 50, 300);
    println!("voting: mixed return {v_ret:8.2} (succ {v_succ:.2})");

    // Quick meta-training probe.
    let t0 = Instant::now();
    let basis: Arc<Vec<PolicyHandle>> = Arc::new(vec![b1.clone(), b2.clone()]);
    let meta_env = MetaEnv::new(mixed_env.clone(), basis);
    let mut rng = rng_from_seed(seed + 10);
    let mut selector = NetPolicy::Mlp(MlpPolicy::new(
        4,
        2,
        ObsNormalizer::new(lo.clone(), hi.clone()),
        &mut rng,
    ));
    let tcfg = TrpoConfig {
        batch_size: 1000,
        iterations: 120,
        ..TrpoConfig::default()
    };
    let stats = train(&meta_env, &mut selector, &tcfg, seed + 20).unwrap();
    println!("meta-training took {:.1}s", t0.elapsed().as_secs_f64());
    for s in stats.iter().step_by(10) {
        println!(
            "  iter {:3}: return {:8.2} succ {:.2} kl {:.5} accepted {}",
            s.iteration, s.mean_return, s.success_rate, s.mean_kl, s.accepted
        );
    }
    let (m_ret, m_succ) = eval_policy(&meta_env, &net_handle(&selector), 50, 400);
    println!("meta converged eval: return {m_ret:8.2} (succ {m_succ:.2})");

    // From-scratch probe (shorter).
    let t0 = Instant::now();
    let mut scratch = NetPolicy::Mlp(MlpPolicy::new(
        4,
        9,
        ObsNormalizer::new(lo, hi),
        &mut rng,
    ));
    let scfg = TrpoConfig {
        batch_size: 1000,
        iterations: 300,
        ..TrpoConfig::default()
    };
    let sstats = train(&mixed_env, &mut scratch, &scfg, seed + 30).unwrap();
    println!("scratch training took {:.1}s", t0.elapsed().as_secs_f64());
    for s in sstats.iter().step_by(25) {
        println!(
            "  iter {:3}: return {:8.2} succ {:.2}",
            s.iteration, s.mean_return, s.success_rate
        );
    }
}
