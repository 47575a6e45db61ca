use idql::critic::{train_critic, CriticConfig, CriticNets, CriticTrainer, ACTION_TAG};
use idql::envs::{
    generate_bandit_dataset, generate_gridworld_dataset, sample_batch, DiscreteBandit, Env,
    GridPolicy, GridWorld, PolicyMix,
};
use idql::losses::{solve_value, ConvexLoss, DiscreteActionDistribution};
use idql::oracles::value_iteration;
use idql::rng_from_seed;
use idql::tensorgrad::{ema_update, Graph};

fn config(loss: ConvexLoss, steps: u64) -> CriticConfig {
    CriticConfig {
        loss,
        hidden: vec![32, 32],
        lr: 1e-3,
        batch_size: 128,
        steps,
        report_every: steps,
        ..CriticConfig::default()
    }
}

fn two_arm_v(tau: f64, seed: u64) -> (f64, f64) {
    let bandit = DiscreteBandit::uniform(vec![0.0, 1.0], 0.0).unwrap();
    let mut rng = rng_from_seed(seed);
    let ds = generate_bandit_dataset(&bandit, 4000, seed, &mut rng).unwrap();
    let empirical = DiscreteActionDistribution::uniform(ds.rewards().to_vec()).unwrap();
    let target = solve_value(&ConvexLoss::Expectile { tau }, &empirical).unwrap();
    let cfg = CriticConfig {
        lr: 3e-4,
        batch_size: 256,
        ..config(ConvexLoss::Expectile { tau }, 4000)
    };
    let (nets, _) = train_critic(&cfg, &ds, &mut rng).unwrap();
    (nets.v(&[0.0]).unwrap(), target)
}

#[test]
fn bandit_values_converge_to_expectiles() {
    let (v, target) = two_arm_v(0.5, 1);
    assert!((v - 0.5).abs() <= 0.02, "τ=0.5: V={v} (empirical {target})");
    let (v, target) = two_arm_v(0.9, 1);
    assert!((target - 0.9).abs() < 0.01);
    assert!((v - target).abs() <= 0.03, "τ=0.9: V={v} vs {target}");
}

#[test]
fn final_value_is_monotone_in_tau() {
    let mean_v = |tau| (0..3).map(|s| two_arm_v(tau, 10 + s).0).sum::<f64>() / 3.0;
    let (a, b, c) = (mean_v(0.5), mean_v(0.7), mean_v(0.9));
    assert!(a <= b && b <= c, "{a} {b} {c}");
}

#[test]
fn critic_reads_only_dataset_actions() {
    let grid = GridWorld::default();
    let mut rng = rng_from_seed(5);
    let ds = generate_gridworld_dataset(&grid, PolicyMix::new(0.5, 0.1).unwrap(), 2000, 5, &mut rng)
        .unwrap();
    let cfg = config(ConvexLoss::Expectile { tau: 0.9 }, 1);
    let nets = CriticNets::new(ds.state_dim(), 2, &cfg, &mut rng).unwrap();
    let batch = sample_batch(&ds, 64, &mut rng).unwrap();

    let mut g = Graph::new();
    nets.value_loss_graph(&mut g, &cfg.loss, &batch).unwrap();
    let mut h = Graph::new();
    nets.q_loss_graph(&mut h, &batch, 0.99).unwrap();
    let sources: Vec<_> = g.tagged(ACTION_TAG).into_iter().chain(h.tagged(ACTION_TAG)).collect();
    assert_eq!(sources.len(), 2);
    for t in sources {
        for r in 0..t.rows() {
            assert_eq!(t.row(r), ds.action(batch.indices[r]));
        }
    }
}

#[test]
fn target_distance_decays_geometrically() {
    let mut rng = rng_from_seed(6);
    let cfg = config(ConvexLoss::Expectile { tau: 0.7 }, 1);
    let mut nets = CriticNets::new(3, 2, &cfg, &mut rng).unwrap();
    let other = CriticNets::new(3, 2, &cfg, &mut rng).unwrap();
    nets.q_target = other.q_online.clone();
    let d0 = nets.q_target.distance(&nets.q_online).unwrap();
    for _ in 0..200 {
        ema_update(&mut nets.q_target, &nets.q_online, 0.005).unwrap();
    }
    let d = nets.q_target.distance(&nets.q_online).unwrap();
    assert!((d / d0 - 0.995f64.powi(200)).abs() < 1e-12);
}

/// Monte-Carlo discounted return of a scripted policy from the start cell.
fn monte_carlo(grid: &GridWorld, policy: GridPolicy, episodes: usize, seed: u64) -> f64 {
    let mut env = grid.clone();
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset(&mut rng);
        let (mut ret, mut disc) = (0.0, 1.0);
        loop {
            let a = policy.act(&env, env.position(), &mut rng);
            let step = env.step(&a.vector(), &mut rng);
            ret += disc * step.reward;
            disc *= grid.gamma;
            if step.done || step.truncated {
                break;
            }
        }
        total += ret;
    }
    total / episodes as f64
}

#[test]
fn sarsa_consistency_on_gridworld() {
    let grid = GridWorld::default();
    let policy = GridPolicy::Optimal { epsilon: 0.3 };
    let mut rng = rng_from_seed(7);
    let ds = generate_gridworld_dataset(&grid, PolicyMix::new(1.0, 0.3).unwrap(), 20_000, 7, &mut rng)
        .unwrap();
    let cfg = CriticConfig {
        steps: 50_000,
        ..config(ConvexLoss::Expectile { tau: 0.5 }, 50_000)
    };
    let (nets, _) = train_critic(&cfg, &ds, &mut rng).unwrap();
    let v = nets.v(&grid.one_hot(grid.start)).unwrap();
    let mc = monte_carlo(&grid, policy, 20_000, 8);
    assert!((v - mc).abs() <= 0.05, "V(start) {v} vs Monte-Carlo {mc}");
}

#[test]
fn gridworld_values_stay_below_optimal() {
    let grid = GridWorld::default();
    let vt = value_iteration(&grid.to_tabular(), 1e-10).unwrap();
    let v_max = vt.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rng = rng_from_seed(9);
    let ds = generate_gridworld_dataset(&grid, PolicyMix::new(0.5, 0.1).unwrap(), 20_000, 9, &mut rng)
        .unwrap();
    let (nets, reports) = train_critic(&config(ConvexLoss::Expectile { tau: 0.9 }, 20_000), &ds, &mut rng).unwrap();
    assert!(reports.iter().all(|r| r.v_loss >= 0.0 && r.q_loss >= 0.0));
    let worst = (0..grid.n_cells())
        .map(|i| nets.v(&grid.one_hot(grid.cell(i))).unwrap().abs())
        .fold(0.0, f64::max);
    assert!(worst <= v_max + 0.05, "max |V| {worst} vs optimal {v_max}");
}

#[test]
fn trainer_steps_are_deterministic() {
    let bandit = DiscreteBandit::three_cluster();
    let run = || {
        let mut rng = rng_from_seed(3);
        let ds = generate_bandit_dataset(&bandit, 500, 3, &mut rng).unwrap();
        let cfg = config(ConvexLoss::Quantile { tau: 0.7 }, 50);
        let mut nets = CriticNets::new(1, 3, &cfg, &mut rng).unwrap();
        let mut t = CriticTrainer::new(cfg);
        for _ in 0..50 {
            let b = sample_batch(&ds, 64, &mut rng).unwrap();
            t.step(&mut nets, &b).unwrap();
        }
        nets.bundle().unwrap().to_bytes()
    };
    assert_eq!(run(), run());
}
