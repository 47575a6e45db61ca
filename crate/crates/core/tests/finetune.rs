use idql::critic::CriticConfig;
use idql::diffusion::{BehaviorModel, DdpmConfig, DiffusionSchedule, SamplerConfig, ScheduleKind, ScoreArch, ScoreNetConfig};
use idql::envs::{generate_gridworld_dataset, GridWorld, PolicyMix, ReplayBuffer};
use idql::finetune::{finetune, write_curve_csv, FinetuneConfig, FinetuneMode};
use idql::losses::ConvexLoss;
use idql::critic::CriticNets;
use idql::rng_from_seed;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Setup {
    critic: CriticNets,
    behavior: BehaviorModel,
    buffer: ReplayBuffer,
    config: FinetuneConfig,
}

fn setup(mode: FinetuneMode, env_steps: u64) -> Setup {
    let grid = GridWorld::default();
    let mut rng = rng_from_seed(11);
    let ds = generate_gridworld_dataset(&grid, PolicyMix::new(0.5, 0.1).unwrap(), 300, 11, &mut rng).unwrap();
    let critic_cfg = CriticConfig {
        loss: ConvexLoss::Expectile { tau: 0.9 },
        hidden: vec![8],
        batch_size: 32,
        ..CriticConfig::default()
    };
    let critic = CriticNets::new(ds.state_dim(), ds.action_dim(), &critic_cfg, &mut rng).unwrap();
    let net = ScoreNetConfig {
        hidden_dim: 8,
        n_blocks: 1,
        time_embed_dim: 4,
        ..ScoreNetConfig::new(ScoreArch::LnResnet, ds.state_dim(), 2)
    };
    let mut behavior =
        BehaviorModel::new(net, DiffusionSchedule::new(ScheduleKind::vp(), 5).unwrap(), &mut rng).unwrap();
    behavior.sampler = SamplerConfig {
        clip: Some((-1.0, 1.0)),
        noise_at_last_step: false,
    };
    let config = FinetuneConfig {
        mode,
        env_steps,
        eval_every: 10,
        eval_episodes: 1,
        eval_max_steps: 20,
        n_samples: 4,
        critic: critic_cfg,
        ddpm: DdpmConfig {
            batch_size: 32,
            ..DdpmConfig::default()
        },
    };
    Setup {
        critic,
        behavior,
        buffer: ReplayBuffer::from_dataset(ds),
        config,
    }
}

#[test]
fn zero_budget_leaves_models_unchanged() {
    for mode in [FinetuneMode::Max, FinetuneMode::Imp] {
        let mut s = setup(mode, 0);
        let (critic0, behavior0) = (s.critic.bundle().unwrap(), s.behavior.to_bytes());
        let len0 = s.buffer.len();
        let out = finetune(&mut s.critic, &mut s.behavior, s.buffer, &mut GridWorld::default(), &s.config, &mut rng_from_seed(1))
            .unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.curve[0].env_step, 0);
        assert_eq!(out.buffer.len(), len0);
        assert_eq!(s.critic.bundle().unwrap(), critic0);
        assert_eq!(s.behavior.to_bytes(), behavior0);
    }
}

#[test]
fn max_mode_freezes_the_behavior_model() {
    let mut s = setup(FinetuneMode::Max, 35);
    let (critic0, behavior0) = (s.critic.bundle().unwrap(), s.behavior.to_bytes());
    let len0 = s.buffer.len();
    let out = finetune(&mut s.critic, &mut s.behavior, s.buffer, &mut GridWorld::default(), &s.config, &mut rng_from_seed(2))
        .unwrap();
    assert_eq!(s.behavior.to_bytes(), behavior0);
    assert_ne!(s.critic.bundle().unwrap(), critic0);
    assert_eq!(out.buffer.len(), len0 + 35);
    assert_eq!(out.buffer.online_len(), 35);
    let steps: Vec<u64> = out.curve.iter().map(|p| p.env_step).collect();
    assert_eq!(steps, [0, 10, 20, 30, 35]);
}

#[test]
fn imp_mode_trains_the_behavior_model() {
    let mut s = setup(FinetuneMode::Imp, 5);
    let behavior0 = s.behavior.params.clone();
    let out = finetune(&mut s.critic, &mut s.behavior, s.buffer, &mut GridWorld::default(), &s.config, &mut rng_from_seed(3))
        .unwrap();
    assert!(s.behavior.params.distance(&behavior0).unwrap() > 0.0);
    assert_eq!(out.buffer.online_len(), 5);
    assert_eq!(FinetuneMode::Imp.grad_steps(), 2);
    assert_eq!(FinetuneMode::Max.grad_steps(), 1);
}

#[test]
fn finetuning_is_deterministic_and_writes_the_curve() {
    let run = || {
        let mut s = setup(FinetuneMode::Max, 12);
        finetune(&mut s.critic, &mut s.behavior, s.buffer, &mut GridWorld::default(), &s.config, &mut rng_from_seed(4))
            .unwrap()
            .curve
    };
    let curve = run();
    assert_eq!(curve, run());
    let mut out = Vec::new();
    write_curve_csv(&curve, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next(), Some("env_step,eval_return_mean,eval_return_std"));
    assert_eq!(text.lines().count(), 1 + curve.len());
}

#[test]
fn zero_eval_interval_is_an_error() {
    let mut s = setup(FinetuneMode::Max, 3);
    s.config.eval_every = 0;
    assert!(finetune(&mut s.critic, &mut s.behavior, s.buffer, &mut GridWorld::default(), &s.config, &mut rng_from_seed(5))
        .is_err());
    assert_eq!("imp".parse::<FinetuneMode>(), Ok(FinetuneMode::Imp));
    assert!("both".parse::<FinetuneMode>().is_err());
}
