use idql::diffusion::{LossNorm, ScoreArch};
use idql::experiment::{
    run, EnvKind, ExperimentConfig, ExperimentError, ExperimentKind, ExtractionKind, Manifest,
};
use proptest::prelude::*;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[test]
fn defaults_follow_the_reference_hyperparameters() {
    let c = ExperimentConfig::default();
    assert_eq!(c.critic_lr, 3e-4);
    assert_eq!(c.actor_lr, 3e-4);
    assert_eq!(c.critic_batch_size, 256);
    assert_eq!(c.actor_batch_size, 1024);
    assert_eq!(c.diffusion_steps, 5);
    assert_eq!(c.schedule, "vp");
    assert_eq!(c.ema, 0.005);
    assert_eq!(c.gamma, 0.99);
    assert_eq!(c.hidden_dim, 256);
    assert_eq!(c.n_blocks, 3);
    assert_eq!(c.dropout, 0.1);
    assert_eq!(c.arch, ScoreArch::LnResnet);
    assert_eq!(c.n_samples, 64);
    assert_eq!(c.loss_norm, LossNorm::L2);
    c.validate().unwrap();
    for kind in ExperimentKind::ALL {
        let p = ExperimentConfig::preset(kind);
        assert_eq!(p.kind, kind);
        if !matches!(kind, ExperimentKind::DdpmSample | ExperimentKind::Evaluate) {
            p.validate().unwrap();
        }
    }
}

#[test]
fn empty_text_is_the_default_config() {
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn unknown_and_invalid_fields_are_rejected() {
    assert!(matches!(
        ExperimentConfig::from_toml("learning_rate = 0.1"),
        Err(ExperimentError::Parse(_))
    ));
    match ExperimentConfig::from_toml("gamma = 1.5") {
        Err(ExperimentError::Field { field, .. }) => assert_eq!(field, "gamma"),
        other => panic!("{other:?}"),
    }
    match ExperimentConfig::from_toml("loss_family = \"expectile\"\nloss_param = 1.2") {
        Err(ExperimentError::Field { field, .. }) => assert_eq!(field, "loss_param"),
        other => panic!("{other:?}"),
    }
    match ExperimentConfig::from_toml("time_embed_dim = 7") {
        Err(ExperimentError::Field { field, .. }) => assert_eq!(field, "time_embed_dim"),
        other => panic!("{other:?}"),
    }
    let missing = ExperimentConfig::for_kind(ExperimentKind::Evaluate);
    match missing.validate() {
        Err(ExperimentError::Field { field, .. }) => assert_eq!(field, "behavior_checkpoint"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_config_fails_before_writing_anything() {
    let root = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::preset(ExperimentKind::Audit);
    c.audit_trials = 0;
    assert!(run(&c, root.path()).is_err());
    assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
}

#[test]
fn set_parses_typed_values() {
    let mut c = ExperimentConfig::default();
    c.set("critic_steps", "12").unwrap();
    c.set("arch", "mlp").unwrap();
    c.set("env", "bandit2d").unwrap();
    c.set("bandit_means", "[1.0, 2.0]").unwrap();
    assert_eq!(c.critic_steps, 12);
    assert_eq!(c.arch, ScoreArch::Mlp);
    assert_eq!(c.env, EnvKind::Bandit2d);
    assert_eq!(c.bandit_means, vec![1.0, 2.0]);
    assert!(c.set("no_such_field", "1").is_err());
    assert!(c.set("critic_steps", "many").is_err());
}

#[test]
fn overlay_keeps_absent_fields() {
    let mut c = ExperimentConfig::preset(ExperimentKind::Figure1);
    c.overlay_toml("seed = 4\nextraction = \"raw\"\n").unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.extraction, ExtractionKind::Raw);
    assert_eq!(c.critic_steps, ExperimentConfig::preset(ExperimentKind::Figure1).critic_steps);
    assert_eq!(c.extraction_spec().unwrap().n_samples, 1);
    assert!(matches!(c.overlay_toml("nope = 1"), Err(ExperimentError::Parse(_))));
    assert!(matches!(c.overlay_toml("seed = "), Err(ExperimentError::Parse(_))));
}

proptest! {
    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        tau in 0.01f64..0.99,
        lr in 1e-6f64..1e-1,
        steps in 1usize..100,
        kind in 0usize..10,
        arch in any::<bool>(),
        path in proptest::option::of("[a-z/]{1,12}"),
    ) {
        let c = ExperimentConfig {
            kind: ExperimentKind::ALL[kind],
            seed,
            loss_param: tau,
            critic_lr: lr,
            diffusion_steps: steps,
            arch: if arch { ScoreArch::Mlp } else { ScoreArch::LnResnet },
            dataset_path: path,
            ..ExperimentConfig::default()
        };
        let text = c.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}

fn read_manifest(dir: &std::path::Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn audit_run_is_reproducible_and_within_tolerance() {
    let mut c = ExperimentConfig::preset(ExperimentKind::Audit);
    c.audit_trials = 50;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&c, a.path()).unwrap();
    let rb = run(&c, b.path()).unwrap();
    assert_eq!(ra.manifest, rb.manifest);
    assert_eq!(
        std::fs::read(ra.dir.join("manifest.json")).unwrap(),
        std::fs::read(rb.dir.join("manifest.json")).unwrap()
    );
    assert_eq!(read_manifest(&ra.dir), ra.manifest);
    let names: Vec<_> = ra.manifest.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["audit.json", "config.toml"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ra.dir.join("audit.json")).unwrap()).unwrap();
    assert!(report["max_residual"].as_f64().unwrap() <= 1e-6);
    assert!(report["max_grad_rel_error"].as_f64().unwrap() <= 1e-4);
    // the stored config reproduces the run
    let stored = std::fs::read_to_string(ra.dir.join("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&stored).unwrap(), c);
}

#[test]
fn figure2_and_bandit_sweep_outputs() {
    let root = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::preset(ExperimentKind::Figure2);
    c.dataset_size = 3000;
    let out = run(&c, root.path()).unwrap();
    let csv = std::fs::read_to_string(out.dir.join("figure2.csv")).unwrap();
    assert!(csv.starts_with("family,param,v_star,mean_implicit_reward,std\n"));
    assert_eq!(csv.lines().count(), 1 + 7 + 7 + 9);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.dir.join("figure2.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);

    let c = ExperimentConfig::preset(ExperimentKind::BanditSweep);
    let out = run(&c, root.path()).unwrap();
    let csv = std::fs::read_to_string(out.dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("family,param,V_star,E_pi_imp_Q,fixed_point_gap"));
    for line in lines {
        let gap: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(gap <= 1e-6, "{line}");
    }
}

#[test]
fn ddpm_train_then_sample_from_the_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::preset(ExperimentKind::DdpmTrain);
    c.dataset_size = 500;
    c.actor_steps = 5;
    c.actor_batch_size = 64;
    c.hidden_dim = 8;
    c.time_embed_dim = 8;
    let trained = run(&c, root.path()).unwrap();
    let ckpt = trained.dir.join("behavior.ckpt");

    let mut s = ExperimentConfig::preset(ExperimentKind::DdpmSample);
    s.behavior_checkpoint = Some(ckpt.display().to_string());
    s.sample_count = 20;
    let sampled = run(&s, root.path()).unwrap();
    let csv = std::fs::read_to_string(sampled.dir.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y"));
    assert_eq!(csv.lines().count(), 21);
    let again = run(&s, root.path()).unwrap();
    assert_eq!(again.manifest, sampled.manifest);
}

#[test]
fn evaluate_reproduces_the_training_run_evaluation() {
    let root = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::preset(ExperimentKind::TrainOffline);
    c.dataset_size = 400;
    c.critic_steps = 20;
    c.critic_hidden = 8;
    c.actor_steps = 10;
    c.hidden_dim = 8;
    c.time_embed_dim = 8;
    c.n_samples = 4;
    c.eval_episodes = 2;
    c.max_episode_steps = 20;
    let trained = run(&c, root.path()).unwrap();
    let names: Vec<_> = trained.manifest.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(
        names,
        ["behavior.ckpt", "config.toml", "critic.ckpt", "critic_train.csv", "dataset.bin", "ddpm_train.csv", "eval.json"]
    );
    let read = |p: std::path::PathBuf| -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
    };
    let first = read(trained.dir.join("eval.json"));
    assert!((first["v_star"].as_f64().unwrap() - (2.0 * 0.99f64.powi(8) - 1.0)).abs() < 1e-9);

    let e = ExperimentConfig {
        kind: ExperimentKind::Evaluate,
        critic_checkpoint: Some(trained.dir.join("critic.ckpt").display().to_string()),
        behavior_checkpoint: Some(trained.dir.join("behavior.ckpt").display().to_string()),
        ..c.clone()
    };
    let evaluated = run(&e, root.path()).unwrap();
    let second = read(evaluated.dir.join("eval.json"));
    for key in ["mean_return", "std_return", "mean_discounted_return", "truncated"] {
        assert_eq!(first[key], second[key], "{key}");
    }

    // a reloaded dataset file gives the same run outputs
    let reload = ExperimentConfig {
        dataset_path: Some(trained.dir.join("dataset.bin").display().to_string()),
        ..c
    };
    let rerun = run(&reload, root.path()).unwrap();
    let hash = |m: &Manifest, name: &str| m.files.iter().find(|f| f.path == name).unwrap().sha256.clone();
    for name in ["critic.ckpt", "behavior.ckpt", "dataset.bin"] {
        assert_eq!(hash(&trained.manifest, name), hash(&rerun.manifest, name), "{name}");
    }
}

#[test]
fn toy_datasets_cannot_be_evaluated() {
    let mut c = ExperimentConfig::preset(ExperimentKind::TrainOffline);
    c.env = EnvKind::Toy2d;
    assert!(matches!(idql::experiment::make_env(&c), Err(ExperimentError::Field { field: "env", .. })));
}
