use std::sync::Arc;

use asa_core::action::BoxSpace;
use asa_core::env::{DemonstrationSet, EnvConfig, GridConfig, ReachConfig};
use asa_core::grad::Graph;
use asa_core::harness::*;
use asa_core::policy::{Binding, Decoding, Policy, PolicyConfig, Sequence};
use asa_core::quant::UniformQuantizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reach(dims: usize) -> EnvConfig {
    EnvConfig::Reach(ReachConfig {
        dims,
        ..Default::default()
    })
}

fn tiny_cfg(env: EnvConfig, kind: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(&format!(
        "seed = 7\nasa.kind = \"{kind}\"\nasa.bins = 8\n\
         policy.width = 8\npolicy.layers = 1\npolicy.heads = 2\npolicy.context = 2\npolicy.head_hidden = 6\n\
         train.steps = 40\ntrain.batch_size = 8\ntrain.log_every = 10\ntrain.eval_episodes = 10\n"
    ))
    .unwrap();
    c.env = env;
    c
}

/// One demonstration cut down to its first two steps.
fn two_step_demos(env: &EnvConfig) -> DemonstrationSet {
    let mut d = make_demos(env, 1, 3).unwrap();
    let ep = &mut d.episodes[0];
    ep.actions.truncate(2);
    ep.observations.truncate(3);
    d
}

/// Normwise relative error between the backpropagated gradient of the full
/// two-step BC loss and central differences.
fn bc_grad_error(cfg: &ExperimentConfig, binding: Binding<f64>) -> f64 {
    let demos = two_step_demos(&cfg.env);
    let data = BcData::new(&demos, &binding).unwrap();
    let mut policy = new_policy(cfg, binding, 11).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<_> = policy.params().ids().collect();
    for &id in &ids {
        for x in policy.params_mut().get_mut(id).data_mut() {
            *x += 0.3 * rand::Rng::random_range(&mut r, -1.0..1.0);
        }
    }
    let (seq, tgt) = data.window(0, 1, 2);
    let (seqs, targets) = (vec![seq], vec![tgt]);
    let regress = matches!(policy.binding(), Binding::Regress(_));
    let mut g = Graph::new();
    let p = policy.params().bind(&mut g);
    let l = policy
        .teacher_forced_loss(&mut g, &p, &seqs, regress.then_some(&targets[..]))
        .unwrap();
    let mut grads = g.backward(l).unwrap();
    let analytic = policy.params().collect_grads(&p, &mut grads);
    drop(g);
    let h = 1e-5;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..policy.params().get(id).len() {
            let orig = policy.params().get(id).data()[i];
            policy.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = batch_loss(&policy, &seqs, &targets).unwrap();
            policy.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = batch_loss(&policy, &seqs, &targets).unwrap();
            policy.params_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[k].data()[i];
            num += (fd - an).powi(2);
            den += fd.powi(2).max(an.powi(2));
        }
    }
    num.sqrt() / den.sqrt()
}

#[test]
fn bc_gradient_on_two_step_episode_matches_finite_differences() {
    let cfg = tiny_cfg(reach(4), "uniform");
    let uq = Binding::Tokens(Arc::new(
        UniformQuantizer::new(BoxSpace::symmetric(4, 1.0), 8).unwrap(),
    ));
    let e = bc_grad_error(&cfg, uq);
    assert!(e < 1e-3, "token BC: {e}");
    let cfg = tiny_cfg(reach(4), "pred");
    let b = resolve(&cfg.asa, &cfg.env.action_space(), std::path::Path::new(""))
        .unwrap()
        .binding;
    let e = bc_grad_error(&cfg, b);
    assert!(e < 1e-3, "regression BC: {e}");
}

#[test]
fn bc_lowers_training_loss() {
    let cfg = tiny_cfg(reach(4), "uniform");
    let demos = make_demos(&cfg.env, 20, 1).unwrap();
    let binding = resolve(&cfg.asa, &cfg.env.action_space(), std::path::Path::new(""))
        .unwrap()
        .binding;
    let data = BcData::new(&demos, &binding).unwrap();
    let mut policy = new_policy(&cfg, binding, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (seqs, targets) = data.sample(64, 2, &mut r);
    let before = batch_loss(&policy, &seqs, &targets).unwrap();
    let bc = BcConfig {
        steps: 150,
        batch_size: 16,
        lr: 3e-3,
        warmup: 0.1,
        weight_decay: 0.0,
        grad_clip: 1.0,
        log_every: 50,
    };
    let log = train_bc(&mut policy, &data, &bc, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let after = batch_loss(&policy, &seqs, &targets).unwrap();
    assert!(after < before - 0.5, "{before} -> {after}");
    assert_eq!(
        log.records.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![50, 100, 150]
    );
}

#[test]
fn scripted_experts_pass_through_eval() {
    for env in [reach(4), reach(8), EnvConfig::Grid(GridConfig::default())] {
        let r = evaluate_expert(&env, 200, 4).unwrap();
        assert!(r.success_rate > 0.95, "{env:?}: {}", r.success_rate);
    }
}

#[test]
fn untrained_policy_rarely_reaches() {
    let cfg = tiny_cfg(reach(4), "uniform");
    let binding = resolve(&cfg.asa, &cfg.env.action_space(), std::path::Path::new(""))
        .unwrap()
        .binding;
    let policy = new_policy(&cfg, binding, 3).unwrap();
    let r = evaluate(&policy, &cfg.env, 200, 3, 50).unwrap();
    assert!(r.success_rate < 0.05, "{}", r.success_rate);
}

#[test]
fn evaluation_ignores_batch_size_and_repeats() {
    let cfg = tiny_cfg(reach(4), "uniform");
    let demos = make_demos(&cfg.env, 10, 2).unwrap();
    let binding = resolve(&cfg.asa, &cfg.env.action_space(), std::path::Path::new(""))
        .unwrap()
        .binding;
    let (policy, _, first) = fit_bc(&cfg, &demos, binding.clone(), 2).unwrap();
    let (_, _, again) = fit_bc(&cfg, &demos, binding, 2).unwrap();
    assert_eq!(first, again);
    let a = evaluate(&policy, &cfg.env, 23, 5, 1).unwrap();
    let b = evaluate(&policy, &cfg.env, 23, 5, 7).unwrap();
    let c = evaluate(&policy, &cfg.env, 23, 5, 50).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn exact_valid_probability_matches_unfiltered_sampling() {
    let mut cfg = tiny_cfg(EnvConfig::Grid(GridConfig::default()), "lang");
    cfg.asa.filter = false;
    let binding = resolve(&cfg.asa, &cfg.env.action_space(), std::path::Path::new(""))
        .unwrap()
        .binding;
    let Binding::Tokens(adapter) = binding.clone() else {
        panic!("word adapters emit tokens")
    };
    let v = adapter.vocab_size();
    let exact = valid_probability(adapter.as_ref(), &vec![1.0 / v as f64; v]).unwrap();
    let policy = new_policy(&cfg, binding, 4).unwrap();
    let env = cfg.env.build();
    let ctx = Sequence {
        instruction: 0,
        obs: vec![vec![0.0; env.obs_dim()]],
        tokens: vec![],
    };
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let n = 4000;
    let outs = policy
        .act(&vec![ctx; n], Decoding::Sample { temperature: 1.0 }, &mut r)
        .unwrap();
    let frac = outs.iter().filter(|o| !o.action.is_noop()).count() as f64 / n as f64;
    let sd = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((frac - exact).abs() < 4.0 * sd + 1e-9, "{frac} vs {exact}");
}

#[test]
fn checkpoint_reloads_into_the_same_policy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(EnvConfig::Grid(GridConfig::default()), "semlang");
    cfg.out = Some(dir.path().to_path_buf());
    cfg.train.env_steps = 128;
    cfg.train.rollout_envs = 4;
    cfg.train.rollout_len = 8;
    let out = cmd_train_pg(&cfg).unwrap();
    let ckpt = cfg.checkpoint_path();
    assert!(out.files.contains(&ckpt));
    let policy = load_policy(&ckpt, &cfg.env).unwrap();
    let report = evaluate(&policy, &cfg.env, cfg.train.eval_episodes, 7, 50).unwrap();
    assert_eq!(
        out.summary.get_f64("success_rate"),
        Some(report.success_rate)
    );
    let eval = cmd_eval(&cfg).unwrap();
    assert_eq!(
        eval.summary.get_f64("success_rate"),
        Some(report.success_rate)
    );
}

#[test]
fn sweep_rows_round_trip_through_csv() {
    let rows = vec![
        SweepRow {
            axis: SweepAxis::K,
            value: 16,
            holdout_mse: 0.012345678901234,
            success: 0.5,
            seed: 1,
        },
        SweepRow {
            axis: SweepAxis::M,
            value: 6,
            holdout_mse: 1e-9,
            success: 1.0,
            seed: 42,
        },
    ];
    let text = sweep_to_csv(&rows);
    assert!(text.starts_with(SWEEP_HEADER));
    assert_eq!(sweep_from_csv(&text).unwrap(), rows);
    assert!(sweep_from_csv("axis,value\n").is_err());
    assert!(sweep_from_csv(&format!("{SWEEP_HEADER}\nQ,1,0,0,0\n")).is_err());
}

#[test]
fn policy_config_follows_environment() {
    let cfg = tiny_cfg(reach(8), "pred");
    let env = cfg.env.build();
    let pc: PolicyConfig = policy_config(&cfg, env.as_ref());
    assert_eq!(pc.obs_dim, 24);
    assert_eq!(pc.proprio_dims, 8);
    let grid = tiny_cfg(EnvConfig::Grid(GridConfig::default()), "semlang");
    let env = grid.env.build();
    let pc = policy_config(&grid, env.as_ref());
    assert_eq!(pc.num_instructions, env.num_instructions());
    let _ = Policy::new(
        pc,
        resolve(
            &grid.asa,
            &grid.env.action_space(),
            std::path::Path::new(""),
        )
        .unwrap()
        .binding,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
}
