use mlr::envs::{environments, make_env, EnvSpec, PixelCatch, PixelEnv, PixelPendulum, RawEnv};
use mlr::rng::Rng;
use mlr::{Action, MlrError};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn spec(id: &str, repeat: usize, stack: usize, frames: usize) -> EnvSpec {
    EnvSpec { id: id.into(), render_size: (84, 84), action_repeat: repeat, frame_stack: stack, max_episode_frames: frames }
}

fn random_action(env: &PixelEnv, rng: &mut Rng) -> Action {
    match env.action_space() {
        mlr::ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
        mlr::ActionSpace::Discrete { count } => Action::Discrete(rng.random_range(0..count)),
    }
}

#[test]
fn observation_shapes_and_range() {
    for (id, channels) in [("pendulum", 3), ("catch", 1)] {
        let mut env = make_env(&spec(id, 2, 3, 100)).unwrap();
        let obs = env.reset(4);
        assert_eq!(obs.shape(), [3 * channels, 84, 84]);
        assert_eq!(env.observation_shape(), [3 * channels, 84, 84]);
        assert!(obs.in_unit_range());
        let mut rng = Rng::seed_from_u64(1);
        let a = random_action(&env, &mut rng);
        let s = env.step(&a).unwrap();
        assert!(s.obs.in_unit_range());
    }
}

#[test]
fn same_seed_and_actions_reproduce_everything() {
    for id in ["pendulum", "catch"] {
        let trace = || {
            let mut env = make_env(&spec(id, 4, 3, 120)).unwrap();
            let mut rng = Rng::seed_from_u64(2);
            let mut out = vec![env.reset(17)];
            let mut rewards = Vec::new();
            while !env.is_done() {
                let a = random_action(&env, &mut rng);
                let s = env.step(&a).unwrap();
                out.push(s.obs);
                rewards.push(s.reward);
            }
            (out, rewards)
        };
        assert_eq!(trace(), trace());
    }
}

#[test]
fn zero_torque_energy_drift_is_below_one_percent() {
    let stopped = Action::Continuous(vec![0.0]);
    for theta0 in [0.5, 1.5, 2.0, 2.8, -2.4] {
        let mut p = PixelPendulum::new(84, 84);
        p.theta = theta0;
        p.omega = 0.0;
        let e0 = p.energy();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            p.step(&stopped);
            worst = worst.max((p.energy() - e0).abs() / e0.abs());
        }
        assert!(worst < 0.01, "theta0 {theta0}: drift {worst}");
    }
}

#[test]
fn rendering_is_pure() {
    let mut p = PixelPendulum::new(84, 84);
    p.reset(3);
    assert_eq!(p.render(), p.render());
    let mut q = PixelPendulum::new(84, 84);
    q.theta = p.theta;
    q.omega = p.omega;
    assert_eq!(p.render(), q.render());
}

#[test]
fn scripted_catch_policy_catches_everything() {
    for seed in 0..20 {
        let mut c = PixelCatch::new(84, 84);
        c.reset(seed);
        let (mut total, mut frames) = (0.0, 0);
        loop {
            let (r, done) = c.step(&Action::Discrete(c.scripted_action()));
            assert!([-1.0, 0.0, 1.0].contains(&r));
            total += r;
            frames += 1;
            if done {
                break;
            }
        }
        assert_eq!(total, PixelCatch::DROPS as f64);
        assert_eq!(frames, c.episode_frames());
    }
}

#[test]
fn a_still_paddle_scores_by_column() {
    for seed in 0..10 {
        let mut c = PixelCatch::new(84, 84);
        c.reset(seed);
        loop {
            let col = c.ball.1;
            let (r, done) = c.step(&Action::Discrete(1));
            if r != 0.0 {
                assert_eq!(r, if col == c.paddle { 1.0 } else { -1.0 });
            }
            if done {
                break;
            }
        }
    }
}

#[test]
fn wrapper_reward_sum_matches_the_raw_env() {
    for (id, repeat) in [("pendulum", 4), ("catch", 3)] {
        let mut env = make_env(&spec(id, repeat, 2, 80)).unwrap();
        let mut raw = environments().get(id).unwrap()((84, 84));
        env.reset(9);
        raw.reset(9);
        let mut rng = Rng::seed_from_u64(10);
        let (mut wrapped, mut direct, mut frames) = (0.0, 0.0, 0usize);
        while !env.is_done() {
            let a = random_action(&env, &mut rng);
            wrapped += env.step(&a).unwrap().reward;
            for _ in 0..repeat {
                let (r, t) = raw.step(&a);
                direct += r;
                frames += 1;
                if t || frames >= 80 {
                    break;
                }
            }
        }
        assert!((wrapped - direct).abs() < 1e-9, "{id}: {wrapped} vs {direct}");
        assert_eq!(env.env_steps(), frames as u64);
    }
}

#[test]
fn finished_episodes_refuse_steps() {
    let mut env = make_env(&spec("pendulum", 4, 1, 8)).unwrap();
    env.reset(0);
    let a = Action::Continuous(vec![0.0]);
    assert!(!env.step(&a).unwrap().done);
    assert!(env.step(&a).unwrap().done);
    assert!(matches!(env.step(&a), Err(MlrError::SteppedDoneEnv)));
    env.reset(1);
    assert!(env.step(&a).is_ok());
}

#[test]
fn state_round_trip_continues_identically() {
    let mut env = make_env(&spec("catch", 2, 2, 200)).unwrap();
    env.reset(3);
    let mut rng = Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a = random_action(&env, &mut rng);
        env.step(&a).unwrap();
    }
    let saved = env.save_state().unwrap();
    let actions: Vec<Action> = (0..6).map(|_| random_action(&env, &mut rng)).collect();
    let run = |env: &mut PixelEnv| actions.iter().map(|a| env.step(a).unwrap()).map(|s| (s.obs, s.reward)).collect::<Vec<_>>();
    let first = run(&mut env);
    let mut other = make_env(&spec("catch", 2, 2, 200)).unwrap();
    other.load_state(&saved).unwrap();
    assert_eq!(run(&mut other), first);
}

proptest! {
    #[test]
    fn repeat_counts_raw_frames(repeat in 1usize..6, steps in 1usize..20, seed in any::<u64>()) {
        let mut env = make_env(&EnvSpec { render_size: (16, 16), ..spec("pendulum", repeat, 2, 10_000) }).unwrap();
        env.reset(seed);
        let a = Action::Continuous(vec![0.3]);
        for _ in 0..steps {
            let s = env.step(&a).unwrap();
            prop_assert!(s.reward >= 0.0 && s.reward <= repeat as f64);
        }
        prop_assert_eq!(env.env_steps(), (repeat * steps) as u64);
    }

    #[test]
    fn episodes_end_within_the_frame_budget(repeat in 1usize..5, budget in 1usize..60, seed in any::<u64>()) {
        let mut env = make_env(&EnvSpec { render_size: (16, 16), ..spec("catch", repeat, 1, budget) }).unwrap();
        env.reset(seed);
        let mut steps = 0;
        while !env.is_done() {
            env.step(&Action::Discrete(1)).unwrap();
            steps += 1;
        }
        prop_assert!(env.env_steps() as usize <= budget);
        prop_assert!(steps <= budget.div_ceil(repeat));
    }
}
