//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use autograd::check::relative_error;
use autograd::{Adam, AdamConfig, Graph, ParamStore};
use mlr::agents::{build_agent, categorical_projection, ActMode, AgentSpec, Rainbow, RainbowConfig, Sac, SacConfig};
use mlr::decoder::{positional_table, DecoderConfig, LatentDecoder};
use mlr::envs::{make_env, EnvSpec};
use mlr::eval::{hns, iqm, optimality_gap, performance_profile};
use mlr::mlr::{MlrConfig, MlrObjective};
use mlr::nets::{Encoder, EncoderConfig, EncoderVariant, HeadConfig, MomentumPair};
use mlr::pixelops::{apply_mask, sample_mask, AugmentSpec, CropMode, CropSpec, CubeMaskSpec, IntensitySpec};
use mlr::replay::{PriorityConfig, ReplayBuffer};
use mlr::rng::{Rng, SeedStreams};
use mlr::{Action, ActionSpace, Observation, Trajectory, Transition};
use mlr_cli::ablation::{render_table, run_ablation, Grid};
use mlr_cli::config::{parse_override, parse_pairs};
use mlr_cli::runner::checkpoint_name;
use mlr_cli::{ExperimentConfig, Trainer};
use rand::{Rng as _, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome, Duration);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_pairs(name: &str) -> Vec<(String, String)> {
    parse_pairs(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn masking_exactness() -> Outcome {
    let spec = CubeMaskSpec { k: 8, h: 10, w: 10, ratio: 0.5, ..CubeMaskSpec::default() };
    let mut rng = Rng::seed_from_u64(1);
    let seq: Vec<Observation> = (0..16)
        .map(|_| Observation::new(1, 84, 84, (0..84 * 84).map(|_| rng.random_range(1u8..=255) as f32 / 255.0).collect()).unwrap())
        .collect();
    for draw in 0..1000 {
        let plan = sample_mask(&spec, [16, 84, 84], &mut rng).map_err(|e| e.to_string())?;
        ensure(plan.grid.len() == 162 && plan.masked_cells() == 81, || {
            format!("draw {draw}: {} of {} cells", plan.masked_cells(), plan.grid.len())
        })?;
        let out = apply_mask(&seq, &plan, 0.0).map_err(|e| e.to_string())?;
        let pm = plan.pixel_mask();
        let exact = seq
            .iter()
            .flat_map(|o| &o.pixels)
            .zip(out.iter().flat_map(|o| &o.pixels))
            .zip(&pm)
            .all(|((a, b), &masked)| if masked { *b == 0.0 } else { a.to_bits() == b.to_bits() });
        ensure(exact, || format!("draw {draw}: pixels differ from the plan"))?;
    }
    Ok("1000 draws, 81/162 cells each".into())
}

const SIDE: usize = 8;
const K: usize = 4;

fn tiny_config() -> MlrConfig {
    MlrConfig {
        seq_len: K,
        mask: CubeMaskSpec { k: 2, h: 4, w: 4, ratio: 0.5, strategy: "cube".into(), fill_value: 0.0 },
        heads: HeadConfig { projection: true, prediction: true, hidden_dim: 6, projection_dim: 5 },
        decoder_layers: 1,
        decoder_heads: 2,
        warmup_steps: 0,
        aux_batch: 2,
        lr: 1e-2,
        ..MlrConfig::default()
    }
}

fn augment(margin: usize, intensity: f64) -> AugmentSpec {
    let mut a = AugmentSpec::new(SIDE, margin, CropMode::Render);
    a.intensity.scale = intensity;
    a
}

struct Tiny {
    encoder: Encoder,
    params: ParamStore,
    objective: MlrObjective,
}

fn tiny(config: MlrConfig, aug: AugmentSpec, seed: u64) -> Tiny {
    let mut init = Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let ecfg = EncoderConfig { variant: EncoderVariant::Continuous, input: [3, SIDE, SIDE], latent_dim: 6, channels: 2, conv_layers: 1 };
    let encoder = Encoder::new(ecfg, &mut params, &mut init).unwrap();
    let objective =
        MlrObjective::new(config, aug, &encoder, &params, ActionSpace::Continuous { dim: 1 }, &mut init, seed + 1, seed + 2).unwrap();
    Tiny { encoder, params, objective }
}

fn trajectories(n: usize, side: usize, rng: &mut Rng) -> Vec<Trajectory> {
    (0..n)
        .map(|i| Trajectory {
            observations: (0..K)
                .map(|_| Observation::new(3, side, side, (0..3 * side * side).map(|_| rng.random::<f32>()).collect()).unwrap())
                .collect(),
            actions: (0..K).map(|_| Action::Continuous(vec![rng.random_range(-1.0..1.0)])).collect(),
            start_index: i,
        })
        .collect()
}

fn loss_value(t: &Tiny, b: &[Trajectory]) -> f64 {
    let mut obj = t.objective.clone();
    let mut g = Graph::new();
    obj.forward(&mut g, &t.encoder, &t.params, b).unwrap().value
}

fn loss_and_gradients() -> Outcome {
    let mut rng = Rng::seed_from_u64(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut t = tiny(tiny_config(), augment(2, 0.05), 0);
    for i in 0..10_000u64 {
        if i % 500 == 0 {
            t = tiny(tiny_config(), augment(2, 0.05), i);
        }
        let b = trajectories(1, SIDE + 2, &mut rng);
        let mut g = Graph::new();
        let v = t.objective.forward(&mut g, &t.encoder, &t.params, &b).unwrap().value;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ensure(lo >= 0.0 && hi <= 2.0, || format!("loss range [{lo}, {hi}]"))?;

    let t = tiny(tiny_config(), augment(0, 0.0), 3);
    let b = trajectories(2, SIDE, &mut rng);
    let mut obj = t.objective.clone();
    let mut g = Graph::new();
    let f = obj.forward(&mut g, &t.encoder, &t.params, &b).unwrap();
    let grads = g.backward(f.loss);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = Tiny { encoder: t.encoder.clone(), params: t.params.clone(), objective: t.objective.clone() };
    for (pi, ga) in grads.dense_for_store(&t.params).iter().enumerate() {
        for i in 0..ga.numel() {
            let orig = probe.params.values()[pi].data()[i];
            probe.params.values_mut()[pi].data_mut()[i] = orig + h;
            let up = loss_value(&probe, &b);
            probe.params.values_mut()[pi].data_mut()[i] = orig - h;
            let down = loss_value(&probe, &b);
            probe.params.values_mut()[pi].data_mut()[i] = orig;
            worst = worst.max(relative_error(ga.data()[i], (up - down) / (2.0 * h), 1e-3));
        }
    }
    type Pick = fn(&mut MlrObjective) -> &mut ParamStore;
    let groups: [Pick; 3] = [|o| &mut o.decoder_params, |o| &mut o.projection_params, |o| &mut o.prediction_params];
    for pick in groups {
        for (pi, ga) in grads.dense_for_store(pick(&mut obj)).iter().enumerate() {
            for i in 0..ga.numel() {
                let orig = pick(&mut probe.objective).values()[pi].data()[i];
                pick(&mut probe.objective).values_mut()[pi].data_mut()[i] = orig + h;
                let up = loss_value(&probe, &b);
                pick(&mut probe.objective).values_mut()[pi].data_mut()[i] = orig - h;
                let down = loss_value(&probe, &b);
                pick(&mut probe.objective).values_mut()[pi].data_mut()[i] = orig;
                worst = worst.max(relative_error(ga.data()[i], (up - down) / (2.0 * h), 1e-3));
            }
        }
    }
    ensure(worst <= 1e-4, || format!("gradcheck error {worst:.2e}"))?;
    Ok(format!("loss in [{lo:.3}, {hi:.3}], gradcheck {worst:.1e}"))
}

fn bits(store: &ParamStore) -> Vec<u64> {
    store.values().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn mlr_step(t: &mut Tiny, opt: &mut Adam, b: &[Trajectory]) {
    let mut g = Graph::new();
    let f = t.objective.forward(&mut g, &t.encoder, &t.params, b).unwrap();
    let grads = g.backward(f.loss);
    let eg: Vec<_> = grads.for_store(&t.params).into_iter().map(|x| x.cloned()).collect();
    let refs: Vec<_> = eg.iter().map(Option::as_ref).collect();
    opt.step(&mut t.params, &refs);
    t.objective.step(&grads);
}

fn ema_and_stop_gradient() -> Outcome {
    let mut rng = Rng::seed_from_u64(3);
    let t = tiny(tiny_config(), augment(0, 0.0), 4);
    let mut online = t.params.clone();
    for v in online.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.5, 0.9, 0.95, 0.99, 1.0] {
        let mut pair = MomentumPair::new(&t.params, m);
        let old = pair.momentum.clone();
        pair.ema_update(&online).map_err(|e| e.to_string())?;
        for ((a, o), n) in pair.momentum.values().iter().zip(old.values()).zip(online.values()) {
            for ((&got, &was), &on) in a.data().iter().zip(o.data()).zip(n.data()) {
                let want = m * was + (1.0 - m) * on;
                if want != 0.0 {
                    worst = worst.max((got - want).abs() / want.abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("EMA relative error {worst:.2e}"))?;

    let mut t = tiny(tiny_config(), augment(2, 0.05), 5);
    let frozen = [bits(&t.objective.momentum_encoder.momentum), bits(&t.objective.momentum_projection.momentum)];
    let mut opt = Adam::new(&t.params, AdamConfig::new(1e-2));
    for _ in 0..100 {
        let b = trajectories(2, SIDE + 2, &mut rng);
        mlr_step(&mut t, &mut opt, &b);
    }
    let after = [bits(&t.objective.momentum_encoder.momentum), bits(&t.objective.momentum_projection.momentum)];
    ensure(frozen == after, || "momentum moved without an EMA update".into())?;

    let mut cfg = tiny_config();
    cfg.momentum_decoder = true;
    let mut t = tiny(cfg, augment(0, 0.0), 6);
    let groups = |t: &Tiny| {
        [
            bits(&t.params),
            bits(&t.objective.decoder_params),
            bits(&t.objective.projection_params),
            bits(&t.objective.prediction_params),
            bits(&t.objective.momentum_encoder.momentum),
            bits(&t.objective.momentum_projection.momentum),
            bits(&t.objective.momentum_decoder.as_ref().unwrap().momentum),
        ]
    };
    let old = groups(&t);
    let mut opt = Adam::new(&t.params, AdamConfig::new(1e-3));
    let b = trajectories(2, SIDE, &mut rng);
    mlr_step(&mut t, &mut opt, &b);
    let new = groups(&t);
    ensure((0..4).all(|i| old[i] != new[i]), || "an online group did not move".into())?;
    ensure((4..7).all(|i| old[i] == new[i]), || "a momentum group moved".into())?;
    Ok(format!("EMA error {worst:.1e}; momentum bit-identical after 100 steps"))
}

fn zero_loss_chain() -> Outcome {
    let mut rng = Rng::seed_from_u64(4);
    let mut cfg = tiny_config();
    cfg.mask.ratio = 0.0;
    cfg.heads.projection = false;
    cfg.heads.prediction = false;
    cfg.momentum_decoder = true;
    let mut t = tiny(cfg, augment(0, 0.0), 7);
    let decoder = t.objective.decoder().clone();
    decoder.zero_blocks(&mut t.objective.decoder_params);
    let dp = t.objective.decoder_params.clone();
    t.objective.momentum_decoder.as_mut().unwrap().sync(&dp).map_err(|e| e.to_string())?;
    let p = t.params.clone();
    t.objective.momentum_encoder.sync(&p).map_err(|e| e.to_string())?;
    let worst = (0..20).map(|_| loss_value(&t, &trajectories(2, SIDE, &mut rng))).fold(0.0, f64::max);
    ensure(worst < 1e-6, || format!("loss {worst:.2e}"))?;
    Ok(format!("max loss {worst:.1e}"))
}

fn fractional_iqm(v: &[f64]) -> f64 {
    let mut copies: Vec<f64> = v.iter().flat_map(|&x| [x; 4]).collect();
    copies.sort_by(f64::total_cmp);
    let n = v.len();
    copies[n..3 * n].iter().sum::<f64>() / (2 * n) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::seed_from_u64(5);
    for _ in 0..500 {
        let v: Vec<f64> = (0..rng.random_range(1..80)).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (got, want) = (iqm(&v), fractional_iqm(&v));
        ensure((got - want).abs() <= 1e-9, || format!("IQM {got} vs {want}"))?;
    }
    for _ in 0..200 {
        let rows: Vec<Vec<f64>> =
            (0..rng.random_range(1..6)).map(|_| (0..4).map(|_| rng.random_range(0..12) as f64 / 8.0).collect()).collect();
        let flat: Vec<f64> = rows.concat();
        let gap = flat.iter().map(|&x| (1.0 - x).max(0.0)).sum::<f64>() / flat.len() as f64;
        ensure(optimality_gap(&flat) == gap, || format!("gap {} vs {gap}", optimality_gap(&flat)))?;
        let taus: Vec<f64> = (0..13).map(|i| i as f64 / 8.0).collect();
        for (tau, p) in taus.iter().zip(performance_profile(&rows, &taus)) {
            let above = flat.iter().filter(|&&x| x > *tau).count();
            ensure(p == above as f64 / flat.len() as f64, || format!("profile at {tau}"))?;
        }
    }
    let alien = hns(990.1, 227.8, 7127.7).map_err(|e| e.to_string())?;
    ensure((alien - 0.1105).abs() <= 1e-4, || format!("Alien HNS {alien}"))?;
    Ok(format!("Alien HNS {alien:.4}"))
}

fn decoder_parameters() -> Outcome {
    let mut out = Vec::new();
    for (layers, reference) in [(1, 20_400.0), (2, 40_800.0), (4, 81_600.0), (8, 163_200.0)] {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { layers, width: 50, use_action_tokens: false, ..DecoderConfig::default() };
        LatentDecoder::new(cfg, ActionSpace::Continuous { dim: 1 }, &mut store, &mut Rng::seed_from_u64(0))
            .map_err(|e| e.to_string())?;
        let n = store.numel() as f64;
        ensure((n - reference).abs() <= 0.01 * reference, || format!("{layers} layers: {n} vs {reference}"))?;
        out.push(format!("{layers}:{n}"));
    }
    Ok(out.join(" "))
}

fn positional_embeddings() -> Outcome {
    let d = 50;
    let t = positional_table(16, d);
    for pos in 0..16 {
        for j in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            ensure(t.row(pos)[2 * j] == angle.sin() && t.row(pos)[2 * j + 1] == angle.cos(), || {
                format!("entry ({pos}, {j}) differs")
            })?;
        }
    }
    let zero: Vec<f64> = (0..d).map(|i| (i % 2) as f64).collect();
    ensure(t.row(0) == zero.as_slice(), || "row 0 is not alternating 0, 1".into())?;
    Ok("16 x 50 table exact".into())
}

fn tabular_spec(actions: ActionSpace, gamma: f64) -> AgentSpec {
    AgentSpec {
        encoder: EncoderConfig::tabular([1, 1, 2]),
        actions,
        augment: AugmentSpec {
            crop: CropSpec { margin: 0, out_size: (1, 2), mode: CropMode::Render },
            intensity: IntensitySpec { scale: 0.0, clip: 2.0 },
        },
        mlr: None,
        sac: SacConfig {
            gamma,
            init_temperature: 0.0,
            learn_temperature: false,
            batch: 64,
            hidden_dim: 64,
            init_steps: 0,
            critic_target_m: 0.9,
            target_update_freq: 1,
            ..SacConfig::default()
        },
        rainbow: RainbowConfig {
            gamma,
            multi_step: 3,
            lr: 1e-3,
            min_replay: 1,
            hidden_dim: 64,
            reward_clip: None,
            ..RainbowConfig::default()
        },
        seeds: SeedStreams::new(7),
    }
}

fn tabular_agents() -> Outcome {
    let gamma = 0.9;
    // Deterministic 0 -> 1 -> 0 cycle paying 1 on leaving state 0.
    let q_star = [1.0 / (1.0 - gamma * gamma), gamma / (1.0 - gamma * gamma)];
    let spec = |id: &str| EnvSpec { id: id.into(), render_size: (1, 2), action_repeat: 1, frame_stack: 1, max_episode_frames: 50 };
    let mut worst: f64 = 0.0;
    for (agent_id, env_id, actions) in
        [("sac", "two_state", ActionSpace::Continuous { dim: 1 }), ("rainbow", "two_state_discrete", ActionSpace::Discrete { count: 1 })]
    {
        let mut agent = build_agent(agent_id, &tabular_spec(actions, gamma)).map_err(|e| e.to_string())?;
        let mut buffer = ReplayBuffer::new(1000, [1, 1, 2]);
        if agent_id == "rainbow" {
            buffer = buffer.with_priorities(PriorityConfig { exponent: 0.5 });
        }
        let mut env = make_env(&spec(env_id)).map_err(|e| e.to_string())?;
        let mut obs = env.reset(0);
        for i in 0..1000 {
            let a = agent.random_action();
            let s = env.step(&a).map_err(|e| e.to_string())?;
            buffer
                .push(Transition { obs: obs.clone(), action: a, reward: s.reward, next_obs: s.obs.clone(), done: s.done, terminal: s.terminal })
                .map_err(|e| e.to_string())?;
            obs = if s.done { env.reset(i + 1) } else { s.obs };
        }
        for i in 0..5000 {
            agent.update(&mut buffer, i as f64 / 5000.0).map_err(|e| e.to_string())?;
        }
        let states = [env.reset(0), env.reset(1)];
        for (s, o) in states.iter().enumerate() {
            let q = if let Some(sac) = agent.as_any().downcast_ref::<Sac>() {
                sac.q_values(std::slice::from_ref(o), &[vec![0.3]]).map_err(|e| e.to_string())?[0][0]
            } else {
                let rb = agent.as_any().downcast_ref::<Rainbow>().ok_or("unexpected agent type")?;
                rb.q_values(o).map_err(|e| e.to_string())?[0]
            };
            worst = worst.max((q - q_star[s]).abs());
        }
        agent.act(&states[0], ActMode::Eval).map_err(|e| e.to_string())?;
    }
    ensure(worst <= 0.05, || format!("Q error {worst:.4}"))?;

    let mut rng = Rng::seed_from_u64(8);
    let support: Vec<f64> = (0..51).map(|i| -10.0 + i as f64 * 0.4).collect();
    let mut mass_err: f64 = 0.0;
    for _ in 0..1000 {
        let mut p: Vec<f64> = (0..51).map(|_| rng.random::<f64>()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        let r = rng.random_range(-15.0..15.0);
        let d = rng.random_range(0.0..1.0);
        let m = categorical_projection(&support, &[r], &[d], &[p]);
        mass_err = mass_err.max((m[0].iter().sum::<f64>() - 1.0).abs());
    }
    ensure(mass_err <= 1e-9, || format!("projection mass error {mass_err:.2e}"))?;
    Ok(format!("max |Q - Q*| {worst:.4}, mass error {mass_err:.1e}"))
}

fn learning_benefit() -> Outcome {
    let base = read_pairs("desk_continuous.cfg");
    let arm = |lambda: &str| {
        let mut pairs = base.clone();
        pairs.push(("mlr.lambda".into(), lambda.into()));
        ExperimentConfig::resolve(&pairs).unwrap()
    };
    let (with, without) = (arm("1.0"), arm("0"));
    ensure(with.train.env_steps == 30_000 && with.seeds.len() == 5, || "unexpected desk config".into())?;
    let mut returns = [Vec::new(), Vec::new()];
    let mut sims = [Vec::new(), Vec::new()];
    for &seed in &with.seeds {
        for (i, cfg) in [&with, &without].into_iter().enumerate() {
            let s = Trainer::new(cfg, seed, None).and_then(|mut t| t.run()).map_err(|e| e.to_string())?;
            returns[i].push(s.final_return.ok_or("no evaluation")?);
            sims[i].push(s.regression_accuracy.ok_or("no regression accuracy")?);
            eprintln!(
                "  seed {seed} {}: return {:.2}, regression {:.4}",
                if i == 0 { "mlr" } else { "baseline" },
                returns[i][returns[i].len() - 1],
                sims[i][sims[i].len() - 1]
            );
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (rm, rb) = (mean(&returns[0]), mean(&returns[1]));
    let wins = sims[0].iter().zip(&sims[1]).filter(|(a, b)| a > b).count();
    let detail = format!("return {rm:.2} vs {rb:.2}; regression wins {wins}/5 ({:.4} vs {:.4})", mean(&sims[0]), mean(&sims[1]));
    ensure(rm >= rb && wins == 5, || detail.clone())?;
    Ok(detail)
}

fn ablation_reachability() -> Outcome {
    let base = read_pairs("smoke.cfg");
    let mut cells = 0;
    for grid in ["strategy_target", "variants", "decoder_depth", "metric_heads", "seq_len", "mask_ratio", "cube_shape"] {
        let g = Grid::parse(&std::fs::read_to_string(configs().join(format!("{grid}.grid"))).unwrap())
            .map_err(|e| e.to_string())?;
        let rows = run_ablation(&base, &g, None);
        eprintln!("{}\n", render_table(&g, &rows));
        for r in &rows {
            ensure(r.error.is_none(), || format!("{grid} {:?}: {}", r.labels, r.error.clone().unwrap_or_default()))?;
            ensure(r.seeds == 1 && r.mean.is_finite(), || format!("{grid} {:?}: no score", r.labels))?;
            let aux = !r.overrides.contains(&("mlr.lambda".into(), "0".into()));
            ensure(!aux || r.decoder_params.is_some(), || format!("{grid} {:?}: no decoder", r.labels))?;
        }
        cells += rows.len();
    }
    Ok(format!("{cells} cells populated"))
}

fn reproducibility() -> Outcome {
    let mut pairs = read_pairs("smoke.cfg");
    pairs.extend(["train.env_steps=2000", "train.eval_every=500", "output.checkpoint_every=1000"].map(|s| parse_override(s).unwrap()));
    let cfg = ExperimentConfig::resolve(&pairs).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| {
        let d = dir.path().join(name);
        Trainer::new(&cfg, 0, Some(&d)).and_then(|mut t| t.run()).unwrap();
        std::fs::read(d.join("metrics.jsonl")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    ensure(a == b, || "identical runs wrote different logs".into())?;
    let ck = dir.path().join("a").join(checkpoint_name(1000));
    let resumed = dir.path().join("resumed");
    Trainer::resume(&ck, Some(&resumed)).and_then(|mut t| t.run()).map_err(|e| e.to_string())?;
    let c = std::fs::read(resumed.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    ensure(a == c, || "resumed log differs from the uninterrupted one".into())?;
    Ok(format!("{} log bytes identical across runs and resume", a.len()))
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        (1, "masking exactness", masking_exactness, Duration::from_secs(5)),
        (2, "loss and gradient correctness", loss_and_gradients, Duration::from_secs(120)),
        (3, "EMA and stop-gradient contracts", ema_and_stop_gradient, Duration::MAX),
        (4, "degenerate zero-loss chain", zero_loss_chain, Duration::MAX),
        (5, "metric oracles", metric_oracles, Duration::from_secs(10)),
        (6, "decoder parameter counts", decoder_parameters, Duration::MAX),
        (7, "positional embeddings", positional_embeddings, Duration::MAX),
        (8, "tabular agent oracles", tabular_agents, Duration::from_secs(300)),
        (10, "ablation reachability", ablation_reachability, Duration::from_secs(1800)),
        (11, "reproducibility", reproducibility, Duration::MAX),
        (9, "directional learning benefit", learning_benefit, Duration::from_secs(6 * 3600)),
    ];
    let mut failed = 0;
    for (id, name, check, limit) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > limit => Err(format!("{d}; took {took:.1?}, limit {limit:.0?}")),
            o => o,
        };
        match outcome {
            Ok(d) => println!("criterion {id:>2} {name}: PASS ({d}; {took:.1?})"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({d}; {took:.1?})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
