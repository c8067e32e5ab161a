//! Times the pieces of one training iteration at candidate acceptance
//! configs: acting forward, train step, probe metrics, eval step.

use btr::analysis;
use btr::config::AgentConfig;
use btr::envs::{stacks_to_batch, EnvParams, FrameStack, Layout, VectorEnv};
use btr::learner::{Learner, StepRngs};
use btr::network::NetworkSpec;
use btr::orchestrator::select_actions;
use btr::replay::ReplayBuffer;
use btr::rng::*;
use std::time::Instant;

fn profile(tag: &str, cfg: &AgentConfig) {
    let layout = Layout::resolve(&cfg.env).unwrap();
    let params = EnvParams::from_config(cfg);
    let mut venv = VectorEnv::new(&layout, &params, cfg.num_envs, 0).unwrap();
    let spec = NetworkSpec::from_config(cfg, venv.num_actions());
    let mut init = stream_rng(0, STREAM_INIT, 0);
    let mut learner: Learner<f32> = Learner::new(spec, cfg, &mut init).unwrap();
    let mut replay = ReplayBuffer::from_config(cfg);
    let mut action_rng = stream_rng(0, STREAM_ACTION, 0);
    let mut noise_rng = stream_rng(0, STREAM_NOISE, 0);
    let mut taus_rng = stream_rng(0, STREAM_TAUS, 0);
    let mut replay_rng = stream_rng(0, STREAM_REPLAY, 0);

    // fill replay past min size with a random policy
    while replay.len() < cfg.min_replay_size {
        let stacks: Vec<FrameStack> = (0..cfg.num_envs).map(|i| venv.obs(i).clone()).collect();
        let actions: Vec<usize> = (0..cfg.num_envs)
            .map(|_| rand::Rng::gen_range(&mut action_rng, 0..4))
            .collect();
        let steps = venv.step(&actions).unwrap();
        for (i, s) in steps.into_iter().enumerate() {
            replay.push(
                i,
                stacks[i].clone(),
                actions[i],
                s.reward.clamp(-1.0, 1.0),
                &s.next_stack,
                s.terminal,
                s.truncated,
            );
        }
    }

    let reps = 10;
    let stacks: Vec<FrameStack> = (0..cfg.num_envs).map(|i| venv.obs(i).clone()).collect();
    let refs: Vec<&FrameStack> = stacks.iter().collect();
    let obs = stacks_to_batch::<f32>(&refs, cfg.render_height, cfg.render_width);

    let t0 = Instant::now();
    for _ in 0..reps {
        learner.online.sample_noise(&mut noise_rng);
        let _ = select_actions(
            &mut learner.online,
            &obs,
            0.5,
            cfg.iqn_taus,
            &mut taus_rng,
            &mut action_rng,
        );
    }
    let act_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut rngs = StepRngs {
            taus: &mut taus_rng,
            noise: &mut noise_rng,
            replay: &mut replay_rng,
        };
        learner
            .train_step(&mut replay, cfg, cfg.min_replay_size as u64, &mut rngs)
            .unwrap();
    }
    let train_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;

    let t0 = Instant::now();
    let probe = analysis::collect_probe(cfg, 1000, 0).unwrap();
    let probe_collect_ms = t0.elapsed().as_secs_f64() * 1000.0;

    let t0 = Instant::now();
    let _ = analysis::action_gap(&mut learner.online, &probe).unwrap();
    let gap_ms = t0.elapsed().as_secs_f64() * 1000.0;
    let t0 = Instant::now();
    let _ = analysis::dormant_fraction(&mut learner.online, &probe, 0.025).unwrap();
    let dorm_ms = t0.elapsed().as_secs_f64() * 1000.0;
    let t0 = Instant::now();
    let f = analysis::feature_matrix(&mut learner.online, &probe);
    let _ = analysis::srank(&f, 0.01);
    let srank_ms = t0.elapsed().as_secs_f64() * 1000.0;

    // one eval-style batched forward on 100 stacks
    let eval_refs: Vec<&FrameStack> = probe.stacks.iter().take(100).collect();
    let eval_obs = stacks_to_batch::<f32>(&eval_refs, cfg.render_height, cfg.render_width);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = learner.online.mean_q_fixed(&eval_obs, cfg.iqn_taus);
    }
    let eval_step_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;

    let per_vec_ms = act_ms + train_ms;
    let frames_per_s = cfg.num_envs as f64 / (per_vec_ms / 1000.0);
    println!("== {tag}");
    println!(
        "  act {act_ms:.1} ms  train {train_ms:.1} ms  => vec step {per_vec_ms:.1} ms, {frames_per_s:.0} frames/s"
    );
    println!(
        "  2M frames ~ {:.1} min training-only",
        2_000_000.0 / frames_per_s / 60.0
    );
    println!(
        "  probe: collect {probe_collect_ms:.0} ms  gap {gap_ms:.0} ms  dormant {dorm_ms:.0} ms  srank {srank_ms:.0} ms"
    );
    println!("  eval batched step (100 live) {eval_step_ms:.1} ms");
}

fn main() {
    let mut base = AgentConfig::default();
    base.env = "empty8".to_string();
    base.render_height = 42;
    base.render_width = 42;
    base.max_episode_steps = 200;
    base.replay_capacity = 1 << 16;
    base.min_replay_size = 2000;

    let mut a = base.clone();
    a.num_envs = 64;
    a.batch_size = 256;
    profile("42x42 impala w2, E=64 B=256 H=512 (paper shape)", &a);

    let mut b = base.clone();
    b.num_envs = 64;
    b.batch_size = 64;
    b.dueling_hidden = 256;
    profile("42x42 impala w2, E=64 B=64 H=256", &b);

    let mut c = base.clone();
    c.num_envs = 32;
    c.batch_size = 32;
    c.dueling_hidden = 128;
    profile("42x42 impala w2, E=32 B=32 H=128", &c);

    let mut d = base.clone();
    d.num_envs = 32;
    d.batch_size = 32;
    d.dueling_hidden = 128;
    d.impala_width = 1;
    profile("42x42 impala w1, E=32 B=32 H=128", &d);

    let mut e = base.clone();
    e.num_envs = 16;
    e.batch_size = 16;
    e.dueling_hidden = 128;
    e.impala_width = 1;
    e.iqn_taus = 4;
    profile("42x42 impala w1, E=16 B=16 H=128 taus=4", &e);
}
