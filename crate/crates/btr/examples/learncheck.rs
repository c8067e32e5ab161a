//! End-to-end learning calibration on empty8: runs the scaled full config
//! and prints every evaluation until the oracle bar or the frame budget.

use btr::config::AgentConfig;
use btr::envs::{oracle_optimal_return, EnvParams, Layout};
use btr::orchestrator::run_training_full;
use btr::run::RunDir;
use std::time::Instant;

fn main() {
    let mut cfg = AgentConfig::default();
    cfg.env = "empty8".to_string();
    cfg.render_height = 42;
    cfg.render_width = 42;
    cfg.impala_width = 1;
    cfg.dueling_hidden = 128;
    cfg.num_envs = 32;
    cfg.batch_size = 32;
    cfg.replay_capacity = 1 << 17;
    cfg.min_replay_size = 2000;
    cfg.max_episode_steps = 200;
    cfg.total_frames = 2_000_000;
    cfg.eval_interval = 50_000;
    cfg.eval_episodes = 100;
    cfg.master_seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);

    let layout = Layout::resolve(&cfg.env).unwrap();
    let params = EnvParams::from_config(&cfg);
    let oracle = oracle_optimal_return(&layout, &params, cfg.discount).unwrap();
    let bar = 0.95 * oracle.undiscounted;
    println!(
        "oracle undiscounted {:.4}  bar {:.4}  seed {}",
        oracle.undiscounted, bar, cfg.master_seed
    );

    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path(), &cfg).unwrap();
    let t0 = Instant::now();
    let report = run_training_full(&cfg, &run, None, &mut |p| {
        println!(
            "[{:7.1}s] frame {:>9} mean {:.4} iqm {:.4}",
            t0.elapsed().as_secs_f64(),
            p.frame,
            p.mean,
            p.iqm
        );
        p.mean >= bar
    })
    .unwrap();
    println!(
        "done: frames {} grads {} stopped_early {} wall {:.1}s",
        report.counters.frame_count,
        report.counters.grad_steps,
        report.stopped_early,
        t0.elapsed().as_secs_f64()
    );
}
