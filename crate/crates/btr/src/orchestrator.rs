//! The training loop: exploration schedule, vectorized acting, replay
//! feeding, one gradient step per vector step after warmup, periodic
//! batched evaluation with probe metrics, and checkpointing.

use crate::analysis::{self, StateProbe};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError, TrainCounters};
use crate::config::{AgentConfig, REFERENCE_FRAMES};
use crate::envs::{
    stacks_to_batch, EnvError, EnvParams, FrameStack, GridPixelEnv, Layout, VectorEnv,
    NUM_ACTIONS,
};
use crate::learner::{argmax_row, random_taus, Learner, StepRngs};
use crate::network::{midpoint_taus, BtrNetwork, NetworkError, NetworkSpec};
use crate::nn::Scalar;
use crate::replay::{ReplayBuffer, ReplayError};
use crate::rng::*;
use crate::run::{MetricsRow, MetricsWriter, RunDir, RunError};
use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use thiserror::Error;

/// Probe set size, frozen per run.
pub const PROBE_STATES: usize = 1000;
/// Resamples behind every reported confidence interval.
pub const BOOTSTRAP_RESAMPLES: usize = 2000;
/// Dormancy threshold behind the CSV's dormant_pct column.
pub const DORMANT_THRESHOLD: f64 = 0.025;
/// Spectral-mass tolerance behind the CSV's srank column.
pub const SRANK_DELTA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("analysis: {0}")]
    Analysis(#[from] analysis::AnalysisError),
}

/// Schedule milestones are authored against the reference horizon and shrink
/// proportionally for shorter runs, so the schedule keeps its shape.
fn schedule_scale(cfg: &AgentConfig) -> f64 {
    cfg.total_frames as f64 / REFERENCE_FRAMES as f64
}

/// Training epsilon: linear eps_start -> eps_end over the scaled decay
/// window, held, then exactly 0 from the scaled disable frame onward.
pub fn epsilon_at(frame: u64, cfg: &AgentConfig) -> f64 {
    let scale = schedule_scale(cfg);
    let decay = cfg.eps_decay_frames as f64 * scale;
    let disable = cfg.eps_disable_frame as f64 * scale;
    let f = frame as f64;
    if f >= disable {
        0.0
    } else if f >= decay {
        cfg.eps_end
    } else {
        cfg.eps_start + (cfg.eps_end - cfg.eps_start) * f / decay
    }
}

/// Evaluation epsilon: constant until its own scaled disable frame, then 0.
pub fn eval_epsilon_at(frame: u64, cfg: &AgentConfig) -> f64 {
    if (frame as f64) >= cfg.eval_eps_disable_frame as f64 * schedule_scale(cfg) {
        0.0
    } else {
        cfg.eval_epsilon
    }
}

/// Per-env epsilon-greedy over mean-of-N-fresh-taus Q. One uniform draw per
/// env regardless of epsilon keeps the action stream's layout fixed. Argmax
/// ties go to the lowest action index.
pub fn select_actions<S: Scalar>(
    online: &mut BtrNetwork<S>,
    obs: &Array4<S>,
    epsilon: f64,
    n_taus: usize,
    taus_rng: &mut ChaCha8Rng,
    action_rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let batch = obs.dim().0;
    let taus = if online.spec.use_iqn {
        random_taus::<S, _>(batch, n_taus, taus_rng)
    } else {
        midpoint_taus::<S>(batch, 1)
    };
    let q = online.mean_q(obs, &taus);
    let num_actions = online.spec.num_actions;
    (0..batch)
        .map(|i| {
            let u: f64 = action_rng.gen();
            if u < epsilon {
                action_rng.gen_range(0..num_actions)
            } else {
                argmax_row(q.row(i))
            }
        })
        .collect()
}

/// Runs full episodes under any batch policy, all episodes stepped in
/// lockstep so the policy sees one batched call per step. Per step and per
/// live episode, one uniform draw decides epsilon; random slots consume a
/// second draw; greedy slots come from the policy. Raw (unclipped) reward
/// sums are returned in episode order. The replay buffer is never touched.
pub fn evaluate_with<F>(
    mut policy: F,
    cfg: &AgentConfig,
    episodes: usize,
    epsilon: f64,
    master_seed: u64,
    round: u64,
) -> Result<Vec<f64>, OrchestratorError>
where
    F: FnMut(&[&FrameStack]) -> Vec<usize>,
{
    let layout = Layout::resolve(&cfg.env)?;
    let params = EnvParams::from_config(cfg);
    let mut action_rng = stream_rng(master_seed, STREAM_EVAL_ACTION, round);
    let mut envs = Vec::with_capacity(episodes);
    let mut stacks = Vec::with_capacity(episodes);
    for i in 0..episodes {
        // distinct stream per (round, episode); rounds are far apart
        let rng = stream_rng(master_seed, STREAM_EVAL_ENV, round * 1_000_003 + i as u64);
        let mut env = GridPixelEnv::new(layout.clone(), params.clone(), rng)?;
        stacks.push(FrameStack::filled(env.reset()));
        envs.push(env);
    }
    let mut scores = vec![0.0f64; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    while !live.is_empty() {
        let mut actions = vec![usize::MAX; live.len()];
        let mut greedy_slots = Vec::with_capacity(live.len());
        for (slot, &i) in live.iter().enumerate() {
            let u: f64 = action_rng.gen();
            if u < epsilon {
                actions[slot] = action_rng.gen_range(0..NUM_ACTIONS);
            } else {
                greedy_slots.push((slot, i));
            }
        }
        if !greedy_slots.is_empty() {
            let batch: Vec<&FrameStack> = greedy_slots.iter().map(|&(_, i)| &stacks[i]).collect();
            let chosen = policy(&batch);
            debug_assert_eq!(chosen.len(), batch.len());
            for (&(slot, _), a) in greedy_slots.iter().zip(chosen) {
                actions[slot] = a;
            }
        }
        let mut still = Vec::with_capacity(live.len());
        for (slot, &i) in live.iter().enumerate() {
            let (frame, res) = envs[i].step(actions[slot])?;
            scores[i] += res.reward;
            if !(res.terminal || res.truncated) {
                stacks[i] = stacks[i].push(frame);
                still.push(i);
            }
        }
        live = still;
    }
    Ok(scores)
}

/// Greedy evaluation of a network: zero noise, deterministic midpoint taus.
pub fn evaluate<S: Scalar>(
    net: &mut BtrNetwork<S>,
    cfg: &AgentConfig,
    episodes: usize,
    epsilon: f64,
    master_seed: u64,
    round: u64,
) -> Result<Vec<f64>, OrchestratorError> {
    net.zero_noise();
    let n_taus = cfg.iqn_taus.max(1);
    let (h, w) = (cfg.render_height, cfg.render_width);
    evaluate_with(
        |batch| {
            let obs = stacks_to_batch::<S>(batch, h, w);
            let q = net.mean_q_fixed(&obs, n_taus);
            (0..q.nrows()).map(|r| argmax_row(q.row(r))).collect()
        },
        cfg,
        episodes,
        epsilon,
        master_seed,
        round,
    )
}

/// One evaluation's summary, handed to the early-stop hook.
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint {
    pub frame: u64,
    pub mean: f64,
    pub iqm: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub counters: TrainCounters,
    /// Frames taken before the first gradient step of this session.
    pub warmup_frames: u64,
    pub eval_rows: usize,
    pub final_checkpoint: PathBuf,
    pub stopped_early: bool,
}

fn clone_learner<S: Scalar>(
    src: &mut Learner<S>,
    cfg: &AgentConfig,
) -> Result<Learner<S>, NetworkError> {
    // init rng is immediately overwritten by the copy
    let mut scratch = stream_rng(0, STREAM_INIT, u64::MAX);
    let mut dst = Learner::new(src.online.spec.clone(), cfg, &mut scratch)?;
    dst.online.copy_from(&mut src.online);
    dst.target.copy_from(&mut src.target);
    let moments = src
        .opt
        .moment_slices()
        .into_iter()
        .map(|(m, v)| (m.to_vec(), v.to_vec()))
        .collect();
    dst.opt.load_moments(src.opt.t, moments);
    dst.steps_since_sync = src.steps_since_sync;
    dst.grad_steps = src.grad_steps;
    Ok(dst)
}

struct LoopRngs {
    action: ChaCha8Rng,
    noise: ChaCha8Rng,
    taus: ChaCha8Rng,
    replay: ChaCha8Rng,
}

/// Policy churn across one shadow gradient step: clones the learner, replay,
/// and rng streams, steps the clone on the batch the real loop would draw
/// next, and measures greedy disagreement on the probe. The real training
/// state is untouched.
fn shadow_churn<S: Scalar>(
    learner: &mut Learner<S>,
    replay: &ReplayBuffer,
    cfg: &AgentConfig,
    frame: u64,
    rngs: &LoopRngs,
    probe: &StateProbe,
) -> Result<f64, OrchestratorError> {
    let mut shadow = clone_learner(learner, cfg)?;
    let mut shadow_replay = replay.clone();
    let mut taus = rngs.taus.clone();
    let mut noise = rngs.noise.clone();
    let mut replay_rng = rngs.replay.clone();
    let mut step_rngs = StepRngs {
        taus: &mut taus,
        noise: &mut noise,
        replay: &mut replay_rng,
    };
    shadow.train_step(&mut shadow_replay, cfg, frame, &mut step_rngs)?;
    Ok(analysis::policy_churn(
        &mut learner.online,
        &mut shadow.online,
        probe,
    )?)
}

pub fn run_training(cfg: &AgentConfig, run: &RunDir) -> Result<TrainReport, OrchestratorError> {
    run_training_full(cfg, run, None, &mut |_| false)
}

/// Full loop with optional resume state and an early-stop hook consulted
/// after every evaluation. Resume restores parameters, optimizer moments,
/// counters, and rng streams from the checkpoint; envs start fresh and the
/// replay buffer refills from empty, so a fresh warmup gate applies.
pub fn run_training_full(
    cfg: &AgentConfig,
    run: &RunDir,
    resume: Option<&Checkpoint>,
    stop: &mut dyn FnMut(&EvalPoint) -> bool,
) -> Result<TrainReport, OrchestratorError> {
    // the non-vectorized ablation is the classic cadence: one env, one
    // batch-32 gradient step every 4 env frames
    let mut eff = cfg.clone();
    let train_every: u64 = if cfg.use_vectorization {
        1
    } else {
        eff.num_envs = 1;
        eff.batch_size = 32;
        4
    };
    let eff = eff;
    let seed = eff.master_seed;
    let n_envs = eff.num_envs;

    let layout = Layout::resolve(&eff.env)?;
    let params = EnvParams::from_config(&eff);
    let mut venv = VectorEnv::new(&layout, &params, n_envs, seed)?;
    let spec = NetworkSpec::from_config(&eff, venv.num_actions());
    let mut init_rng = stream_rng(seed, STREAM_INIT, 0);
    let mut learner: Learner<f32> = Learner::new(spec, &eff, &mut init_rng)?;
    let mut replay = ReplayBuffer::from_config(&eff);
    let mut rngs = LoopRngs {
        action: stream_rng(seed, STREAM_ACTION, 0),
        noise: stream_rng(seed, STREAM_NOISE, 0),
        taus: stream_rng(seed, STREAM_TAUS, 0),
        replay: stream_rng(seed, STREAM_REPLAY, 0),
    };
    let mut counters = TrainCounters::default();
    let mut writer = match resume {
        None => MetricsWriter::create(&run.metrics_path())?,
        Some(ckpt) => {
            ckpt.restore_learner(&mut learner)?;
            counters = ckpt.counters;
            rngs.action = ckpt.rng("action")?;
            rngs.noise = ckpt.rng("noise")?;
            rngs.taus = ckpt.rng("taus")?;
            rngs.replay = ckpt.rng("replay")?;
            MetricsWriter::append(&run.metrics_path())?
        }
    };

    let probe = analysis::collect_probe(&eff, PROBE_STATES, seed)?;
    let mut eval_bucket = counters.frame_count / eff.eval_interval;
    let mut warmup_frames: Option<u64> = None;
    let mut loss_sum = 0.0;
    let mut grad_sum = 0.0;
    let mut train_count = 0u64;
    let mut eval_rows = 0usize;
    let mut last_ckpt: Option<PathBuf> = None;
    let mut stopped_early = false;
    let session_start = counters.frame_count;

    let outcome: Result<(), OrchestratorError> = (|| {
        while counters.frame_count < eff.total_frames {
            // exploration noise is resampled once per vector step for acting
            let epsilon = epsilon_at(counters.frame_count, &eff);
            learner.online.sample_noise(&mut rngs.noise);
            let stacks: Vec<FrameStack> = (0..n_envs).map(|i| venv.obs(i).clone()).collect();
            let refs: Vec<&FrameStack> = stacks.iter().collect();
            let obs = stacks_to_batch::<f32>(&refs, eff.render_height, eff.render_width);
            let actions = select_actions(
                &mut learner.online,
                &obs,
                epsilon,
                eff.iqn_taus.max(1),
                &mut rngs.taus,
                &mut rngs.action,
            );
            let steps = venv.step(&actions)?;
            for (i, step) in steps.into_iter().enumerate() {
                let reward = if eff.clip_rewards {
                    step.reward.clamp(-1.0, 1.0)
                } else {
                    step.reward
                };
                replay.push(
                    i,
                    stacks[i].clone(),
                    actions[i],
                    reward,
                    &step.next_stack,
                    step.terminal,
                    step.truncated,
                );
                if step.terminal || step.truncated {
                    counters.episodes += 1;
                }
            }
            counters.frame_count += n_envs as u64;
            counters.env_steps += 1;

            if replay.len() >= eff.min_replay_size && counters.env_steps % train_every == 0 {
                if warmup_frames.is_none() {
                    warmup_frames = Some(counters.frame_count - session_start - n_envs as u64);
                }
                let mut step_rngs = StepRngs {
                    taus: &mut rngs.taus,
                    noise: &mut rngs.noise,
                    replay: &mut rngs.replay,
                };
                let report =
                    learner.train_step(&mut replay, &eff, counters.frame_count, &mut step_rngs)?;
                loss_sum += report.scalar_loss;
                grad_sum += report.grad_norm_preclip;
                train_count += 1;
                counters.grad_steps = learner.grad_steps;
                counters.steps_since_sync = learner.steps_since_sync;
            }
            if eff.use_vectorization {
                // one gradient step per vector step once warmed up
                debug_assert_eq!(
                    (counters.frame_count - session_start)
                        .saturating_sub(warmup_frames.unwrap_or(counters.frame_count)),
                    train_count * n_envs as u64,
                    "replay-ratio bookkeeping broke"
                );
            }

            let bucket = counters.frame_count / eff.eval_interval;
            if bucket > eval_bucket {
                eval_bucket = bucket;
                let eval_eps = eval_epsilon_at(counters.frame_count, &eff);
                let scores = evaluate(
                    &mut learner.online,
                    &eff,
                    eff.eval_episodes,
                    eval_eps,
                    seed,
                    counters.eval_count,
                )?;
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                let iqm = analysis::iqm(&scores)?;
                let mut boot = stream_rng(seed, STREAM_BOOTSTRAP, counters.eval_count);
                let (ci_low, ci_high) =
                    analysis::bootstrap_ci(&scores, BOOTSTRAP_RESAMPLES, 0.95, &mut boot)?;
                let churn = if replay.len() >= eff.min_replay_size {
                    shadow_churn(
                        &mut learner,
                        &replay,
                        &eff,
                        counters.frame_count,
                        &rngs,
                        &probe,
                    )?
                } else {
                    0.0
                };
                let action_gap = analysis::action_gap(&mut learner.online, &probe)?;
                let dormant =
                    analysis::dormant_fraction(&mut learner.online, &probe, DORMANT_THRESHOLD)?;
                let features = analysis::feature_matrix(&mut learner.online, &probe);
                let srank = analysis::srank(&features, SRANK_DELTA);
                let (_, l2_total) = analysis::weight_l2(&mut learner.online);
                let row = MetricsRow {
                    frame: counters.frame_count,
                    episodes: counters.episodes,
                    mean,
                    iqm,
                    ci_low,
                    ci_high,
                    loss: if train_count > 0 { loss_sum / train_count as f64 } else { 0.0 },
                    grad_norm: if train_count > 0 { grad_sum / train_count as f64 } else { 0.0 },
                    epsilon: epsilon_at(counters.frame_count, &eff),
                    action_gap,
                    churn,
                    dormant_pct: 100.0 * dormant.fraction,
                    srank: srank as f64,
                    l2_total,
                };
                writer.write_row(&row)?;
                eval_rows += 1;
                loss_sum = 0.0;
                grad_sum = 0.0;
                train_count = 0;
                counters.eval_count += 1;
                log::info!(
                    "frame {} episodes {} mean {:.4} iqm {:.4} eps {:.4}",
                    row.frame,
                    row.episodes,
                    row.mean,
                    row.iqm,
                    row.epsilon
                );

                let path = run.checkpoint_path(counters.frame_count);
                save_named_checkpoint(&path, &eff, &counters, &rngs, &mut learner)?;
                if let Some(old) = last_ckpt.replace(path) {
                    let _ = std::fs::remove_file(old);
                }

                if stop(&EvalPoint {
                    frame: counters.frame_count,
                    mean,
                    iqm,
                }) {
                    stopped_early = true;
                    return Ok(());
                }
            }
        }
        Ok(())
    })();

    let final_path = run.checkpoint_path(counters.frame_count);
    let save = save_named_checkpoint(&final_path, &eff, &counters, &rngs, &mut learner);
    match outcome {
        // best effort: the crash checkpoint must not mask the original error
        Err(e) => {
            let _ = save;
            Err(e)
        }
        Ok(()) => {
            save?;
            if last_ckpt.as_ref() == Some(&final_path) {
                last_ckpt = None;
            }
            if let Some(old) = last_ckpt {
                let _ = std::fs::remove_file(old);
            }
            Ok(TrainReport {
                counters,
                warmup_frames: warmup_frames.unwrap_or(counters.frame_count - session_start),
                eval_rows,
                final_checkpoint: final_path,
                stopped_early,
            })
        }
    }
}

fn save_named_checkpoint(
    path: &std::path::Path,
    cfg: &AgentConfig,
    counters: &TrainCounters,
    rngs: &LoopRngs,
    learner: &mut Learner<f32>,
) -> Result<(), OrchestratorError> {
    save_checkpoint(
        path,
        cfg,
        counters,
        &[
            ("action", &rngs.action),
            ("noise", &rngs.noise),
            ("taus", &rngs.taus),
            ("replay", &rngs.replay),
        ],
        learner,
    )?;
    Ok(())
}
