//! Target computation, quantile Huber loss, and the gradient step.
//!
//! The default target rule is the Munchausen soft-policy rule evaluated per
//! target-quantile draw; ablations swap in a double-DQN rule (action picked
//! by the online net, quantiles from the target net) and a scalar rule with
//! plain Huber loss. Loss math is pure over arrays so the same code runs in
//! f32 for training and f64 for gradient checks.

use crate::config::AgentConfig;
use crate::network::{midpoint_taus, BtrNetwork, NetworkError, NetworkSpec};
use crate::nn::adam::Adam;
use crate::nn::dense::{Linear, Relu2};
use crate::nn::Scalar;
use crate::replay::{ReplayBuffer, ReplayError};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct LossReport {
    pub scalar_loss: f64,
    /// mean_ij |delta_ij| per sample; feeds priority updates. Always >= 0.
    pub per_sample_td: Vec<f64>,
    pub grad_norm_preclip: f64,
}

pub struct SoftPolicyOut<S> {
    pub pi: Array2<S>,
    pub log_pi: Array2<S>,
}

/// Row-wise softmax of q/tau with max subtraction. Rows of `pi` sum to 1;
/// `log_pi` is exact (not ln of the rounded pi).
pub fn soft_policy_full<S: Scalar>(q: &Array2<S>, tau_m: f64) -> SoftPolicyOut<S> {
    assert!(tau_m > 0.0, "temperature must be positive");
    let (batch, a_dim) = q.dim();
    let inv_tau = S::from_f64(1.0 / tau_m);
    let mut pi = Array2::from_elem((batch, a_dim), S::ZERO);
    let mut log_pi = Array2::from_elem((batch, a_dim), S::ZERO);
    for b in 0..batch {
        let row = q.row(b);
        let mut m = S::NEG_INF;
        for &v in row.iter() {
            m = m.max_s(v);
        }
        let mut sum = S::ZERO;
        for a in 0..a_dim {
            let e = ((row[a] - m) * inv_tau).exp();
            pi[[b, a]] = e;
            sum = sum + e;
        }
        let lse = sum.ln();
        let inv_sum = S::ONE / sum;
        for a in 0..a_dim {
            log_pi[[b, a]] = (row[a] - m) * inv_tau - lse;
            pi[[b, a]] = pi[[b, a]] * inv_sum;
        }
    }
    SoftPolicyOut { pi, log_pi }
}

pub fn soft_policy<S: Scalar>(q: &Array2<S>, tau_m: f64) -> Array2<S> {
    soft_policy_full(q, tau_m).pi
}

/// alpha * clip(tau * ln pi(a_t|s_t), l0, 0), with pi from the target net's
/// mean-Q at the sampled state. Always in [alpha * l0, 0].
pub fn munchausen_bonus<S: Scalar>(
    q_target_s: &Array2<S>,
    actions: &[usize],
    cfg: &AgentConfig,
) -> Array1<S> {
    let sp = soft_policy_full(q_target_s, cfg.munchausen_tau);
    let alpha = S::from_f64(cfg.munchausen_alpha);
    let tau = S::from_f64(cfg.munchausen_tau);
    let floor = S::from_f64(cfg.munchausen_l0);
    let mut out = Array1::from_elem(actions.len(), S::ZERO);
    for (b, &a) in actions.iter().enumerate() {
        let scaled = tau * sp.log_pi[[b, a]];
        out[b] = alpha * scaled.clamp_s(floor, S::ZERO);
    }
    out
}

/// Lowest index wins ties.
pub fn argmax_row<S: Scalar>(row: ArrayView1<'_, S>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Detached target-side quantities for one batch. All arrays come from
/// no-grad forwards; nothing here participates in backprop.
pub struct TargetInputs<'a, S> {
    /// Target-net quantiles at the bootstrap state, [batch, N', A].
    pub z_next: &'a Array3<S>,
    /// Target-net mean-Q at the bootstrap state, [batch, A].
    pub q_next_mean: &'a Array2<S>,
    /// Online-net mean-Q at the bootstrap state; picks the action when the
    /// Munchausen rule is off.
    pub q_online_next_mean: Option<&'a Array2<S>>,
    /// Target-net mean-Q at the sampled state; feeds the bonus term.
    pub q_state_mean: Option<&'a Array2<S>>,
    pub actions: &'a [usize],
    pub return_n: &'a [f64],
    pub terminal: &'a [bool],
    pub horizon_m: &'a [usize],
}

/// Target quantiles [batch, N'] under the configured rule.
pub fn compute_targets<S: Scalar>(inp: &TargetInputs<'_, S>, cfg: &AgentConfig) -> Array2<S> {
    let (batch, n_prime, a_dim) = inp.z_next.dim();
    assert_eq!(inp.actions.len(), batch);
    let mut out = Array2::from_elem((batch, n_prime), S::ZERO);

    if cfg.use_munchausen {
        let q_s = inp
            .q_state_mean
            .expect("munchausen rule needs mean-Q at the sampled state");
        let bonus = munchausen_bonus(q_s, inp.actions, cfg);
        let sp = soft_policy_full(inp.q_next_mean, cfg.munchausen_tau);
        let tau = S::from_f64(cfg.munchausen_tau);
        for b in 0..batch {
            let base = S::from_f64(inp.return_n[b]) + bonus[b];
            let scale = if inp.terminal[b] {
                S::ZERO
            } else {
                S::from_f64(cfg.discount.powi(inp.horizon_m[b] as i32))
            };
            for j in 0..n_prime {
                let mut acc = S::ZERO;
                for a in 0..a_dim {
                    acc = acc + sp.pi[[b, a]] * (inp.z_next[[b, j, a]] - tau * sp.log_pi[[b, a]]);
                }
                out[[b, j]] = base + scale * acc;
            }
        }
    } else {
        let q_sel = inp
            .q_online_next_mean
            .expect("double-DQN rule needs online mean-Q at the bootstrap state");
        for b in 0..batch {
            let a_star = argmax_row(q_sel.row(b));
            let base = S::from_f64(inp.return_n[b]);
            let scale = if inp.terminal[b] {
                S::ZERO
            } else {
                S::from_f64(cfg.discount.powi(inp.horizon_m[b] as i32))
            };
            for j in 0..n_prime {
                out[[b, j]] = base + scale * inp.z_next[[b, j, a_star]];
            }
        }
    }
    out
}

pub struct QuantileLoss<S> {
    pub loss: f64,
    /// d loss / d pred, [batch, N]; already includes sample weights.
    pub grad_pred: Array2<S>,
    pub per_sample_td: Vec<f64>,
}

fn huber_and_slope(delta: f64, kappa: f64) -> (f64, f64) {
    let a = delta.abs();
    if a <= kappa {
        (0.5 * delta * delta, delta)
    } else {
        (kappa * (a - 0.5 * kappa), kappa * delta.signum())
    }
}

fn pairwise_loss<S: Scalar>(
    pred: &Array2<S>,
    target: &Array2<S>,
    taus: &Array2<S>,
    kappa: f64,
    weights: Option<&[f64]>,
    quantile_weighting: bool,
) -> QuantileLoss<S> {
    assert!(kappa > 0.0, "kappa must be positive");
    let (batch, n) = pred.dim();
    let n_prime = target.ncols();
    assert_eq!(target.nrows(), batch);
    assert_eq!(taus.dim(), (batch, n));

    let mut grad = Array2::from_elem((batch, n), S::ZERO);
    let mut per_sample_td = vec![0.0f64; batch];
    let mut total = 0.0f64;
    let inv_np = 1.0 / n_prime as f64;
    let inv_pairs = 1.0 / (n * n_prime) as f64;
    let inv_b = 1.0 / batch as f64;

    for b in 0..batch {
        let w = weights.map_or(1.0, |w| w[b]);
        let mut sample_loss = 0.0f64;
        let mut abs_sum = 0.0f64;
        for i in 0..n {
            let p = pred[[b, i]].to_f64();
            let t_i = taus[[b, i]].to_f64();
            let mut g_i = 0.0f64;
            for j in 0..n_prime {
                let delta = target[[b, j]].to_f64() - p;
                abs_sum += delta.abs();
                let (l, slope) = huber_and_slope(delta, kappa);
                let rho_w = if quantile_weighting {
                    let ind = if delta < 0.0 { 1.0 } else { 0.0 };
                    (t_i - ind).abs() / kappa
                } else {
                    1.0
                };
                sample_loss += rho_w * l;
                g_i += rho_w * -slope;
            }
            grad[[b, i]] = S::from_f64(w * inv_b * inv_np * g_i);
        }
        per_sample_td[b] = abs_sum * inv_pairs;
        total += w * inv_np * sample_loss;
    }

    QuantileLoss {
        loss: total * inv_b,
        grad_pred: grad,
        per_sample_td,
    }
}

/// Pairwise quantile Huber loss: mean over the batch of
/// (1/N') sum_j sum_i |tau_i - 1{delta_ij < 0}| * L_kappa(delta_ij) / kappa.
/// Optional weights multiply per-sample losses before the batch mean.
pub fn quantile_huber_loss<S: Scalar>(
    pred: &Array2<S>,
    target: &Array2<S>,
    taus: &Array2<S>,
    kappa: f64,
    weights: Option<&[f64]>,
) -> QuantileLoss<S> {
    pairwise_loss(pred, target, taus, kappa, weights, true)
}

/// Plain Huber loss on scalar predictions ([batch, 1] each side); the
/// quantile factor and the 1/kappa scale drop out.
pub fn plain_huber_loss<S: Scalar>(
    pred: &Array2<S>,
    target: &Array2<S>,
    kappa: f64,
    weights: Option<&[f64]>,
) -> QuantileLoss<S> {
    let taus = midpoint_taus(pred.nrows(), pred.ncols());
    pairwise_loss(pred, target, &taus, kappa, weights, false)
}

/// Importance-sampling exponent at a given frame, annealed linearly over the
/// whole run.
pub fn per_beta_at(cfg: &AgentConfig, frame: u64) -> f64 {
    let t = (frame as f64 / cfg.total_frames as f64).clamp(0.0, 1.0);
    cfg.per_beta_start + (cfg.per_beta_end - cfg.per_beta_start) * t
}

/// Uniform tau draws in [0, 1), [batch, n].
pub fn random_taus<S: Scalar, R: Rng>(batch: usize, n: usize, rng: &mut R) -> Array2<S> {
    let mut out = Array2::from_elem((batch, n), S::ZERO);
    for v in out.iter_mut() {
        *v = S::from_f64(rng.gen::<f64>());
    }
    out
}

/// Per-step rng handles; streams stay separate so ablations that skip a draw
/// do not shift the others.
pub struct StepRngs<'a> {
    pub taus: &'a mut ChaCha8Rng,
    pub noise: &'a mut ChaCha8Rng,
    pub replay: &'a mut ChaCha8Rng,
}

pub struct Learner<S> {
    pub online: BtrNetwork<S>,
    pub target: BtrNetwork<S>,
    pub opt: Adam<S>,
    /// Grad steps since the last target sync; hits target_update_period
    /// exactly, then resets to 0.
    pub steps_since_sync: u64,
    pub grad_steps: u64,
}

impl<S: Scalar> Learner<S> {
    pub fn new<R: Rng>(
        spec: NetworkSpec,
        cfg: &AgentConfig,
        init_rng: &mut R,
    ) -> Result<Self, NetworkError> {
        let mut online = BtrNetwork::new(spec.clone(), init_rng)?;
        let mut target = BtrNetwork::new(spec, init_rng)?;
        target.copy_from(&mut online);
        let opt = Adam::new(
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        Ok(Self {
            online,
            target,
            opt,
            steps_since_sync: 0,
            grad_steps: 0,
        })
    }

    pub fn sync_target(&mut self) {
        let Self { online, target, .. } = self;
        target.copy_from(online);
        self.steps_since_sync = 0;
    }

    /// Global grad L2 norm over the online net, accumulated in f64.
    pub fn grad_norm(&mut self) -> f64 {
        let mut sq = 0.0f64;
        self.online.visit_params(&mut |p| {
            for &v in p.g.iter() {
                let x = v.to_f64();
                sq += x * x;
            }
        });
        sq.sqrt()
    }

    fn scale_grads(&mut self, factor: f64) {
        let s = S::from_f64(factor);
        self.online.visit_params(&mut |p| {
            for v in p.g.iter_mut() {
                *v = *v * s;
            }
        });
    }

    fn adam_step(&mut self) {
        let Self { online, opt, .. } = self;
        opt.begin_step();
        let mut idx = 0usize;
        online.visit_params(&mut |p| {
            opt.apply(idx, p.w, p.g);
            idx += 1;
        });
    }

    /// One gradient update: sample, build targets, backprop, clip to
    /// grad_clip_max_norm, Adam, feed TD magnitudes back as priorities, and
    /// sync the target net on schedule.
    pub fn train_step(
        &mut self,
        replay: &mut ReplayBuffer,
        cfg: &AgentConfig,
        frame: u64,
        rngs: &mut StepRngs<'_>,
    ) -> Result<LossReport, ReplayError> {
        let beta = if cfg.use_per {
            per_beta_at(cfg, frame)
        } else {
            0.0
        };
        let batch = replay.sample(cfg.batch_size, beta, rngs.replay)?;
        let b = batch.transitions.len();
        let h = self.online.spec.height;
        let w = self.online.spec.width;

        let states: Vec<&crate::envs::FrameStack> =
            batch.transitions.iter().map(|t| &t.state).collect();
        let next_states: Vec<&crate::envs::FrameStack> =
            batch.transitions.iter().map(|t| &t.next_state).collect();
        let obs = crate::envs::stacks_to_batch::<S>(&states, h, w);
        let next_obs = crate::envs::stacks_to_batch::<S>(&next_states, h, w);

        let actions: Vec<usize> = batch.transitions.iter().map(|t| t.action).collect();
        let return_n: Vec<f64> = batch.transitions.iter().map(|t| t.return_n).collect();
        let terminal: Vec<bool> = batch.transitions.iter().map(|t| t.terminal).collect();
        let horizon_m: Vec<usize> = batch.transitions.iter().map(|t| t.horizon_m).collect();

        if cfg.use_noisy {
            self.online.sample_noise(rngs.noise);
            self.target.sample_noise(rngs.noise);
        }

        let n = if cfg.use_iqn { cfg.iqn_taus } else { 1 };
        let taus_online: Array2<S> = if cfg.use_iqn {
            random_taus(b, n, rngs.taus)
        } else {
            midpoint_taus(b, 1)
        };
        let taus_target: Array2<S> = if cfg.use_iqn {
            random_taus(b, n, rngs.taus)
        } else {
            midpoint_taus(b, 1)
        };

        // target-side forwards first; the train-mode forward must be the last
        // one on the online net so its cache survives until backward
        let z_next = self.target.forward(&next_obs, &taus_target, false);
        let inv_np = S::from_f64(1.0 / n as f64);
        let q_next_mean = z_next.sum_axis(Axis(1)).mapv(|v| v * inv_np);
        let q_state_mean = if cfg.use_munchausen {
            Some(self.target.mean_q(&obs, &taus_target))
        } else {
            None
        };
        let q_online_next_mean = if cfg.use_munchausen {
            None
        } else {
            let taus_sel: Array2<S> = if cfg.use_iqn {
                random_taus(b, n, rngs.taus)
            } else {
                midpoint_taus(b, 1)
            };
            Some(self.online.mean_q(&next_obs, &taus_sel))
        };

        let targets = compute_targets(
            &TargetInputs {
                z_next: &z_next,
                q_next_mean: &q_next_mean,
                q_online_next_mean: q_online_next_mean.as_ref(),
                q_state_mean: q_state_mean.as_ref(),
                actions: &actions,
                return_n: &return_n,
                terminal: &terminal,
                horizon_m: &horizon_m,
            },
            cfg,
        );

        let z_online = self.online.forward(&obs, &taus_online, true);
        let mut pred = Array2::from_elem((b, n), S::ZERO);
        for (i, &a) in actions.iter().enumerate() {
            for j in 0..n {
                pred[[i, j]] = z_online[[i, j, a]];
            }
        }

        let weights = cfg.use_per.then_some(batch.weights.as_slice());
        let ql = if cfg.use_iqn {
            quantile_huber_loss(&pred, &targets, &taus_online, cfg.huber_kappa, weights)
        } else {
            plain_huber_loss(&pred, &targets, cfg.huber_kappa, weights)
        };

        let a_dim = self.online.spec.num_actions;
        let mut gq = Array3::from_elem((b, n, a_dim), S::ZERO);
        for (i, &a) in actions.iter().enumerate() {
            for j in 0..n {
                gq[[i, j, a]] = ql.grad_pred[[i, j]];
            }
        }
        self.online.zero_grads();
        self.online.backward(&gq);

        let grad_norm_preclip = self.grad_norm();
        if grad_norm_preclip > cfg.grad_clip_max_norm {
            self.scale_grads(cfg.grad_clip_max_norm / grad_norm_preclip);
        }
        self.adam_step();
        if cfg.use_spectral_norm {
            self.online.spectral_normalize_step();
        }

        replay.update_priorities(&batch.indices, &ql.per_sample_td);

        self.grad_steps += 1;
        self.steps_since_sync += 1;
        if self.steps_since_sync >= cfg.target_update_period {
            self.sync_target();
        }

        Ok(LossReport {
            scalar_loss: ql.loss,
            per_sample_td: ql.per_sample_td,
            grad_norm_preclip,
        })
    }
}

/// Finite-difference check of the loss gradient through a small dense stack:
/// obs -> Linear -> ReLU -> Linear -> quantiles for one action. Returns the
/// max relative error between analytic and central-difference gradients.
/// Runs in f64; the self-test suite requires < 1e-4.
pub fn quantile_grad_check(seed: u64) -> f64 {
    use crate::rng::{stream_rng, STREAM_INIT};

    let batch = 3;
    let din = 5;
    let hidden = 8;
    let n = 4;
    let kappa = 1.0;

    let mut rng = stream_rng(seed, STREAM_INIT, 0);
    let mut l1 = Linear::<f64>::new("l1", din, hidden, &mut rng);
    let mut relu = Relu2::<f64>::new("relu");
    let mut l2 = Linear::<f64>::new("l2", hidden, n, &mut rng);

    let mut x = Array2::from_elem((batch, din), 0.0);
    for v in x.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut target = Array2::from_elem((batch, n), 0.0);
    for v in target.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    let taus: Array2<f64> = random_taus(batch, n, &mut rng);
    let weights: Vec<f64> = (0..batch).map(|_| rng.gen_range(0.2..1.5)).collect();

    fn perturb(l1: &mut Linear<f64>, l2: &mut Linear<f64>, k: usize, d: f64) {
        let mut idx = 0usize;
        let mut f = |p: crate::nn::ParamRef<'_, f64>| {
            for v in p.w.iter_mut() {
                if idx == k {
                    *v += d;
                }
                idx += 1;
            }
        };
        l1.visit_params("l1", &mut f);
        l2.visit_params("l2", &mut f);
    }

    let pred = {
        let h = l1.forward(&x, true);
        let h = relu.forward(&h, true);
        l2.forward(&h, true)
    };
    let ql = quantile_huber_loss(&pred, &target, &taus, kappa, Some(&weights));
    l1.zero_grads();
    l2.zero_grads();
    let gh = l2.backward(&ql.grad_pred);
    let gh = relu.backward(&gh);
    l1.backward(&gh);

    let mut analytic: Vec<f64> = Vec::new();
    let mut collect = |p: crate::nn::ParamRef<'_, f64>| analytic.extend(p.g.iter().copied());
    l1.visit_params("l1", &mut collect);
    l2.visit_params("l2", &mut collect);
    drop(collect);

    let eps = 1e-6;
    let mut max_rel = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let eval = |l1: &mut Linear<f64>, relu: &mut Relu2<f64>, l2: &mut Linear<f64>| {
            let p = {
                let h = l1.forward(&x, false);
                let h = relu.forward(&h, false);
                l2.forward(&h, false)
            };
            quantile_huber_loss(&p, &target, &taus, kappa, Some(&weights)).loss
        };
        perturb(&mut l1, &mut l2, k, eps);
        let up = eval(&mut l1, &mut relu, &mut l2);
        perturb(&mut l1, &mut l2, k, -2.0 * eps);
        let down = eval(&mut l1, &mut relu, &mut l2);
        perturb(&mut l1, &mut l2, k, eps);
        let numeric = (up - down) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Frame, FrameStack};
    use crate::replay::ReplayBuffer;
    use crate::rng::{
        stream_rng, STREAM_ENV, STREAM_INIT, STREAM_NOISE, STREAM_REPLAY, STREAM_TAUS,
    };
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::arr2;
    use ndarray::Array4;
    use std::sync::Arc;

    fn cfg_tiny() -> AgentConfig {
        let mut cfg = AgentConfig::default();
        cfg.render_height = 36;
        cfg.render_width = 36;
        cfg.use_impala = false;
        cfg.use_maxpool = false;
        cfg.use_spectral_norm = false;
        cfg.num_envs = 1;
        cfg.batch_size = 8;
        cfg.iqn_taus = 4;
        cfg.iqn_cos_embedding = 16;
        cfg.dueling_hidden = 24;
        cfg.replay_capacity = 256;
        cfg.min_replay_size = 16;
        cfg.n_step = 1;
        cfg.target_update_period = 3;
        cfg.total_frames = 100_000;
        cfg.validate().unwrap();
        cfg
    }

    fn rand_frame<R: Rng>(rng: &mut R, len: usize) -> Frame {
        let v: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        Arc::from(v)
    }

    fn fill_replay<R: Rng>(
        replay: &mut ReplayBuffer,
        cfg: &AgentConfig,
        rng: &mut R,
        count: usize,
        reward_scale: f64,
    ) {
        let len = cfg.render_height * cfg.render_width;
        let mut state = FrameStack::filled(rand_frame(rng, len));
        let mut pushed = 0;
        while pushed < count {
            let action = rng.gen_range(0..4);
            let next = state.push(rand_frame(rng, len));
            let reward = rng.gen_range(-1.0..1.0) * reward_scale;
            let terminal = rng.gen_bool(0.1);
            pushed += replay.push(0, state.clone(), action, reward, &next, terminal, false);
            state = if terminal {
                FrameStack::filled(rand_frame(rng, len))
            } else {
                next
            };
        }
    }

    struct Rngs {
        taus: ChaCha8Rng,
        noise: ChaCha8Rng,
        replay: ChaCha8Rng,
    }

    fn rngs(seed: u64) -> Rngs {
        Rngs {
            taus: stream_rng(seed, STREAM_TAUS, 0),
            noise: stream_rng(seed, STREAM_NOISE, 0),
            replay: stream_rng(seed, STREAM_REPLAY, 0),
        }
    }

    fn params_of<S: Scalar>(net: &mut BtrNetwork<S>) -> Vec<f64> {
        let mut v = Vec::new();
        net.visit_params(&mut |p| v.extend(p.w.iter().map(|x| x.to_f64())));
        v
    }

    #[test]
    fn soft_policy_symmetric_and_limits() {
        let q = arr2(&[[0.0f64, 0.0]]);
        let pi = soft_policy(&q, 0.03);
        assert_abs_diff_eq!(pi[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(pi[[0, 1]], 0.5, epsilon = 1e-12);

        let q = arr2(&[[1.0f64, 0.0]]);
        let hot = soft_policy(&q, 1e-3);
        assert!(hot[[0, 0]] > 0.999 && hot[[0, 1]] < 1e-3);
        let cold = soft_policy(&q, 1e4);
        assert_abs_diff_eq!(cold[[0, 0]], 0.5, epsilon = 1e-4);
        assert_abs_diff_eq!(cold[[0, 1]], 0.5, epsilon = 1e-4);
    }

    #[test]
    fn soft_policy_matches_direct_exponent_sum() {
        let q = arr2(&[[1.0f64, 2.0, 3.0]]);
        let out = soft_policy_full(&q, 1.0);
        let z: f64 = q.row(0).iter().map(|v| v.exp()).sum();
        for a in 0..3 {
            let expect = q[[0, a]].exp() / z;
            assert_abs_diff_eq!(out.pi[[0, a]], expect, epsilon = 1e-12);
            assert_abs_diff_eq!(out.log_pi[[0, a]], expect.ln(), epsilon = 1e-12);
        }
        let row_sum: f64 = out.pi.row(0).iter().sum();
        assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bonus_certain_policy_is_zero() {
        let cfg = AgentConfig::default();
        let q = arr2(&[[0.7f64]]);
        let b = munchausen_bonus(&q, &[0], &cfg);
        assert_abs_diff_eq!(b[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bonus_floor_clips_to_alpha_l0() {
        let cfg = AgentConfig::default();
        // tau ln pi(a0) ~ -100, far below l0 = -1
        let q = arr2(&[[0.0f64, 100.0]]);
        let b = munchausen_bonus(&q, &[0], &cfg);
        assert_abs_diff_eq!(b[0], cfg.munchausen_alpha * cfg.munchausen_l0, epsilon = 1e-12);
    }

    #[test]
    fn bonus_uniform_four_actions() {
        let cfg = AgentConfig::default();
        let q = arr2(&[[0.0f64, 0.0, 0.0, 0.0]]);
        let b = munchausen_bonus(&q, &[2], &cfg);
        let expect = 0.9 * (0.03 * 0.25f64.ln()).max(-1.0);
        assert_abs_diff_eq!(b[0], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(b[0], -0.03743, epsilon = 1e-5);
    }

    #[test]
    fn bonus_always_in_clip_range() {
        let cfg = AgentConfig::default();
        let mut rng = stream_rng(11, STREAM_TAUS, 0);
        for _ in 0..200 {
            let mut q = Array2::from_elem((4, 6), 0.0f64);
            for v in q.iter_mut() {
                *v = rng.gen_range(-50.0..50.0);
            }
            let actions: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            let b = munchausen_bonus(&q, &actions, &cfg);
            for &v in b.iter() {
                assert!(v <= 1e-12, "bonus above ceiling: {v}");
                assert!(
                    v >= cfg.munchausen_alpha * cfg.munchausen_l0 - 1e-12,
                    "bonus below floor: {v}"
                );
            }
        }
    }

    #[test]
    fn targets_terminal_keeps_only_return_and_bonus() {
        let cfg = AgentConfig::default();
        let mut rng = stream_rng(5, STREAM_TAUS, 0);
        let mut z_next = Array3::from_elem((2, 3, 4), 0.0f64);
        for v in z_next.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let q_next = arr2(&[[0.3, -0.2, 0.1, 0.0], [0.0, 0.5, -0.5, 0.2]]);
        let q_state = arr2(&[[1.0, 0.0, 0.0, 0.0], [0.2, 0.2, 0.2, 0.2]]);
        let actions = [0usize, 3];
        let bonus = munchausen_bonus(&q_state, &actions, &cfg);
        let t = compute_targets(
            &TargetInputs {
                z_next: &z_next,
                q_next_mean: &q_next,
                q_online_next_mean: None,
                q_state_mean: Some(&q_state),
                actions: &actions,
                return_n: &[0.7, -0.4],
                terminal: &[true, true],
                horizon_m: &[1, 3],
            },
            &cfg,
        );
        for b in 0..2 {
            let expect = [0.7, -0.4][b] + bonus[b];
            for j in 0..3 {
                assert_abs_diff_eq!(t[[b, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn targets_tiny_temperature_approaches_hard_max() {
        let mut cfg = AgentConfig::default();
        cfg.munchausen_alpha = 0.0;
        cfg.munchausen_tau = 1e-6;
        cfg.discount = 0.9;
        let mut rng = stream_rng(6, STREAM_TAUS, 0);
        let batch = 4;
        let n_prime = 5;
        let a_dim = 3;
        let mut z_next = Array3::from_elem((batch, n_prime, a_dim), 0.0f64);
        for v in z_next.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut q_next = Array2::from_elem((batch, a_dim), 0.0f64);
        for b in 0..batch {
            for a in 0..a_dim {
                q_next[[b, a]] = rng.gen_range(-1.0..1.0);
            }
            // force a clear margin so the softmax saturates
            let a_star = b % a_dim;
            q_next[[b, a_star]] += 2.0;
        }
        let q_state = Array2::from_elem((batch, a_dim), 0.0f64);
        let actions = vec![0usize; batch];
        let return_n = vec![0.25; batch];
        let horizon: Vec<usize> = (0..batch).map(|b| 1 + (b % 3)).collect();
        let t = compute_targets(
            &TargetInputs {
                z_next: &z_next,
                q_next_mean: &q_next,
                q_online_next_mean: None,
                q_state_mean: Some(&q_state),
                actions: &actions,
                return_n: &return_n,
                terminal: &vec![false; batch],
                horizon_m: &horizon,
            },
            &cfg,
        );
        for b in 0..batch {
            let a_star = argmax_row(q_next.row(b));
            for j in 0..n_prime {
                let expect = 0.25 + 0.9f64.powi(horizon[b] as i32) * z_next[[b, j, a_star]];
                assert_abs_diff_eq!(t[[b, j]], expect, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn targets_single_action_has_no_entropy_term() {
        let cfg = AgentConfig::default();
        let z_next = Array3::from_shape_vec((1, 3, 1), vec![2.0f64, 4.0, 1.0]).unwrap();
        let q_next = arr2(&[[2.3f64]]);
        let q_state = arr2(&[[0.9f64]]);
        let t = compute_targets(
            &TargetInputs {
                z_next: &z_next,
                q_next_mean: &q_next,
                q_online_next_mean: None,
                q_state_mean: Some(&q_state),
                actions: &[0],
                return_n: &[0.5],
                terminal: &[false],
                horizon_m: &[2],
            },
            &cfg,
        );
        let g2 = cfg.discount * cfg.discount;
        for j in 0..3 {
            assert_abs_diff_eq!(t[[0, j]], 0.5 + g2 * z_next[[0, j, 0]], epsilon = 1e-12);
        }
    }

    #[test]
    fn targets_double_rule_uses_online_argmax() {
        let mut cfg = AgentConfig::default();
        cfg.use_munchausen = false;
        cfg.discount = 0.9;
        let z_next =
            Array3::from_shape_vec((1, 3, 2), vec![2.0f64, 5.0, 2.1, 5.0, 2.2, 5.0]).unwrap();
        // target net prefers action 1; online net must override with action 0
        let q_next = arr2(&[[2.1f64, 5.0]]);
        let q_online = arr2(&[[3.0f64, 1.0]]);
        let t = compute_targets(
            &TargetInputs {
                z_next: &z_next,
                q_next_mean: &q_next,
                q_online_next_mean: Some(&q_online),
                q_state_mean: None,
                actions: &[0],
                return_n: &[0.5],
                terminal: &[false],
                horizon_m: &[2],
            },
            &cfg,
        );
        for (j, z) in [2.0, 2.1, 2.2].iter().enumerate() {
            assert_abs_diff_eq!(t[[0, j]], 0.5 + 0.81 * z, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_zero_iff_all_pairwise_deltas_zero() {
        // constant rows: every pairwise delta is zero
        let pred = arr2(&[[0.1f64, 0.1], [-0.3, -0.3]]);
        let taus = arr2(&[[0.25f64, 0.75], [0.25, 0.75]]);
        let out = quantile_huber_loss(&pred, &pred.clone(), &taus, 1.0, None);
        assert_eq!(out.loss, 0.0);
        assert!(out.per_sample_td.iter().all(|&v| v == 0.0));
        assert!(out.grad_pred.iter().all(|&v| v == 0.0));

        let mut target = pred.clone();
        target[[0, 0]] += 0.2;
        let out = quantile_huber_loss(&pred, &target, &taus, 1.0, None);
        assert!(out.loss > 0.0);

        // identical but non-constant rows still pay the cross-pair dispersion
        let spread = arr2(&[[0.0f64, 1.0]]);
        let taus1 = arr2(&[[0.25f64, 0.75]]);
        let out = quantile_huber_loss(&spread, &spread.clone(), &taus1, 1.0, None);
        assert!(out.loss > 0.0);
    }

    #[test]
    fn loss_hand_value_single_pair() {
        let pred = arr2(&[[0.0f64]]);
        let target = arr2(&[[0.5f64]]);
        let taus = arr2(&[[0.5f64]]);
        let out = quantile_huber_loss(&pred, &target, &taus, 1.0, None);
        assert_abs_diff_eq!(out.loss, 0.0625, epsilon = 1e-12);
        assert_abs_diff_eq!(out.per_sample_td[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.grad_pred[[0, 0]], -0.25, epsilon = 1e-12);
    }

    #[test]
    fn loss_asymmetry_penalizes_sides_by_tau() {
        let taus = arr2(&[[0.9f64]]);
        let over = quantile_huber_loss(&arr2(&[[0.0f64]]), &arr2(&[[0.3f64]]), &taus, 1.0, None);
        let under = quantile_huber_loss(&arr2(&[[0.0f64]]), &arr2(&[[-0.3f64]]), &taus, 1.0, None);
        assert_relative_eq!(over.loss / under.loss, 9.0, epsilon = 1e-9);
    }

    #[test]
    fn plain_huber_hand_values() {
        let pred = arr2(&[[0.0f64], [0.0]]);
        let target = arr2(&[[0.5f64], [2.0]]);
        let out = plain_huber_loss(&pred, &target, 1.0, None);
        // quadratic branch 0.125, linear branch 1.5, batch mean
        assert_abs_diff_eq!(out.loss, 0.5 * (0.125 + 1.5), epsilon = 1e-12);
        assert_abs_diff_eq!(out.per_sample_td[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.per_sample_td[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_directly() {
        let mut rng = stream_rng(9, STREAM_TAUS, 0);
        let (b, n, np) = (3, 4, 5);
        let mut pred = Array2::from_elem((b, n), 0.0f64);
        let mut target = Array2::from_elem((b, np), 0.0f64);
        for v in pred.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        for v in target.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let taus: Array2<f64> = random_taus(b, n, &mut rng);
        let weights: Vec<f64> = (0..b).map(|_| rng.gen_range(0.2..1.5)).collect();
        let out = quantile_huber_loss(&pred, &target, &taus, 1.0, Some(&weights));
        let eps = 1e-7;
        for bi in 0..b {
            for i in 0..n {
                let mut up = pred.clone();
                up[[bi, i]] += eps;
                let mut down = pred.clone();
                down[[bi, i]] -= eps;
                let lu = quantile_huber_loss(&up, &target, &taus, 1.0, Some(&weights)).loss;
                let ld = quantile_huber_loss(&down, &target, &taus, 1.0, Some(&weights)).loss;
                let numeric = (lu - ld) / (2.0 * eps);
                assert_relative_eq!(out.grad_pred[[bi, i]], numeric, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn gradient_check_through_dense_stack() {
        for seed in 1..=5u64 {
            let err = quantile_grad_check(seed);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn beta_anneals_linearly_over_run() {
        let cfg = AgentConfig::default();
        assert_abs_diff_eq!(per_beta_at(&cfg, 0), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(per_beta_at(&cfg, cfg.total_frames / 2), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(per_beta_at(&cfg, cfg.total_frames), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(per_beta_at(&cfg, cfg.total_frames * 2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn train_step_syncs_target_on_schedule() {
        let cfg = cfg_tiny();
        let spec = NetworkSpec::from_config(&cfg, 4);
        let mut init = stream_rng(21, STREAM_INIT, 0);
        let mut learner: Learner<f32> = Learner::new(spec, &cfg, &mut init).unwrap();
        let mut replay = ReplayBuffer::from_config(&cfg);
        fill_replay(&mut replay, &cfg, &mut stream_rng(22, STREAM_ENV, 0), 64, 1.0);
        let mut r = rngs(23);

        for step in 1..=6u64 {
            let mut sr = StepRngs {
                taus: &mut r.taus,
                noise: &mut r.noise,
                replay: &mut r.replay,
            };
            learner.train_step(&mut replay, &cfg, step, &mut sr).unwrap();
            let same = params_of(&mut learner.online) == params_of(&mut learner.target);
            if step % cfg.target_update_period == 0 {
                assert!(same, "step {step}: target must equal online right after sync");
                assert_eq!(learner.steps_since_sync, 0);
            } else {
                assert!(!same, "step {step}: target drifted into online without sync");
                assert_eq!(learner.steps_since_sync, step % cfg.target_update_period);
            }
        }
        assert_eq!(learner.grad_steps, 6);
    }

    #[test]
    fn train_step_clips_global_norm_exactly() {
        let mut cfg = cfg_tiny();
        cfg.use_noisy = false;
        // Huber saturates loss gradients, so drop the cap below the typical
        // norm instead of inflating rewards
        cfg.grad_clip_max_norm = 0.05;
        let spec = NetworkSpec::from_config(&cfg, 4);
        let mut init = stream_rng(31, STREAM_INIT, 0);
        let mut learner: Learner<f64> = Learner::new(spec, &cfg, &mut init).unwrap();
        let mut replay = ReplayBuffer::from_config(&cfg);
        fill_replay(&mut replay, &cfg, &mut stream_rng(32, STREAM_ENV, 0), 64, 10.0);
        let mut r = rngs(33);
        let mut sr = StepRngs {
            taus: &mut r.taus,
            noise: &mut r.noise,
            replay: &mut r.replay,
        };
        let report = learner.train_step(&mut replay, &cfg, 1, &mut sr).unwrap();
        assert!(
            report.grad_norm_preclip > cfg.grad_clip_max_norm,
            "pre-clip norm {} not above cap",
            report.grad_norm_preclip
        );
        assert_abs_diff_eq!(learner.grad_norm(), cfg.grad_clip_max_norm, epsilon = 1e-6);
    }

    #[test]
    fn train_step_feeds_td_back_as_priorities() {
        let mut cfg = cfg_tiny();
        cfg.replay_capacity = 16;
        cfg.min_replay_size = 16;
        let spec = NetworkSpec::from_config(&cfg, 4);
        let mut init = stream_rng(41, STREAM_INIT, 0);
        let mut learner: Learner<f32> = Learner::new(spec, &cfg, &mut init).unwrap();
        let mut replay = ReplayBuffer::from_config(&cfg);
        fill_replay(&mut replay, &cfg, &mut stream_rng(42, STREAM_ENV, 0), 16, 1.0);
        let mut r = rngs(43);
        let mut sr = StepRngs {
            taus: &mut r.taus,
            noise: &mut r.noise,
            replay: &mut r.replay,
        };
        let report = learner.train_step(&mut replay, &cfg, 1, &mut sr).unwrap();

        // every slot keeps its fill-time max priority (1.0) or holds some
        // reported td magnitude plus the epsilon floor
        let mut updated = 0;
        for slot in 0..16 {
            let stored = replay.raw_priority(slot);
            if (stored - 1.0).abs() < 1e-15 {
                continue;
            }
            updated += 1;
            let matches = report
                .per_sample_td
                .iter()
                .any(|&td| (stored - (td + cfg.per_priority_epsilon)).abs() < 1e-9);
            assert!(matches, "slot {slot}: stored {stored} matches no reported td");
        }
        assert!(updated > 0, "no priorities were written back");
    }

    #[test]
    fn target_net_stays_out_of_the_gradient() {
        let mut cfg = cfg_tiny();
        cfg.use_noisy = false;
        let spec = NetworkSpec::from_config(&cfg, 4);
        let mut init = stream_rng(51, STREAM_INIT, 0);
        let mut online = BtrNetwork::<f64>::new(spec.clone(), &mut init).unwrap();
        let mut target = BtrNetwork::<f64>::new(spec, &mut init).unwrap();
        let mut rng = stream_rng(52, STREAM_TAUS, 0);
        let b = 3;
        let n = cfg.iqn_taus;
        let mut obs = Array4::from_elem((b, 4, 36, 36), 0.0f64);
        let mut next_obs = obs.clone();
        for v in obs.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in next_obs.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let taus: Array2<f64> = random_taus(b, n, &mut rng);
        let taus_t: Array2<f64> = random_taus(b, n, &mut rng);
        let actions = vec![0usize, 1, 2];
        let return_n = vec![0.3; b];
        let terminal = vec![false; b];
        let horizon = vec![1usize; b];

        let run = |target: &mut BtrNetwork<f64>, online: &mut BtrNetwork<f64>| -> (f64, Vec<f64>) {
            let z_next = target.forward(&next_obs, &taus_t, false);
            let inv = 1.0 / n as f64;
            let q_next = z_next.sum_axis(Axis(1)).mapv(|v| v * inv);
            let q_state = target.mean_q(&obs, &taus_t);
            let targets = compute_targets(
                &TargetInputs {
                    z_next: &z_next,
                    q_next_mean: &q_next,
                    q_online_next_mean: None,
                    q_state_mean: Some(&q_state),
                    actions: &actions,
                    return_n: &return_n,
                    terminal: &terminal,
                    horizon_m: &horizon,
                },
                &cfg,
            );
            let z = online.forward(&obs, &taus, true);
            let mut pred = Array2::from_elem((b, n), 0.0f64);
            for (i, &a) in actions.iter().enumerate() {
                for j in 0..n {
                    pred[[i, j]] = z[[i, j, a]];
                }
            }
            let ql = quantile_huber_loss(&pred, &targets, &taus, cfg.huber_kappa, None);
            let mut gq = Array3::from_elem((b, n, 4), 0.0f64);
            for (i, &a) in actions.iter().enumerate() {
                for j in 0..n {
                    gq[[i, j, a]] = ql.grad_pred[[i, j]];
                }
            }
            online.zero_grads();
            online.backward(&gq);
            let mut grads = Vec::new();
            online.visit_params(&mut |p| grads.extend(p.g.iter().copied()));
            (ql.loss, grads)
        };

        let (loss1, _g1) = run(&mut target, &mut online);
        // target-side forwards must not accumulate grads anywhere in the target net
        target.visit_params(&mut |p| {
            assert!(p.g.iter().all(|&v| v == 0.0), "{} picked up gradient", p.name)
        });
        target.visit_params(&mut |p| {
            for v in p.w.iter_mut() {
                *v += 0.05;
            }
        });
        let (loss2, _g2) = run(&mut target, &mut online);
        assert!(
            (loss1 - loss2).abs() > 1e-9,
            "perturbing the target net must move the loss"
        );
    }
}
