//! Evaluation statistics (IQM, bootstrap CIs, normalized scores) and network
//! probes (action gap, policy churn, dormant units, feature rank, weight
//! norms). Probe functions never touch parameters; they only zero the
//! exploration noise and run inference.

use crate::config::AgentConfig;
use crate::envs::{
    stacks_to_batch, EnvError, EnvParams, FrameStack, GridPixelEnv, Layout, NUM_ACTIONS,
};
use crate::learner::argmax_row;
use crate::network::{midpoint_taus, BtrNetwork};
use crate::nn::Scalar;
use crate::rng::{stream_rng, STREAM_PROBE};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Taus per state when a probe needs Q estimates or head activations.
const PROBE_TAUS: usize = 32;
const PROBE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no scores to aggregate")]
    EmptyScores,
    #[error("{got} bootstrap resamples; at least {min} required")]
    TooFewResamples { got: usize, min: usize },
    #[error("human and random reference scores are equal ({0})")]
    EqualReferences(f64),
    #[error("action gap needs at least 2 actions, got {0}")]
    TooFewActions(usize),
    #[error("trajectory of {0} states; swaps need at least 2")]
    ShortTrajectory(usize),
    #[error("cannot compare networks with different specs")]
    SpecMismatch,
    #[error("empty probe set")]
    EmptyProbe,
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Mean of the middle 50%: drop floor(n/4) scores from each end of the
/// sorted list.
pub fn iqm(scores: &[f64]) -> Result<f64, AnalysisError> {
    if scores.is_empty() {
        return Err(AnalysisError::EmptyScores);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop = sorted.len() / 4;
    let kept = &sorted[drop..sorted.len() - drop];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Percentile bootstrap of the IQM statistic. Deterministic given the rng.
pub fn bootstrap_ci(
    scores: &[f64],
    n_resamples: usize,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), AnalysisError> {
    const MIN_RESAMPLES: usize = 1000;
    if n_resamples < MIN_RESAMPLES {
        return Err(AnalysisError::TooFewResamples {
            got: n_resamples,
            min: MIN_RESAMPLES,
        });
    }
    if scores.is_empty() {
        return Err(AnalysisError::EmptyScores);
    }
    let n = scores.len();
    let mut stats = Vec::with_capacity(n_resamples);
    let mut sample = vec![0.0f64; n];
    for _ in 0..n_resamples {
        for slot in sample.iter_mut() {
            *slot = scores[rng.gen_range(0..n)];
        }
        stats.push(iqm(&sample)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

/// Linear-interpolated percentile of an already sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// (score - random) / (human - random).
pub fn human_normalize(score: f64, random_ref: f64, human_ref: f64) -> Result<f64, AnalysisError> {
    if human_ref == random_ref {
        return Err(AnalysisError::EqualReferences(human_ref));
    }
    Ok((score - random_ref) / (human_ref - random_ref))
}

/// Mean over games of max(0, 1 - normalized score); empty input counts as
/// no shortfall.
pub fn optimality_gap(normalized_scores: &[f64]) -> f64 {
    if normalized_scores.is_empty() {
        return 0.0;
    }
    normalized_scores
        .iter()
        .map(|&s| (1.0 - s).max(0.0))
        .sum::<f64>()
        / normalized_scores.len() as f64
}

/// Fixed observation set for probe measurements, collected once per run from
/// seeded random-policy rollouts. Order is rollout order, so the same set
/// doubles as the trajectory for action-swap counting (episode boundaries
/// included).
pub struct StateProbe {
    pub stacks: Vec<FrameStack>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl StateProbe {
    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    fn batch<S: Scalar>(&self, lo: usize, hi: usize) -> ndarray::Array4<S> {
        let refs: Vec<&FrameStack> = self.stacks[lo..hi].iter().collect();
        stacks_to_batch(&refs, self.height, self.width)
    }
}

/// Rolls a uniform-random policy through the configured env and freezes the
/// visited frame stacks.
pub fn collect_probe(
    cfg: &AgentConfig,
    n: usize,
    master_seed: u64,
) -> Result<StateProbe, AnalysisError> {
    let layout = Layout::resolve(&cfg.env)?;
    let params = EnvParams::from_config(cfg);
    let mut env = GridPixelEnv::new(layout, params, stream_rng(master_seed, STREAM_PROBE, 0))?;
    let mut policy = stream_rng(master_seed, STREAM_PROBE, 1);
    let mut stack = FrameStack::filled(env.reset());
    let mut stacks = Vec::with_capacity(n);
    for _ in 0..n {
        stacks.push(stack.clone());
        let a = policy.gen_range(0..NUM_ACTIONS);
        let (frame, res) = env.step(a)?;
        stack = if res.terminal || res.truncated {
            FrameStack::filled(env.reset())
        } else {
            stack.push(frame)
        };
    }
    Ok(StateProbe {
        stacks,
        height: cfg.render_height,
        width: cfg.render_width,
        seed: master_seed,
    })
}

/// Mean-over-tau greedy Q table [num_probe, A] with zero noise.
fn probe_q<S: Scalar>(net: &mut BtrNetwork<S>, probe: &StateProbe) -> Array2<f64> {
    net.zero_noise();
    let a_dim = net.spec.num_actions;
    let mut q = Array2::zeros((probe.len(), a_dim));
    let mut lo = 0;
    while lo < probe.len() {
        let hi = (lo + PROBE_CHUNK).min(probe.len());
        let obs = probe.batch::<S>(lo, hi);
        let chunk = net.mean_q_fixed(&obs, PROBE_TAUS);
        for r in 0..hi - lo {
            for a in 0..a_dim {
                q[[lo + r, a]] = chunk[[r, a]].to_f64();
            }
        }
        lo = hi;
    }
    q
}

/// Mean over rows of (max - second max). The table form backs the network
/// version and is directly checkable against a sort oracle.
pub fn action_gap_table(q: &Array2<f64>) -> Result<f64, AnalysisError> {
    if q.ncols() < 2 {
        return Err(AnalysisError::TooFewActions(q.ncols()));
    }
    if q.nrows() == 0 {
        return Err(AnalysisError::EmptyProbe);
    }
    let mut total = 0.0;
    for row in q.rows() {
        let mut top = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &v in row {
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        total += top - second;
    }
    Ok(total / q.nrows() as f64)
}

/// Mean over probe states of the gap between the two highest mean-over-tau
/// Q-values, zero noise.
pub fn action_gap<S: Scalar>(
    net: &mut BtrNetwork<S>,
    probe: &StateProbe,
) -> Result<f64, AnalysisError> {
    if probe.is_empty() {
        return Err(AnalysisError::EmptyProbe);
    }
    action_gap_table(&probe_q(net, probe))
}

/// Percentage of consecutive argmax changes along a greedy-action sequence.
pub fn swap_pct(argmaxes: &[usize]) -> Result<f64, AnalysisError> {
    if argmaxes.len() < 2 {
        return Err(AnalysisError::ShortTrajectory(argmaxes.len()));
    }
    let swaps = argmaxes.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(100.0 * swaps as f64 / (argmaxes.len() - 1) as f64)
}

fn greedy_actions(q: &Array2<f64>) -> Vec<usize> {
    q.rows().into_iter().map(|r| argmax_row(r)).collect()
}

/// Percentage of consecutive probe states whose greedy action differs,
/// treating the probe as the trajectory it was collected from.
pub fn action_swaps<S: Scalar>(
    net: &mut BtrNetwork<S>,
    probe: &StateProbe,
) -> Result<f64, AnalysisError> {
    if probe.len() < 2 {
        return Err(AnalysisError::ShortTrajectory(probe.len()));
    }
    swap_pct(&greedy_actions(&probe_q(net, probe)))
}

/// Percentage of probe states whose greedy action differs between two
/// parameter sets of the same architecture; shared midpoint taus, zero noise.
pub fn policy_churn<S: Scalar>(
    before: &mut BtrNetwork<S>,
    after: &mut BtrNetwork<S>,
    probe: &StateProbe,
) -> Result<f64, AnalysisError> {
    if before.spec != after.spec {
        return Err(AnalysisError::SpecMismatch);
    }
    if probe.is_empty() {
        return Err(AnalysisError::EmptyProbe);
    }
    let a = greedy_actions(&probe_q(before, probe));
    let b = greedy_actions(&probe_q(after, probe));
    let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(100.0 * changed as f64 / a.len() as f64)
}

#[derive(Debug, Clone)]
pub struct DormancyReport {
    /// Dormant units / total units over all scored sites, in [0, 1].
    pub fraction: f64,
    /// (site, dormant, total) per activation site.
    pub per_site: Vec<(String, usize, usize)>,
}

/// Dormant units among the mean-zero-normalized site means: unit i of a site
/// is dormant iff (mean |activation| of i) / (site mean of those means) <=
/// threshold; a site whose mean is zero counts as entirely dormant.
pub fn dormant_counts(site_means: &[f64], threshold: f64) -> usize {
    let layer_mean = site_means.iter().sum::<f64>() / site_means.len().max(1) as f64;
    if layer_mean == 0.0 {
        return site_means.len();
    }
    site_means
        .iter()
        .filter(|&&m| m / layer_mean <= threshold)
        .count()
}

/// Scores every ReLU site (trunk channels, tau embedding, head hidden units)
/// over the probe with 8 midpoint taus and zero noise.
pub fn dormant_fraction<S: Scalar>(
    net: &mut BtrNetwork<S>,
    probe: &StateProbe,
    threshold: f64,
) -> Result<DormancyReport, AnalysisError> {
    if probe.is_empty() {
        return Err(AnalysisError::EmptyProbe);
    }
    net.zero_noise();
    let n_taus = if net.spec.use_iqn { 8 } else { 1 };
    // weighted mean of per-chunk means; every site's row count is
    // proportional to the chunk's state count, so state weights are exact
    let mut sums: Vec<(String, Vec<f64>)> = Vec::new();
    let mut lo = 0;
    while lo < probe.len() {
        let hi = (lo + PROBE_CHUNK).min(probe.len());
        let obs = probe.batch::<S>(lo, hi);
        let taus = midpoint_taus::<S>(hi - lo, n_taus);
        let _ = net.forward(&obs, &taus, true);
        let weight = (hi - lo) as f64;
        for (i, (name, means)) in net.activation_sites().into_iter().enumerate() {
            if sums.len() == i {
                sums.push((name, vec![0.0; means.len()]));
            }
            for (acc, m) in sums[i].1.iter_mut().zip(&means) {
                *acc += weight * m;
            }
        }
        lo = hi;
    }
    let total_states = probe.len() as f64;
    let mut dormant = 0usize;
    let mut total = 0usize;
    let mut per_site = Vec::with_capacity(sums.len());
    for (name, mut means) in sums {
        for m in means.iter_mut() {
            *m /= total_states;
        }
        let d = dormant_counts(&means, threshold);
        dormant += d;
        total += means.len();
        per_site.push((name, d, means.len()));
    }
    Ok(DormancyReport {
        fraction: dormant as f64 / total as f64,
        per_site,
    })
}

/// Smallest k whose top-k singular values hold a 1-delta share of the total
/// spectral mass; 0 for an all-zero matrix.
pub fn srank(features: &Array2<f64>, delta: f64) -> usize {
    let (n, d) = features.dim();
    if n == 0 || d == 0 {
        return 0;
    }
    // eigenvalues of the smaller gram matrix are the squared singular values
    let small = n.min(d);
    let mut gram = nalgebra::DMatrix::<f64>::zeros(small, small);
    for i in 0..small {
        for j in 0..=i {
            let mut dot = 0.0;
            if n <= d {
                for k in 0..d {
                    dot += features[[i, k]] * features[[j, k]];
                }
            } else {
                for k in 0..n {
                    dot += features[[k, i]] * features[[k, j]];
                }
            }
            gram[(i, j)] = dot;
            gram[(j, i)] = dot;
        }
    }
    let mut sigmas: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mass: f64 = sigmas.iter().sum();
    if mass == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, s) in sigmas.iter().enumerate() {
        acc += s;
        if acc / mass >= 1.0 - delta {
            return k + 1;
        }
    }
    sigmas.len()
}

/// Trunk features of the probe set as a [num_probe, D] matrix (the SRank
/// input).
pub fn feature_matrix<S: Scalar>(net: &mut BtrNetwork<S>, probe: &StateProbe) -> Array2<f64> {
    let d = net.spec.feature_len();
    let mut out = Array2::zeros((probe.len(), d));
    let mut lo = 0;
    while lo < probe.len() {
        let hi = (lo + PROBE_CHUNK).min(probe.len());
        let obs = probe.batch::<S>(lo, hi);
        let phi = net.trunk_features(&obs);
        for r in 0..hi - lo {
            for k in 0..d {
                out[[lo + r, k]] = phi[[r, k]].to_f64();
            }
        }
        lo = hi;
    }
    out
}

/// Per-layer L2 norms of the learned mu parameters and the global norm over
/// their concatenation; noise sigma tensors are excluded.
pub fn weight_l2<S: Scalar>(net: &mut BtrNetwork<S>) -> (Vec<(String, f64)>, f64) {
    let (per, total) = net.weight_l2();
    (
        per.into_iter()
            .filter(|(name, _)| !name.ends_with("_sigma"))
            .collect(),
        total,
    )
}

/// Evaluation-time perturbation for robustness probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Forced fraction of uniform-random actions.
    Epsilon(f64),
    /// Uniform brightness jitter amplitude on rendered frames.
    BrightnessJitter(f64),
}

/// Evaluation under a perturbation applied only at eval time. Epsilon(0) and
/// BrightnessJitter(0) both reduce to the plain greedy evaluation.
pub fn robustness_eval<S: Scalar>(
    net: &mut BtrNetwork<S>,
    cfg: &AgentConfig,
    perturbation: Perturbation,
    episodes: usize,
    master_seed: u64,
    round: u64,
) -> Result<Vec<f64>, crate::orchestrator::OrchestratorError> {
    match perturbation {
        Perturbation::Epsilon(eps) => {
            crate::orchestrator::evaluate(net, cfg, episodes, eps, master_seed, round)
        }
        Perturbation::BrightnessJitter(j) => {
            let mut jittered = cfg.clone();
            jittered.brightness_jitter = j;
            crate::orchestrator::evaluate(net, &jittered, episodes, 0.0, master_seed, round)
        }
    }
}

/// Everything the `analyze` command reports for one checkpoint.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub frame: u64,
    pub scores: Vec<f64>,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub action_gap: f64,
    pub action_swap_pct: f64,
    pub policy_churn_pct: f64,
    pub dormant_pct: f64,
    pub srank: usize,
    pub weight_l2_by_layer: Vec<(String, f64)>,
    pub weight_l2_total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;
    use crate::rng::{STREAM_ANALYSIS, STREAM_BOOTSTRAP, STREAM_INIT};
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn iqm_hand_values() {
        let scores: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        assert_relative_eq!(iqm(&scores).unwrap(), 4.5);
        assert_relative_eq!(iqm(&[0.0, 0.0, 100.0]).unwrap(), 100.0 / 3.0);
        assert_relative_eq!(iqm(&[7.0; 13]).unwrap(), 7.0);
        assert!(matches!(iqm(&[]), Err(AnalysisError::EmptyScores)));
    }

    #[test]
    fn iqm_permutation_invariant_and_monotone() {
        let mut rng = stream_rng(3, STREAM_ANALYSIS, 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let base = iqm(&scores).unwrap();
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut rng);
            assert_relative_eq!(iqm(&shuffled).unwrap(), base, max_relative = 1e-12);
            let bumped: Vec<f64> = scores.iter().map(|s| s + 0.5).collect();
            assert!(iqm(&bumped).unwrap() > base);
        }
    }

    #[test]
    fn bootstrap_constant_scores_collapse() {
        let mut rng = stream_rng(1, STREAM_BOOTSTRAP, 0);
        let (lo, hi) = bootstrap_ci(&[2.5; 20], 1000, 0.95, &mut rng).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
    }

    #[test]
    fn bootstrap_rejects_thin_resampling() {
        let mut rng = stream_rng(1, STREAM_BOOTSTRAP, 1);
        assert!(matches!(
            bootstrap_ci(&[1.0, 2.0], 999, 0.95, &mut rng),
            Err(AnalysisError::TooFewResamples { got: 999, .. })
        ));
    }

    #[test]
    fn bootstrap_interval_widens_as_samples_shrink() {
        let mut width_big = 0.0;
        let mut width_small = 0.0;
        for seed in 0..10 {
            let mut data_rng = stream_rng(seed, STREAM_ANALYSIS, 1);
            let scores: Vec<f64> = (0..100)
                .map(|_| StandardNormal.sample(&mut data_rng))
                .collect();
            let mut rng = stream_rng(seed, STREAM_BOOTSTRAP, 2);
            let (lo, hi) = bootstrap_ci(&scores, 2000, 0.95, &mut rng).unwrap();
            width_big += hi - lo;
            let (lo, hi) = bootstrap_ci(&scores[..25], 2000, 0.95, &mut rng).unwrap();
            width_small += hi - lo;
        }
        assert!(
            width_small > width_big,
            "mean CI width over seeds should shrink with more samples: {width_small} vs {width_big}"
        );
    }

    #[test]
    fn bootstrap_covers_the_true_iqm() {
        // standard normal is symmetric, so its true IQM is 0
        let mut hits = 0;
        for seed in 0..100 {
            let mut data_rng = stream_rng(seed, STREAM_ANALYSIS, 2);
            let scores: Vec<f64> = (0..100)
                .map(|_| StandardNormal.sample(&mut data_rng))
                .collect();
            let mut rng = stream_rng(seed, STREAM_BOOTSTRAP, 3);
            let (lo, hi) = bootstrap_ci(&scores, 2000, 0.95, &mut rng).unwrap();
            if lo <= 0.0 && 0.0 <= hi {
                hits += 1;
            }
        }
        assert!(
            (90..=100).contains(&hits),
            "95% CI covered the true IQM in {hits}/100 repetitions"
        );
    }

    #[test]
    fn human_normalize_references_and_phoenix() {
        assert_relative_eq!(human_normalize(7243.0, 761.0, 7243.0).unwrap(), 1.0);
        assert_relative_eq!(human_normalize(761.0, 761.0, 7243.0).unwrap(), 0.0);
        // published table rounds to 65.84
        let phoenix = human_normalize(427481.0, 761.0, 7243.0).unwrap();
        assert!((phoenix - 65.84).abs() < 0.01, "{phoenix}");
        assert!(matches!(
            human_normalize(1.0, 5.0, 5.0),
            Err(AnalysisError::EqualReferences(_))
        ));
    }

    #[test]
    fn human_normalize_is_affine_invariant() {
        let mut rng = stream_rng(9, STREAM_ANALYSIS, 3);
        for _ in 0..50 {
            let (a, b) = (rng.gen_range(-10.0..10.0), rng.gen_range(0.1..5.0));
            let (score, random, human) = (
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(20.0..30.0),
            );
            let plain = human_normalize(score, random, human).unwrap();
            let shifted =
                human_normalize(a + b * score, a + b * random, a + b * human).unwrap();
            assert_relative_eq!(plain, shifted, max_relative = 1e-9);
        }
    }

    #[test]
    fn optimality_gap_hand_values() {
        assert_relative_eq!(optimality_gap(&[1.0, 1.7, 66.0]), 0.0);
        assert_relative_eq!(optimality_gap(&[0.5, 1.5]), 0.25);
        assert_relative_eq!(optimality_gap(&[0.0, 0.0, 0.0]), 1.0);
        assert_relative_eq!(optimality_gap(&[]), 0.0);
    }

    #[test]
    fn action_gap_table_hand_and_sort_oracle() {
        let q = Array2::from_shape_vec((3, 2), vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5]).unwrap();
        assert_relative_eq!(action_gap_table(&q).unwrap(), 0.5);
        let tie = Array2::from_shape_vec((1, 3), vec![1.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(action_gap_table(&tie).unwrap(), 0.0);
        assert!(matches!(
            action_gap_table(&Array2::zeros((3, 1))),
            Err(AnalysisError::TooFewActions(1))
        ));

        let mut rng = stream_rng(4, STREAM_ANALYSIS, 4);
        for _ in 0..20 {
            let rows = rng.gen_range(1..30);
            let cols = rng.gen_range(2..10);
            let q = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-3.0..3.0));
            let oracle = q
                .rows()
                .into_iter()
                .map(|r| {
                    let mut v: Vec<f64> = r.to_vec();
                    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    v[0] - v[1]
                })
                .sum::<f64>()
                / rows as f64;
            assert_relative_eq!(action_gap_table(&q).unwrap(), oracle, max_relative = 1e-12);
        }
    }

    #[test]
    fn swap_pct_hand_values() {
        assert_relative_eq!(swap_pct(&[2, 2, 2, 2]).unwrap(), 0.0);
        assert_relative_eq!(swap_pct(&[0, 1, 0, 1, 0]).unwrap(), 100.0);
        assert_relative_eq!(swap_pct(&[0, 0, 1, 1]).unwrap(), 100.0 / 3.0);
        assert!(matches!(
            swap_pct(&[3]),
            Err(AnalysisError::ShortTrajectory(1))
        ));
    }

    fn tiny_cfg() -> AgentConfig {
        let mut cfg = AgentConfig::default();
        cfg.env = "empty3".to_string();
        cfg.render_height = 36;
        cfg.render_width = 36;
        cfg.use_impala = false;
        cfg.use_maxpool = false;
        cfg.use_spectral_norm = false;
        cfg.iqn_taus = 3;
        cfg.iqn_cos_embedding = 8;
        cfg.dueling_hidden = 12;
        cfg
    }

    fn tiny_net(cfg: &AgentConfig, seed: u64) -> BtrNetwork<f32> {
        let spec = NetworkSpec::from_config(cfg, NUM_ACTIONS);
        let mut init = stream_rng(seed, STREAM_INIT, 0);
        BtrNetwork::new(spec, &mut init).unwrap()
    }

    #[test]
    fn probe_is_deterministic_and_sized() {
        let cfg = tiny_cfg();
        let a = collect_probe(&cfg, 40, 17).unwrap();
        let b = collect_probe(&cfg, 40, 17).unwrap();
        assert_eq!(a.len(), 40);
        for (x, y) in a.stacks.iter().zip(&b.stacks) {
            assert_eq!(x.frames, y.frames);
        }
        let c = collect_probe(&cfg, 40, 18).unwrap();
        assert!(
            a.stacks.iter().zip(&c.stacks).any(|(x, y)| x.frames != y.frames),
            "different seeds should visit different states"
        );
    }

    #[test]
    fn action_swaps_match_per_state_recomputation() {
        let cfg = tiny_cfg();
        let mut net = tiny_net(&cfg, 21);
        let probe = collect_probe(&cfg, 150, 5).unwrap();
        let reported = action_swaps(&mut net, &probe).unwrap();

        net.zero_noise();
        let mut argmaxes = Vec::new();
        for stack in &probe.stacks {
            let obs = stacks_to_batch::<f32>(&[stack], 36, 36);
            let q = net.mean_q_fixed(&obs, PROBE_TAUS);
            argmaxes.push(argmax_row(q.row(0)));
        }
        let oracle = swap_pct(&argmaxes).unwrap();
        assert_relative_eq!(reported, oracle, max_relative = 1e-9);
    }

    #[test]
    fn churn_zero_for_identical_and_symmetric() {
        let cfg = tiny_cfg();
        let mut a = tiny_net(&cfg, 31);
        let mut b = tiny_net(&cfg, 31);
        b.copy_from(&mut a);
        let probe = collect_probe(&cfg, 60, 6).unwrap();
        assert_eq!(policy_churn(&mut a, &mut b, &probe).unwrap(), 0.0);

        let mut c = tiny_net(&cfg, 77);
        let ab = policy_churn(&mut a, &mut c, &probe).unwrap();
        let ba = policy_churn(&mut c, &mut a, &probe).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn churn_after_negating_heads_matches_enumeration() {
        let cfg = tiny_cfg();
        let mut a = tiny_net(&cfg, 41);
        let mut b = tiny_net(&cfg, 41);
        b.copy_from(&mut a);
        b.visit_params(&mut |p| {
            if p.name.starts_with("head") {
                for v in p.w.iter_mut() {
                    *v = -*v;
                }
            }
        });
        let probe = collect_probe(&cfg, 80, 7).unwrap();
        let churn = policy_churn(&mut a, &mut b, &probe).unwrap();

        let qa = probe_q(&mut a, &probe);
        let qb = probe_q(&mut b, &probe);
        let moved = (0..probe.len())
            .filter(|&i| argmax_row(qa.row(i)) != argmax_row(qb.row(i)))
            .count();
        assert_relative_eq!(churn, 100.0 * moved as f64 / probe.len() as f64);
        assert!(churn > 0.0, "negating heads should move some argmax");
    }

    #[test]
    fn churn_rejects_mismatched_specs() {
        let cfg = tiny_cfg();
        let mut other_cfg = cfg.clone();
        other_cfg.dueling_hidden = 20;
        let mut a = tiny_net(&cfg, 1);
        let mut b = tiny_net(&other_cfg, 1);
        let probe = collect_probe(&cfg, 10, 8).unwrap();
        assert!(matches!(
            policy_churn(&mut a, &mut b, &probe),
            Err(AnalysisError::SpecMismatch)
        ));
    }

    #[test]
    fn dormant_counts_hand_cases() {
        assert_eq!(dormant_counts(&[1.0, 1.0, 1.0], 0.9), 0);
        assert_eq!(dormant_counts(&[0.0, 0.0], 0.0), 2);
        assert_eq!(dormant_counts(&[0.0, 0.0, 3.0, 3.0], 0.0), 2);
        // normalized scores here are {0.25, 1.75, 1, 1}; threshold 0.3 nails one
        assert_eq!(dormant_counts(&[0.5, 3.5, 2.0, 2.0], 0.3), 1);
    }

    #[test]
    fn zeroed_units_are_dormant_at_threshold_zero() {
        let cfg = tiny_cfg();
        let mut net = tiny_net(&cfg, 51);
        let k = 4usize;
        // kill incoming weights and biases of the first k advantage-hidden units
        net.visit_params(&mut |p| {
            if p.name == "head.adv_hidden.w_mu" {
                let cols = p.shape[1];
                for unit in 0..k {
                    for c in 0..cols {
                        p.w[unit * cols + c] = 0.0;
                    }
                }
            }
            if p.name == "head.adv_hidden.b_mu" {
                for unit in 0..k {
                    p.w[unit] = 0.0;
                }
            }
        });
        let probe = collect_probe(&cfg, 50, 9).unwrap();
        let report = dormant_fraction(&mut net, &probe, 0.0).unwrap();
        let adv = report
            .per_site
            .iter()
            .find(|(name, ..)| name.contains("adv"))
            .unwrap();
        assert!(adv.1 >= k, "expected >= {k} dormant advantage units, got {}", adv.1);
        assert!(report.fraction > 0.0);
        let relaxed = dormant_fraction(&mut net, &probe, 0.025).unwrap();
        assert!(relaxed.fraction >= report.fraction);
    }

    #[test]
    fn srank_hand_matrices() {
        let mut rank3 = Array2::zeros((10, 10));
        for i in 0..3 {
            rank3[[i, i]] = 2.0;
        }
        assert_eq!(srank(&rank3, 0.01), 3);

        let eye = Array2::from_shape_fn((10, 10), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert_eq!(srank(&eye, 0.15), 9);

        let mut spread = Array2::zeros((3, 5));
        spread[[0, 0]] = 10.0;
        spread[[1, 1]] = 1.0;
        spread[[2, 2]] = 0.001;
        assert_eq!(srank(&spread, 0.5), 1);

        assert_eq!(srank(&Array2::zeros((6, 4)), 0.01), 0);
    }

    #[test]
    fn srank_scale_invariant_and_matches_tall_or_wide() {
        let mut rng = stream_rng(13, STREAM_ANALYSIS, 5);
        for _ in 0..10 {
            let m = Array2::from_shape_fn((12, 7), |_| rng.gen_range(-1.0..1.0));
            let k = srank(&m, 0.1);
            assert_eq!(srank(&m.mapv(|v| v * 37.5), 0.1), k);
            let transposed = m.t().to_owned();
            assert_eq!(srank(&transposed, 0.1), k, "singular values are transpose-invariant");
        }
    }

    #[test]
    fn weight_l2_hand_layer_and_homogeneity() {
        let cfg = tiny_cfg();
        let mut net = tiny_net(&cfg, 61);
        net.visit_params(&mut |p| {
            if p.name == "head.value_out.w_mu" {
                for v in p.w.iter_mut() {
                    *v = 0.0;
                }
                p.w[0] = 3.0;
                p.w[1] = 4.0;
            }
        });
        let (per, total) = weight_l2(&mut net);
        let hand = per.iter().find(|(n, _)| n == "head.value_out.w_mu").unwrap();
        assert_relative_eq!(hand.1, 5.0, max_relative = 1e-6);
        assert!(per.iter().all(|(n, _)| !n.ends_with("_sigma")));
        assert!(total > 0.0);

        net.visit_params(&mut |p| {
            for v in p.w.iter_mut() {
                *v *= -2.0;
            }
        });
        let (per2, total2) = weight_l2(&mut net);
        assert_relative_eq!(total2, 2.0 * total, max_relative = 1e-5);
        for ((_, a), (_, b)) in per.iter().zip(&per2) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-5, epsilon = 1e-12);
        }

        net.visit_params(&mut |p| {
            for v in p.w.iter_mut() {
                *v = 0.0;
            }
        });
        let (_, zero_total) = weight_l2(&mut net);
        assert_eq!(zero_total, 0.0);
    }
}
