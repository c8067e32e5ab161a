//! Prioritized replay: ring buffer over a sum tree with per-env n-step
//! accumulation. Raw priorities are |td| + epsilon; the alpha exponent is
//! applied to the tree keys used for proportional sampling.

use rand::Rng;
use std::collections::VecDeque;
use thiserror::Error;

use crate::envs::FrameStack;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay holds {have} transitions, sampling needs at least {need}")]
    NotEnoughData { have: usize, need: usize },
}

/// One n-step learning sample. `return_n` sums horizon_m clipped rewards
/// discounted by gamma; `next_state` is the observation horizon_m steps
/// after `state` (unused for bootstrapping when terminal).
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: FrameStack,
    pub action: usize,
    pub return_n: f64,
    pub next_state: FrameStack,
    pub terminal: bool,
    pub horizon_m: usize,
}

/// Binary sum tree over exponentiated priorities. Leaf keys are
/// (raw priority)^alpha; every internal node is exactly the sum of its
/// children (parents recomputed, not diffed, so the invariant is bitwise).
#[derive(Clone)]
pub struct SumTree {
    leaf_base: usize,
    nodes: Vec<f64>,
    raw: Vec<f64>,
    pub write_cursor: usize,
    pub max_priority_seen: f64,
    len: usize,
    ring_capacity: usize,
}

impl SumTree {
    pub fn new(ring_capacity: usize) -> Self {
        assert!(ring_capacity > 0);
        let leaf_base = ring_capacity.next_power_of_two();
        Self {
            leaf_base,
            nodes: vec![0.0; 2 * leaf_base],
            raw: vec![0.0; ring_capacity],
            write_cursor: 0,
            max_priority_seen: 1.0,
            len: 0,
            ring_capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.ring_capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn raw_priority(&self, slot: usize) -> f64 {
        self.raw[slot]
    }

    pub fn key(&self, slot: usize) -> f64 {
        self.nodes[self.leaf_base + slot]
    }

    /// Claims the next ring slot for a new entry at max priority.
    pub fn push(&mut self, alpha: f64) -> usize {
        let slot = self.write_cursor;
        self.write_cursor = (self.write_cursor + 1) % self.ring_capacity;
        if self.len < self.ring_capacity {
            self.len += 1;
        }
        self.set(slot, self.max_priority_seen, alpha);
        slot
    }

    /// Sets one slot's raw priority and rebuilds the path to the root.
    pub fn set(&mut self, slot: usize, raw: f64, alpha: f64) {
        assert!(slot < self.ring_capacity && raw >= 0.0);
        self.raw[slot] = raw;
        if raw > self.max_priority_seen {
            self.max_priority_seen = raw;
        }
        let mut i = self.leaf_base + slot;
        self.nodes[i] = raw.powf(alpha);
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf holding the given cumulative mass in [0, total).
    pub fn find(&self, mass: f64) -> usize {
        let mut i = 1;
        let mut mass = mass;
        while i < self.leaf_base {
            let left = self.nodes[2 * i];
            if mass < left {
                i = 2 * i;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        (i - self.leaf_base).min(self.ring_capacity - 1)
    }

    /// One index per equal segment of the total mass (stratified).
    pub fn sample_stratified<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        let seg = self.total() / batch as f64;
        (0..batch)
            .map(|k| self.find((k as f64 + rng.gen::<f64>()) * seg))
            .collect()
    }
}

#[derive(Clone)]
struct Pending {
    state: FrameStack,
    action: usize,
    reward: f64,
}

/// Per-env deque of at most n pending steps; emits matured transitions.
#[derive(Clone)]
pub struct NStepAccumulator {
    pending: VecDeque<Pending>,
    n: usize,
    gamma: f64,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1);
        Self {
            pending: VecDeque::with_capacity(n),
            n,
            gamma,
        }
    }

    fn return_from(&self, start: usize) -> f64 {
        let mut acc = 0.0;
        let mut scale = 1.0;
        for e in self.pending.iter().skip(start) {
            acc += scale * e.reward;
            scale *= self.gamma;
        }
        acc
    }

    /// Feeds one step; `next_state` is the observation after the action
    /// (pre-reset on episode end). Returns every transition that matured.
    pub fn push(
        &mut self,
        state: FrameStack,
        action: usize,
        reward: f64,
        next_state: &FrameStack,
        terminal: bool,
        truncated: bool,
    ) -> Vec<Transition> {
        self.pending.push_back(Pending {
            state,
            action,
            reward,
        });
        let mut out = Vec::new();
        if terminal || truncated {
            let depth = self.pending.len();
            for start in 0..depth {
                let return_n = self.return_from(start);
                let e = &self.pending[start];
                out.push(Transition {
                    state: e.state.clone(),
                    action: e.action,
                    return_n,
                    next_state: next_state.clone(),
                    terminal,
                    horizon_m: depth - start,
                });
            }
            self.pending.clear();
        } else if self.pending.len() == self.n {
            let return_n = self.return_from(0);
            let e = self.pending.pop_front().unwrap();
            out.push(Transition {
                state: e.state,
                action: e.action,
                return_n,
                next_state: next_state.clone(),
                terminal: false,
                horizon_m: self.n,
            });
        }
        debug_assert!(self.pending.len() < self.n);
        out
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

/// Slot handle from a sample; guards priority updates against overwrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub version: u64,
}

pub struct SampleBatch {
    pub indices: Vec<SampleIndex>,
    pub transitions: Vec<Transition>,
    pub weights: Vec<f64>,
}

#[derive(Clone)]
pub struct ReplayBuffer {
    tree: SumTree,
    slots: Vec<Option<Transition>>,
    versions: Vec<u64>,
    accumulators: Vec<NStepAccumulator>,
    alpha: f64,
    priority_eps: f64,
    min_size: usize,
}

impl ReplayBuffer {
    pub fn new(
        capacity: usize,
        num_envs: usize,
        n_step: usize,
        gamma: f64,
        alpha: f64,
        priority_eps: f64,
        min_size: usize,
    ) -> Self {
        Self {
            tree: SumTree::new(capacity),
            slots: (0..capacity).map(|_| None).collect(),
            versions: vec![0; capacity],
            accumulators: (0..num_envs)
                .map(|_| NStepAccumulator::new(n_step, gamma))
                .collect(),
            alpha,
            priority_eps,
            min_size,
        }
    }

    /// Capacity and shape from config; alpha drops to 0 (uniform sampling)
    /// when prioritization is ablated.
    pub fn from_config(cfg: &crate::config::AgentConfig) -> Self {
        let alpha = if cfg.use_per { cfg.per_alpha } else { 0.0 };
        Self::new(
            cfg.replay_capacity,
            cfg.num_envs,
            cfg.n_step,
            cfg.discount,
            alpha,
            cfg.per_priority_epsilon,
            cfg.min_replay_size,
        )
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.tree.capacity()
    }

    /// Feeds one env step; matured transitions enter the ring at the
    /// current max priority. Returns how many matured.
    pub fn push(
        &mut self,
        env_id: usize,
        state: FrameStack,
        action: usize,
        reward: f64,
        next_state: &FrameStack,
        terminal: bool,
        truncated: bool,
    ) -> usize {
        let matured =
            self.accumulators[env_id].push(state, action, reward, next_state, terminal, truncated);
        let count = matured.len();
        for t in matured {
            let slot = self.tree.push(self.alpha);
            self.slots[slot] = Some(t);
            self.versions[slot] += 1;
        }
        count
    }

    /// Stratified proportional sample with importance weights
    /// (count * P)^-beta normalized by the batch max.
    pub fn sample<R: Rng>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampleBatch, ReplayError> {
        if self.len() < self.min_size.max(1) {
            return Err(ReplayError::NotEnoughData {
                have: self.len(),
                need: self.min_size.max(1),
            });
        }
        let slots = self.tree.sample_stratified(batch, rng);
        let total = self.tree.total();
        let count = self.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut transitions = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for slot in slots {
            let p = self.tree.key(slot) / total;
            weights.push((count * p).powf(-beta));
            indices.push(SampleIndex {
                slot,
                version: self.versions[slot],
            });
            transitions.push(self.slots[slot].clone().expect("sampled slot is live"));
        }
        let max_w = weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in weights.iter_mut() {
            *w /= max_w;
        }
        Ok(SampleBatch {
            indices,
            transitions,
            weights,
        })
    }

    /// Writes |td| + epsilon back; entries overwritten since the sample are
    /// skipped.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_magnitudes: &[f64]) {
        assert_eq!(indices.len(), td_magnitudes.len());
        for (ix, &td) in indices.iter().zip(td_magnitudes) {
            if self.versions[ix.slot] != ix.version {
                log::debug!("skipping stale priority update for slot {}", ix.slot);
                continue;
            }
            self.tree.set(ix.slot, td.abs() + self.priority_eps, self.alpha);
        }
    }

    pub fn raw_priority(&self, slot: usize) -> f64 {
        self.tree.raw_priority(slot)
    }

    pub fn pending_len(&self, env_id: usize) -> usize {
        self.accumulators[env_id].pending_len()
    }
}
