//! Seeded pixel grid environments: text layouts, nearest-neighbor greyscale
//! rendering, sticky actions, frame stacking, a vectorized stepping protocol
//! with auto-reset, and an exact value-iteration oracle for optimal return.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

use crate::config::AgentConfig;
use crate::nn::Scalar;
use crate::rng::{stream_rng, STREAM_ENV};

pub const FRAME_STACK: usize = 4;
pub const NUM_ACTIONS: usize = 4;

/// up, down, left, right
const MOVES: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

const SHADE_FLOOR: u8 = 0;
const SHADE_WALL: u8 = 64;
const SHADE_HAZARD: u8 = 128;
const SHADE_GOAL: u8 = 192;
const SHADE_AGENT: u8 = 255;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read layout {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("layout: {0}")]
    Layout(String),
    #[error("unknown layout `{0}` (not a builtin, not a readable file)")]
    UnknownLayout(String),
    #[error("env {env}: action {action} out of range (0..{limit})")]
    BadAction {
        env: usize,
        action: usize,
        limit: usize,
    },
    #[error("render resolution {h}x{w} below grid size {rows}x{cols}")]
    ResolutionTooSmall {
        h: usize,
        w: usize,
        rows: usize,
        cols: usize,
    },
    #[error("oracle state space too large: {0} state-step pairs")]
    OracleTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Floor,
    Wall,
    Hazard,
    Goal,
}

/// Grid world parsed from text: `#` wall, `.` floor, `S` start, `G` goal,
/// `H` hazard. Exactly one S and one G; rows must be equal length.
#[derive(Debug, Clone)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    cells: Vec<Cell>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
}

impl Layout {
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty())
            .collect();
        if lines.is_empty() {
            return Err(EnvError::Layout("empty layout".into()));
        }
        let rows = lines.len();
        let cols = lines[0].chars().count();
        let mut cells = Vec::with_capacity(rows * cols);
        let mut start = None;
        let mut goal = None;
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(EnvError::Layout(format!(
                    "row {} has {} columns, expected {cols}",
                    r + 1,
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Floor,
                    'H' => Cell::Hazard,
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(EnvError::Layout("more than one start".into()));
                        }
                        Cell::Floor
                    }
                    'G' => {
                        if goal.replace((r, c)).is_some() {
                            return Err(EnvError::Layout("more than one goal".into()));
                        }
                        Cell::Goal
                    }
                    other => {
                        return Err(EnvError::Layout(format!(
                            "bad character `{other}` at row {} col {}",
                            r + 1,
                            c + 1
                        )))
                    }
                };
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| EnvError::Layout("missing start S".into()))?;
        let goal = goal.ok_or_else(|| EnvError::Layout("missing goal G".into()))?;
        Ok(Self {
            rows,
            cols,
            cells,
            start,
            goal,
        })
    }

    /// Builtin name, else a path to a layout file.
    pub fn resolve(name: &str) -> Result<Self, EnvError> {
        if let Some(text) = builtin(name) {
            return Self::parse(text);
        }
        let p = Path::new(name);
        if p.is_file() {
            let text = std::fs::read_to_string(p).map_err(|e| EnvError::Io {
                path: name.to_string(),
                source: e,
            })?;
            return Self::parse(&text);
        }
        Err(EnvError::UnknownLayout(name.to_string()))
    }

    fn at(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.cols + c]
    }

    fn passable(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.rows
            && (c as usize) < self.cols
            && self.at(r as usize, c as usize) != Cell::Wall
    }

    /// Destination of `action` from (r, c); walls and edges block.
    fn dest(&self, r: usize, c: usize, action: usize) -> (usize, usize) {
        let (dr, dc) = MOVES[action];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if self.passable(nr, nc) {
            (nr as usize, nc as usize)
        } else {
            (r, c)
        }
    }
}

fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "empty3" => Some("S..\n...\n..G\n"),
        "empty8" => Some(concat!(
            "........\n",
            ".S......\n",
            "........\n",
            "........\n",
            "........\n",
            "........\n",
            "......G.\n",
            "........\n",
        )),
        "chain2" => Some("SG\n"),
        "chain3" => Some("S.G\n"),
        "chain5" => Some("S...G\n"),
        _ => None,
    }
}

/// Pure render: nearest-neighbor upscale of the cell grid with the agent
/// drawn over its cell.
pub fn render_frame(layout: &Layout, agent: (usize, usize), h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for i in 0..h {
        let r = i * layout.rows / h;
        let row = &mut out[i * w..(i + 1) * w];
        for (j, px) in row.iter_mut().enumerate() {
            let c = j * layout.cols / w;
            *px = if (r, c) == agent {
                SHADE_AGENT
            } else {
                match layout.at(r, c) {
                    Cell::Floor => SHADE_FLOOR,
                    Cell::Wall => SHADE_WALL,
                    Cell::Hazard => SHADE_HAZARD,
                    Cell::Goal => SHADE_GOAL,
                }
            };
        }
    }
    out
}

/// Maps rewards into [-1, 1]; idempotent.
pub fn clip_reward(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct EnvParams {
    pub render_h: usize,
    pub render_w: usize,
    pub max_episode_steps: usize,
    pub sticky_action_prob: f64,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
    pub brightness_jitter: f64,
}

impl EnvParams {
    pub fn from_config(cfg: &AgentConfig) -> Self {
        Self {
            render_h: cfg.render_height,
            render_w: cfg.render_width,
            max_episode_steps: cfg.max_episode_steps,
            sticky_action_prob: cfg.sticky_action_prob,
            step_penalty: cfg.step_penalty,
            goal_reward: cfg.goal_reward,
            hazard_reward: cfg.hazard_reward,
            brightness_jitter: cfg.brightness_jitter,
        }
    }
}

pub type Frame = Arc<[u8]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

/// One grid world with sticky actions and episode truncation. Stepping after
/// terminal/truncation requires reset (the vector wrapper auto-resets).
pub struct GridPixelEnv {
    pub layout: Layout,
    pub params: EnvParams,
    rng: ChaCha8Rng,
    agent: (usize, usize),
    prev_action: Option<usize>,
    steps: usize,
    needs_reset: bool,
}

impl GridPixelEnv {
    pub fn new(layout: Layout, params: EnvParams, rng: ChaCha8Rng) -> Result<Self, EnvError> {
        if params.render_h < layout.rows || params.render_w < layout.cols {
            return Err(EnvError::ResolutionTooSmall {
                h: params.render_h,
                w: params.render_w,
                rows: layout.rows,
                cols: layout.cols,
            });
        }
        Ok(Self {
            agent: layout.start,
            layout,
            params,
            rng,
            prev_action: None,
            steps: 0,
            needs_reset: true,
        })
    }

    pub fn reset(&mut self) -> Frame {
        self.agent = self.layout.start;
        self.prev_action = None;
        self.steps = 0;
        self.needs_reset = false;
        self.emit_frame()
    }

    /// Executes `action` (or repeats the previous executed action with
    /// probability sticky_action_prob) and returns the post-step frame.
    pub fn step(&mut self, action: usize) -> Result<(Frame, StepResult), EnvError> {
        assert!(!self.needs_reset, "step on finished episode without reset");
        if action >= NUM_ACTIONS {
            return Err(EnvError::BadAction {
                env: 0,
                action,
                limit: NUM_ACTIONS,
            });
        }
        let executed = match self.prev_action {
            Some(prev) if self.params.sticky_action_prob > 0.0 => {
                if self.rng.gen::<f64>() < self.params.sticky_action_prob {
                    prev
                } else {
                    action
                }
            }
            _ => action,
        };
        self.prev_action = Some(executed);
        self.agent = self
            .layout
            .dest(self.agent.0, self.agent.1, executed);
        self.steps += 1;

        let mut reward = self.params.step_penalty;
        let mut terminal = false;
        match self.layout.at(self.agent.0, self.agent.1) {
            Cell::Goal => {
                reward += self.params.goal_reward;
                terminal = true;
            }
            Cell::Hazard => {
                reward += self.params.hazard_reward;
                terminal = true;
            }
            _ => {}
        }
        let truncated = !terminal && self.steps >= self.params.max_episode_steps;
        self.needs_reset = terminal || truncated;
        let frame = self.emit_frame();
        Ok((
            frame,
            StepResult {
                reward,
                terminal,
                truncated,
            },
        ))
    }

    fn emit_frame(&mut self) -> Frame {
        let mut f = render_frame(
            &self.layout,
            self.agent,
            self.params.render_h,
            self.params.render_w,
        );
        let j = self.params.brightness_jitter;
        if j > 0.0 {
            let factor = 1.0 + self.rng.gen_range(-j..=j);
            for px in f.iter_mut() {
                *px = (*px as f64 * factor).round().clamp(0.0, 255.0) as u8;
            }
        }
        f.into()
    }
}

/// The last four greyscale frames; reset fills all slots with one frame.
#[derive(Debug, Clone)]
pub struct FrameStack {
    pub frames: [Frame; FRAME_STACK],
}

impl FrameStack {
    pub fn filled(frame: Frame) -> Self {
        Self {
            frames: [frame.clone(), frame.clone(), frame.clone(), frame],
        }
    }

    pub fn push(&self, frame: Frame) -> Self {
        Self {
            frames: [
                self.frames[1].clone(),
                self.frames[2].clone(),
                self.frames[3].clone(),
                frame,
            ],
        }
    }
}

/// Observation batch scaled to [0, 1]: [batch, 4, H, W].
pub fn stacks_to_batch<S: Scalar>(stacks: &[&FrameStack], h: usize, w: usize) -> Array4<S> {
    let mut out = Array4::from_elem((stacks.len(), FRAME_STACK, h, w), S::ZERO);
    let inv = 1.0 / 255.0;
    for (b, stack) in stacks.iter().enumerate() {
        for (k, frame) in stack.frames.iter().enumerate() {
            debug_assert_eq!(frame.len(), h * w);
            let mut plane = out.index_axis_mut(ndarray::Axis(0), b);
            let mut plane = plane.index_axis_mut(ndarray::Axis(0), k);
            let dst = plane.as_slice_mut().unwrap();
            for (d, &s) in dst.iter_mut().zip(frame.iter()) {
                *d = S::from_f64(s as f64 * inv);
            }
        }
    }
    out
}

/// One env's outcome within a vector step. `next_stack` is the observation
/// after the action, before any auto-reset (the replay bootstrap source).
#[derive(Debug, Clone)]
pub struct EnvStep {
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
    pub next_stack: FrameStack,
}

/// Fixed-size batch of independently seeded envs, stepped in lockstep with
/// auto-reset. Results merge in env-index order regardless of scheduling.
pub struct VectorEnv {
    envs: Vec<GridPixelEnv>,
    stacks: Vec<FrameStack>,
}

impl VectorEnv {
    pub fn new(
        layout: &Layout,
        params: &EnvParams,
        num_envs: usize,
        master_seed: u64,
    ) -> Result<Self, EnvError> {
        let mut envs = Vec::with_capacity(num_envs);
        let mut stacks = Vec::with_capacity(num_envs);
        for i in 0..num_envs {
            let rng = stream_rng(master_seed, STREAM_ENV, i as u64);
            let mut env = GridPixelEnv::new(layout.clone(), params.clone(), rng)?;
            let first = env.reset();
            stacks.push(FrameStack::filled(first));
            envs.push(env);
        }
        Ok(Self { envs, stacks })
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    /// Current observation of env `i` (post-reset when an episode just ended).
    pub fn obs(&self, i: usize) -> &FrameStack {
        &self.stacks[i]
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<Vec<EnvStep>, EnvError> {
        assert_eq!(actions.len(), self.envs.len(), "one action per env");
        let mut out = Vec::with_capacity(self.envs.len());
        for (i, (env, &action)) in self.envs.iter_mut().zip(actions).enumerate() {
            let (frame, r) = env.step(action).map_err(|e| match e {
                EnvError::BadAction { action, limit, .. } => EnvError::BadAction {
                    env: i,
                    action,
                    limit,
                },
                other => other,
            })?;
            let next_stack = self.stacks[i].push(frame);
            if r.terminal || r.truncated {
                let first = env.reset();
                self.stacks[i] = FrameStack::filled(first);
            } else {
                self.stacks[i] = next_stack.clone();
            }
            out.push(EnvStep {
                reward: r.reward,
                terminal: r.terminal,
                truncated: r.truncated,
                next_stack,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    /// Optimal expected discounted return from the start state.
    pub discounted: f64,
    /// Expected undiscounted episodic return of the discount-optimal policy.
    pub undiscounted: f64,
}

const ORACLE_CAP: usize = 500_000_000;

/// Exact finite-horizon value iteration over (cell, previous executed
/// action), modeling sticky actions and truncation at max_episode_steps.
pub fn oracle_optimal_return(
    layout: &Layout,
    params: &EnvParams,
    gamma: f64,
) -> Result<OracleReport, EnvError> {
    let cells = layout.rows * layout.cols;
    // prev-action index 4 = none (episode start)
    let states = cells * (NUM_ACTIONS + 1);
    let horizon = params.max_episode_steps;
    let work = states
        .checked_mul(horizon.saturating_add(1))
        .ok_or(EnvError::OracleTooLarge(usize::MAX))?;
    if work > ORACLE_CAP {
        return Err(EnvError::OracleTooLarge(work));
    }

    let idx = |r: usize, c: usize, prev: usize| (r * layout.cols + c) * (NUM_ACTIONS + 1) + prev;
    // v: discounted value driving the argmax; u: undiscounted value of the
    // same policy. Layer t+1 rolls into t.
    let mut v_next = vec![0.0f64; states];
    let mut u_next = vec![0.0f64; states];
    let mut v_cur = vec![0.0f64; states];
    let mut u_cur = vec![0.0f64; states];

    let outcome = |r: usize, c: usize, executed: usize| -> (usize, usize, f64, bool) {
        let (nr, nc) = layout.dest(r, c, executed);
        let mut reward = params.step_penalty;
        let mut terminal = false;
        match layout.at(nr, nc) {
            Cell::Goal => {
                reward += params.goal_reward;
                terminal = true;
            }
            Cell::Hazard => {
                reward += params.hazard_reward;
                terminal = true;
            }
            _ => {}
        }
        (nr, nc, reward, terminal)
    };

    for t in (0..horizon).rev() {
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                if layout.at(r, c) == Cell::Wall {
                    continue;
                }
                for prev in 0..=NUM_ACTIONS {
                    let mut best_v = f64::NEG_INFINITY;
                    let mut best_u = 0.0;
                    for a in 0..NUM_ACTIONS {
                        let mut ev = 0.0;
                        let mut eu = 0.0;
                        let mut add = |executed: usize, p: f64| {
                            let (nr, nc, reward, terminal) = outcome(r, c, executed);
                            let (cont_v, cont_u) = if terminal || t + 1 >= horizon {
                                (0.0, 0.0)
                            } else {
                                let ni = idx(nr, nc, executed);
                                (v_next[ni], u_next[ni])
                            };
                            ev += p * (reward + gamma * cont_v);
                            eu += p * (reward + cont_u);
                        };
                        if prev == NUM_ACTIONS || params.sticky_action_prob == 0.0 {
                            add(a, 1.0);
                        } else {
                            add(prev, params.sticky_action_prob);
                            add(a, 1.0 - params.sticky_action_prob);
                        }
                        if ev > best_v {
                            best_v = ev;
                            best_u = eu;
                        }
                    }
                    let i = idx(r, c, prev);
                    v_cur[i] = best_v;
                    u_cur[i] = best_u;
                }
            }
        }
        std::mem::swap(&mut v_cur, &mut v_next);
        std::mem::swap(&mut u_cur, &mut u_next);
    }
    let s0 = idx(layout.start.0, layout.start.1, NUM_ACTIONS);
    Ok(OracleReport {
        discounted: v_next[s0],
        undiscounted: u_next[s0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_EVAL_ENV};

    fn params(h: usize, w: usize) -> EnvParams {
        EnvParams {
            render_h: h,
            render_w: w,
            max_episode_steps: 60,
            sticky_action_prob: 0.0,
            step_penalty: -0.01,
            goal_reward: 1.0,
            hazard_reward: -1.0,
            brightness_jitter: 0.0,
        }
    }

    #[test]
    fn layout_parsing_and_errors() {
        let l = Layout::resolve("empty8").unwrap();
        assert_eq!((l.rows, l.cols), (8, 8));
        assert_eq!(l.start, (1, 1));
        assert_eq!(l.goal, (6, 6));
        assert!(Layout::parse("S.\n.").is_err());
        assert!(Layout::parse("..\n..").is_err());
        assert!(Layout::parse("SS\n.G").is_err());
        assert!(Layout::parse("SX\n.G").is_err());
        let with_walls = Layout::parse("S#.\n.#H\n..G").unwrap();
        assert_eq!(with_walls.at(0, 1), Cell::Wall);
        assert_eq!(with_walls.at(1, 2), Cell::Hazard);
    }

    #[test]
    fn sticky_zero_executes_requested_action() {
        let l = Layout::resolve("empty3").unwrap();
        let mut env = GridPixelEnv::new(l, params(42, 42), stream_rng(7, STREAM_ENV, 0)).unwrap();
        env.reset();
        // right, down, down, right reaches the goal in 4 steps
        for (a, want_term) in [(3, false), (1, false), (1, false), (3, true)] {
            let (_, r) = env.step(a).unwrap();
            assert_eq!(r.terminal, want_term);
        }
    }

    #[test]
    fn deterministic_trajectories_with_fixed_seed() {
        let l = Layout::resolve("empty8").unwrap();
        let mut p = params(42, 42);
        p.sticky_action_prob = 0.25;
        let run = |seed: u64| {
            let mut env =
                GridPixelEnv::new(l.clone(), p.clone(), stream_rng(seed, STREAM_ENV, 3)).unwrap();
            let mut frames = vec![env.reset()];
            let mut rewards = Vec::new();
            let mut act = stream_rng(seed, STREAM_EVAL_ENV, 9);
            for _ in 0..1000 {
                let a = act.gen_range(0..NUM_ACTIONS);
                let (f, r) = env.step(a).unwrap();
                frames.push(f);
                rewards.push(r);
                if r.terminal || r.truncated {
                    frames.push(env.reset());
                }
            }
            (frames, rewards)
        };
        let (fa, ra) = run(11);
        let (fb, rb) = run(11);
        assert_eq!(ra, rb);
        assert!(fa.iter().zip(&fb).all(|(x, y)| x == y));
    }

    #[test]
    fn sticky_repeat_frequency_near_quarter() {
        let l = Layout::resolve("empty8").unwrap();
        let mut p = params(16, 16);
        p.sticky_action_prob = 0.25;
        p.max_episode_steps = usize::MAX >> 1;
        p.step_penalty = 0.0;
        let mut env = GridPixelEnv::new(l, p, stream_rng(5, STREAM_ENV, 0)).unwrap();
        env.reset();
        // always request the opposite of the last executed action, so a
        // mismatch between executed and requested means the repeat fired
        env.step(3).unwrap();
        let mut repeats = 0usize;
        let mut total = 0usize;
        for _ in 0..100_000 {
            let a = if env.prev_action.unwrap() == 3 { 2 } else { 3 };
            env.step(a).unwrap();
            total += 1;
            if env.prev_action.unwrap() != a {
                repeats += 1;
            }
        }
        let freq = repeats as f64 / total as f64;
        assert!((freq - 0.25).abs() < 0.01, "repeat frequency {freq}");
    }

    #[test]
    fn truncation_and_terminal_are_distinct() {
        let l = Layout::resolve("empty8").unwrap();
        let mut p = params(16, 16);
        p.max_episode_steps = 3;
        let mut env = GridPixelEnv::new(l, p, stream_rng(0, STREAM_ENV, 0)).unwrap();
        env.reset();
        // bounce into the top wall; never reaches goal
        for i in 0..3 {
            let (_, r) = env.step(0).unwrap();
            assert!(!r.terminal);
            assert_eq!(r.truncated, i == 2);
        }
    }

    #[test]
    fn vector_env_auto_resets_and_reports_final_obs() {
        let l = Layout::resolve("chain2").unwrap();
        let mut p = params(8, 8);
        p.step_penalty = 0.0;
        let mut venv = VectorEnv::new(&l, &p, 2, 42).unwrap();
        let start_frame = venv.obs(0).frames[3].clone();
        let steps = venv.step(&[3, 0]).unwrap();
        // env 0 hits the goal: terminal, final obs shows agent on goal cell,
        // current obs is back at start
        assert!(steps[0].terminal);
        assert!((steps[0].reward - 1.0).abs() < 1e-12);
        assert_ne!(steps[0].next_stack.frames[3], start_frame);
        assert_eq!(venv.obs(0).frames[3], start_frame);
        // env 1 bounced off the wall: same frame content, no reset
        assert!(!steps[1].terminal);
        assert_eq!(venv.obs(1).frames[3], steps[1].next_stack.frames[3]);
    }

    #[test]
    fn bad_action_names_env_index() {
        let l = Layout::resolve("chain2").unwrap();
        let mut venv = VectorEnv::new(&l, &params(8, 8), 3, 0).unwrap();
        let err = venv.step(&[0, 9, 0]).unwrap_err();
        match err {
            EnvError::BadAction { env, action, .. } => {
                assert_eq!((env, action), (1, 9));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn render_is_pure_and_resolution_consistent() {
        let l = Layout::resolve("empty3").unwrap();
        let a = render_frame(&l, (0, 0), 84, 84);
        let b = render_frame(&l, (0, 0), 84, 84);
        assert_eq!(a, b);
        // same cell content at both resolutions: corner pixel is the agent,
        // far corner is the goal
        let c = render_frame(&l, (0, 0), 140, 114);
        assert_eq!(a[0], SHADE_AGENT);
        assert_eq!(c[0], SHADE_AGENT);
        assert_eq!(a[84 * 84 - 1], SHADE_GOAL);
        assert_eq!(c[140 * 114 - 1], SHADE_GOAL);
    }

    #[test]
    fn jitter_bounds_mean_brightness() {
        let l = Layout::resolve("empty8").unwrap();
        let mut p = params(42, 42);
        let mut env =
            GridPixelEnv::new(l.clone(), p.clone(), stream_rng(1, STREAM_ENV, 0)).unwrap();
        let clean = env.reset();
        let mean = |f: &Frame| f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64;
        p.brightness_jitter = 0.1;
        let mut env_j = GridPixelEnv::new(l, p, stream_rng(1, STREAM_ENV, 0)).unwrap();
        for _ in 0..20 {
            let f = env_j.reset();
            let ratio = mean(&f) / mean(&clean);
            assert!((0.9 - 1e-9..=1.1 + 1e-9).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn reward_clip_is_idempotent() {
        for r in [-3.0, -1.0, -0.2, 0.0, 0.4, 1.0, 7.5] {
            let once = clip_reward(r);
            assert!((-1.0..=1.0).contains(&once));
            assert_eq!(clip_reward(once), once);
        }
    }

    #[test]
    fn oracle_trivial_adjacent_goal() {
        let l = Layout::resolve("chain2").unwrap();
        let mut p = params(8, 8);
        p.step_penalty = 0.0;
        let rep = oracle_optimal_return(&l, &p, 0.99).unwrap();
        assert!((rep.undiscounted - 1.0).abs() < 1e-10);
        assert!((rep.discounted - 1.0).abs() < 1e-10);
        // sticky cannot fire on the very first step of an episode
        p.sticky_action_prob = 0.25;
        let rep = oracle_optimal_return(&l, &p, 0.99).unwrap();
        assert!((rep.undiscounted - 1.0).abs() < 1e-10);
    }

    #[test]
    fn oracle_deterministic_shortest_path() {
        let l = Layout::resolve("empty3").unwrap();
        let rep = oracle_optimal_return(&l, &params(8, 8), 0.997).unwrap();
        assert!((rep.undiscounted - 0.96).abs() < 1e-10);
        let want_disc = -0.01 * (1.0 + 0.997 + 0.997f64.powi(2) + 0.997f64.powi(3))
            + 0.997f64.powi(3) * 1.0;
        assert!((rep.discounted - want_disc).abs() < 1e-10);
    }

    #[test]
    fn oracle_matches_monte_carlo_under_sticky() {
        let l = Layout::resolve("empty3").unwrap();
        let mut p = params(8, 8);
        p.sticky_action_prob = 0.25;
        let gamma = 0.997;
        let rep = oracle_optimal_return(&l, &p, gamma).unwrap();

        // roll out the greedy policy recomputed per state via a small local
        // value iteration identical to the oracle's argmax
        let policy = OraclePolicy::new(&l, &p, gamma);
        let mut rng = stream_rng(123, STREAM_EVAL_ENV, 0);
        let episodes = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..episodes {
            let mut env =
                GridPixelEnv::new(l.clone(), p.clone(), stream_rng(rng.gen(), STREAM_ENV, 0))
                    .unwrap();
            env.reset();
            let mut ret = 0.0;
            let mut prev = NUM_ACTIONS;
            let mut t = 0;
            loop {
                let a = policy.action(env.agent, prev, t);
                let (_, r) = env.step(a).unwrap();
                prev = env.prev_action.unwrap();
                ret += r.reward;
                t += 1;
                if r.terminal || r.truncated {
                    break;
                }
            }
            sum += ret;
            sumsq += ret * ret;
        }
        let mean = sum / episodes as f64;
        let var = (sumsq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            (mean - rep.undiscounted).abs() < 3.0 * se + 1e-9,
            "mc {mean} vs oracle {} (se {se})",
            rep.undiscounted
        );
    }

    /// Greedy policy tables from the same finite-horizon recursion.
    struct OraclePolicy {
        actions: Vec<u8>,
        cols: usize,
        horizon: usize,
    }

    impl OraclePolicy {
        fn new(l: &Layout, p: &EnvParams, gamma: f64) -> Self {
            let cells = l.rows * l.cols;
            let states = cells * (NUM_ACTIONS + 1);
            let horizon = p.max_episode_steps;
            let mut v_next = vec![0.0f64; states];
            let mut actions = vec![0u8; states * horizon];
            let idx = |r: usize, c: usize, prev: usize| {
                (r * l.cols + c) * (NUM_ACTIONS + 1) + prev
            };
            for t in (0..horizon).rev() {
                let mut v_cur = vec![0.0f64; states];
                for r in 0..l.rows {
                    for c in 0..l.cols {
                        if l.at(r, c) == Cell::Wall {
                            continue;
                        }
                        for prev in 0..=NUM_ACTIONS {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_a = 0u8;
                            for a in 0..NUM_ACTIONS {
                                let mut ev = 0.0;
                                let mut add = |executed: usize, pr: f64| {
                                    let (nr, nc) = l.dest(r, c, executed);
                                    let mut reward = p.step_penalty;
                                    let mut term = false;
                                    match l.at(nr, nc) {
                                        Cell::Goal => {
                                            reward += p.goal_reward;
                                            term = true;
                                        }
                                        Cell::Hazard => {
                                            reward += p.hazard_reward;
                                            term = true;
                                        }
                                        _ => {}
                                    }
                                    let cont = if term || t + 1 >= horizon {
                                        0.0
                                    } else {
                                        v_next[idx(nr, nc, executed)]
                                    };
                                    ev += pr * (reward + gamma * cont);
                                };
                                if prev == NUM_ACTIONS || p.sticky_action_prob == 0.0 {
                                    add(a, 1.0);
                                } else {
                                    add(prev, p.sticky_action_prob);
                                    add(a, 1.0 - p.sticky_action_prob);
                                }
                                if ev > best {
                                    best = ev;
                                    best_a = a as u8;
                                }
                            }
                            let i = idx(r, c, prev);
                            v_cur[i] = best;
                            actions[t * states + i] = best_a;
                        }
                    }
                }
                v_next = v_cur;
            }
            Self {
                actions,
                cols: l.cols,
                horizon,
            }
        }

        fn action(&self, agent: (usize, usize), prev: usize, t: usize) -> usize {
            let states = self.actions.len() / self.horizon;
            let i = (agent.0 * self.cols + agent.1) * (NUM_ACTIONS + 1) + prev;
            self.actions[t.min(self.horizon - 1) * states + i] as usize
        }
    }

    #[test]
    fn oracle_rejects_huge_state_spaces() {
        let l = Layout::resolve("empty8").unwrap();
        let mut p = params(8, 8);
        p.max_episode_steps = usize::MAX >> 8;
        assert!(matches!(
            oracle_optimal_return(&l, &p, 0.99),
            Err(EnvError::OracleTooLarge(_))
        ));
    }

    #[test]
    fn stacks_to_batch_scales_to_unit() {
        let l = Layout::resolve("chain2").unwrap();
        let venv = VectorEnv::new(&l, &params(8, 8), 1, 0).unwrap();
        let batch = stacks_to_batch::<f32>(&[venv.obs(0)], 8, 8);
        assert_eq!(batch.dim(), (1, 4, 8, 8));
        let mx = batch.iter().cloned().fold(0.0f32, f32::max);
        assert!((mx - 1.0).abs() < 1e-6);
        assert!(batch.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
