//! Binary checkpoints: config text, loop counters, rng stream states, every
//! named parameter/state tensor of both networks, and Adam moments. Replay
//! contents are deliberately excluded; resuming refills the buffer from
//! empty. save -> load -> save is byte-identical.

use crate::config::AgentConfig;
use crate::learner::Learner;
use crate::nn::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"BTRCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("truncated checkpoint while reading {section}")]
    Truncated { section: &'static str },
    #[error("checkpoint config invalid: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing rng stream `{name}`")]
    MissingRng { name: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainCounters {
    pub frame_count: u64,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub steps_since_sync: u64,
    pub episodes: u64,
    pub eval_count: u64,
}

struct SavedRng {
    name: String,
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

struct SavedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub struct Checkpoint {
    pub config: AgentConfig,
    pub counters: TrainCounters,
    pub adam_t: u64,
    rngs: Vec<SavedRng>,
    tensors: Vec<SavedTensor>,
    index: HashMap<String, usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { section });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn u128(&mut self, section: &'static str) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(
            self.take(16, section)?.try_into().unwrap(),
        ))
    }

    fn str(&mut self, section: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(section)? as usize;
        let bytes = self.take(n, section)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Truncated { section })
    }
}

/// Serializes the full training state. `rngs` are the orchestrator's named
/// streams, saved exactly (seed + stream id + word position).
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    cfg: &AgentConfig,
    counters: &TrainCounters,
    rngs: &[(&str, &ChaCha8Rng)],
    learner: &mut Learner<S>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_str(&mut buf, &cfg.to_text());

    put_u64(&mut buf, counters.frame_count);
    put_u64(&mut buf, counters.env_steps);
    put_u64(&mut buf, counters.grad_steps);
    put_u64(&mut buf, counters.steps_since_sync);
    put_u64(&mut buf, counters.episodes);
    put_u64(&mut buf, counters.eval_count);
    put_u64(&mut buf, learner.opt.t);

    put_u32(&mut buf, rngs.len() as u32);
    for (name, rng) in rngs {
        put_str(&mut buf, name);
        buf.extend_from_slice(&rng.get_seed());
        put_u64(&mut buf, rng.get_stream());
        buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    }

    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    learner.online.visit_params(&mut |p| {
        tensors.push((
            format!("online/{}", p.name),
            p.shape.clone(),
            p.w.iter().map(|v| v.to_f64()).collect(),
        ));
    });
    learner.target.visit_params(&mut |p| {
        tensors.push((
            format!("target/{}", p.name),
            p.shape.clone(),
            p.w.iter().map(|v| v.to_f64()).collect(),
        ));
    });
    learner.online.visit_state(&mut |s| {
        tensors.push((
            format!("state/online/{}", s.name),
            vec![s.w.len()],
            s.w.iter().map(|v| v.to_f64()).collect(),
        ));
    });
    learner.target.visit_state(&mut |s| {
        tensors.push((
            format!("state/target/{}", s.name),
            vec![s.w.len()],
            s.w.iter().map(|v| v.to_f64()).collect(),
        ));
    });
    for (i, (m, v)) in learner.opt.moment_slices().into_iter().enumerate() {
        tensors.push((
            format!("adam/m{i:03}"),
            vec![m.len()],
            m.iter().map(|x| x.to_f64()).collect(),
        ));
        tensors.push((
            format!("adam/v{i:03}"),
            vec![v.len()],
            v.iter().map(|x| x.to_f64()).collect(),
        ));
    }

    put_u32(&mut buf, tensors.len() as u32);
    for (name, shape, data) in &tensors {
        put_str(&mut buf, name);
        put_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            put_u64(&mut buf, d as u64);
        }
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(&buf).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let cfg_text = r.str("config")?;
    let config = AgentConfig::from_text(&cfg_text)?;

    let counters = TrainCounters {
        frame_count: r.u64("counters")?,
        env_steps: r.u64("counters")?,
        grad_steps: r.u64("counters")?,
        steps_since_sync: r.u64("counters")?,
        episodes: r.u64("counters")?,
        eval_count: r.u64("counters")?,
    };
    let adam_t = r.u64("counters")?;

    let n_rngs = r.u32("rngs")? as usize;
    let mut rngs = Vec::with_capacity(n_rngs);
    for _ in 0..n_rngs {
        let name = r.str("rngs")?;
        let seed: [u8; 32] = r.take(32, "rngs")?.try_into().unwrap();
        let stream = r.u64("rngs")?;
        let word_pos = r.u128("rngs")?;
        rngs.push(SavedRng {
            name,
            seed,
            stream,
            word_pos,
        });
    }

    let n_tensors = r.u32("tensors")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    let mut index = HashMap::new();
    for i in 0..n_tensors {
        let name = r.str("tensors")?;
        let ndim = r.u32("tensors")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("tensors")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let raw = r.take(8, "tensors")?;
            data.push(f64::from_le_bytes(raw.try_into().unwrap()));
        }
        index.insert(name.clone(), i);
        tensors.push(SavedTensor { name, shape, data });
    }

    Ok(Checkpoint {
        config,
        counters,
        adam_t,
        rngs,
        tensors,
        index,
    })
}

impl Checkpoint {
    /// Reconstructs the named rng stream exactly as saved.
    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng, CheckpointError> {
        let saved = self
            .rngs
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::MissingRng {
                name: name.to_string(),
            })?;
        let mut rng = ChaCha8Rng::from_seed(saved.seed);
        rng.set_stream(saved.stream);
        rng.set_word_pos(saved.word_pos);
        Ok(rng)
    }

    pub fn rng_names(&self) -> Vec<&str> {
        self.rngs.iter().map(|r| r.name.as_str()).collect()
    }

    fn tensor(&self, name: &str) -> Result<&SavedTensor, CheckpointError> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| CheckpointError::MissingTensor {
                name: name.to_string(),
            })
    }

    fn fill<S: Scalar>(
        t: &SavedTensor,
        shape: &[usize],
        dst: &mut [S],
    ) -> Result<(), CheckpointError> {
        if t.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name.clone(),
                found: t.shape.clone(),
                expected: shape.to_vec(),
            });
        }
        for (d, &x) in dst.iter_mut().zip(&t.data) {
            *d = S::from_f64(x);
        }
        Ok(())
    }

    /// Loads every parameter, persistent state buffer, Adam moment, and the
    /// learner's sync counter. The learner must be built from the same spec.
    pub fn restore_learner<S: Scalar>(
        &self,
        learner: &mut Learner<S>,
    ) -> Result<(), CheckpointError> {
        let mut failed: Option<CheckpointError> = None;
        let mut apply = |net: &mut crate::network::BtrNetwork<S>, prefix: &str| {
            net.visit_params(&mut |p| {
                if failed.is_some() {
                    return;
                }
                let name = format!("{prefix}/{}", p.name);
                match self.tensor(&name) {
                    Ok(t) => {
                        if let Err(e) = Self::fill(t, &p.shape, p.w) {
                            failed = Some(e);
                        }
                    }
                    Err(e) => failed = Some(e),
                }
            });
        };
        apply(&mut learner.online, "online");
        apply(&mut learner.target, "target");
        if let Some(e) = failed.take() {
            return Err(e);
        }

        let mut apply_state = |net: &mut crate::network::BtrNetwork<S>, prefix: &str| {
            net.visit_state(&mut |s| {
                if failed.is_some() {
                    return;
                }
                let name = format!("{prefix}/{}", s.name);
                match self.tensor(&name) {
                    Ok(t) => {
                        if let Err(e) = Self::fill(t, &[s.w.len()], s.w) {
                            failed = Some(e);
                        }
                    }
                    Err(e) => failed = Some(e),
                }
            });
        };
        apply_state(&mut learner.online, "state/online");
        apply_state(&mut learner.target, "state/target");
        if let Some(e) = failed.take() {
            return Err(e);
        }

        let mut moments = Vec::new();
        for i in 0.. {
            let name = format!("adam/m{i:03}");
            if !self.index.contains_key(&name) {
                break;
            }
            let m = self.tensor(&name)?;
            let v = self.tensor(&format!("adam/v{i:03}"))?;
            moments.push((
                m.data.iter().map(|&x| S::from_f64(x)).collect(),
                v.data.iter().map(|&x| S::from_f64(x)).collect(),
            ));
        }
        learner.opt.load_moments(self.adam_t, moments);
        learner.steps_since_sync = self.counters.steps_since_sync;
        learner.grad_steps = self.counters.grad_steps;
        Ok(())
    }
}
