//! Run-directory plumbing: `<config-hash>-<seed>/` under a run root, a
//! write-once JSON manifest, and the fixed-schema metrics CSV.

use crate::config::AgentConfig;
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Every metrics writer emits exactly these columns, in this order.
pub const CSV_HEADER: &str = "frame,episodes,mean,iqm,ci_low,ci_high,loss,grad_norm,epsilon,action_gap,churn,dormant_pct,srank,l2_total";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest already written at {0}; it is immutable")]
    ManifestExists(String),
    #[error("{path} is not a run directory (no manifest)")]
    NotARunDir { path: String },
    #[error("metrics header mismatch in {path}: found `{found}`")]
    HeaderMismatch { path: String, found: String },
    #[error("bad metrics row {line} in {path}: {reason}")]
    BadRow {
        path: String,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// First 8 hex chars of the sha256 of the canonical config text. Identical
/// configs collide on purpose; the seed suffix keeps runs apart.
pub fn config_hash(cfg: &AgentConfig) -> String {
    let digest = Sha256::digest(cfg.to_text().as_bytes());
    let mut s = String::with_capacity(8);
    for b in &digest[..4] {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<hash8>-<seed>/` plus `plots/`. A repeat of the same
    /// config and seed gets an `-r2`, `-r3`, ... suffix instead of clobbering
    /// the earlier run.
    pub fn create(root: &Path, cfg: &AgentConfig) -> Result<Self, RunError> {
        let base = format!("{}-{}", config_hash(cfg), cfg.master_seed);
        let mut name = base.clone();
        let mut attempt = 1usize;
        loop {
            let path = root.join(&name);
            match std::fs::create_dir_all(root)
                .and_then(|_| std::fs::create_dir(&path))
            {
                Ok(()) => {
                    std::fs::create_dir(path.join("plots")).map_err(|e| io_err(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    attempt += 1;
                    name = format!("{base}-r{attempt}");
                }
                Err(e) => return Err(io_err(&path, e)),
            }
        }
    }

    /// Reopens an existing run directory (resume, eval, analyze, plot).
    pub fn open(path: &Path) -> Result<Self, RunError> {
        if !path.join("manifest").is_file() {
            return Err(RunError::NotARunDir {
                path: path.display().to_string(),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path.join("manifest")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, frame: u64) -> PathBuf {
        self.path.join(format!("ckpt_{frame}.bin"))
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.path.join("plots")
    }

    /// Newest `ckpt_<frame>.bin` by frame number, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(u64, PathBuf)>, RunError> {
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in std::fs::read_dir(&self.path).map_err(|e| io_err(&self.path, e))? {
            let entry = entry.map_err(|e| io_err(&self.path, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(frame) = name
                .strip_prefix("ckpt_")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                if best.as_ref().map_or(true, |(f, _)| frame > *f) {
                    best = Some((frame, entry.path()));
                }
            }
        }
        Ok(best)
    }

    /// Written exactly once at run start; a second write is an error.
    pub fn write_manifest(&self, cfg: &AgentConfig, seed: u64) -> Result<(), RunError> {
        let path = self.manifest_path();
        if path.exists() {
            return Err(RunError::ManifestExists(path.display().to_string()));
        }
        let mut config = serde_json::Map::new();
        for key in crate::config::KEYS {
            config.insert(key.to_string(), serde_json::Value::String(cfg.get_text(key)));
        }
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let doc = serde_json::json!({
            "config": config,
            "master_seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": started,
            "environment": cfg.env,
            "files": ["manifest", "metrics.csv", "ckpt_<frame>.bin", "plots/"],
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

/// One metrics.csv row. Evaluation stats plus the analysis probe metrics
/// computed at the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub frame: u64,
    pub episodes: u64,
    pub mean: f64,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub epsilon: f64,
    pub action_gap: f64,
    pub churn: f64,
    pub dormant_pct: f64,
    pub srank: f64,
    pub l2_total: f64,
}

pub struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    /// New CSV with the schema header.
    pub fn create(path: &Path) -> Result<Self, RunError> {
        let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(file, "{CSV_HEADER}").map_err(|e| io_err(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Appends to an existing CSV after checking its header (resume).
    pub fn append(path: &Path) -> Result<Self, RunError> {
        let first = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| io_err(path, e))?,
        )
        .lines()
        .next()
        .transpose()
        .map_err(|e| io_err(path, e))?
        .unwrap_or_default();
        if first != CSV_HEADER {
            return Err(RunError::HeaderMismatch {
                path: path.display().to_string(),
                found: first,
            });
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Writes and flushes one row; floats use shortest round-trip form so
    /// identical runs produce identical bytes.
    pub fn write_row(&mut self, r: &MetricsRow) -> Result<(), RunError> {
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.episodes,
            r.mean,
            r.iqm,
            r.ci_low,
            r.ci_high,
            r.loss,
            r.grad_norm,
            r.epsilon,
            r.action_gap,
            r.churn,
            r.dormant_pct,
            r.srank,
            r.l2_total
        )
        .map_err(|e| io_err(&self.path, e))?;
        self.file.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Parses a metrics.csv back into rows (plotting, tests).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        other => {
            return Err(RunError::HeaderMismatch {
                path: path.display().to_string(),
                found: other.map(|(_, h)| h.to_string()).unwrap_or_default(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(RunError::BadRow {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("expected 14 fields, found {}", fields.len()),
            });
        }
        let bad = |reason: String| RunError::BadRow {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let int = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("{s}: {e}")));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
        rows.push(MetricsRow {
            frame: int(fields[0])?,
            episodes: int(fields[1])?,
            mean: num(fields[2])?,
            iqm: num(fields[3])?,
            ci_low: num(fields[4])?,
            ci_high: num(fields[5])?,
            loss: num(fields[6])?,
            grad_norm: num(fields[7])?,
            epsilon: num(fields[8])?,
            action_gap: num(fields[9])?,
            churn: num(fields[10])?,
            dormant_pct: num(fields[11])?,
            srank: num(fields[12])?,
            l2_total: num(fields[13])?,
        });
    }
    Ok(rows)
}
