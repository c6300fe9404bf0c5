//! Checkpoint directories:
//!
//! ```text
//! <run>/checkpoints/step-000100/
//!     model.ggta       every parameter as component/name
//!     optimizer.ggta   Adam moments and step counts
//!     pool.ggta        image pool contents
//!     rng.json         image pool RNG states
//!     state.json       step, epoch, position in epoch, convergence tracker
//!     config.toml      config snapshot
//! <run>/checkpoints/latest   name of the newest step directory
//! ```
//!
//! Each directory is written under a temporary name and renamed into place.

use std::path::{Path, PathBuf};

use guidegan_tensor::archive::write_atomic;
use guidegan_tensor::TensorArchive;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::networks::COMPONENTS;
use crate::training::{StopReason, TrainState, Trainer};

#[derive(Clone, Debug)]
pub struct CheckpointPaths {
    pub dir: PathBuf,
    pub model: PathBuf,
    pub optimizer: PathBuf,
    pub pool: PathBuf,
    pub rng: PathBuf,
    pub state: PathBuf,
    pub config: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            model: dir.join("model.ggta"),
            optimizer: dir.join("optimizer.ggta"),
            pool: dir.join("pool.ggta"),
            rng: dir.join("rng.json"),
            state: dir.join("state.json"),
            config: dir.join("config.toml"),
        }
    }

    /// Accepts a checkpoint directory or a run directory (resolved to its latest checkpoint).
    pub fn resolve(path: &Path) -> Result<Self> {
        if path.join("model.ggta").is_file() {
            Ok(Self::new(path))
        } else {
            latest_checkpoint(path)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    pool_a: ChaCha8Rng,
    pool_b: ChaCha8Rng,
}

pub fn step_dir_name(step: u64) -> String {
    format!("step-{step:06}")
}

/// Write every file of a checkpoint into `dir` (replaced if present).
pub fn save_to(t: &Trainer, dir: &Path) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).at(parent)?;
    let tmp = parent.join(format!(".tmp-{}", dir.file_name().unwrap().to_string_lossy()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    std::fs::create_dir_all(&tmp).at(&tmp)?;
    let p = CheckpointPaths::new(&tmp);

    t.model.to_archive().save(&p.model)?;

    let mut opt = TensorArchive::new();
    for ((prefix, adam), store) in COMPONENTS.iter().zip(t.opt.all()).zip(t.model.stores()) {
        adam.save_into(&mut opt, prefix, store);
    }
    opt.save(&p.optimizer)?;

    let mut pool = TensorArchive::new();
    for (label, pl) in [("a", &t.pool_a), ("b", &t.pool_b)] {
        for (i, img) in pl.buffer.iter().enumerate() {
            pool.push(format!("{label}/{i:04}"), img.clone());
        }
        pool.metadata.insert(format!("{label}/len"), pl.buffer.len().to_string());
    }
    pool.save(&p.pool)?;

    let rng = RngState {
        pool_a: t.pool_a.rng.clone(),
        pool_b: t.pool_b.rng.clone(),
    };
    write_atomic(&p.rng, &serde_json::to_vec(&rng)?)?;
    write_atomic(&p.state, &serde_json::to_vec_pretty(&t.state)?)?;
    write_atomic(&p.config, t.cfg.to_toml_string().as_bytes())?;

    if dir.exists() {
        std::fs::remove_dir_all(dir).at(dir)?;
    }
    std::fs::rename(&tmp, dir).at(dir)?;
    Ok(())
}

pub fn save(t: &Trainer, run_dir: &Path) -> Result<PathBuf> {
    let root = run_dir.join("checkpoints");
    let name = step_dir_name(t.state.step);
    let dir = root.join(&name);
    save_to(t, &dir)?;
    write_atomic(&root.join("latest"), name.as_bytes())?;
    Ok(dir)
}

pub fn latest_checkpoint(run_dir: &Path) -> Result<CheckpointPaths> {
    let root = run_dir.join("checkpoints");
    let pointer = root.join("latest");
    let name = std::fs::read_to_string(&pointer)
        .map_err(|_| Error::Checkpoint(format!("no checkpoint found under {}", run_dir.display())))?;
    let dir = root.join(name.trim());
    if !dir.join("model.ggta").is_file() {
        return Err(Error::Checkpoint(format!("{} is incomplete", dir.display())));
    }
    Ok(CheckpointPaths::new(&dir))
}

/// Load model, optimizer, pools, RNG and loop state into a freshly built trainer.
pub fn restore(t: &mut Trainer, p: &CheckpointPaths) -> Result<()> {
    t.model.load_archive(&TensorArchive::load(&p.model)?)?;

    let opt = TensorArchive::load(&p.optimizer)?;
    let stores: Vec<_> = t.model.stores().into_iter().cloned().collect();
    for ((prefix, adam), store) in COMPONENTS.iter().zip(t.opt.all_mut()).zip(&stores) {
        adam.load_from(&opt, prefix, store)?;
    }

    let pool = TensorArchive::load(&p.pool)?;
    for (label, pl) in [("a", &mut t.pool_a), ("b", &mut t.pool_b)] {
        let n: usize = pool
            .metadata
            .get(&format!("{label}/len"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("pool archive lacks a length".into()))?;
        pl.buffer = (0..n)
            .map(|i| pool.get::<f32>(&format!("{label}/{i:04}")).cloned())
            .collect::<guidegan_tensor::Result<_>>()?;
    }

    let rng: RngState = serde_json::from_slice(&std::fs::read(&p.rng).at(&p.rng)?)?;
    t.pool_a.rng = rng.pool_a;
    t.pool_b.rng = rng.pool_b;
    let mut state: TrainState = serde_json::from_slice(&std::fs::read(&p.state).at(&p.state)?)?;
    // Caps are re-evaluated against the (possibly raised) limits of the config.
    if state.stopped != Some(StopReason::Converged) {
        state.stopped = None;
    }
    t.state = state;
    Ok(())
}

/// Load only the model of a checkpoint, for evaluation and translation.
pub fn load_model(p: &CheckpointPaths) -> Result<(crate::config::TrainingConfig, crate::networks::GuidedCycleGan<f32>)> {
    let cfg = crate::config::TrainingConfig::load(&p.config)?;
    let mut model = crate::networks::GuidedCycleGan::new(&cfg)?;
    model.load_archive(&TensorArchive::load(&p.model)?)?;
    Ok((cfg, model))
}
