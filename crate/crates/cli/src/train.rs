use std::path::{Path, PathBuf};
use std::time::Instant;

use guidegan_core::data::{self, Dataset};
use guidegan_core::training::{StepRecord, StopReason, Trainer};
use guidegan_core::TrainingConfig;

use crate::{CliError, Result};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub reason: StopReason,
    pub steps: u64,
    pub last: Option<StepRecord>,
}

/// Train `cfg` into `run_dir`. A run directory that already holds checkpoints
/// is continued when `resume` is set and refused otherwise.
pub fn cmd_train(cfg: TrainingConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let existing = run_dir.join("checkpoints").join("latest").is_file();
    let mut trainer = match (existing, resume) {
        (true, false) => {
            return Err(CliError::Validation(format!(
                "{} already holds a run; pass --resume or choose another --out",
                run_dir.display()
            )))
        }
        (true, true) => {
            let t = Trainer::resume(run_dir)?;
            if t.cfg != cfg {
                log::warn!("resuming with the config stored in {}, not the one given", run_dir.display());
            }
            t
        }
        (false, _) => {
            let root = data::prepare(&cfg.data)?;
            let ds = Dataset::load(&root, &cfg.data)?;
            Trainer::new(cfg, ds, Some(run_dir.to_path_buf()))?
        }
    };
    log::info!(
        "training `{}` into {} from step {}",
        trainer.cfg.name,
        run_dir.display(),
        trainer.state.step
    );
    let start = Instant::now();
    let every = trainer.data.epoch_len() as u64;
    let mut last = None;
    let reason = trainer.train_with(|r| {
        if r.step % every == 0 {
            log::info!(
                "step {} epoch {} cyc {:.4} gan {:.4} reg {:.4} d_a {:.4} d_b {:.4} ({:.0}s)",
                r.step,
                r.epoch,
                r.gen.cyc,
                r.gen.gan,
                r.gen.reg,
                r.disc.d_a,
                r.disc.d_b,
                start.elapsed().as_secs_f64()
            );
        }
        last = Some(*r);
    })?;
    log::info!("stopped after step {}: {reason:?}", trainer.state.step);
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        reason,
        steps: trainer.state.step,
        last,
    })
}

/// Records of `metrics.jsonl`, one per step. A resumed run may repeat steps;
/// the later line wins.
pub fn read_metrics(run_dir: &Path) -> Result<Vec<StepRecord>> {
    let path = run_dir.join("metrics.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| crate::io_err(&path, e))?;
    let mut out: Vec<StepRecord> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: StepRecord = serde_json::from_str(line).map_err(|e| CliError::Runtime(e.into()))?;
        out.retain(|o| o.step < r.step);
        out.push(r);
    }
    Ok(out)
}
