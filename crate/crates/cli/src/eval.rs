use std::path::{Path, PathBuf};

use guidegan_core::config::EvalModes;
use guidegan_core::data::{self, Dataset};
use guidegan_core::eval::evaluate;
use guidegan_core::metrics::{format_kid_table, DeskExtractor, KidReport};
use guidegan_core::training::checkpoint::load_model;
use guidegan_core::training::CheckpointPaths;

use crate::{write_file, Result};

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Dataset root; defaults to the one in the checkpoint's config.
    pub data_root: Option<PathBuf>,
    pub mode: Option<EvalModes>,
    pub seed: Option<u64>,
    /// Report directory; defaults to `<checkpoint>/eval`.
    pub out: Option<PathBuf>,
}

/// KID of a checkpoint on its test splits. Writes `kid.json` and `kid.txt`.
pub fn cmd_eval(checkpoint: &Path, opts: &EvalOptions) -> Result<Vec<KidReport>> {
    let ck = CheckpointPaths::resolve(checkpoint)?;
    let (mut cfg, model) = load_model(&ck)?;
    if let Some(r) = &opts.data_root {
        cfg.data.root = Some(r.clone());
    }
    if let Some(m) = opts.mode {
        cfg.eval.mode = m;
    }
    if let Some(s) = opts.seed {
        cfg.eval.seed = s;
    }
    let root = data::prepare(&cfg.data)?;
    let ds = Dataset::load(&root, &cfg.data)?;
    let reports = evaluate(
        &model,
        cfg.guidance.source,
        &ds,
        &cfg.eval.mode.modes(),
        &cfg.eval,
        &DeskExtractor::default(),
    )?;
    let out = opts.out.clone().unwrap_or_else(|| ck.dir.join("eval"));
    let json = serde_json::to_string_pretty(&reports).map_err(|e| crate::CliError::Runtime(e.into()))?;
    write_file(&out.join("kid.json"), json)?;
    let mut text = String::new();
    for mode in cfg.eval.mode.modes() {
        let rows: Vec<_> = reports.iter().filter(|r| r.mode == mode).cloned().collect();
        let title = format!("{} ({mode:?})", cfg.name);
        text.push_str(&format_kid_table(&title, &["A->B", "B->A"], &[(cfg.name.clone(), rows)]));
        text.push('\n');
    }
    write_file(&out.join("kid.txt"), text)?;
    Ok(reports)
}
