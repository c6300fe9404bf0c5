use std::collections::BTreeMap;
use std::path::Path;

use guidegan_core::data::{list_images, load_png, preprocess, Preprocess};
use guidegan_core::metrics::{embed_images, subsample_dataset, DeskExtractor, Extractor};
use serde::{Deserialize, Serialize};

use crate::{io_err, write_file, CliError, Result};

const SPLITS: [&str; 4] = ["trainA", "trainB", "testA", "testB"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSelection {
    pub source_count: usize,
    /// Selected file names, in source (sorted) order.
    pub selected: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleManifest {
    pub source: String,
    pub k: usize,
    pub seed: u64,
    pub extractor_id: String,
    pub image_size: usize,
    pub splits: BTreeMap<String, SplitSelection>,
}

/// Keep one image per block of `k` in each split present under `dataset`,
/// blocks taken by distance to the split's mean embedding. Copies the
/// selection to `out` and writes `out/manifest.json`.
pub fn cmd_subsample(dataset: &Path, k: usize, seed: u64, image_size: usize, out: &Path) -> Result<SubsampleManifest> {
    if k == 0 {
        return Err(CliError::Validation("k must be positive".into()));
    }
    if image_size < 4 {
        return Err(CliError::Validation("image size must be at least 4".into()));
    }
    let extractor = DeskExtractor::default();
    let p = Preprocess {
        image_size,
        resize_to: image_size,
    };
    let present: Vec<_> = SPLITS.iter().filter(|s| dataset.join(s).is_dir()).collect();
    if present.is_empty() {
        return Err(CliError::Validation(format!(
            "{} has none of {}",
            dataset.display(),
            SPLITS.join(", ")
        )));
    }
    let mut plans = Vec::new();
    for split in present {
        let files = list_images(&dataset.join(split))?;
        if files.len() < k {
            return Err(CliError::Validation(format!(
                "{split} has {} images, fewer than k = {k}",
                files.len()
            )));
        }
        let images = files
            .iter()
            .map(|f| load_png(f).map(|raw| preprocess(&raw, p, false, 0)))
            .collect::<Result<Vec<_>, _>>()?;
        let emb = embed_images(&images, &extractor)?;
        let picks = subsample_dataset(&emb, k, seed)?;
        log::info!("{split}: keeping {} of {}", picks.len(), files.len());
        plans.push((split.to_string(), files, picks));
    }
    let mut splits = BTreeMap::new();
    for (split, files, picks) in plans {
        let dir = out.join(&split);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut selected = Vec::with_capacity(picks.len());
        for &i in &picks {
            let name = files[i].file_name().unwrap().to_os_string();
            let dest = dir.join(&name);
            std::fs::copy(&files[i], &dest).map_err(|e| io_err(&dest, e))?;
            selected.push(name.to_string_lossy().into_owned());
        }
        splits.insert(
            split,
            SplitSelection {
                source_count: files.len(),
                selected,
            },
        );
    }
    let manifest = SubsampleManifest {
        source: dataset.display().to_string(),
        k,
        seed,
        extractor_id: extractor.id(),
        image_size,
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.into()))?;
    write_file(&out.join("manifest.json"), json)?;
    Ok(manifest)
}
