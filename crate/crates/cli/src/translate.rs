use std::path::{Path, PathBuf};
use std::str::FromStr;

use guidegan_core::data::{load_png, preprocess, to_image, Domain, Preprocess};
use guidegan_core::eval::translate;
use guidegan_core::training::checkpoint::load_model;
use guidegan_core::training::CheckpointPaths;
use image::RgbImage;

use crate::{io_err, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AB,
    BA,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::AB => Domain::A,
            Direction::BA => Domain::B,
        }
    }
}

impl FromStr for Direction {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AB" | "A->B" | "A2B" => Ok(Direction::AB),
            "BA" | "B->A" | "B2A" => Ok(Direction::BA),
            _ => Err(CliError::Validation(format!("direction must be AB or BA, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TranslateOutput {
    pub outputs: Vec<PathBuf>,
    pub grid: Option<PathBuf>,
}

/// Translate `inputs` with the generator of `direction`. Each output is
/// written as `<stem>_<AB|BA>.png` under `out`; with `grid` set,
/// `grid.png` holds one `input | output` row per image.
pub fn cmd_translate(checkpoint: &Path, inputs: &[PathBuf], direction: Direction, out: &Path, grid: bool) -> Result<TranslateOutput> {
    if inputs.is_empty() {
        return Err(CliError::Validation("no input images".into()));
    }
    let ck = CheckpointPaths::resolve(checkpoint)?;
    let (cfg, model) = load_model(&ck)?;
    let p = Preprocess::from(&cfg.data);
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let tag = match direction {
        Direction::AB => "AB",
        Direction::BA => "BA",
    };
    let mut outputs = Vec::new();
    let mut pairs = Vec::new();
    for path in inputs {
        let x = preprocess(&load_png(path)?, p, false, 0);
        let y = translate(&model, cfg.guidance.source, direction.source(), &x)?;
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let dest = out.join(format!("{stem}_{tag}.png"));
        save(&to_image(&y), &dest)?;
        outputs.push(dest);
        pairs.push((to_image(&x), to_image(&y)));
    }
    let grid = if grid {
        let s = p.image_size as u32;
        let mut canvas = RgbImage::new(2 * s, s * pairs.len() as u32);
        for (i, (x, y)) in pairs.iter().enumerate() {
            let top = i as u32 * s;
            image::imageops::replace(&mut canvas, x, 0, i64::from(top));
            image::imageops::replace(&mut canvas, y, i64::from(s), i64::from(top));
        }
        let dest = out.join("grid.png");
        save(&canvas, &dest)?;
        Some(dest)
    } else {
        None
    };
    Ok(TranslateOutput { outputs, grid })
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| {
        CliError::Runtime(guidegan_core::Error::Image {
            path: path.to_path_buf(),
            source,
        })
    })
}
