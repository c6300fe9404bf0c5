//! Unpaired two-domain datasets: PNG loading, resize/crop/flip preprocessing,
//! seeded epoch pairing and a synthetic color-translation generator.

use std::fmt;
use std::path::{Path, PathBuf};

use guidegan_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, SyntheticConfig};
use crate::error::{Error, IoContext, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self, domain: Domain) -> String {
        match self {
            Split::Train => format!("train{domain}"),
            Split::Test => format!("test{domain}"),
        }
    }
}

/// One preprocessed image, `3 x S x S` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub pixels: Tensor<f32>,
    pub id: String,
    pub domain: Domain,
}

/// Target geometry of the preprocessing pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preprocess {
    pub image_size: usize,
    pub resize_to: usize,
}

impl From<&DataConfig> for Preprocess {
    fn from(d: &DataConfig) -> Self {
        Self {
            image_size: d.image_size,
            resize_to: d.resize_to,
        }
    }
}

/// A concrete augmentation draw: crop corner and mirror flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub x: usize,
    pub y: usize,
    pub flip: bool,
}

impl Preprocess {
    pub fn resize(&self, raw: &RgbImage) -> RgbImage {
        let r = self.resize_to as u32;
        if raw.width() == r && raw.height() == r {
            raw.clone()
        } else {
            imageops::resize(raw, r, r, FilterType::Triangle)
        }
    }

    pub fn center(&self) -> Augment {
        let o = (self.resize_to - self.image_size) / 2;
        Augment { x: o, y: o, flip: false }
    }

    /// Random crop and a fair-coin flip (when enabled) from `seed`.
    pub fn random(&self, seed: u64, flip: bool) -> Augment {
        let mut rng = seed::indexed(seed, "augment", &[]);
        let slack = self.resize_to - self.image_size;
        Augment {
            x: rng.random_range(0..=slack),
            y: rng.random_range(0..=slack),
            flip: flip && rng.random_bool(0.5),
        }
    }

    /// Crop an already resized image and normalize to `[-1, 1]`.
    pub fn crop(&self, resized: &RgbImage, a: Augment) -> Tensor<f32> {
        let s = self.image_size;
        let mut data = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let sx = if a.flip { s - 1 - x } else { x };
                let px = resized.get_pixel((a.x + sx) as u32, (a.y + y) as u32);
                for c in 0..3 {
                    data[(c * s + y) * s + x] = f32::from(px[c]) / 127.5 - 1.0;
                }
            }
        }
        Tensor::new(vec![3, s, s], data).expect("crop shape")
    }
}

/// Full pipeline: resize to `S + slack`, then a random crop and flip (train)
/// or a center crop (eval), then scale to `[-1, 1]`.
pub fn preprocess(raw: &RgbImage, p: Preprocess, train_mode: bool, seed: u64) -> Tensor<f32> {
    let resized = p.resize(raw);
    let aug = if train_mode { p.random(seed, true) } else { p.center() };
    p.crop(&resized, aug)
}

/// Map `[-1, 1]` pixels back to 8-bit RGB.
pub fn to_image(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |c: usize| (((d[(c * h + y) * w + x] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Sorted list of image files in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// A split of one domain with images cached at the resize resolution.
#[derive(Clone, Debug)]
pub struct DomainImages {
    pub domain: Domain,
    pub dir: PathBuf,
    pub ids: Vec<String>,
    pub resized: Vec<RgbImage>,
}

impl DomainImages {
    pub fn load(dir: &Path, domain: Domain, p: Preprocess) -> Result<Self> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", dir.display())));
        }
        let mut ids = Vec::with_capacity(files.len());
        let mut resized = Vec::with_capacity(files.len());
        for f in &files {
            ids.push(f.file_name().unwrap().to_string_lossy().into_owned());
            resized.push(p.resize(&load_png(f)?));
        }
        Ok(Self {
            domain,
            dir: dir.to_path_buf(),
            ids,
            resized,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn record(&self, i: usize, p: Preprocess, aug: Augment) -> ImageRecord {
        ImageRecord {
            pixels: p.crop(&self.resized[i], aug),
            id: self.ids[i].clone(),
            domain: self.domain,
        }
    }

    /// Center-cropped records in file order.
    pub fn eval_records(&self, p: Preprocess) -> Vec<ImageRecord> {
        (0..self.len()).map(|i| self.record(i, p, p.center())).collect()
    }
}

/// Pairing of one epoch: `max(na, nb)` pairs, each domain independently
/// shuffled and the shorter one wrapped around.
pub fn epoch_pairs(na: usize, nb: usize, seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    let perm = |n: usize, label: &str| {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(&mut seed::indexed(seed, label, &[epoch]));
        v
    };
    let (pa, pb) = (perm(na, "shuffle-a"), perm(nb, "shuffle-b"));
    (0..na.max(nb)).map(|i| (pa[i % na], pb[i % nb])).collect()
}

/// The four directories of a dataset root.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub preprocess: Preprocess,
    pub flip: bool,
    pub train_a: DomainImages,
    pub train_b: DomainImages,
    pub test_a: Option<DomainImages>,
    pub test_b: Option<DomainImages>,
}

impl Dataset {
    /// Train splits are required; test splits are loaded when present.
    pub fn load(root: &Path, cfg: &DataConfig) -> Result<Self> {
        let p = Preprocess::from(cfg);
        let split = |s: Split, d: Domain| DomainImages::load(&root.join(s.dir(d)), d, p);
        let optional = |s: Split, d: Domain| -> Result<Option<DomainImages>> {
            let dir = root.join(s.dir(d));
            if dir.is_dir() {
                DomainImages::load(&dir, d, p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            root: root.to_path_buf(),
            preprocess: p,
            flip: cfg.flip,
            train_a: split(Split::Train, Domain::A)?,
            train_b: split(Split::Train, Domain::B)?,
            test_a: optional(Split::Test, Domain::A)?,
            test_b: optional(Split::Test, Domain::B)?,
        })
    }

    pub fn epoch_len(&self) -> usize {
        self.train_a.len().max(self.train_b.len())
    }

    pub fn train(&self, d: Domain) -> &DomainImages {
        match d {
            Domain::A => &self.train_a,
            Domain::B => &self.train_b,
        }
    }

    pub fn test(&self, d: Domain) -> Result<&DomainImages> {
        match d {
            Domain::A => self.test_a.as_ref(),
            Domain::B => self.test_b.as_ref(),
        }
        .ok_or_else(|| Error::Dataset(format!("missing {}", self.root.join(Split::Test.dir(d)).display())))
    }

    /// The `i`-th training pair of `epoch`, augmented with per-image seeds.
    pub fn train_pair(&self, seed: u64, epoch: u64, i: usize) -> (ImageRecord, ImageRecord) {
        let pairs = epoch_pairs(self.train_a.len(), self.train_b.len(), seed, epoch);
        let (ia, ib) = pairs[i % pairs.len()];
        let p = self.preprocess;
        let aug = |label: &str| p.random(seed::derive(seed::derive(seed, label), &format!("{epoch}/{i}")), self.flip);
        (
            self.train_a.record(ia, p, aug("augment-a")),
            self.train_b.record(ib, p, aug("augment-b")),
        )
    }
}

/// Synthetic two-domain spec: the same shape/position/size distribution in
/// both domains, with shapes painted red in A and blue in B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: u32,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub shapes: Vec<String>,
    /// Base RGB of the shape in each domain.
    pub palette_a: [u8; 3],
    pub palette_b: [u8; 3],
    /// Uniform-gray background level range and per-pixel noise amplitude.
    pub background: (u8, u8),
    pub noise: u8,
    pub seed: u64,
}

impl From<&SyntheticConfig> for SyntheticSpec {
    fn from(c: &SyntheticConfig) -> Self {
        Self {
            image_size: c.image_size,
            train_per_domain: c.train_per_domain,
            test_per_domain: c.test_per_domain,
            shapes: vec!["square".into(), "circle".into()],
            palette_a: [220, 40, 40],
            palette_b: [40, 40, 220],
            background: (c.background[0], c.background[1]),
            noise: c.noise,
            seed: c.seed,
        }
    }
}

impl SyntheticSpec {
    pub fn render(&self, domain: Domain, split: Split, index: usize) -> RgbImage {
        let s = self.image_size;
        let split_key = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let dom_key = match domain {
            Domain::A => 0,
            Domain::B => 1,
        };
        let mut rng = seed::indexed(self.seed, "synthetic", &[split_key, dom_key, index as u64]);
        let bg = rng.random_range(self.background.0..=self.background.1);
        let shape = rng.random_range(0..self.shapes.len().max(1));
        let circle = self.shapes.get(shape).is_some_and(|n| n == "circle");
        let half = rng.random_range(s as f32 * 0.2..s as f32 * 0.35);
        let cx = rng.random_range(half..s as f32 - half);
        let cy = rng.random_range(half..s as f32 - half);
        let base = match domain {
            Domain::A => self.palette_a,
            Domain::B => self.palette_b,
        };
        let jitter: i16 = rng.random_range(-20..=20);
        let fg = base.map(|c| (i16::from(c) + jitter).clamp(0, 255) as u8);
        let noise = i16::from(self.noise);
        RgbImage::from_fn(s, s, |x, y| {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = if circle {
                dx * dx + dy * dy <= half * half
            } else {
                dx.abs() <= half && dy.abs() <= half
            };
            let n: i16 = rng.random_range(-noise..=noise);
            let px = |c: u8| (i16::from(c) + n).clamp(0, 255) as u8;
            if inside {
                Rgb(fg.map(px))
            } else {
                Rgb([px(bg), px(bg), px(bg)])
            }
        })
    }
}

/// Write `trainA/trainB/testA/testB` PNGs plus `synthetic.json` under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let count = match split {
            Split::Train => spec.train_per_domain,
            Split::Test => spec.test_per_domain,
        };
        for domain in [Domain::A, Domain::B] {
            let dir = root.join(split.dir(domain));
            std::fs::create_dir_all(&dir).at(&dir)?;
            for i in 0..count {
                let path = dir.join(format!("{i:05}.png"));
                spec.render(domain, split, i)
                    .save(&path)
                    .map_err(|source| Error::Image { path, source })?;
            }
        }
    }
    let path = root.join("synthetic.json");
    std::fs::write(&path, serde_json::to_vec_pretty(spec)?).at(path)?;
    Ok(())
}

/// Resolve the dataset root of a config, generating the synthetic dataset
/// if it is configured and absent. An existing synthetic dataset must have
/// been generated from the same spec.
pub fn prepare(cfg: &DataConfig) -> Result<PathBuf> {
    let root = cfg
        .root
        .clone()
        .ok_or_else(|| Error::Dataset("no data.root configured".into()))?;
    if let Some(syn) = &cfg.synthetic {
        let spec = SyntheticSpec::from(syn);
        if !root.join("trainA").is_dir() {
            generate_synthetic(&spec, &root)?;
        } else {
            let path = root.join("synthetic.json");
            let text = std::fs::read_to_string(&path).at(&path)?;
            let existing: SyntheticSpec = serde_json::from_str(&text)?;
            if existing != spec {
                return Err(Error::Dataset(format!(
                    "{} was generated from a different synthetic spec; remove it or point data.root elsewhere",
                    root.display()
                )));
            }
        }
    }
    Ok(root)
}
