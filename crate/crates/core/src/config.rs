//! Training configuration: TOML schema, defaults, validation and presets.
//!
//! A config file may name a `preset`; its own keys are then deep-merged over
//! the preset before validation. Validation errors carry the line of the
//! offending key in the user's file when it can be located.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: `{}`: {}", self.key, self.message),
            None => write!(f, "config: `{}`: {}", self.key, self.message),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeKind {
    /// No guidance: plain CycleGAN generator.
    None,
    Concat,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateKind {
    None,
    Average,
    Weighted,
    Bigru,
}

/// Which discriminator(s) feed a generator, relative to its translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSource {
    InputDomain,
    OutputDomain,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    Lsgan,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// `lr * 0.1^floor(epoch / decay_every)`.
    Step,
    /// Constant for `decay_every` epochs, then linear to zero over another `decay_every`.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KidMode {
    TargetOnly,
    BothDomains,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalModes {
    TargetOnly,
    Both,
    All,
}

impl EvalModes {
    pub fn modes(self) -> Vec<KidMode> {
        match self {
            EvalModes::TargetOnly => vec![KidMode::TargetOnly],
            EvalModes::Both => vec![KidMode::BothDomains],
            EvalModes::All => vec![KidMode::TargetOnly, KidMode::BothDomains],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub image_size: u32,
    /// Inclusive range of the gray background level.
    pub background: [u8; 2],
    /// Per-pixel noise amplitude in 8-bit levels.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_per_domain: 100,
            test_per_domain: 50,
            image_size: 32,
            background: [70, 70],
            noise: 0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root with trainA/trainB/testA/testB.
    pub root: Option<PathBuf>,
    /// Generate a synthetic dataset at `root` when it does not exist.
    pub synthetic: Option<SyntheticConfig>,
    pub image_size: usize,
    pub resize_to: usize,
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: None,
            image_size: 32,
            resize_to: 36,
            flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gen_channels: usize,
    pub residual_blocks: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub guidance_dim: usize,
    /// Channels of the guidance half of the merged latent; 0 means "same as the latent".
    pub fused_channels: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gen_channels: 8,
            residual_blocks: 2,
            disc_channels: 8,
            disc_layers: 3,
            guidance_dim: 8,
            fused_channels: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        self.gen_channels * 4
    }

    pub fn fused(&self) -> usize {
        if self.fused_channels == 0 {
            self.latent_channels()
        } else {
            self.fused_channels
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub merge: MergeKind,
    pub source: GuidanceSource,
    pub aggregate: AggregateKind,
    /// Guidance head and merge parameters fixed at zero and never trained.
    pub frozen_zero: bool,
    /// Per-source linear adapters ahead of multi-source aggregation.
    pub adapters: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            merge: MergeKind::Attention,
            source: GuidanceSource::OutputDomain,
            aggregate: AggregateKind::None,
            frozen_zero: false,
            adapters: false,
        }
    }
}

/// Weights of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_cyc: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_cyc: 10.0,
            lambda_reg: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gan_mode: GanMode,
    pub lambda_gan: f64,
    pub lambda_cyc: f64,
    pub lambda_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            gan_mode: GanMode::Lsgan,
            lambda_gan: w.lambda_gan,
            lambda_cyc: w.lambda_cyc,
            lambda_reg: w.lambda_reg,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_gan: self.lambda_gan,
            lambda_cyc: self.lambda_cyc,
            lambda_reg: self.lambda_reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate of the shadow discriminators; defaults to `lr`.
    pub shadow_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    /// Live/shadow mixing weight.
    pub lambda_d: f64,
    pub schedule: Schedule,
    pub decay_every: u64,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub max_steps: Option<u64>,
    pub pool_size: usize,
    pub checkpoint_every: u64,
    pub convergence_window: usize,
    pub convergence_eps: f64,
    pub convergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            shadow_lr: None,
            beta1: 0.5,
            beta2: 0.999,
            lambda_d: 0.9,
            schedule: Schedule::Step,
            decay_every: 100,
            batch_size: 1,
            max_epochs: 200,
            max_steps: None,
            pool_size: 50,
            checkpoint_every: 500,
            convergence_window: 10,
            convergence_eps: 1e-3,
            convergence_patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalModes,
    pub subset_size: usize,
    pub num_subsets: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalModes::All,
            subset_size: 100,
            num_subsets: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub name: String,
    /// Preset this file extends; resolved at load time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    pub deterministic: bool,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub guidance: GuidanceConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            preset: None,
            seed: 0,
            deterministic: true,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            guidance: GuidanceConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Named presets, one per experiment-table row. Aliases share a file.
pub const PRESETS: &[(&str, &str)] = &[
    ("ablation/cyclegan-baseline", include_str!("../presets/cyclegan-baseline.toml")),
    ("ablation/guidance", include_str!("../presets/concat-guidance.toml")),
    ("ablation/attention-guidance", include_str!("../presets/attention-guidance.toml")),
    ("ablation/attention-regularization", include_str!("../presets/attention-regularization.toml")),
    ("ablation/multi-attention-guidance", include_str!("../presets/multi-average.toml")),
    ("single/cyclegan-baseline", include_str!("../presets/cyclegan-baseline.toml")),
    ("single/input-domain", include_str!("../presets/input-domain.toml")),
    ("single/output-domain", include_str!("../presets/attention-guidance.toml")),
    ("merge/cyclegan-baseline", include_str!("../presets/cyclegan-baseline.toml")),
    ("merge/average", include_str!("../presets/multi-average.toml")),
    ("merge/weighted", include_str!("../presets/multi-weighted.toml")),
    ("merge/bigru", include_str!("../presets/multi-bigru.toml")),
];

/// Rows of the ablation table, in display order.
pub const ABLATION_ROWS: &[(&str, &str)] = &[
    ("CycleGAN", "ablation/cyclegan-baseline"),
    ("+ guidance", "ablation/guidance"),
    ("+ attention based guidance", "ablation/attention-guidance"),
    ("+ attention guidance + regularization", "ablation/attention-regularization"),
    ("+ multi-attention-guidance", "ablation/multi-attention-guidance"),
];

/// Rows of the single-discriminator table.
pub const SINGLE_ROWS: &[(&str, &str)] = &[
    ("CycleGAN", "single/cyclegan-baseline"),
    ("input domain guidance", "single/input-domain"),
    ("output domain guidance", "single/output-domain"),
];

/// Rows of the merge-strategy table.
pub const MERGE_ROWS: &[(&str, &str)] = &[
    ("CycleGAN", "merge/cyclegan-baseline"),
    ("average", "merge/average"),
    ("weighted average", "merge/weighted"),
    ("bi-GRU", "merge/bigru"),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

fn preset_source(name: &str) -> Result<&'static str, ConfigError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| ConfigError {
            line: None,
            key: "preset".into(),
            message: format!(
                "unknown preset `{name}`; known: {}",
                preset_names().collect::<Vec<_>>().join(", ")
            ),
        })
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>().map_err(|e| ConfigError {
        line: e.span().map(|s| line_of_offset(text, s.start)),
        key: String::new(),
        message: e.message().to_string(),
    })
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of `section.key` (or a top-level `key`) in a TOML document.
pub fn locate_key(text: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", path),
    };
    let mut current = String::new();
    let mut fallback = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        if current == section && k == key {
            return Some(i + 1);
        }
        // dotted keys such as `train.lambda_d = 0.5` at top level
        if current.is_empty() && k == path {
            fallback = Some(i + 1);
        }
        if section.is_empty() && k == key && fallback.is_none() {
            fallback = Some(i + 1);
        }
    }
    fallback
}

impl TrainingConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_toml_str(preset_source(name)?)?;
        cfg.preset = Some(name.to_string());
        Ok(cfg)
    }

    /// Parse, resolve a named preset, deserialize and validate.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut table = parse_table(text)?;
        let preset = match table.get("preset") {
            Some(toml::Value::String(s)) => Some(s.clone()),
            Some(_) => {
                return Err(ConfigError {
                    line: locate_key(text, "preset"),
                    key: "preset".into(),
                    message: "must be a string".into(),
                })
            }
            None => None,
        };
        if let Some(name) = &preset {
            let mut base = parse_table(preset_source(name).map_err(|mut e| {
                e.line = locate_key(text, "preset");
                e
            })?)?;
            table.remove("preset");
            merge_tables(&mut base, table);
            table = base;
        }
        let mut cfg: TrainingConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            // Spans refer to the merged table; re-locate by key name when possible.
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or_default()
                .to_string();
            ConfigError {
                line: locate_key(text, &key),
                key,
                message: e.message().to_string(),
            }
        })?;
        cfg.preset = preset;
        if let Err((key, message)) = cfg.validate() {
            return Err(ConfigError {
                line: locate_key(text, &key),
                key,
                message,
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            key: String::new(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml_str(&text)
    }

    /// Serialized snapshot; reloading it yields an identical config.
    pub fn to_toml_string(&self) -> String {
        let mut snapshot = self.clone();
        snapshot.preset = None;
        toml::to_string(&snapshot).expect("config serializes")
    }

    /// Exhaustive semantic checks. Returns the dotted key at fault.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        let finite_nonneg = |k: &str, v: f64| -> Result<(), (String, String)> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err((k.to_string(), format!("must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("loss.lambda_gan", self.loss.lambda_gan)?;
        finite_nonneg("loss.lambda_cyc", self.loss.lambda_cyc)?;
        finite_nonneg("loss.lambda_reg", self.loss.lambda_reg)?;
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.lambda_d) {
            return err("train.lambda_d", format!("must lie in [0, 1], got {}", t.lambda_d));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return err("train.lr", format!("must be finite and >= 0, got {}", t.lr));
        }
        if let Some(s) = t.shadow_lr {
            finite_nonneg("train.shadow_lr", s)?;
        }
        for (k, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(k, format!("must lie in [0, 1), got {b}"));
            }
        }
        if t.batch_size != 1 {
            return err("train.batch_size", format!("only batch size 1 is supported, got {}", t.batch_size));
        }
        if t.decay_every == 0 {
            return err("train.decay_every", "must be positive".into());
        }
        if t.checkpoint_every == 0 {
            return err("train.checkpoint_every", "must be positive".into());
        }
        if t.convergence_window == 0 {
            return err("train.convergence_window", "must be positive".into());
        }
        if t.convergence_patience == 0 {
            return err("train.convergence_patience", "must be positive".into());
        }
        finite_nonneg("train.convergence_eps", t.convergence_eps)?;
        let d = &self.data;
        if d.image_size == 0 || !d.image_size.is_multiple_of(4) {
            return err("data.image_size", format!("must be a positive multiple of 4, got {}", d.image_size));
        }
        if d.resize_to < d.image_size {
            return err("data.resize_to", format!("must be >= image_size ({}), got {}", d.image_size, d.resize_to));
        }
        let m = &self.model;
        if !(2..=3).contains(&m.disc_layers) {
            return err("model.disc_layers", format!("supported layer counts are 2 and 3, got {}", m.disc_layers));
        }
        if d.image_size >> m.disc_layers == 0 {
            return err("model.disc_layers", "too many stride-2 layers for the image size".into());
        }
        for (k, v) in [
            ("model.gen_channels", m.gen_channels),
            ("model.disc_channels", m.disc_channels),
            ("model.guidance_dim", m.guidance_dim),
        ] {
            if v == 0 {
                return err(k, "must be positive".into());
            }
        }
        if !(m.init_std.is_finite() && m.init_std >= 0.0) {
            return err("model.init_std", "must be finite and >= 0".into());
        }
        let g = &self.guidance;
        match (g.merge, g.source, g.aggregate) {
            (MergeKind::None, _, AggregateKind::None) => {}
            (MergeKind::None, _, _) => {
                return err("guidance.aggregate", "requires a merge strategy".into());
            }
            (_, GuidanceSource::Multi, AggregateKind::None) => {
                return err("guidance.aggregate", "multi-source guidance needs an aggregator".into());
            }
            (_, GuidanceSource::InputDomain | GuidanceSource::OutputDomain, a) if a != AggregateKind::None => {
                return err("guidance.aggregate", "aggregation applies to multi-source guidance only".into());
            }
            _ => {}
        }
        if g.adapters && g.source != GuidanceSource::Multi {
            return err("guidance.adapters", "adapters apply to multi-source guidance only".into());
        }
        let e = &self.eval;
        if e.subset_size < 2 {
            return err("eval.subset_size", "must be at least 2".into());
        }
        if e.num_subsets == 0 {
            return err("eval.num_subsets", "must be positive".into());
        }
        Ok(())
    }

    pub fn guided(&self) -> bool {
        self.guidance.merge != MergeKind::None
    }

    pub fn shadow_lr(&self) -> f64 {
        self.train.shadow_lr.unwrap_or(self.train.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn negative_lambda_reports_line() {
        let text = "name = \"x\"\n\n[loss]\nlambda_cyc = 10.0\nlambda_reg = -1.0\n";
        let e = TrainingConfig::from_toml_str(text).unwrap_err();
        assert_eq!(e.key, "loss.lambda_reg");
        assert_eq!(e.line, Some(5));
    }

    #[test]
    fn lambda_d_out_of_range_rejected() {
        let text = "[train]\nlambda_d = 1.5\n";
        let e = TrainingConfig::from_toml_str(text).unwrap_err();
        assert_eq!(e.key, "train.lambda_d");
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn unknown_enum_value_rejected_with_line() {
        let text = "[guidance]\nmerge = \"film\"\n";
        let e = TrainingConfig::from_toml_str(text).unwrap_err();
        assert!(e.message.contains("film") || e.message.contains("variant"), "{e}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "[train]\nlearning_rate = 0.1\n";
        let e = TrainingConfig::from_toml_str(text).unwrap_err();
        assert!(e.message.contains("learning_rate"), "{e}");
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn syntax_error_has_line() {
        let text = "name = \"x\"\n[train\nlr = 1\n";
        let e = TrainingConfig::from_toml_str(text).unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn preset_overrides_merge() {
        let text = "preset = \"ablation/attention-guidance\"\n[train]\nmax_steps = 7\n";
        let cfg = TrainingConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.train.max_steps, Some(7));
        assert_eq!(cfg.guidance.merge, MergeKind::Attention);
        assert_eq!(cfg.preset.as_deref(), Some("ablation/attention-guidance"));
    }

    #[test]
    fn multi_without_aggregator_rejected() {
        let text = "[guidance]\nmerge = \"concat\"\nsource = \"multi\"\n";
        let e = TrainingConfig::from_toml_str(text).unwrap_err();
        assert_eq!(e.key, "guidance.aggregate");
    }

    #[test]
    fn snapshot_round_trips() {
        for name in preset_names() {
            let cfg = TrainingConfig::preset(name).unwrap();
            let back = TrainingConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            let mut expect = cfg.clone();
            expect.preset = None;
            assert_eq!(back, expect, "{name}");
        }
    }
}
