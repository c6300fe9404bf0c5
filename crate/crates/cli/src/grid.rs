use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use guidegan_core::config::{KidMode, ABLATION_ROWS, MERGE_ROWS, PRESETS, SINGLE_ROWS};
use guidegan_core::data::{self, Dataset};
use guidegan_core::eval::evaluate;
use guidegan_core::metrics::{format_kid_table, DeskExtractor, KidReport};
use guidegan_core::training::checkpoint::{load_model, step_dir_name};
use guidegan_core::training::CheckpointPaths;
use guidegan_core::TrainingConfig;

use crate::train::{cmd_train, read_metrics};
use crate::{write_file, CliError, ConfigArgs, Result};

const DIRECTIONS: [&str; 2] = ["A->B", "B->A"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Ablation,
    Single,
    Merge,
}

impl Table {
    pub fn rows(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Table::Ablation => ABLATION_ROWS,
            Table::Single => SINGLE_ROWS,
            Table::Merge => MERGE_ROWS,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Table::Ablation => "ablation",
            Table::Single => "single-discriminator guidance",
            Table::Merge => "multi-guidance merge strategies",
        }
    }
}

impl std::str::FromStr for Table {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Table::Ablation),
            "single" => Ok(Table::Single),
            "merge" => Ok(Table::Merge),
            _ => Err(CliError::Validation(format!("unknown table `{s}` (ablation, single, merge)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub out: PathBuf,
    /// Overrides applied to every preset; `config` and `preset` are ignored.
    pub overrides: ConfigArgs,
}

/// Outcome of one configuration.
#[derive(Clone, Debug)]
pub struct RowResult {
    pub label: String,
    pub preset: String,
    pub run_dir: PathBuf,
    pub steps: u64,
    /// Mean cycle loss over the last epoch of training.
    pub final_cyc: f64,
    /// Target-only KID of the untrained model (the step-0 checkpoint).
    pub kid_initial: Vec<KidReport>,
    pub kid_final: Vec<KidReport>,
    pub train_secs: f64,
}

impl RowResult {
    /// `final / initial` per direction.
    pub fn kid_ratio(&self, direction: &str) -> Option<f64> {
        let find = |rs: &[KidReport]| rs.iter().find(|r| r.direction == direction).map(|r| r.mean);
        Some(find(&self.kid_final)? / find(&self.kid_initial)?)
    }
}

#[derive(Clone, Debug)]
pub struct TableReport {
    pub table: Table,
    pub rows: Vec<RowResult>,
}

impl TableReport {
    pub fn render(&self) -> String {
        let rows: Vec<_> = self.rows.iter().map(|r| (r.label.clone(), r.kid_final.clone())).collect();
        let mut s = format_kid_table(self.table.title(), &DIRECTIONS, &rows);
        for r in &self.rows {
            s.push_str(&format!(
                "  {:<40} steps {:>5}  final L_cyc {:.4}  KID A->B {:.2} -> {:.2}  B->A {:.2} -> {:.2}\n",
                r.label,
                r.steps,
                r.final_cyc,
                kid_of(&r.kid_initial, "A->B"),
                kid_of(&r.kid_final, "A->B"),
                kid_of(&r.kid_initial, "B->A"),
                kid_of(&r.kid_final, "B->A"),
            ));
        }
        s
    }
}

fn kid_of(rs: &[KidReport], direction: &str) -> f64 {
    rs.iter().find(|r| r.direction == direction).map_or(f64::NAN, |r| r.mean)
}

/// Train and evaluate every row of `tables`. Rows whose presets share a file
/// are trained once. Each run lives in `out/<config name>` and is resumed if
/// it already exists. Reports are written to `out/<table>.txt`.
pub fn run_tables(tables: &[Table], opts: &GridOptions) -> Result<Vec<TableReport>> {
    let mut done: HashMap<&'static str, RowResult> = HashMap::new();
    let mut reports = Vec::new();
    for &table in tables {
        let mut rows = Vec::new();
        for &(label, preset) in table.rows() {
            let source = PRESETS.iter().find(|(n, _)| *n == preset).map(|(_, s)| *s).unwrap();
            let result = match done.get(source) {
                Some(r) => r.clone(),
                None => {
                    let r = run_row(preset, opts)?;
                    done.insert(source, r.clone());
                    r
                }
            };
            rows.push(RowResult {
                label: label.to_string(),
                preset: preset.to_string(),
                ..result
            });
        }
        let report = TableReport { table, rows };
        let name = format!("{table:?}").to_lowercase();
        write_file(&opts.out.join(format!("{name}.txt")), report.render())?;
        reports.push(report);
    }
    Ok(reports)
}

fn run_row(preset: &str, opts: &GridOptions) -> Result<RowResult> {
    let args = ConfigArgs {
        config: None,
        preset: Some(preset.to_string()),
        ..opts.overrides.clone()
    };
    let cfg = args.resolve()?;
    let run_dir = opts.out.join(&cfg.name);
    let start = Instant::now();
    let outcome = cmd_train(cfg.clone(), &run_dir, true)?;
    let train_secs = start.elapsed().as_secs_f64();

    let root = data::prepare(&cfg.data)?;
    let ds = Dataset::load(&root, &cfg.data)?;
    let records = read_metrics(&run_dir)?;
    let tail = records.len().min(ds.epoch_len()).max(1);
    let final_cyc = records[records.len().saturating_sub(tail)..].iter().map(|r| r.gen.cyc).sum::<f64>() / tail as f64;

    let kid = |ck: &Path| -> Result<Vec<KidReport>> {
        let (cfg, model) = load_model(&CheckpointPaths::new(ck))?;
        Ok(evaluate(
            &model,
            cfg.guidance.source,
            &ds,
            &[KidMode::TargetOnly],
            &cfg.eval,
            &DeskExtractor::default(),
        )?)
    };
    let checkpoints = run_dir.join("checkpoints");
    let kid_initial = kid(&checkpoints.join(step_dir_name(0)))?;
    let kid_final = kid(&checkpoints.join(step_dir_name(outcome.steps)))?;
    Ok(RowResult {
        label: String::new(),
        preset: preset.to_string(),
        run_dir,
        steps: outcome.steps,
        final_cyc,
        kid_initial,
        kid_final,
        train_secs,
    })
}

/// One-line summary of the guidance settings of `cfg`.
pub fn describe(cfg: &TrainingConfig) -> String {
    format!(
        "merge {:?}, source {:?}, aggregate {:?}, frozen {}, lambda_reg {}, lambda_d {}",
        cfg.guidance.merge, cfg.guidance.source, cfg.guidance.aggregate, cfg.guidance.frozen_zero, cfg.loss.lambda_reg, cfg.train.lambda_d
    )
}
