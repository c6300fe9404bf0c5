use std::fmt::Write;

use guidegan_core::gradsuite::check_compositions;
use guidegan_tensor::check_catalog;
use guidegan_tensor::fault::{self, Fault};

use crate::Result;

pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub dtype: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4);
        let mut s = String::new();
        for r in &self.rows {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{:<width$}  {}  trials {:>4}  max rel err {:.3e}  (tol {:.0e})  {verdict}",
                r.name, r.dtype, r.trials, r.max_rel_error, r.tolerance
            );
        }
        let failed = self.rows.iter().filter(|r| !r.passed()).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.rows.len());
        s
    }
}

/// Gradient-check the op catalog and every loss composition in both
/// precisions. With `inject` set the fault is armed for the duration.
pub fn cmd_gradcheck(trials: usize, seed: u64, inject: Option<Fault>) -> Result<GradcheckReport> {
    if let Some(f) = inject {
        fault::arm(f);
    }
    let out = run(trials, seed);
    fault::disarm_all();
    out
}

fn run(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rows = Vec::new();
    for op in check_catalog::<f64>(trials, 1e-5, seed)? {
        rows.push(GradcheckRow {
            name: op.kind.to_string(),
            dtype: "f64",
            trials,
            max_rel_error: op.max_rel_error,
            tolerance: TOL_F64,
        });
    }
    for op in check_catalog::<f32>(trials, 1e-2, seed + 1)? {
        rows.push(GradcheckRow {
            name: op.kind.to_string(),
            dtype: "f32",
            trials,
            max_rel_error: op.max_rel_error,
            tolerance: TOL_F32,
        });
    }
    for c in check_compositions(trials, seed + 2)? {
        let (dtype, tolerance) = if c.dtype == "f64" { ("f64", TOL_F64) } else { ("f32", TOL_F32) };
        rows.push(GradcheckRow {
            name: c.name,
            dtype,
            trials,
            max_rel_error: c.max_rel_error,
            tolerance,
        });
    }
    Ok(GradcheckReport { rows })
}
