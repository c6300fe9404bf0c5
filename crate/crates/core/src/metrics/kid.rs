use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::KidMode;
use crate::error::{Error, Result};
use crate::metrics::EmbeddingSet;
use crate::seed;

/// `(x.y / d + 1)^3`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

fn mmd2_rows(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let within = |s: &[&[f64]]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    total += poly_kernel(s[i], s[j]);
                }
            }
        }
        total
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    within(x) / (n * (n - 1.0)) + within(y) / (m * (m - 1.0)) - 2.0 * cross / (n * m)
}

/// Unbiased squared MMD under [`poly_kernel`].
pub fn mmd2_unbiased(x: &EmbeddingSet, y: &EmbeddingSet) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Invalid(format!(
            "unbiased MMD needs at least 2 samples per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::Invalid(format!("embedding dims differ: {} vs {}", x.dim(), y.dim())));
    }
    let xr: Vec<&[f64]> = x.rows().iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = y.rows().iter().map(Vec::as_slice).collect();
    Ok(mmd2_rows(&xr, &yr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidReport {
    pub direction: String,
    pub mode: KidMode,
    /// KID x 100.
    pub mean: f64,
    /// Standard deviation over subsets, x 100.
    pub std: f64,
    pub subset_size: usize,
    pub num_subsets: usize,
    pub extractor_id: String,
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Rows in a canonical (lexicographic) order, so that subset draws depend on
/// the set of embeddings and not on how the caller ordered them.
fn canonical(set: &EmbeddingSet) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = set.rows().iter().map(Vec::as_slice).collect();
    rows.sort_by(|a, b| lex(a, b));
    rows
}

fn pick<'a>(rows: &[&'a [f64]], rng: &mut rand_chacha::ChaCha8Rng, size: usize) -> Vec<&'a [f64]> {
    let mut idx = index::sample(rng, rows.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i]).collect()
}

/// Mean and standard deviation (population, ddof 0) of the unbiased MMD over
/// `num_subsets` seeded draws of `subset_size` rows from each side, x 100.
///
/// `both-domains` pools `real_source` with `real_target` as the reference set.
#[allow(clippy::too_many_arguments)]
pub fn kid_score(
    direction: &str,
    fake: &EmbeddingSet,
    real_target: &EmbeddingSet,
    real_source: Option<&EmbeddingSet>,
    mode: KidMode,
    subset_size: usize,
    num_subsets: usize,
    seed: u64,
) -> Result<KidReport> {
    let pooled;
    let real = match mode {
        KidMode::TargetOnly => real_target,
        KidMode::BothDomains => {
            let src = real_source.ok_or_else(|| Error::Invalid("both-domains KID needs source images".into()))?;
            pooled = src.concat(real_target)?;
            &pooled
        }
    };
    if fake.extractor_id != real.extractor_id {
        return Err(Error::Invalid(format!(
            "extractor mismatch: `{}` vs `{}`",
            fake.extractor_id, real.extractor_id
        )));
    }
    if subset_size < 2 || subset_size > fake.len() || subset_size > real.len() {
        return Err(Error::Invalid(format!(
            "subset size {subset_size} needs 2 <= size <= min({}, {})",
            fake.len(),
            real.len()
        )));
    }
    if num_subsets == 0 {
        return Err(Error::Invalid("num_subsets must be positive".into()));
    }
    let (fr, rr) = (canonical(fake), canonical(real));
    let mut rng = seed::stream(seed, "kid-subsets");
    let mut values = Vec::with_capacity(num_subsets);
    for _ in 0..num_subsets {
        let xs = pick(&fr, &mut rng, subset_size);
        let ys = pick(&rr, &mut rng, subset_size);
        values.push(mmd2_rows(&xs, &ys));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(KidReport {
        direction: direction.to_string(),
        mode,
        mean: mean * 100.0,
        std: var.sqrt() * 100.0,
        subset_size,
        num_subsets,
        extractor_id: fake.extractor_id.clone(),
    })
}

/// Plain-text table: one row per configuration, one `mean ± std` column per
/// direction, values KID x 100.
pub fn format_kid_table(title: &str, directions: &[&str], rows: &[(String, Vec<KidReport>)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = write!(s, "{:<width$}", "method");
    for d in directions {
        let _ = write!(s, " | {d:^17}");
    }
    s.push('\n');
    let _ = writeln!(s, "{}", "-".repeat(width + directions.len() * 20));
    for (label, reports) in rows {
        let _ = write!(s, "{label:<width$}");
        for d in directions {
            match reports.iter().find(|r| r.direction == *d) {
                Some(r) => {
                    let _ = write!(s, " | {:>7.2} ± {:<7.2}", r.mean, r.std);
                }
                None => {
                    let _ = write!(s, " | {:^17}", "-");
                }
            }
        }
        s.push('\n');
    }
    if let Some(r) = rows.iter().flat_map(|(_, r)| r.first()).next() {
        let _ = writeln!(s, "KID x 100 ± STD x 100; extractor {}", r.extractor_id);
    }
    s
}
