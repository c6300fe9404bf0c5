//! Embeddings, KID and embedding-based dataset subsampling.

pub mod extractor;
pub mod kid;
pub mod subsample;

pub use extractor::{embed_images, DeskExtractor, Extractor};
pub use kid::{format_kid_table, kid_score, mmd2_unbiased, poly_kernel, KidReport};
pub use subsample::subsample_dataset;

use std::collections::BTreeMap;
use std::path::Path;

use guidegan_tensor::{Tensor, TensorArchive};

use crate::error::{Error, Result};

/// `n x d` embeddings plus the identity of the extractor that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    rows: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.len();
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Invalid("embedding rows must share a nonzero dimension".into()));
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embeddings must be finite".into()));
        }
        Ok(Self {
            rows,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.extractor_id != other.extractor_id {
            return Err(Error::Invalid(format!(
                "extractor mismatch: `{}` vs `{}`",
                self.extractor_id, other.extractor_id
            )));
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Self::new(rows, self.extractor_id.clone())
    }

    /// Save as a tensor archive with `extractor_id` and the image names in its manifest.
    pub fn save(&self, path: &Path, names: &[String]) -> Result<()> {
        let mut ar = TensorArchive::new();
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        ar.push("embeddings", Tensor::new(vec![self.len(), self.dim()], flat)?);
        ar.metadata = BTreeMap::from([
            ("extractor_id".to_string(), self.extractor_id.clone()),
            ("filenames".to_string(), serde_json::to_string(names)?),
        ]);
        ar.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let ar = TensorArchive::load(path)?;
        let t = ar.get::<f64>("embeddings")?;
        let id = ar
            .metadata
            .get("extractor_id")
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("{}: no extractor_id", path.display())))?;
        let names = match ar.metadata.get("filenames") {
            Some(s) => serde_json::from_str(s)?,
            None => Vec::new(),
        };
        let d = t.shape()[1];
        let rows = t.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect();
        Ok((Self::new(rows, id)?, names))
    }
}
