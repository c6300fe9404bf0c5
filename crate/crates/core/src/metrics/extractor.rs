use guidegan_tensor::{Graph, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::EmbeddingSet;
use crate::seed;

/// Maps a `3 x H x W` image in `[-1, 1]` to a feature vector.
pub trait Extractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// Fixed random convolutional features for hermetic desk-scale evaluation.
///
/// `conv 3->16 k4 s2 p1, ReLU -> conv 16->32 k4 s2 p1, ReLU`; the embedding is
/// the concatenated global averages of both activations (48 values). Weights
/// are `N(0, 2/fan_in)`, biases `U(-0.1, 0.1)`, all from `seed`.
#[derive(Clone, Debug)]
pub struct DeskExtractor {
    pub seed: u64,
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

pub const DESK_EXTRACTOR_SEED: u64 = 0x006b_6964;

impl Default for DeskExtractor {
    fn default() -> Self {
        Self::new(DESK_EXTRACTOR_SEED)
    }
}

impl DeskExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::stream(seed, "desk-extractor");
        let w1 = Tensor::randn(vec![16, 3, 4, 4], (2.0 / 48.0f64).sqrt(), &mut rng);
        let b1 = Tensor::from_fn(vec![16], |_| rng.random_range(-0.1..0.1));
        let w2 = Tensor::randn(vec![32, 16, 4, 4], (2.0 / 256.0f64).sqrt(), &mut rng);
        let b2 = Tensor::from_fn(vec![32], |_| rng.random_range(-0.1..0.1));
        Self { seed, w1, b1, w2, b2 }
    }
}

impl Extractor for DeskExtractor {
    fn id(&self) -> String {
        format!("desk-randconv-48-v1-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        48
    }

    fn embed(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        if image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1] < 4 || image.shape()[2] < 4 {
            return Err(Error::Invalid(format!(
                "desk extractor expects a 3 x H x W image (H, W >= 4), got {:?}",
                image.shape()
            )));
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(image.cast());
        let (w1, b1) = (g.constant(self.w1.clone()), g.constant(self.b1.clone()));
        let (w2, b2) = (g.constant(self.w2.clone()), g.constant(self.b2.clone()));
        let h1 = g.conv2d(x, w1, Some(b1), 2, 1)?;
        let h1 = g.relu(h1);
        let h2 = g.conv2d(h1, w2, Some(b2), 2, 1)?;
        let h2 = g.relu(h2);
        let p1 = g.global_avg_pool(h1)?;
        let p2 = g.global_avg_pool(h2)?;
        let f = g.concat(&[p1, p2])?;
        Ok(g.value(f).data().to_vec())
    }
}

pub fn embed_images<'a, E: Extractor + ?Sized>(
    images: impl IntoIterator<Item = &'a Tensor<f32>>,
    extractor: &E,
) -> Result<EmbeddingSet> {
    let rows = images
        .into_iter()
        .map(|im| extractor.embed(im))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(rows, extractor.id())
}
