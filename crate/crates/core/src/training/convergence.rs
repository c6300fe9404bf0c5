use serde::{Deserialize, Serialize};

/// Stopping rule on the per-epoch mean cycle loss: averages over
/// non-overlapping windows of `window` epochs are compared, and training has
/// converged once `patience` consecutive windows improve on their predecessor
/// by a relative amount below `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: usize,
    pub eps: f64,
    pub patience: usize,
    pub epoch_sum: f64,
    pub epoch_count: u64,
    pub pending: Vec<f64>,
    pub last_window: Option<f64>,
    pub stalls: usize,
}

impl Convergence {
    pub fn new(window: usize, eps: f64, patience: usize) -> Self {
        Self {
            window,
            eps,
            patience,
            epoch_sum: 0.0,
            epoch_count: 0,
            pending: Vec::new(),
            last_window: None,
            stalls: 0,
        }
    }

    pub fn record_step(&mut self, cyc: f64) {
        self.epoch_sum += cyc;
        self.epoch_count += 1;
    }

    /// Close the current epoch. Returns true once converged.
    pub fn end_epoch(&mut self) -> bool {
        if self.epoch_count > 0 {
            self.end_epoch_with(self.epoch_sum / self.epoch_count as f64);
        }
        self.epoch_sum = 0.0;
        self.epoch_count = 0;
        self.converged()
    }

    pub fn end_epoch_with(&mut self, epoch_mean: f64) {
        self.pending.push(epoch_mean);
        if self.pending.len() < self.window {
            return;
        }
        let avg = self.pending.iter().sum::<f64>() / self.pending.len() as f64;
        self.pending.clear();
        if let Some(prev) = self.last_window {
            let rel = (prev - avg) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < self.eps {
                self.stalls += 1;
            } else {
                self.stalls = 0;
            }
        }
        self.last_window = Some(avg);
    }

    pub fn converged(&self) -> bool {
        self.stalls >= self.patience
    }
}
