//! Shared training bookkeeping: loss curves and convergence checks.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::TrainingFailure;
use crate::{Error, Result};

/// Per-epoch loss record for one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub stage: String,
    pub seed: u64,
    pub epoch_loss: Vec<f64>,
    /// Held-out metric per evaluation point, if the stage tracks one.
    pub held_out_loss: Vec<f64>,
}

impl TrainingLog {
    pub fn new(stage: impl Into<String>, seed: u64) -> Self {
        TrainingLog {
            stage: stage.into(),
            seed,
            epoch_loss: Vec::new(),
            held_out_loss: Vec::new(),
        }
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(f64::INFINITY)
    }

    /// Error if the final loss did not get below `threshold`.
    pub fn require_convergence(&self, threshold: f64) -> Result<()> {
        let final_loss = self.final_loss();
        if !(final_loss < threshold) {
            return Err(Error::Training(TrainingFailure {
                stage: self.stage.clone(),
                epochs_run: self.epoch_loss.len(),
                final_loss,
                threshold,
                loss_curve: self.epoch_loss.clone(),
            }));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("loss log serialization: {e}")))?;
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Moving average with the given window (as large as available at edges).
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(w - 1);
            let slice = &series[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// True when the `window`-smoothed series is non-increasing over its
/// first `epochs` entries. Used by the training-sanity checks.
pub fn smoothed_monotone_decrease(series: &[f64], epochs: usize, window: usize) -> bool {
    let n = epochs.min(series.len());
    if n < 2 {
        return false;
    }
    let s = smooth(&series[..n], window);
    s.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_flattens_noise() {
        let noisy = vec![10.0, 9.0, 9.5, 8.0, 8.4, 7.0, 7.2, 6.0, 6.1, 5.0];
        assert!(!smoothed_monotone_decrease(&noisy, 10, 1));
        assert!(smoothed_monotone_decrease(&noisy, 10, 3));
    }

    #[test]
    fn increasing_series_rejected() {
        let rising = vec![1.0, 2.0, 3.0, 4.0];
        assert!(!smoothed_monotone_decrease(&rising, 4, 3));
    }

    #[test]
    fn convergence_gate() {
        let mut log = TrainingLog::new("stage", 0);
        log.epoch_loss = vec![1.0, 0.5];
        assert!(log.require_convergence(0.6).is_ok());
        match log.require_convergence(0.4) {
            Err(Error::Training(f)) => {
                assert_eq!(f.epochs_run, 2);
                assert!((f.final_loss - 0.5).abs() < 1e-12);
            }
            other => panic!("expected training failure, got {other:?}"),
        }
    }
}
