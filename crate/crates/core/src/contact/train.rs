//! Contact-head training.
//!
//! The trainer consumes precomputed per-trajectory caches (descriptors
//! are pose-invariant, so one descriptor matrix serves a whole
//! trajectory) and teacher-forces the history inputs from ground-truth
//! labels. Loss is per-point binary NLL; the optimizer is Adam at the
//! configured rate (default 1e-4).

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{Binder, Tape};
use crate::geometry::{PoseDelta, RigidTransform};
use crate::rng::{item_rng, stream_rng, Stream};
use crate::training::TrainingLog;
use crate::{Error, Result};

use super::{
    assemble_inputs, ContactHistory, EmbeddingInput, EmbeddingSource, HistoryMode, NcfConfig,
    NcfMode, NcfModel,
};

/// Precomputed inputs for one trajectory.
pub struct TrajectoryUnit {
    /// `(N, n)` descriptors of the trajectory's fixed query set.
    pub z: Array2<f64>,
    /// Per-timestep conditioning rows: motion embeddings `(T, m)` for the
    /// sequence source, or current frame-code pairs `(T, 2d)` for the
    /// single-frame source.
    pub embeddings: Array2<f64>,
    /// `(T, N)` ground-truth contact labels.
    pub labels: Array2<f64>,
    /// Per-timestep (lag-1, lag-2) end-effector pose deltas.
    pub deltas: Vec<[RigidTransform; 2]>,
}

impl TrajectoryUnit {
    pub fn steps(&self) -> usize {
        self.labels.nrows()
    }

    pub fn queries(&self) -> usize {
        self.labels.ncols()
    }

    /// Teacher-forced history at timestep `t` from ground-truth labels.
    pub fn teacher_history(&self, t: usize, mode: HistoryMode) -> ContactHistory {
        let n = self.queries();
        let prior = match mode {
            HistoryMode::NoContactPrior => Array1::zeros(n),
            HistoryMode::GroundTruthPrior => self.labels.row(0).to_owned(),
        };
        let p1 = if t >= 1 {
            self.labels.row(t - 1).to_owned()
        } else {
            prior.clone()
        };
        let p2 = if t >= 2 {
            self.labels.row(t - 2).to_owned()
        } else {
            prior
        };
        let mut probs = Array2::zeros((n, 2));
        for i in 0..n {
            probs[(i, 0)] = p1[i];
            probs[(i, 1)] = p2[i];
        }
        ContactHistory {
            probs,
            deltas: [
                PoseDelta {
                    delta: self.deltas[t][0],
                    lag: 1,
                },
                PoseDelta {
                    delta: self.deltas[t][1],
                    lag: 2,
                },
            ],
        }
    }
}

pub struct NcfDataset {
    pub units: Vec<TrajectoryUnit>,
}

impl NcfDataset {
    pub fn validate(&self, config: &NcfConfig) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::invalid("contact-head training needs >= 1 trajectory"));
        }
        let expect_embed = match config.embedding_source {
            EmbeddingSource::Sequence => config.embed_dim,
            EmbeddingSource::CurrentFramePair { frame_code_dim } => 2 * frame_code_dim,
        };
        let mut any_contact = false;
        for (i, u) in self.units.iter().enumerate() {
            if u.z.ncols() != config.descriptor_dim {
                return Err(Error::Dimension {
                    context: format!("unit {i} descriptors"),
                    expected: config.descriptor_dim,
                    actual: u.z.ncols(),
                });
            }
            if u.embeddings.ncols() != expect_embed {
                return Err(Error::Dimension {
                    context: format!("unit {i} embeddings"),
                    expected: expect_embed,
                    actual: u.embeddings.ncols(),
                });
            }
            if u.embeddings.nrows() != u.steps() || u.deltas.len() != u.steps() {
                return Err(Error::invalid(format!(
                    "unit {i} has inconsistent per-timestep lengths"
                )));
            }
            if u.labels.iter().any(|v| *v > 0.0) {
                any_contact = true;
            }
        }
        if !any_contact {
            // legal (degenerate) but worth rejecting only if the caller
            // asked for contact events; trainer handles it, so accept.
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NcfTrainConfig {
    pub model: NcfConfig,
    pub epochs: usize,
    /// Timestep samples drawn per epoch.
    pub steps_per_epoch: usize,
    /// Query points subsampled per step.
    pub batch_queries: usize,
    /// Adam learning rate; default 1e-4.
    pub lr: f64,
    pub history_mode: HistoryMode,
    pub fail_threshold: f64,
}

impl Default for NcfTrainConfig {
    fn default() -> Self {
        NcfTrainConfig {
            model: NcfConfig::default(),
            epochs: 10,
            steps_per_epoch: 600,
            batch_queries: 96,
            lr: 1e-4,
            history_mode: HistoryMode::GroundTruthPrior,
            fail_threshold: 0.5,
        }
    }
}

/// Trains the contact head on teacher-forced trajectories.
pub fn train_ncf(dataset: &NcfDataset, cfg: &NcfTrainConfig) -> Result<(NcfModel, TrainingLog)> {
    dataset.validate(&cfg.model)?;
    if cfg.batch_queries < 2 {
        return Err(Error::Config(
            "batch_queries must be >= 2 (batch statistics need a batch)".into(),
        ));
    }
    let mut model = NcfModel::new(cfg.model.clone())?;
    let mut log = TrainingLog::new("ncf", cfg.model.seed);
    let mut order_rng = stream_rng(cfg.model.seed, Stream::DataOrder);
    let mut global_step = 0u64;

    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let ui = order_rng.gen_range(0..dataset.units.len());
            let unit = &dataset.units[ui];
            let t = order_rng.gen_range(0..unit.steps());
            let n = unit.queries();
            let b = cfg.batch_queries.min(n);
            // sample query rows without replacement
            let mut rows: Vec<usize> = (0..n).collect();
            for i in 0..b {
                let j = order_rng.gen_range(i..n);
                rows.swap(i, j);
            }
            rows.truncate(b);

            let hist_full = unit.teacher_history(t, cfg.history_mode);
            let mut z = Array2::zeros((b, cfg.model.descriptor_dim));
            let mut probs = Array2::zeros((b, 2));
            let mut targets = Array2::zeros((b, 1));
            for (bi, &r) in rows.iter().enumerate() {
                z.row_mut(bi).assign(&unit.z.row(r));
                probs[(bi, 0)] = hist_full.probs[(r, 0)];
                probs[(bi, 1)] = hist_full.probs[(r, 1)];
                targets[(bi, 0)] = unit.labels[(t, r)];
            }
            let hist = ContactHistory {
                probs,
                deltas: hist_full.deltas,
            };
            let inputs = assemble_inputs(&z, &hist, &cfg.model)?;
            let e_row = unit.embeddings.row(t).to_owned();
            let me;
            let embed_input = match cfg.model.embedding_source {
                EmbeddingSource::Sequence => {
                    me = crate::tactile::MotionEmbedding { e: e_row };
                    EmbeddingInput::Sequence(&me)
                }
                EmbeddingSource::CurrentFramePair { .. } => EmbeddingInput::FramePair({
                    me = crate::tactile::MotionEmbedding { e: e_row };
                    &me.e
                }),
            };

            let mut dropout_rng = item_rng(cfg.model.seed, Stream::Dropout, global_step);
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let (logits, updates) = model.forward_on_tape(
                &mut tape,
                &mut binder,
                &inputs,
                &embed_input,
                NcfMode::Train,
                Some(&mut dropout_rng),
            )?;
            let loss = tape.bce_with_logits_mean(logits, targets);
            epoch_loss += tape.scalar(loss);
            tape.backward(loss);
            binder.write_grads(&tape, model.store_mut());
            model.store_mut().adam_step(cfg.lr);
            model.apply_stat_updates(updates);
            global_step += 1;
        }
        log.epoch_loss.push(epoch_loss / cfg.steps_per_epoch as f64);
    }

    log.require_convergence(cfg.fail_threshold)?;
    Ok((model, log))
}
