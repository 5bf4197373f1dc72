//! Per-frame autoencoder: tactile image → low-dimensional code.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;

use crate::autodiff::params::{init_uniform, init_xavier};
use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::rng::{stream_rng, Stream};
use crate::training::TrainingLog;
use crate::{Error, Result};

use super::{FrameCode, TactileFrame};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameAeConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    /// d: code dimension.
    pub code_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for FrameAeConfig {
    fn default() -> Self {
        FrameAeConfig {
            frame_h: 24,
            frame_w: 32,
            code_dim: 32,
            hidden: 256,
            seed: 0,
        }
    }
}

impl FrameAeConfig {
    pub fn input_dim(&self) -> usize {
        self.frame_h * self.frame_w * 3
    }
}

pub struct FrameAeModel {
    pub config: FrameAeConfig,
    store: ParamStore,
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    dec_w1: ParamId,
    dec_b1: ParamId,
    dec_w2: ParamId,
    dec_b2: ParamId,
}

impl FrameAeModel {
    pub fn new(config: FrameAeConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(config.seed, Stream::WeightInit);
        let (din, h, d) = (config.input_dim(), config.hidden, config.code_dim);
        let enc_w1 = store.add("enc.w1", init_xavier(&mut rng, din, h));
        let enc_b1 = store.add("enc.b1", Array2::zeros((1, h)));
        let enc_w2 = store.add("enc.w2", init_xavier(&mut rng, h, d));
        let enc_b2 = store.add("enc.b2", Array2::zeros((1, d)));
        let dec_w1 = store.add("dec.w1", init_xavier(&mut rng, d, h));
        let dec_b1 = store.add("dec.b1", Array2::zeros((1, h)));
        let dec_w2 = store.add("dec.w2", init_xavier(&mut rng, h, din));
        let dec_b2 = store.add("dec.b2", init_uniform(&mut rng, 1, din, 0.01));
        FrameAeModel {
            config,
            store,
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            dec_w1,
            dec_b1,
            dec_w2,
            dec_b2,
        }
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Encoder half on a tape: `(B, H*W*3)` → `(B, d)` bounded codes.
    fn encode_on_tape(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let w1 = binder.bind(tape, &self.store, self.enc_w1);
        let b1 = binder.bind(tape, &self.store, self.enc_b1);
        let w2 = binder.bind(tape, &self.store, self.enc_w2);
        let b2 = binder.bind(tape, &self.store, self.enc_b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let c = tape.matmul(h, w2);
        let c = tape.add_row(c, b2);
        tape.tanh(c)
    }

    /// Decoder half: `(B, d)` → `(B, H*W*3)` sigmoid image rows.
    fn decode_on_tape(&self, tape: &mut Tape, binder: &mut Binder, code: Var) -> Var {
        let w1 = binder.bind(tape, &self.store, self.dec_w1);
        let b1 = binder.bind(tape, &self.store, self.dec_b1);
        let w2 = binder.bind(tape, &self.store, self.dec_w2);
        let b2 = binder.bind(tape, &self.store, self.dec_b2);
        let h = tape.matmul(code, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, w2);
        let y = tape.add_row(y, b2);
        tape.sigmoid(y)
    }

    /// Batch encode without gradient bookkeeping.
    pub fn encode_batch(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.config.input_dim() {
            return Err(Error::Dimension {
                context: "frame encode".into(),
                expected: self.config.input_dim(),
                actual: rows.ncols(),
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(rows.clone());
        let code = self.encode_on_tape(&mut tape, &mut binder, x);
        Ok(tape.value(code).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = vec![
            ("frame_h".into(), self.config.frame_h.to_string()),
            ("frame_w".into(), self.config.frame_w.to_string()),
            ("code_dim".into(), self.config.code_dim.to_string()),
            ("hidden".into(), self.config.hidden.to_string()),
        ];
        checkpoint::save(path, "frame_ae", self.config.seed, &meta, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        checkpoint::expect_kind(&ckpt, "frame_ae")?;
        let config = FrameAeConfig {
            frame_h: ckpt.meta_usize("frame_h")?,
            frame_w: ckpt.meta_usize("frame_w")?,
            code_dim: ckpt.meta_usize("code_dim")?,
            hidden: ckpt.meta_usize("hidden")?,
            seed: ckpt.seed,
        };
        let mut model = FrameAeModel::new(config);
        model.store.load_blob(&ckpt.blob)?;
        Ok(model)
    }
}

/// Encodes one frame. Deterministic: identical frames yield identical codes.
pub fn frame_encode(frame: &TactileFrame, model: &FrameAeModel) -> Result<FrameCode> {
    if frame.height() != model.config.frame_h || frame.width() != model.config.frame_w {
        return Err(Error::Dimension {
            context: "frame_encode image".into(),
            expected: model.config.frame_h * model.config.frame_w,
            actual: frame.height() * frame.width(),
        });
    }
    let flat = frame.flat_f64();
    let rows = flat.insert_axis(ndarray::Axis(0));
    let codes = model.encode_batch(&rows)?;
    Ok(FrameCode {
        code: codes.row(0).to_owned(),
    })
}

/// Decodes a code back to an `(H, W, 3)` image in `[0,1]`.
pub fn frame_decode(code: &FrameCode, model: &FrameAeModel) -> Result<Array3<f64>> {
    if code.code.len() != model.config.code_dim {
        return Err(Error::Dimension {
            context: "frame_decode code".into(),
            expected: model.config.code_dim,
            actual: code.code.len(),
        });
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let c = tape.constant(
        code.code
            .clone()
            .insert_axis(ndarray::Axis(0)),
    );
    let y = model.decode_on_tape(&mut tape, &mut binder, c);
    let row = tape.value(y).row(0).to_owned();
    let (h, w) = (model.config.frame_h, model.config.frame_w);
    Array3::from_shape_vec((h, w, 3), row.to_vec())
        .map_err(|_| Error::Format("decoded frame reshape".into()))
}

/// Mean reconstruction MSE of the model over a set of frame rows.
pub fn reconstruction_mse(model: &FrameAeModel, rows: &Array2<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let x = tape.constant(rows.clone());
    let code = model.encode_on_tape(&mut tape, &mut binder, x);
    let y = model.decode_on_tape(&mut tape, &mut binder, code);
    let loss = tape.mse_mean(y, rows.clone());
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone)]
pub struct FrameAeTrainConfig {
    pub model: FrameAeConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub fail_threshold: f64,
}

impl Default for FrameAeTrainConfig {
    fn default() -> Self {
        FrameAeTrainConfig {
            model: FrameAeConfig::default(),
            epochs: 12,
            batch: 64,
            lr: 1e-3,
            fail_threshold: 0.05,
        }
    }
}

/// Trains the frame autoencoder on flattened frame rows.
pub fn train_frame_ae(
    frames: &[TactileFrame],
    cfg: &FrameAeTrainConfig,
) -> Result<(FrameAeModel, TrainingLog)> {
    if frames.is_empty() {
        return Err(Error::invalid("frame autoencoder needs a nonempty dataset"));
    }
    for f in frames {
        if f.height() != cfg.model.frame_h || f.width() != cfg.model.frame_w {
            return Err(Error::Dimension {
                context: "train_frame_ae frame size".into(),
                expected: cfg.model.frame_h,
                actual: f.height(),
            });
        }
    }
    let din = cfg.model.input_dim();
    let mut data = Array2::zeros((frames.len(), din));
    for (i, f) in frames.iter().enumerate() {
        data.row_mut(i).assign(&f.flat_f64());
    }

    let mut model = FrameAeModel::new(cfg.model.clone());
    let mut log = TrainingLog::new("frame_ae", cfg.model.seed);
    let mut order_rng = stream_rng(cfg.model.seed, Stream::DataOrder);
    let mut order: Vec<usize> = (0..frames.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Array2::zeros((chunk.len(), din));
            for (bi, &i) in chunk.iter().enumerate() {
                batch.row_mut(bi).assign(&data.row(i));
            }
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.constant(batch.clone());
            let code = model.encode_on_tape(&mut tape, &mut binder, x);
            let y = model.decode_on_tape(&mut tape, &mut binder, code);
            let loss = tape.mse_mean(y, batch);
            epoch_loss += tape.scalar(loss);
            steps += 1;
            tape.backward(loss);
            binder.write_grads(&tape, &mut model.store);
            model.store.adam_step(cfg.lr);
        }
        log.epoch_loss.push(epoch_loss / steps as f64);
    }

    log.require_convergence(cfg.fail_threshold)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tactile::Finger;
    use rand::Rng;

    fn synthetic_frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<TactileFrame> {
        // smooth gradient frames, the same family the simulator renders
        let mut rng = stream_rng(seed, Stream::Fuzz);
        (0..n)
            .map(|i| {
                let ax = rng.gen_range(-0.3..0.3);
                let ay = rng.gen_range(-0.3..0.3);
                let img = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                    let v = 0.5
                        + ax * (x as f32 / w as f32 - 0.5) as f64
                        + ay * (y as f32 / h as f32 - 0.5) as f64
                        + 0.05 * c as f64;
                    v.clamp(0.0, 1.0) as f32
                });
                TactileFrame::new(img, Finger::Left, i).unwrap()
            })
            .collect()
    }

    #[test]
    fn encode_is_deterministic_with_right_dim() {
        let cfg = FrameAeConfig {
            frame_h: 8,
            frame_w: 10,
            code_dim: 6,
            hidden: 32,
            seed: 1,
        };
        let model = FrameAeModel::new(cfg);
        let frame = &synthetic_frames(1, 8, 10, 2)[0];
        let a = frame_encode(frame, &model).unwrap();
        let b = frame_encode(frame, &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.code.len(), 6);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = FrameAeModel::new(FrameAeConfig {
            frame_h: 8,
            frame_w: 10,
            code_dim: 6,
            hidden: 32,
            seed: 1,
        });
        let frame = &synthetic_frames(1, 6, 6, 3)[0];
        assert!(frame_encode(frame, &model).is_err());
    }

    #[test]
    fn training_reconstructs_smooth_frames() {
        let frames = synthetic_frames(200, 8, 10, 4);
        let cfg = FrameAeTrainConfig {
            model: FrameAeConfig {
                frame_h: 8,
                frame_w: 10,
                code_dim: 8,
                hidden: 48,
                seed: 5,
            },
            epochs: 30,
            batch: 32,
            lr: 2e-3,
            fail_threshold: 0.05,
        };
        let (model, log) = train_frame_ae(&frames, &cfg).unwrap();
        assert!(log.final_loss() < 0.01, "final loss {}", log.final_loss());

        // held-out frames from the same family
        let held = synthetic_frames(40, 8, 10, 99);
        let mut rows = Array2::zeros((held.len(), cfg.model.input_dim()));
        for (i, f) in held.iter().enumerate() {
            rows.row_mut(i).assign(&f.flat_f64());
        }
        let mse = reconstruction_mse(&model, &rows).unwrap();
        assert!(mse < 0.02, "held-out reconstruction MSE {mse}");
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let frames = synthetic_frames(50, 6, 8, 6);
        let cfg = FrameAeTrainConfig {
            model: FrameAeConfig {
                frame_h: 6,
                frame_w: 8,
                code_dim: 4,
                hidden: 16,
                seed: 9,
            },
            epochs: 2,
            batch: 16,
            lr: 1e-3,
            fail_threshold: 10.0,
        };
        let (a, _) = train_frame_ae(&frames, &cfg).unwrap();
        let (b, _) = train_frame_ae(&frames, &cfg).unwrap();
        assert_eq!(a.store.to_blob(), b.store.to_blob());
    }

    #[test]
    fn decode_round_trip_shape_and_range() {
        let model = FrameAeModel::new(FrameAeConfig {
            frame_h: 8,
            frame_w: 10,
            code_dim: 6,
            hidden: 32,
            seed: 1,
        });
        let frame = &synthetic_frames(1, 8, 10, 7)[0];
        let code = frame_encode(frame, &model).unwrap();
        let img = frame_decode(&code, &model).unwrap();
        assert_eq!(img.shape(), &[8, 10, 3]);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
