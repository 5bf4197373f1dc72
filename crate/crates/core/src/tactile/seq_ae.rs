//! Sequence-to-sequence autoencoder over tactile tokens.
//!
//! The default cell is a gated recurrent cell over flat tokens (the
//! token is a 1-D concatenation, so a convolutional cell degenerates to
//! a dense one). A convolutional variant that keeps frames as 2-D maps
//! is available behind [`SeqCell::Conv`]; there the per-step input is
//! the stacked left/right frame channels plus the pose broadcast as
//! constant channels, and the gates are 3x3 convolutions.
//!
//! The motion embedding is the encoder's last hidden state. The decoder
//! unrolls from it with no step inputs and reconstructs the token
//! sequence; training is plain reconstruction MSE.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::autodiff::params::init_xavier;
use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::rng::{stream_rng, Stream};
use crate::training::TrainingLog;
use crate::{Error, Result};

use super::{
    build_token, frame_encode, FrameAeModel, MotionEmbedding, TactileSequence, SEQUENCE_LEN,
};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SeqCell {
    /// Dense gated cell over flat tokens (default).
    Flat,
    /// Convolutional gated cell over `(H, W)` maps.
    Conv { hidden_channels: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeqAeConfig {
    /// Per-step input width: `2d+7` for flat tokens, `H*W*13` for maps.
    pub input_dim: usize,
    /// m: motion embedding dimension.
    pub embed_dim: usize,
    pub cell: SeqCell,
    /// Map geometry, used by the conv cell only.
    pub frame_h: usize,
    pub frame_w: usize,
    pub seed: u64,
}

impl Default for SeqAeConfig {
    fn default() -> Self {
        SeqAeConfig {
            input_dim: 71,
            embed_dim: 128,
            cell: SeqCell::Flat,
            frame_h: 24,
            frame_w: 32,
            seed: 0,
        }
    }
}

/// Channels per map-step in conv mode: 3 per finger + 7 pose channels.
pub const MAP_CHANNELS: usize = 13;

struct GruParams {
    wz: ParamId,
    bz: ParamId,
    wr: ParamId,
    br: ParamId,
    wn: ParamId,
    bn: ParamId,
}

impl GruParams {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        GruParams {
            wz: store.add(format!("{prefix}.wz"), init_xavier(rng, in_dim + hidden, hidden)),
            bz: store.add(format!("{prefix}.bz"), Array2::zeros((1, hidden))),
            wr: store.add(format!("{prefix}.wr"), init_xavier(rng, in_dim + hidden, hidden)),
            br: store.add(format!("{prefix}.br"), Array2::zeros((1, hidden))),
            wn: store.add(format!("{prefix}.wn"), init_xavier(rng, in_dim + hidden, hidden)),
            bn: store.add(format!("{prefix}.bn"), Array2::zeros((1, hidden))),
        }
    }
}

struct BoundGru {
    wz: Var,
    bz: Var,
    wr: Var,
    br: Var,
    wn: Var,
    bn: Var,
}

fn bind_gru(tape: &mut Tape, binder: &mut Binder, store: &ParamStore, p: &GruParams) -> BoundGru {
    BoundGru {
        wz: binder.bind(tape, store, p.wz),
        bz: binder.bind(tape, store, p.bz),
        wr: binder.bind(tape, store, p.wr),
        br: binder.bind(tape, store, p.br),
        wn: binder.bind(tape, store, p.wn),
        bn: binder.bind(tape, store, p.bn),
    }
}

/// One gated-cell update. `x = None` runs the input-free decoder form.
fn gru_step(tape: &mut Tape, x: Option<Var>, h: Var, g: &BoundGru) -> Var {
    let xa = match x {
        Some(x) => tape.concat_cols(&[x, h]),
        None => h,
    };
    let z = tape.matmul(xa, g.wz);
    let z = tape.add_row(z, g.bz);
    let z = tape.sigmoid(z);
    let r = tape.matmul(xa, g.wr);
    let r = tape.add_row(r, g.br);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h);
    let xn = match x {
        Some(x) => tape.concat_cols(&[x, rh]),
        None => rh,
    };
    let n = tape.matmul(xn, g.wn);
    let n = tape.add_row(n, g.bn);
    let n = tape.tanh(n);
    // h' = (1-z) ⊙ h + z ⊙ n
    let zh = tape.mul(z, h);
    let zn = tape.mul(z, n);
    let keep = tape.sub(h, zh);
    tape.add(keep, zn)
}

struct FlatParams {
    enc: GruParams,
    dec: GruParams,
    out_w: ParamId,
    out_b: ParamId,
}

struct ConvGruParams {
    /// Input kernels `(ch, cin*9)`; absent for the input-free decoder.
    kxz: Option<ParamId>,
    kxr: Option<ParamId>,
    kxn: Option<ParamId>,
    khz: ParamId,
    khr: ParamId,
    khn: ParamId,
    bz: ParamId,
    br: ParamId,
    bn: ParamId,
}

impl ConvGruParams {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        cin: Option<usize>,
        ch: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let mut kx = |name: &str| {
            cin.map(|c| store.add(format!("{prefix}.{name}"), init_xavier(rng, ch, c * 9)))
        };
        let kxz = kx("kxz");
        let kxr = kx("kxr");
        let kxn = kx("kxn");
        ConvGruParams {
            kxz,
            kxr,
            kxn,
            khz: store.add(format!("{prefix}.khz"), init_xavier(rng, ch, ch * 9)),
            khr: store.add(format!("{prefix}.khr"), init_xavier(rng, ch, ch * 9)),
            khn: store.add(format!("{prefix}.khn"), init_xavier(rng, ch, ch * 9)),
            bz: store.add(format!("{prefix}.bz"), Array2::zeros((1, ch))),
            br: store.add(format!("{prefix}.br"), Array2::zeros((1, ch))),
            bn: store.add(format!("{prefix}.bn"), Array2::zeros((1, ch))),
        }
    }
}

struct ConvParams {
    enc: ConvGruParams,
    dec: ConvGruParams,
    embed_w: ParamId,
    embed_b: ParamId,
    dehid_w: ParamId,
    dehid_b: ParamId,
    out_k: ParamId,
    out_b: ParamId,
}

enum ModelKind {
    Flat(FlatParams),
    Conv(ConvParams),
}

pub struct SeqAeModel {
    pub config: SeqAeConfig,
    store: ParamStore,
    kind: ModelKind,
}

impl SeqAeModel {
    pub fn new(config: SeqAeConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(config.seed, Stream::WeightInit);
        let m = config.embed_dim;
        let kind = match config.cell {
            SeqCell::Flat => {
                let enc = GruParams::build(&mut store, "enc", config.input_dim, m, &mut rng);
                let dec = GruParams::build(&mut store, "dec", 0, m, &mut rng);
                let out_w = store.add("out.w", init_xavier(&mut rng, m, config.input_dim));
                let out_b = store.add("out.b", Array2::zeros((1, config.input_dim)));
                ModelKind::Flat(FlatParams {
                    enc,
                    dec,
                    out_w,
                    out_b,
                })
            }
            SeqCell::Conv { hidden_channels } => {
                let expect = config.frame_h * config.frame_w * MAP_CHANNELS;
                if config.input_dim != expect {
                    return Err(Error::Config(format!(
                        "conv cell input_dim {} must equal H*W*{MAP_CHANNELS} = {expect}",
                        config.input_dim
                    )));
                }
                let ch = hidden_channels;
                let enc =
                    ConvGruParams::build(&mut store, "enc", Some(MAP_CHANNELS), ch, &mut rng);
                let dec = ConvGruParams::build(&mut store, "dec", None, ch, &mut rng);
                let embed_w = store.add("embed.w", init_xavier(&mut rng, ch, m));
                let embed_b = store.add("embed.b", Array2::zeros((1, m)));
                let dehid_w = store.add("dehid.w", init_xavier(&mut rng, m, ch));
                let dehid_b = store.add("dehid.b", Array2::zeros((1, ch)));
                let out_k = store.add("out.k", init_xavier(&mut rng, MAP_CHANNELS, ch));
                let out_b = store.add("out.b", Array2::zeros((1, MAP_CHANNELS)));
                ModelKind::Conv(ConvParams {
                    enc,
                    dec,
                    embed_w,
                    embed_b,
                    dehid_w,
                    dehid_b,
                    out_k,
                    out_b,
                })
            }
        };
        Ok(SeqAeModel {
            config,
            store,
            kind,
        })
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Encoder over a batch: rows are flattened `(SEQUENCE_LEN * input_dim)`
    /// sequences, oldest step first. Returns the `(B, m)` embedding node.
    fn encode_on_tape(&self, tape: &mut Tape, binder: &mut Binder, seqs: Var) -> Var {
        let b = tape.value(seqs).nrows();
        let din = self.config.input_dim;
        match &self.kind {
            ModelKind::Flat(p) => {
                let g = bind_gru(tape, binder, &self.store, &p.enc);
                let mut h = tape.constant(Array2::zeros((b, self.config.embed_dim)));
                for t in 0..SEQUENCE_LEN {
                    let x = tape.slice_cols(seqs, t * din, din);
                    h = gru_step(tape, Some(x), h, &g);
                }
                h
            }
            ModelKind::Conv(p) => {
                let (h_, w_) = (self.config.frame_h, self.config.frame_w);
                let ch = self.conv_hidden();
                let g = self.bind_conv_gru(tape, binder, &p.enc);
                let mut h = tape.constant(Array2::zeros((b, h_ * w_ * ch)));
                for t in 0..SEQUENCE_LEN {
                    let x = tape.slice_cols(seqs, t * din, din);
                    h = self.conv_gru_step(tape, Some(x), h, &g);
                }
                // spatial mean pool, then a dense head to the embedding
                let pool = tape.constant(pool_matrix(h_ * w_, ch));
                let pooled = tape.matmul(h, pool);
                let ew = binder.bind(tape, &self.store, p.embed_w);
                let eb = binder.bind(tape, &self.store, p.embed_b);
                let e = tape.matmul(pooled, ew);
                let e = tape.add_row(e, eb);
                tape.tanh(e)
            }
        }
    }

    /// Decoder: `(B, m)` embedding → `(B, SEQUENCE_LEN * input_dim)`.
    fn decode_on_tape(&self, tape: &mut Tape, binder: &mut Binder, e: Var) -> Var {
        match &self.kind {
            ModelKind::Flat(p) => {
                let g = bind_gru(tape, binder, &self.store, &p.dec);
                let ow = binder.bind(tape, &self.store, p.out_w);
                let ob = binder.bind(tape, &self.store, p.out_b);
                let mut h = e;
                let mut outs = Vec::with_capacity(SEQUENCE_LEN);
                for _ in 0..SEQUENCE_LEN {
                    h = gru_step(tape, None, h, &g);
                    let o = tape.matmul(h, ow);
                    let o = tape.add_row(o, ob);
                    outs.push(o);
                }
                tape.concat_cols(&outs)
            }
            ModelKind::Conv(p) => {
                let (h_, w_) = (self.config.frame_h, self.config.frame_w);
                let ch = self.conv_hidden();
                let dw = binder.bind(tape, &self.store, p.dehid_w);
                let db = binder.bind(tape, &self.store, p.dehid_b);
                let seed = tape.matmul(e, dw);
                let seed = tape.add_row(seed, db);
                let seed = tape.tanh(seed);
                let tile = tape.constant(tile_matrix(h_ * w_, ch));
                let mut h = tape.matmul(seed, tile);
                let g = self.bind_conv_gru(tape, binder, &p.dec);
                let ok = binder.bind(tape, &self.store, p.out_k);
                let ob = binder.bind(tape, &self.store, p.out_b);
                let mut outs = Vec::with_capacity(SEQUENCE_LEN);
                for _ in 0..SEQUENCE_LEN {
                    h = self.conv_gru_step(tape, None, h, &g);
                    let o = tape.conv2d_same(h, ok, h_, w_, ch, 1, 1);
                    let o = tape.add_channel_bias(o, ob, MAP_CHANNELS);
                    outs.push(o);
                }
                tape.concat_cols(&outs)
            }
        }
    }

    fn conv_hidden(&self) -> usize {
        match self.config.cell {
            SeqCell::Conv { hidden_channels } => hidden_channels,
            SeqCell::Flat => unreachable!("conv helper on flat model"),
        }
    }

    fn bind_conv_gru(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        p: &ConvGruParams,
    ) -> BoundConvGru {
        BoundConvGru {
            kxz: p.kxz.map(|id| binder.bind(tape, &self.store, id)),
            kxr: p.kxr.map(|id| binder.bind(tape, &self.store, id)),
            kxn: p.kxn.map(|id| binder.bind(tape, &self.store, id)),
            khz: binder.bind(tape, &self.store, p.khz),
            khr: binder.bind(tape, &self.store, p.khr),
            khn: binder.bind(tape, &self.store, p.khn),
            bz: binder.bind(tape, &self.store, p.bz),
            br: binder.bind(tape, &self.store, p.br),
            bn: binder.bind(tape, &self.store, p.bn),
        }
    }

    /// Convolutional gate update. Gate preactivations for stacked inputs
    /// split into separate convolutions over x and h (exact by linearity).
    fn conv_gru_step(&self, tape: &mut Tape, x: Option<Var>, h: Var, g: &BoundConvGru) -> Var {
        let (hh, ww) = (self.config.frame_h, self.config.frame_w);
        let ch = self.conv_hidden();
        let gate = |tape: &mut Tape, kx: Option<Var>, kh: Var, b: Var, hin: Var| -> Var {
            let mut pre = tape.conv2d_same(hin, kh, hh, ww, ch, 3, 3);
            if let (Some(x), Some(kx)) = (x, kx) {
                let px = tape.conv2d_same(x, kx, hh, ww, MAP_CHANNELS, 3, 3);
                pre = tape.add(pre, px);
            }
            tape.add_channel_bias(pre, b, ch)
        };
        let z = gate(tape, g.kxz, g.khz, g.bz, h);
        let z = tape.sigmoid(z);
        let r = gate(tape, g.kxr, g.khr, g.br, h);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let n = gate(tape, g.kxn, g.khn, g.bn, rh);
        let n = tape.tanh(n);
        let zh = tape.mul(z, h);
        let zn = tape.mul(z, n);
        let keep = tape.sub(h, zh);
        tape.add(keep, zn)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let cell = match self.config.cell {
            SeqCell::Flat => "flat".to_string(),
            SeqCell::Conv { hidden_channels } => format!("conv:{hidden_channels}"),
        };
        let meta = vec![
            ("input_dim".into(), self.config.input_dim.to_string()),
            ("embed_dim".into(), self.config.embed_dim.to_string()),
            ("cell".into(), cell),
            ("frame_h".into(), self.config.frame_h.to_string()),
            ("frame_w".into(), self.config.frame_w.to_string()),
        ];
        checkpoint::save(path, "seq_ae", self.config.seed, &meta, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        checkpoint::expect_kind(&ckpt, "seq_ae")?;
        let cell = match ckpt.meta_str("cell")? {
            "flat" => SeqCell::Flat,
            other => match other.strip_prefix("conv:") {
                Some(ch) => SeqCell::Conv {
                    hidden_channels: ch
                        .parse()
                        .map_err(|_| Error::Format("bad conv cell channels".into()))?,
                },
                None => return Err(Error::Format(format!("unknown cell kind '{other}'"))),
            },
        };
        let config = SeqAeConfig {
            input_dim: ckpt.meta_usize("input_dim")?,
            embed_dim: ckpt.meta_usize("embed_dim")?,
            cell,
            frame_h: ckpt.meta_usize("frame_h")?,
            frame_w: ckpt.meta_usize("frame_w")?,
            seed: ckpt.seed,
        };
        let mut model = SeqAeModel::new(config)?;
        model.store.load_blob(&ckpt.blob)?;
        Ok(model)
    }
}

struct BoundConvGru {
    kxz: Option<Var>,
    kxr: Option<Var>,
    kxn: Option<Var>,
    khz: Var,
    khr: Var,
    khn: Var,
    bz: Var,
    br: Var,
    bn: Var,
}

/// Constant `(P*C, C)` matrix averaging each channel over pixels.
fn pool_matrix(pixels: usize, channels: usize) -> Array2<f64> {
    let mut m = Array2::zeros((pixels * channels, channels));
    for p in 0..pixels {
        for c in 0..channels {
            m[(p * channels + c, c)] = 1.0 / pixels as f64;
        }
    }
    m
}

/// Constant `(C, P*C)` matrix copying each channel value to every pixel.
fn tile_matrix(pixels: usize, channels: usize) -> Array2<f64> {
    let mut m = Array2::zeros((channels, pixels * channels));
    for p in 0..pixels {
        for c in 0..channels {
            m[(c, p * channels + c)] = 1.0;
        }
    }
    m
}

/// Tokens for one sequence, oldest step first (feeding order), shape
/// `(SEQUENCE_LEN, 2d+7)`.
pub fn tokens_from_sequence(
    seq: &TactileSequence,
    frame_model: &FrameAeModel,
) -> Result<Array2<f64>> {
    let d = frame_model.config.code_dim;
    let mut tokens = Array2::zeros((SEQUENCE_LEN, 2 * d + 7));
    // frames are stored newest first; feed the cell oldest first
    for (row, i) in (0..SEQUENCE_LEN).rev().enumerate() {
        let (left, right) = &seq.frames[i];
        let lc = frame_encode(left, frame_model)?;
        let rc = frame_encode(right, frame_model)?;
        let token = build_token(&lc, &rc, &seq.poses[i])?;
        tokens.row_mut(row).assign(&token);
    }
    Ok(tokens)
}

/// Map stacks for one sequence in conv mode, oldest first:
/// `(SEQUENCE_LEN, H*W*13)` with channels (L r,g,b | R r,g,b | pose x7).
pub fn maps_from_sequence(seq: &TactileSequence) -> Result<Array2<f64>> {
    let (h, w) = (seq.frames[0].0.height(), seq.frames[0].0.width());
    let mut maps = Array2::zeros((SEQUENCE_LEN, h * w * MAP_CHANNELS));
    for (row, i) in (0..SEQUENCE_LEN).rev().enumerate() {
        let (left, right) = &seq.frames[i];
        if left.height() != h || left.width() != w || right.height() != h || right.width() != w {
            return Err(Error::invalid("sequence frames have mixed sizes"));
        }
        let pose = seq.poses[i].pose.to_array7();
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * MAP_CHANNELS;
                for c in 0..3 {
                    maps[(row, base + c)] = left.image[(y, x, c)] as f64;
                    maps[(row, base + 3 + c)] = right.image[(y, x, c)] as f64;
                }
                for (k, v) in pose.iter().enumerate() {
                    maps[(row, base + 6 + k)] = *v;
                }
            }
        }
    }
    Ok(maps)
}

/// Embedding of a `(SEQUENCE_LEN, input_dim)` step matrix (oldest first).
pub fn seq_encode_tokens(steps: &Array2<f64>, model: &SeqAeModel) -> Result<MotionEmbedding> {
    if steps.nrows() != SEQUENCE_LEN || steps.ncols() != model.config.input_dim {
        return Err(Error::Dimension {
            context: "seq_encode steps".into(),
            expected: SEQUENCE_LEN * model.config.input_dim,
            actual: steps.nrows() * steps.ncols(),
        });
    }
    let flat = flatten_sequence(steps);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let x = tape.constant(flat);
    let e = model.encode_on_tape(&mut tape, &mut binder, x);
    Ok(MotionEmbedding {
        e: tape.value(e).row(0).to_owned(),
    })
}

/// Full-sequence embedding; picks token or map inputs per the model cell.
pub fn seq_encode(
    seq: &TactileSequence,
    frame_model: &FrameAeModel,
    model: &SeqAeModel,
) -> Result<MotionEmbedding> {
    let steps = match model.config.cell {
        SeqCell::Flat => tokens_from_sequence(seq, frame_model)?,
        SeqCell::Conv { .. } => maps_from_sequence(seq)?,
    };
    seq_encode_tokens(&steps, model)
}

/// Reconstructs the step sequence from an embedding:
/// `(SEQUENCE_LEN, input_dim)`, oldest first.
pub fn seq_decode(e: &MotionEmbedding, model: &SeqAeModel) -> Result<Array2<f64>> {
    if e.e.len() != model.config.embed_dim {
        return Err(Error::Dimension {
            context: "seq_decode embedding".into(),
            expected: model.config.embed_dim,
            actual: e.e.len(),
        });
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let ev = tape.constant(e.e.clone().insert_axis(ndarray::Axis(0)));
    let out = model.decode_on_tape(&mut tape, &mut binder, ev);
    let row = tape.value(out).row(0).to_owned();
    Ok(
        Array2::from_shape_vec((SEQUENCE_LEN, model.config.input_dim), row.to_vec())
            .expect("decode reshape"),
    )
}

fn flatten_sequence(steps: &Array2<f64>) -> Array2<f64> {
    let flat: Vec<f64> = steps.iter().copied().collect();
    Array2::from_shape_vec((1, flat.len()), flat).expect("sequence flatten")
}

#[derive(Debug, Clone)]
pub struct SeqAeTrainConfig {
    pub model: SeqAeConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub fail_threshold: f64,
}

impl Default for SeqAeTrainConfig {
    fn default() -> Self {
        SeqAeTrainConfig {
            model: SeqAeConfig::default(),
            epochs: 12,
            batch: 32,
            lr: 1e-3,
            fail_threshold: 0.1,
        }
    }
}

/// Trains on step matrices (each `(SEQUENCE_LEN, input_dim)`, oldest first).
pub fn train_seq_ae(
    sequences: &[Array2<f64>],
    cfg: &SeqAeTrainConfig,
) -> Result<(SeqAeModel, TrainingLog)> {
    if sequences.is_empty() {
        return Err(Error::invalid("sequence autoencoder needs a nonempty dataset"));
    }
    for s in sequences {
        if s.nrows() != SEQUENCE_LEN || s.ncols() != cfg.model.input_dim {
            return Err(Error::Dimension {
                context: "train_seq_ae sequence".into(),
                expected: cfg.model.input_dim,
                actual: s.ncols(),
            });
        }
    }
    let mut model = SeqAeModel::new(cfg.model.clone())?;
    let mut log = TrainingLog::new("seq_ae", cfg.model.seed);
    let mut order_rng = stream_rng(cfg.model.seed, Stream::DataOrder);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let width = SEQUENCE_LEN * cfg.model.input_dim;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Array2::zeros((chunk.len(), width));
            for (bi, &i) in chunk.iter().enumerate() {
                batch.row_mut(bi).assign(&flatten_sequence(&sequences[i]).row(0));
            }
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.constant(batch.clone());
            let e = model.encode_on_tape(&mut tape, &mut binder, x);
            let y = model.decode_on_tape(&mut tape, &mut binder, e);
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

/// Mean reconstruction MSE over a set of sequences.
pub fn seq_reconstruction_mse(model: &SeqAeModel, sequences: &[Array2<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for s in sequences {
        let flat = flatten_sequence(s);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(flat.clone());
        let e = model.encode_on_tape(&mut tape, &mut binder, x);
        let y = model.decode_on_tape(&mut tape, &mut binder, e);
        let loss = tape.mse_mean(y, flat);
        total += tape.scalar(loss);
    }
    Ok(total / sequences.len() as f64)
}

/// Reconstructed tokens for one sequence (round-trip helper).
pub fn seq_round_trip(steps: &Array2<f64>, model: &SeqAeModel) -> Result<Array2<f64>> {
    let e = seq_encode_tokens(steps, model)?;
    seq_decode(&e, model)
}

#[allow(dead_code)]
fn unused(_: Array1<f64>) {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn smooth_sequences(n: usize, dim: usize, seed: u64) -> Vec<Array2<f64>> {
        // slowly drifting token sequences: value = base + t * slope
        let mut rng = stream_rng(seed, Stream::Fuzz);
        (0..n)
            .map(|_| {
                let base: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let slope: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
                Array2::from_shape_fn((SEQUENCE_LEN, dim), |(t, j)| {
                    base[j] + t as f64 * slope[j]
                })
            })
            .collect()
    }

    fn tiny_flat_config(seed: u64) -> SeqAeConfig {
        SeqAeConfig {
            input_dim: 12,
            embed_dim: 24,
            cell: SeqCell::Flat,
            frame_h: 0,
            frame_w: 0,
            seed,
        }
    }

    #[test]
    fn embedding_is_deterministic_with_expected_dim() {
        let model = SeqAeModel::new(tiny_flat_config(3)).unwrap();
        let seqs = smooth_sequences(1, 12, 4);
        let a = seq_encode_tokens(&seqs[0], &model).unwrap();
        let b = seq_encode_tokens(&seqs[0], &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.e.len(), 24);
        assert!(a.e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_length_rejected() {
        let model = SeqAeModel::new(tiny_flat_config(3)).unwrap();
        let bad = Array2::zeros((4, 12));
        assert!(seq_encode_tokens(&bad, &model).is_err());
    }

    #[test]
    fn decode_emits_five_steps() {
        let model = SeqAeModel::new(tiny_flat_config(5)).unwrap();
        let e = MotionEmbedding {
            e: Array1::zeros(24),
        };
        let out = seq_decode(&e, &model).unwrap();
        assert_eq!(out.shape(), &[SEQUENCE_LEN, 12]);
    }

    #[test]
    fn training_reconstructs_smooth_sequences() {
        let seqs = smooth_sequences(300, 12, 6);
        let cfg = SeqAeTrainConfig {
            model: tiny_flat_config(7),
            epochs: 40,
            batch: 32,
            lr: 3e-3,
            fail_threshold: 0.1,
        };
        let (model, log) = train_seq_ae(&seqs, &cfg).unwrap();
        assert!(log.final_loss() < 0.02, "final loss {}", log.final_loss());
        let held = smooth_sequences(50, 12, 99);
        let mse = seq_reconstruction_mse(&model, &held).unwrap();
        assert!(mse < 0.05, "held-out reconstruction MSE {mse}");
    }

    #[test]
    fn oldest_frame_changes_embedding() {
        let seqs = smooth_sequences(2, 12, 8);
        let model = SeqAeModel::new(tiny_flat_config(9)).unwrap();
        let mut altered = seqs[0].clone();
        for v in altered.row_mut(0).iter_mut() {
            *v += 0.5;
        }
        let a = seq_encode_tokens(&seqs[0], &model).unwrap();
        let b = seq_encode_tokens(&altered, &model).unwrap();
        let dist: f64 = a
            .e
            .iter()
            .zip(b.e.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0, "oldest-step change did not reach the embedding");
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let seqs = smooth_sequences(40, 12, 10);
        let cfg = SeqAeTrainConfig {
            model: tiny_flat_config(11),
            epochs: 2,
            batch: 16,
            lr: 1e-3,
            fail_threshold: 10.0,
        };
        let (a, _) = train_seq_ae(&seqs, &cfg).unwrap();
        let (b, _) = train_seq_ae(&seqs, &cfg).unwrap();
        assert_eq!(a.store.to_blob(), b.store.to_blob());
    }

    #[test]
    fn conv_cell_trains_on_tiny_maps() {
        let (h, w) = (6, 8);
        let dim = h * w * MAP_CHANNELS;
        let mut rng = stream_rng(12, Stream::Fuzz);
        let seqs: Vec<Array2<f64>> = (0..24)
            .map(|_| {
                let ax = rng.gen_range(-0.3..0.3);
                Array2::from_shape_fn((SEQUENCE_LEN, dim), |(t, j)| {
                    let pix = j / MAP_CHANNELS;
                    let x = (pix % w) as f64 / w as f64;
                    0.5 + ax * x * (t as f64 + 1.0) * 0.2
                })
            })
            .collect();
        let cfg = SeqAeTrainConfig {
            model: SeqAeConfig {
                input_dim: dim,
                embed_dim: 16,
                cell: SeqCell::Conv { hidden_channels: 4 },
                frame_h: h,
                frame_w: w,
                seed: 13,
            },
            epochs: 8,
            batch: 8,
            lr: 3e-3,
            fail_threshold: 1.0,
        };
        let (model, log) = train_seq_ae(&seqs, &cfg).unwrap();
        assert!(
            log.epoch_loss.last().unwrap() < log.epoch_loss.first().unwrap(),
            "conv cell loss did not improve: {:?}",
            log.epoch_loss
        );
        let e = seq_encode_tokens(&seqs[0], &model).unwrap();
        assert_eq!(e.e.len(), 16);
        let recon = seq_decode(&e, &model).unwrap();
        assert_eq!(recon.shape(), &[SEQUENCE_LEN, dim]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.ckpt");
        let model = SeqAeModel::new(tiny_flat_config(14)).unwrap();
        model.save(&path).unwrap();
        let loaded = SeqAeModel::load(&path).unwrap();
        let seqs = smooth_sequences(1, 12, 15);
        let a = seq_encode_tokens(&seqs[0], &model).unwrap();
        let b = seq_encode_tokens(&seqs[0], &loaded).unwrap();
        assert_eq!(a, b);
    }
}
