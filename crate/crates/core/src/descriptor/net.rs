//! Tape-level network builders for the descriptor field.
//!
//! The encoder keeps features as triples of `(N, C)` matrices, one per
//! spatial coordinate, so a channel is a 3-vector that rotates with the
//! input. Channel-mixing linear maps share one weight matrix across the
//! three coordinate planes, the nonlinearity is the direction-gated
//! projection, and pooling is a mean over points — every step commutes
//! with a global rotation of the cloud. The decoder only ever sees
//! rotation-invariant combinations (point/channel inner products, norms,
//! channel-pair Gram entries), which is what makes the concatenated
//! activations pose-stable.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{init_uniform, init_xavier};
use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Var};

use super::DescriptorConfig;

/// Internal coordinate scale: meters are O(0.05) for desk objects, so
/// inputs are scaled once here to keep activations O(1).
pub const UNIT_SCALE: f64 = 10.0;

/// Per-coordinate feature planes of a vector-channel tensor.
#[derive(Clone, Copy)]
struct VecFeat {
    x: Var,
    y: Var,
    z: Var,
}

pub struct DescriptorParams {
    gate_w1: ParamId,
    gate_b1: ParamId,
    gate_w2: ParamId,
    gate_b2: ParamId,
    vn1_w: ParamId,
    vn1_u: ParamId,
    vn2_w: ParamId,
    vn2_u: ParamId,
    head_w: ParamId,
    scal_w: ParamId,
    scal_b: ParamId,
    dec_w: Vec<ParamId>,
    dec_b: Vec<ParamId>,
}

impl DescriptorParams {
    /// Registers all parameters in a fixed order. The order is the
    /// checkpoint blob layout; do not reorder.
    pub fn build(store: &mut ParamStore, cfg: &DescriptorConfig, rng: &mut ChaCha8Rng) -> Self {
        let (gh, c0) = (cfg.gate_hidden, cfg.gate_out);
        let (c1, c2) = (cfg.block1_channels, cfg.block2_channels);
        let k = cfg.vector_channels;
        let s = cfg.scalar_channels;

        let gate_w1 = store.add("gate.w1", init_xavier(rng, 1, gh));
        let gate_b1 = store.add("gate.b1", Array2::zeros((1, gh)));
        let gate_w2 = store.add("gate.w2", init_xavier(rng, gh, c0));
        let gate_b2 = store.add("gate.b2", Array2::zeros((1, c0)));
        let vn1_w = store.add("vn1.w", init_xavier(rng, 2 * c0, c1));
        let vn1_u = store.add("vn1.u", init_xavier(rng, 2 * c0, c1));
        let vn2_w = store.add("vn2.w", init_xavier(rng, 2 * c1, c2));
        let vn2_u = store.add("vn2.u", init_xavier(rng, 2 * c1, c2));
        let head_w = store.add("head.w", init_xavier(rng, c2, k));
        let scal_w = store.add("scalars.w", init_xavier(rng, k * k, s));
        let scal_b = store.add("scalars.b", Array2::zeros((1, s)));

        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        let mut fan_in = k + 1 + s;
        for (i, width) in cfg.decoder_widths.iter().enumerate() {
            dec_w.push(store.add(format!("dec.w{i}"), init_xavier(rng, fan_in, *width)));
            dec_b.push(store.add(format!("dec.b{i}"), init_uniform(rng, 1, *width, 0.01)));
            fan_in = *width;
        }

        DescriptorParams {
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
            vn1_w,
            vn1_u,
            vn2_w,
            vn2_u,
            head_w,
            scal_w,
            scal_b,
            dec_w,
            dec_b,
        }
    }
}

fn split_coords(tape: &mut Tape, pts: Var) -> VecFeat {
    VecFeat {
        x: tape.slice_cols(pts, 0, 1),
        y: tape.slice_cols(pts, 1, 1),
        z: tape.slice_cols(pts, 2, 1),
    }
}

/// Broadcasts an `(N,1)` column across `c` channels via an outer product
/// with a constant row of ones (keeps gradients flowing through matmul).
fn tile_col(tape: &mut Tape, col: Var, c: usize) -> Var {
    let ones = tape.constant(Array2::ones((1, c)));
    tape.matmul(col, ones)
}

/// Channel-mixing linear map applied identically to each coordinate plane.
fn vn_linear(tape: &mut Tape, f: VecFeat, w: Var) -> VecFeat {
    VecFeat {
        x: tape.matmul(f.x, w),
        y: tape.matmul(f.y, w),
        z: tape.matmul(f.z, w),
    }
}

/// Direction-gated vector nonlinearity: channels whose feature q points
/// against the learned direction k are projected onto the plane
/// orthogonal to k. Exactly rotation-equivariant.
fn vn_relu(tape: &mut Tape, f: VecFeat, w: Var, u: Var) -> VecFeat {
    let q = vn_linear(tape, f, w);
    let k = vn_linear(tape, f, u);
    let xx = tape.mul(q.x, k.x);
    let yy = tape.mul(q.y, k.y);
    let zz = tape.mul(q.z, k.z);
    let t = tape.add(xx, yy);
    let dot = tape.add(t, zz);
    let kx2 = tape.mul(k.x, k.x);
    let ky2 = tape.mul(k.y, k.y);
    let kz2 = tape.mul(k.z, k.z);
    let t2 = tape.add(kx2, ky2);
    let knorm = tape.add(t2, kz2);
    let knorm = tape.add_scalar(knorm, 1e-12);
    // gate: project only where the inner product is negative
    let gate = tape
        .value(dot)
        .mapv(|d| if d < 0.0 { 1.0 } else { 0.0 });
    let gate = tape.constant(gate);
    let ratio = tape.div(dot, knorm);
    let coef = tape.mul(ratio, gate);
    VecFeat {
        x: {
            let p = tape.mul(coef, k.x);
            tape.sub(q.x, p)
        },
        y: {
            let p = tape.mul(coef, k.y);
            tape.sub(q.y, p)
        },
        z: {
            let p = tape.mul(coef, k.z);
            tape.sub(q.z, p)
        },
    }
}

/// Appends the mean-pooled (global) feature of every channel to each
/// point's features, doubling the channel count.
fn with_global_context(tape: &mut Tape, f: VecFeat, n: usize) -> VecFeat {
    let gx = tape.mean_rows(f.x);
    let gy = tape.mean_rows(f.y);
    let gz = tape.mean_rows(f.z);
    let bx = tape.broadcast_rows(gx, n);
    let by = tape.broadcast_rows(gy, n);
    let bz = tape.broadcast_rows(gz, n);
    VecFeat {
        x: tape.concat_cols(&[f.x, bx]),
        y: tape.concat_cols(&[f.y, by]),
        z: tape.concat_cols(&[f.z, bz]),
    }
}

/// Encoder: centered cloud `(N,3)` → latent code `(1, 3K+S)`.
///
/// Layout of the code row: `[Vx(K) | Vy(K) | Vz(K) | s(S)]` where V holds
/// K rotation-covariant 3-vector channels and s holds S invariant scalars
/// from the channel Gram matrix.
pub fn encode_on_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    params: &DescriptorParams,
    cfg: &DescriptorConfig,
    cloud_centered: &Array2<f64>,
) -> Var {
    let n = cloud_centered.nrows();
    let pts = tape.constant(cloud_centered * UNIT_SCALE);
    let p = split_coords(tape, pts);

    // invariant per-point gate: small MLP on the point radius
    let px2 = tape.mul(p.x, p.x);
    let py2 = tape.mul(p.y, p.y);
    let pz2 = tape.mul(p.z, p.z);
    let t = tape.add(px2, py2);
    let r2 = tape.add(t, pz2);
    let radius = tape.sqrt_eps(r2, 1e-12);
    let w1 = binder.bind(tape, store, params.gate_w1);
    let b1 = binder.bind(tape, store, params.gate_b1);
    let w2 = binder.bind(tape, store, params.gate_w2);
    let b2 = binder.bind(tape, store, params.gate_b2);
    let h = tape.matmul(radius, w1);
    let h = tape.add_row(h, b1);
    let h = tape.tanh(h);
    let g = tape.matmul(h, w2);
    let g = tape.add_row(g, b2);
    let g = tape.tanh(g);

    // lift: gated copies of the point vector, one per channel
    let c0 = cfg.gate_out;
    let lifted = VecFeat {
        x: {
            let tx = tile_col(tape, p.x, c0);
            tape.mul(g, tx)
        },
        y: {
            let ty = tile_col(tape, p.y, c0);
            tape.mul(g, ty)
        },
        z: {
            let tz = tile_col(tape, p.z, c0);
            tape.mul(g, tz)
        },
    };

    let vn1_w = binder.bind(tape, store, params.vn1_w);
    let vn1_u = binder.bind(tape, store, params.vn1_u);
    let f1 = {
        let ctx = with_global_context(tape, lifted, n);
        vn_relu(tape, ctx, vn1_w, vn1_u)
    };
    let vn2_w = binder.bind(tape, store, params.vn2_w);
    let vn2_u = binder.bind(tape, store, params.vn2_u);
    let f2 = {
        let ctx = with_global_context(tape, f1, n);
        vn_relu(tape, ctx, vn2_w, vn2_u)
    };

    // pool to a single vector-feature bank, then the head channels
    let head_w = binder.bind(tape, store, params.head_w);
    let pooled = VecFeat {
        x: tape.mean_rows(f2.x),
        y: tape.mean_rows(f2.y),
        z: tape.mean_rows(f2.z),
    };
    let head = vn_linear(tape, pooled, head_w); // (1, K) per coordinate

    // invariant scalars from the channel Gram matrix
    let k = cfg.vector_channels;
    let hxt = tape.transpose(head.x);
    let hyt = tape.transpose(head.y);
    let hzt = tape.transpose(head.z);
    let gx = tape.matmul(hxt, head.x);
    let gy = tape.matmul(hyt, head.y);
    let gz = tape.matmul(hzt, head.z);
    let t = tape.add(gx, gy);
    let gram = tape.add(t, gz); // (K, K)
    let flat = tape.reshape(gram, 1, k * k);
    let sw = binder.bind(tape, store, params.scal_w);
    let sb = binder.bind(tape, store, params.scal_b);
    let s = tape.matmul(flat, sw);
    let s = tape.add_row(s, sb);
    let s = tape.tanh(s);

    tape.concat_cols(&[head.x, head.y, head.z, s])
}

/// Decoder: latent code + centered queries `(Q,3)` → per-layer
/// post-activation outputs plus the final pre-sigmoid logit `(Q,1)`.
pub fn decode_on_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    params: &DescriptorParams,
    cfg: &DescriptorConfig,
    code: Var,
    queries_centered: &Array2<f64>,
) -> (Vec<Var>, Var) {
    let qn = queries_centered.nrows();
    let k = cfg.vector_channels;
    let s = cfg.scalar_channels;
    let pts = tape.constant(queries_centered * UNIT_SCALE);
    let q = split_coords(tape, pts);

    let hx = tape.slice_cols(code, 0, k);
    let hy = tape.slice_cols(code, k, k);
    let hz = tape.slice_cols(code, 2 * k, k);
    let sc = tape.slice_cols(code, 3 * k, s);

    // <x, V_c> for every query/channel pair: invariant under joint rotation
    let px = tape.matmul(q.x, hx);
    let py = tape.matmul(q.y, hy);
    let pz = tape.matmul(q.z, hz);
    let t = tape.add(px, py);
    let proj = tape.add(t, pz);

    let qx2 = tape.mul(q.x, q.x);
    let qy2 = tape.mul(q.y, q.y);
    let qz2 = tape.mul(q.z, q.z);
    let t2 = tape.add(qx2, qy2);
    let r2 = tape.add(t2, qz2);
    let radius = tape.sqrt_eps(r2, 1e-12);

    let scb = tape.broadcast_rows(sc, qn);
    let mut h = tape.concat_cols(&[proj, radius, scb]);

    let mut activations = Vec::with_capacity(cfg.decoder_widths.len());
    let last = cfg.decoder_widths.len() - 1;
    let mut logit = h;
    for i in 0..cfg.decoder_widths.len() {
        let w = binder.bind(tape, store, params.dec_w[i]);
        let b = binder.bind(tape, store, params.dec_b[i]);
        let lin = tape.matmul(h, w);
        let lin = tape.add_row(lin, b);
        if i == last {
            logit = lin;
            activations.push(tape.sigmoid(lin));
        } else {
            h = tape.relu(lin);
            activations.push(h);
        }
    }
    (activations, logit)
}
