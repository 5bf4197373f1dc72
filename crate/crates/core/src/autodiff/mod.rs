//! Minimal reverse-mode autodiff over `ndarray` matrices.
//!
//! All model code in this crate builds define-by-run graphs on a [`Tape`]
//! of `Array2<f64>` values. The op set is exactly what the models here
//! need: dense matmul, elementwise arithmetic, row broadcasts, batch
//! normalization (training mode), stable BCE/MSE losses, and a same-pad
//! 2-D convolution for the convolutional sequence-cell variant.
//!
//! Everything is f64 and single-threaded, so a fixed seed reproduces
//! bit-identical training runs.

pub mod params;

pub use params::{Binder, ParamId, ParamStore};

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `(B,F) + (1,F)`
    AddRow(Var, Var),
    /// `(B,F) * (1,F)`
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// `sqrt(x + eps)`
    SqrtEps(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    /// `(N,F) -> (1,F)` column means
    MeanRows(Var),
    /// `(N,F) -> (N,1)` row sums
    RowSum(Var),
    /// `(1,F) -> (N,F)`
    BroadcastRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    /// Row-major reshape to `(rows, cols)`.
    Reshape(Var, usize, usize),
    BatchNormTrain {
        x: Var,
        xhat: Array2<f64>,
        inv_std: Array2<f64>,
    },
    BceWithLogitsMean {
        logits: Var,
        targets: Array2<f64>,
    },
    MseMean {
        pred: Var,
        targets: Array2<f64>,
    },
    /// Same-padded stride-1 conv; input/output are pixel-major,
    /// channel-fastest `(B, H*W*C)` rows.
    Conv2dSame {
        x: Var,
        kernel: Var,
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
    },
    /// Adds `bias (1,C)` to every pixel of a `(B, H*W*C)` feature map.
    AddChannelBias { x: Var, bias: Var, channels: usize },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// Define-by-run computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that participates in the graph but whose gradient is ignored.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Array2<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v)[(0, 0)]
    }

    // ---- graph builders ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(x) + &self.value(row).row(0);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(x) * &self.value(row).row(0);
        self.push(v, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        self.push(v, Op::AddScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = -self.value(x);
        self.push(v, Op::Neg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid_stable);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x).mapv(|t| (t + eps).sqrt());
        self.push(v, Op::SqrtEps(x, eps))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).mean().unwrap());
        self.push(v, Op::MeanAll(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x).mean_axis(Axis(0)).unwrap();
        let v = m.insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let m = self.value(x).sum_axis(Axis(1));
        let v = m.insert_axis(Axis(1));
        self.push(v, Op::RowSum(x))
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        debug_assert_eq!(self.value(x).nrows(), 1);
        let row = self.value(x).row(0).to_owned();
        let v = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j]);
        self.push(v, Op::BroadcastRows(x, n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(x, start, len))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x, rows, cols))
    }

    /// Batch normalization over the batch (row) axis, training statistics.
    /// Returns the normalized activations; also reports the batch mean and
    /// biased variance so the caller can maintain running statistics.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> (Var, Array2<f64>, Array2<f64>) {
        let xv = self.value(x);
        let mean = xv.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let centered = xv - &mean.row(0);
        let var = centered
            .mapv(|t| t * t)
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        let inv_std = var.mapv(|t| 1.0 / (t + eps).sqrt());
        let xhat = &centered * &inv_std.row(0);
        let out = self.push(
            xhat.clone(),
            Op::BatchNormTrain {
                x,
                xhat,
                inv_std: inv_std.clone(),
            },
        );
        (out, mean, var)
    }

    /// Numerically stable `mean(BCE(sigmoid(logits), targets))` as a (1,1) node.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let z = self.value(logits);
        debug_assert_eq!(z.raw_dim(), targets.raw_dim());
        let mut acc = 0.0;
        for (zi, yi) in z.iter().zip(targets.iter()) {
            acc += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let v = Array2::from_elem((1, 1), acc / z.len() as f64);
        self.push(v, Op::BceWithLogitsMean { logits, targets })
    }

    /// `mean((pred - targets)^2)` as a (1,1) node.
    pub fn mse_mean(&mut self, pred: Var, targets: Array2<f64>) -> Var {
        let p = self.value(pred);
        debug_assert_eq!(p.raw_dim(), targets.raw_dim());
        let v = Array2::from_elem((1, 1), (p - &targets).mapv(|t| t * t).mean().unwrap());
        self.push(v, Op::MseMean { pred, targets })
    }

    /// Same-padded stride-1 2-D convolution on pixel-major channel-fastest
    /// rows. `x` is `(B, h*w*cin)`, `kernel` is `(cout, kh*kw*cin)` with the
    /// column order (ky, kx, c), c fastest. Output is `(B, h*w*cout)`.
    pub fn conv2d_same(
        &mut self,
        x: Var,
        kernel: Var,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
    ) -> Var {
        let cout = self.value(kernel).nrows();
        debug_assert_eq!(self.value(kernel).ncols(), kh * kw * cin);
        debug_assert_eq!(self.value(x).ncols(), h * w * cin);
        let batch = self.value(x).nrows();
        let mut out = Array2::zeros((batch, h * w * cout));
        {
            let xv = self.value(x);
            let kv = self.value(kernel);
            for b in 0..batch {
                let col = im2col(&xv.row(b).to_owned(), h, w, cin, kh, kw);
                let o = col.dot(&kv.t()); // (h*w, cout)
                for p in 0..h * w {
                    for c in 0..cout {
                        out[(b, p * cout + c)] = o[(p, c)];
                    }
                }
            }
        }
        self.push(
            out,
            Op::Conv2dSame {
                x,
                kernel,
                h,
                w,
                cin,
                cout,
                kh,
                kw,
            },
        )
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var, channels: usize) -> Var {
        debug_assert_eq!(self.value(bias).nrows(), 1);
        debug_assert_eq!(self.value(bias).ncols(), channels);
        let b = self.value(bias).row(0).to_owned();
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            for (i, t) in row.iter_mut().enumerate() {
                *t += b[i % channels];
            }
        }
        self.push(v, Op::AddChannelBias { x, bias, channels })
    }

    // ---- backward ----

    fn accumulate(&mut self, v: Var, delta: Array2<f64>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta),
        }
    }

    /// Runs backpropagation from a scalar (1,1) node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Ops read sibling values immutably; accumulation is per-input.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.value(b).t());
                    let db = self.value(a).t().dot(&g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * self.value(b);
                    let db = &g * self.value(a);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = self.value(b).clone();
                    let av = self.value(a).clone();
                    let da = &g / &bv;
                    let db = -&g * &av / (&bv * &bv);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddRow(x, r) => {
                    let (x, r) = (*x, *r);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(x, g);
                    self.accumulate(r, dr);
                }
                Op::MulRow(x, r) => {
                    let (x, r) = (*x, *r);
                    let rv = self.value(r).row(0).to_owned();
                    let dx = &g * &rv;
                    let dr = (&g * self.value(x))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accumulate(x, dx);
                    self.accumulate(r, dr);
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    self.accumulate(x, g * c);
                }
                Op::AddScalar(x, _) => {
                    let x = *x;
                    self.accumulate(x, g);
                }
                Op::Neg(x) => {
                    let x = *x;
                    self.accumulate(x, -g);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mask = self.value(x).mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(x, g * mask);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let y = self.nodes[i].value.clone();
                    self.accumulate(x, g * &(&y * &(1.0 - &y)));
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let y = self.nodes[i].value.clone();
                    self.accumulate(x, g * &(1.0 - &y * &y));
                }
                Op::SqrtEps(x, _) => {
                    let x = *x;
                    let y = self.nodes[i].value.clone();
                    self.accumulate(x, g * &y.mapv(|t| 0.5 / t));
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let shape = self.value(x).raw_dim();
                    self.accumulate(x, Array2::from_elem(shape, g[(0, 0)]));
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let shape = self.value(x).raw_dim();
                    let n = self.value(x).len() as f64;
                    self.accumulate(x, Array2::from_elem(shape, g[(0, 0)] / n));
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let n = self.value(x).nrows();
                    let row = g.row(0).to_owned();
                    let dx = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j] / n as f64);
                    self.accumulate(x, dx);
                }
                Op::RowSum(x) => {
                    let x = *x;
                    let (n, f) = self.value(x).dim();
                    let dx = Array2::from_shape_fn((n, f), |(r, _)| g[(r, 0)]);
                    self.accumulate(x, dx);
                }
                Op::BroadcastRows(x, _) => {
                    let x = *x;
                    let dx = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(x, dx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(p).ncols();
                        let gp = g.slice(s![.., start..start + len]).to_owned();
                        self.accumulate(p, gp);
                        start += len;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let (x, start, len) = (*x, *start, *len);
                    let mut dx = Array2::zeros(self.value(x).raw_dim());
                    dx.slice_mut(s![.., start..start + len]).assign(&g);
                    self.accumulate(x, dx);
                }
                Op::Transpose(x) => {
                    let x = *x;
                    self.accumulate(x, g.t().to_owned());
                }
                Op::Reshape(x, _, _) => {
                    let x = *x;
                    let dim = self.value(x).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let dx = Array2::from_shape_vec(dim, flat).expect("reshape grad");
                    self.accumulate(x, dx);
                }
                Op::BatchNormTrain { x, xhat, inv_std } => {
                    let x = *x;
                    let b = g.nrows() as f64;
                    let sum_g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let sum_gx = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dx = &g * b - &sum_g.row(0);
                    dx = dx - &(xhat * &sum_gx.row(0));
                    dx = dx * &inv_std.row(0) / b;
                    self.accumulate(x, dx);
                }
                Op::BceWithLogitsMean { logits, targets } => {
                    let logits = *logits;
                    let t = targets.clone();
                    let n = t.len() as f64;
                    let z = self.value(logits).clone();
                    let dz = (z.mapv(sigmoid_stable) - &t) * (g[(0, 0)] / n);
                    self.accumulate(logits, dz);
                }
                Op::MseMean { pred, targets } => {
                    let pred = *pred;
                    let t = targets.clone();
                    let n = t.len() as f64;
                    let dp = (self.value(pred) - &t) * (2.0 * g[(0, 0)] / n);
                    self.accumulate(pred, dp);
                }
                Op::Conv2dSame {
                    x,
                    kernel,
                    h,
                    w,
                    cin,
                    cout,
                    kh,
                    kw,
                } => {
                    let (x, kernel) = (*x, *kernel);
                    let (h, w, cin, cout, kh, kw) = (*h, *w, *cin, *cout, *kh, *kw);
                    let batch = g.nrows();
                    let kv = self.value(kernel).clone();
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dx = Array2::zeros(self.value(x).raw_dim());
                    for b in 0..batch {
                        let xrow = self.value(x).row(b).to_owned();
                        let col = im2col(&xrow, h, w, cin, kh, kw);
                        let mut gmat = Array2::zeros((h * w, cout));
                        for p in 0..h * w {
                            for c in 0..cout {
                                gmat[(p, c)] = g[(b, p * cout + c)];
                            }
                        }
                        dk = dk + gmat.t().dot(&col);
                        let dcol = gmat.dot(&kv); // (h*w, kh*kw*cin)
                        col2im_add(&dcol, h, w, cin, kh, kw, dx.row_mut(b));
                    }
                    self.accumulate(x, dx);
                    self.accumulate(kernel, dk);
                }
                Op::AddChannelBias { x, bias, channels } => {
                    let (x, bias, channels) = (*x, *bias, *channels);
                    let mut db = Array2::zeros((1, channels));
                    for row in g.rows() {
                        for (i, t) in row.iter().enumerate() {
                            db[(0, i % channels)] += t;
                        }
                    }
                    self.accumulate(x, g);
                    self.accumulate(bias, db);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid_stable(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// im2col for one sample: output row per pixel, column order (ky, kx, c).
fn im2col(
    xrow: &ndarray::Array1<f64>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> Array2<f64> {
    let pad_h = kh / 2;
    let pad_w = kw / 2;
    let mut col = Array2::zeros((h * w, kh * kw * cin));
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for ky in 0..kh {
                let yy = y as isize + ky as isize - pad_h as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xx = x as isize + kx as isize - pad_w as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = (yy as usize * w + xx as usize) * cin;
                    let dst = (ky * kw + kx) * cin;
                    for c in 0..cin {
                        col[(p, dst + c)] = xrow[src + c];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column gradient back to an input-row gradient.
fn col2im_add(
    dcol: &Array2<f64>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    mut dxrow: ndarray::ArrayViewMut1<f64>,
) {
    let pad_h = kh / 2;
    let pad_w = kw / 2;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for ky in 0..kh {
                let yy = y as isize + ky as isize - pad_h as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xx = x as isize + kx as isize - pad_w as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let dst = (yy as usize * w + xx as usize) * cin;
                    let src = (ky * kw + kx) * cin;
                    for c in 0..cin {
                        dxrow[dst + c] += dcol[(p, src + c)];
                    }
                }
            }
        }
    }
}
